// Regenerates the checked-in fixtures: make_fixtures <output-dir>

#include <filesystem>
#include <iostream>
#include <random>

#include "synth.hpp"

namespace fs = std::filesystem;

int main(int argc, char **argv) {
  if (argc != 2) {
    std::cerr << "usage: make_fixtures <output-dir>\n";
    return 2;
  }
  const fs::path out = argv[1];
  fs::create_directories(out);
  try {
    const auto mlp = synth::concolic_fixture(7);
    featcov::save_model(mlp, out / "concolic_mlp.bnm");
    std::mt19937_64 rng(11);
    const auto train = synth::self_labelled(mlp, synth::clustered_inputs(rng, 500, 64));
    const auto seeds = synth::self_labelled(mlp, synth::clustered_inputs(rng, 100, 64));
    featcov::save_dataset(train, out / "concolic_train.bnd");
    featcov::save_dataset(seeds, out / "concolic_seeds.bnd");

    featcov::save_model(synth::tiny_cnn(3), out / "tiny_cnn.bnm");
    featcov::save_model(synth::mnist_small(5, false), out / "mnist_small.bnm");
    featcov::save_model(synth::mnist_small(5, true), out / "mnist_small_maxp.bnm");

    // abstractions are fitted on the reloaded (f32-stored) files
    const auto m = featcov::load_model(out / "concolic_mlp.bnm");
    const auto tr = featcov::load_dataset(out / "concolic_train.bnd");
    featcov::AbstractionConfig cfg;
    cfg.layers = {{2, featcov::Technique::pca, 2}, {3, featcov::Technique::pca, 2}};
    auto bn = featcov::abstract(m, tr, cfg);
    bn.provenance.model_path = "concolic_mlp.bnm";
    featcov::save_abstraction(bn, out / "concolic_mlp.bna");

    cfg.layers = {{2, featcov::Technique::pca, 2}, {3, featcov::Technique::pca, 2}, {4, featcov::Technique::pca, 2}};
    auto fig = featcov::abstract(m, tr, cfg);
    fig.provenance.model_path = "concolic_mlp.bnm";
    featcov::save_abstraction(fig, out / "three_layer.bna");
  } catch (const std::exception &e) {
    std::cerr << e.what() << '\n';
    return 1;
  }
  return 0;
}
