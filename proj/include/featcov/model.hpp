#pragma once

// Sequential feed-forward networks: layer descriptions, forward evaluation
// with pre-activation capture, and the max-pooling selection matrix.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "featcov/error.hpp"

namespace featcov {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape &s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape &s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i)
    out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

enum class LayerKind { dense, conv2d, maxpool2d, flatten };
enum class Activation { none, relu, softmax };

inline const char *to_string(LayerKind k) {
  switch (k) {
  case LayerKind::dense: return "dense";
  case LayerKind::conv2d: return "conv2d";
  case LayerKind::maxpool2d: return "maxpool2d";
  case LayerKind::flatten: return "flatten";
  }
  return "?";
}

inline const char *to_string(Activation a) {
  switch (a) {
  case Activation::none: return "none";
  case Activation::relu: return "relu";
  case Activation::softmax: return "softmax";
  }
  return "?";
}

/// One layer of a sequential network.
///
/// Tensors are channels-last (h, w, c). Dense weights are out x in,
/// row-major. Conv2d kernels are kh x kw x c_in x c_out, row-major, applied
/// with valid padding. Bias has one entry per output neuron for dense
/// layers and one per output channel for conv2d; a single entry is
/// broadcast.
struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  Activation activation = Activation::none;
  Shape input_shape;
  Shape output_shape;
  std::vector<double> weights;
  std::vector<double> bias;
  /// Kernel size (conv2d) or pool size (maxpool2d).
  std::array<std::size_t, 2> window{0, 0};
  std::array<std::size_t, 2> stride{1, 1};

  std::size_t input_size() const { return shape_size(input_shape); }
  std::size_t output_size() const { return shape_size(output_shape); }

  std::size_t parameter_count() const {
    switch (kind) {
    case LayerKind::dense:
      return weights.size() + output_size();
    case LayerKind::conv2d:
      return weights.size() + output_shape.at(2);
    default:
      return 0;
    }
  }

  double bias_at(std::size_t out_index) const {
    if (bias.empty())
      return 0.0;
    if (bias.size() == 1)
      return bias[0];
    if (kind == LayerKind::conv2d)
      return bias[out_index % output_shape[2]];
    return bias[out_index];
  }

  bool has_affine_form() const { return kind == LayerKind::dense || kind == LayerKind::conv2d; }

  /// Calls fn(input_index, weight) for every term of output neuron `o`'s
  /// affine form (dense and conv2d only).
  template <class Fn> void for_each_term(std::size_t o, Fn &&fn) const {
    if (kind == LayerKind::dense) {
      const std::size_t in = input_size();
      for (std::size_t i = 0; i < in; ++i)
        fn(i, weights[o * in + i]);
      return;
    }
    const std::size_t cin = input_shape[2], cout = output_shape[2];
    const std::size_t in_w = input_shape[1], out_w = output_shape[1];
    const std::size_t co = o % cout, pix = o / cout;
    const std::size_t oy = pix / out_w, ox = pix % out_w;
    for (std::size_t ky = 0; ky < window[0]; ++ky)
      for (std::size_t kx = 0; kx < window[1]; ++kx)
        for (std::size_t ci = 0; ci < cin; ++ci) {
          std::size_t iy = oy * stride[0] + ky, ix = ox * stride[1] + kx;
          fn((iy * in_w + ix) * cin + ci, weights[((ky * window[1] + kx) * cin + ci) * cout + co]);
        }
  }

  /// Input indices pooled into output neuron `o` (maxpool2d only).
  std::vector<std::size_t> pool_window(std::size_t o) const {
    const std::size_t c = input_shape[2];
    const std::size_t in_w = input_shape[1], out_w = output_shape[1];
    const std::size_t ch = o % c, pix = o / c;
    const std::size_t oy = pix / out_w, ox = pix % out_w;
    std::vector<std::size_t> idx;
    idx.reserve(window[0] * window[1]);
    for (std::size_t ky = 0; ky < window[0]; ++ky)
      for (std::size_t kx = 0; kx < window[1]; ++kx)
        idx.push_back(((oy * stride[0] + ky) * in_w + (ox * stride[1] + kx)) * c + ch);
    return idx;
  }
};

struct Range {
  double lo = 0.0;
  double hi = 1.0;
};

struct Model {
  Shape input_shape;
  /// Per input component; a single entry applies to every component.
  std::vector<Range> input_domain{Range{}};
  std::size_t label_count = 0;
  std::vector<LayerSpec> layers;

  std::size_t input_size() const { return shape_size(input_shape); }

  Range domain_of(std::size_t k) const {
    return input_domain.size() == 1 ? input_domain[0] : input_domain.at(k);
  }

  bool within_domain(std::span<const double> x) const {
    if (x.size() != input_size())
      return false;
    for (std::size_t k = 0; k < x.size(); ++k) {
      auto r = domain_of(k);
      if (!(x[k] >= r.lo && x[k] <= r.hi))
        return false;
    }
    return true;
  }

  /// Size of the valuation vector at `layer` (0 is the input layer).
  std::size_t layer_size(std::size_t layer) const {
    return layer == 0 ? input_size() : layers.at(layer - 1).output_size();
  }
};

/// Checks the shape chain and weight dimensions; throws ShapeError naming
/// the offending layer.
inline void validate(const Model &m) {
  auto fail = [](std::size_t i, const std::string &msg) {
    throw ShapeError("model", "layer " + std::to_string(i) + ": " + msg);
  };
  if (m.input_shape.empty() || m.input_size() == 0)
    throw ShapeError("model", "empty input shape");
  if (m.input_domain.size() != 1 && m.input_domain.size() != m.input_size())
    throw ShapeError("model", "input domain has " + std::to_string(m.input_domain.size()) +
                                  " ranges for " + std::to_string(m.input_size()) + " inputs");
  Shape cur = m.input_shape;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto &l = m.layers[i];
    if (l.input_shape != cur)
      fail(i, "input shape " + shape_str(l.input_shape) + " does not match previous output " +
                  shape_str(cur));
    if (l.activation == Activation::softmax && i + 1 != m.layers.size())
      fail(i, "softmax is only permitted on the final layer");
    switch (l.kind) {
    case LayerKind::dense:
      if (l.output_shape.size() != 1)
        fail(i, "dense output must be 1-D");
      if (l.weights.size() != l.output_size() * l.input_size())
        fail(i, "dense weight matrix has " + std::to_string(l.weights.size()) +
                    " entries, expected " + std::to_string(l.output_size()) + "x" +
                    std::to_string(l.input_size()));
      if (l.bias.size() != 1 && l.bias.size() != l.output_size())
        fail(i, "dense bias has " + std::to_string(l.bias.size()) + " entries");
      break;
    case LayerKind::conv2d: {
      if (l.input_shape.size() != 3 || l.output_shape.size() != 3)
        fail(i, "conv2d expects (h,w,c) shapes");
      if (l.window[0] == 0 || l.window[1] == 0 || l.stride[0] == 0 || l.stride[1] == 0)
        fail(i, "conv2d kernel and stride must be positive");
      if (l.window[0] > l.input_shape[0] || l.window[1] > l.input_shape[1])
        fail(i, "conv2d kernel larger than input");
      Shape expect{(l.input_shape[0] - l.window[0]) / l.stride[0] + 1,
                   (l.input_shape[1] - l.window[1]) / l.stride[1] + 1, l.output_shape[2]};
      if (l.output_shape != expect)
        fail(i, "conv2d output " + shape_str(l.output_shape) + " inconsistent, expected " +
                    shape_str(expect));
      if (l.weights.size() != l.window[0] * l.window[1] * l.input_shape[2] * l.output_shape[2])
        fail(i, "conv2d kernel has " + std::to_string(l.weights.size()) + " entries");
      if (l.bias.size() != 1 && l.bias.size() != l.output_shape[2])
        fail(i, "conv2d bias has " + std::to_string(l.bias.size()) + " entries");
      break;
    }
    case LayerKind::maxpool2d: {
      if (!l.weights.empty() || !l.bias.empty())
        fail(i, "maxpool2d carries no weights");
      if (l.input_shape.size() != 3 || l.output_shape.size() != 3)
        fail(i, "maxpool2d expects (h,w,c) shapes");
      if (l.window[0] == 0 || l.window[1] == 0 || l.stride[0] == 0 || l.stride[1] == 0)
        fail(i, "maxpool2d pool and stride must be positive");
      if (l.window[0] > l.input_shape[0] || l.window[1] > l.input_shape[1])
        fail(i, "maxpool2d pool larger than input");
      Shape expect{(l.input_shape[0] - l.window[0]) / l.stride[0] + 1,
                   (l.input_shape[1] - l.window[1]) / l.stride[1] + 1, l.input_shape[2]};
      if (l.output_shape != expect)
        fail(i, "maxpool2d output " + shape_str(l.output_shape) + " inconsistent, expected " +
                    shape_str(expect));
      if (l.activation != Activation::none)
        fail(i, "maxpool2d takes no activation");
      break;
    }
    case LayerKind::flatten:
      if (!l.weights.empty() || !l.bias.empty())
        fail(i, "flatten carries no weights");
      if (l.output_shape.size() != 1 || l.output_size() != l.input_size())
        fail(i, "flatten output must be 1-D of the same size");
      if (l.activation != Activation::none)
        fail(i, "flatten takes no activation");
      break;
    }
    cur = l.output_shape;
  }
  if (m.label_count != 0 && !m.layers.empty() && m.label_count != m.layers.back().output_size())
    throw ShapeError("model", "label count " + std::to_string(m.label_count) +
                                  " differs from final layer size " +
                                  std::to_string(m.layers.back().output_size()));
}

/// Valuations of one layer: before (pre) and after (post) its activation.
struct LayerValues {
  std::vector<double> pre;
  std::vector<double> post;
};

/// Entry 0 is the input layer (pre == post == x); entry i is model layer i-1.
struct Activations {
  std::vector<LayerValues> layers;

  const LayerValues &operator[](std::size_t i) const { return layers.at(i); }
  const std::vector<double> &output() const { return layers.back().post; }
};

namespace detail {

inline void apply_layer(const LayerSpec &l, std::span<const double> in, std::vector<double> &pre) {
  pre.assign(l.output_size(), 0.0);
  switch (l.kind) {
  case LayerKind::dense:
  case LayerKind::conv2d:
    for (std::size_t o = 0; o < pre.size(); ++o) {
      double acc = 0.0;
      l.for_each_term(o, [&](std::size_t i, double w) { acc += w * in[i]; });
      pre[o] = acc + l.bias_at(o);
    }
    break;
  case LayerKind::maxpool2d:
    for (std::size_t o = 0; o < pre.size(); ++o) {
      double best = -INFINITY;
      for (auto i : l.pool_window(o))
        best = std::max(best, in[i]);
      pre[o] = best;
    }
    break;
  case LayerKind::flatten:
    std::copy(in.begin(), in.end(), pre.begin());
    break;
  }
}

inline void apply_activation(Activation a, const std::vector<double> &pre, std::vector<double> &post) {
  switch (a) {
  case Activation::none:
    post = pre;
    break;
  case Activation::relu:
    post.resize(pre.size());
    for (std::size_t j = 0; j < pre.size(); ++j)
      post[j] = pre[j] > 0.0 ? pre[j] : 0.0;
    break;
  case Activation::softmax: {
    post.resize(pre.size());
    double mx = *std::max_element(pre.begin(), pre.end());
    double sum = 0.0;
    for (std::size_t j = 0; j < pre.size(); ++j)
      sum += post[j] = std::exp(pre[j] - mx);
    for (auto &v : post)
      v /= sum;
    break;
  }
  }
}

} // namespace detail

/// Evaluates every layer, keeping pre- and post-activation values.
inline Activations forward(const Model &m, std::span<const double> x) {
  if (x.size() != m.input_size())
    throw ShapeError("model", "input has " + std::to_string(x.size()) + " components, expected " +
                                  std::to_string(m.input_size()));
  Activations act;
  act.layers.reserve(m.layers.size() + 1);
  act.layers.push_back({{x.begin(), x.end()}, {x.begin(), x.end()}});
  for (const auto &l : m.layers) {
    LayerValues v;
    detail::apply_layer(l, act.layers.back().post, v.pre);
    detail::apply_activation(l.activation, v.pre, v.post);
    act.layers.push_back(std::move(v));
  }
  return act;
}

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
  if (v.empty())
    throw ShapeError("model", "argmax of empty vector");
  std::size_t best = 0;
  for (std::size_t j = 1; j < v.size(); ++j)
    if (v[j] > v[best])
      best = j;
  return best;
}

/// Label of an already evaluated input. Softmax is monotone, so a softmax
/// output layer is classified on its pre-activation values.
inline std::size_t label_of(const Model &m, const Activations &act) {
  if (!m.layers.empty() && m.layers.back().activation == Activation::softmax)
    return argmax(act.layers.back().pre);
  return argmax(act.output());
}

inline std::size_t classify(const Model &m, std::span<const double> x) {
  return label_of(m, forward(m, x));
}

/// Binary selection matrix of a max-pooling layer for one evaluation:
/// entry (j, k) is set iff input neuron k lies in output j's window and
/// attains that window's maximum.
struct SelectionMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::vector<std::size_t>> windows;
  std::vector<std::vector<std::size_t>> selected;

  bool operator()(std::size_t j, std::size_t k) const {
    const auto &s = selected.at(j);
    return std::find(s.begin(), s.end(), k) != s.end();
  }
};

/// `layer` indexes Activations (model layer `layer - 1`).
inline SelectionMatrix maxpool_selection_matrix(const Model &m, std::size_t layer,
                                                const Activations &act) {
  if (layer == 0 || layer > m.layers.size() || m.layers[layer - 1].kind != LayerKind::maxpool2d)
    throw ArgumentError("model", "layer " + std::to_string(layer) + " is not a maxpool2d layer");
  const auto &l = m.layers[layer - 1];
  const auto &in = act[layer - 1].post;
  const auto &out = act[layer].pre;
  SelectionMatrix s;
  s.rows = l.output_size();
  s.cols = l.input_size();
  s.windows.resize(s.rows);
  s.selected.resize(s.rows);
  for (std::size_t j = 0; j < s.rows; ++j) {
    s.windows[j] = l.pool_window(j);
    for (auto k : s.windows[j])
      if (in[k] == out[j])
        s.selected[j].push_back(k);
  }
  return s;
}

} // namespace featcov
