#pragma once

// Portable model (.bnm) and dataset (.bnd) containers.
//
// .bnm layout:
//
//   BNM 1
//   dtype f32
//   input 28,28,1
//   domain 0 1
//   labels 10
//   layers 4
//   layer 0 conv2d relu in=28,28,1 out=26,26,8 window=3,3 stride=1,1 weights=0:72 bias=288:8
//   layer 1 flatten none in=26,26,8 out=5408
//   ...
//   end
//   <payload>
//
// weights=/bias= give "byte offset into the payload : element count". All
// blocks are little-endian IEEE-754 in the declared dtype, row-major.
//
// .bnd layout:
//
//   BND 1
//   count 1000
//   shape 28,28,1
//   dtype f32
//   labels 1
//   end
//   <count * prod(shape) reals> <count label bytes, when labels is 1>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "featcov/binary_io.hpp"
#include "featcov/model.hpp"

namespace featcov {

namespace detail {

inline LayerKind parse_layer_kind(const std::string &s, std::size_t i) {
  if (s == "dense")
    return LayerKind::dense;
  if (s == "conv2d")
    return LayerKind::conv2d;
  if (s == "maxpool2d")
    return LayerKind::maxpool2d;
  if (s == "flatten")
    return LayerKind::flatten;
  throw FormatError("model", "layer " + std::to_string(i) + ": unsupported layer kind '" + s + "'");
}

inline Activation parse_activation(const std::string &s, std::size_t i) {
  if (s == "none")
    return Activation::none;
  if (s == "relu")
    return Activation::relu;
  if (s == "softmax")
    return Activation::softmax;
  throw FormatError("model", "layer " + std::to_string(i) + ": unsupported activation '" + s + "'");
}

} // namespace detail

inline Model parse_model(std::string_view bytes) {
  const std::string mod = "model";
  auto h = io::parse_header(bytes, "BNM", 1, mod);
  auto dtype = io::parse_dtype(h.require("dtype", mod).at(1), mod);

  Model m;
  const auto &input = h.require("input", mod);
  if (input.size() != 2)
    throw FormatError(mod, "malformed 'input' record");
  m.input_shape = io::parse_dims(input[1], mod);
  if (const auto *dom = h.find("domain")) {
    if (dom->size() != 3)
      throw FormatError(mod, "malformed 'domain' record");
    m.input_domain = {Range{io::parse_double((*dom)[1], mod), io::parse_double((*dom)[2], mod)}};
  }
  if (const auto *lab = h.find("labels"))
    m.label_count = static_cast<std::size_t>(io::parse_int(lab->at(1), mod));
  const auto count = static_cast<std::size_t>(io::parse_int(h.require("layers", mod).at(1), mod));

  io::ByteReader payload(bytes.substr(h.payload_offset), mod);
  std::size_t seen = 0;
  for (const auto &rec : h.records) {
    if (rec[0] != "layer")
      continue;
    const std::size_t i = seen++;
    auto where = [&](const std::string &msg) {
      return FormatError(mod, "layer " + std::to_string(i) + ": " + msg);
    };
    if (rec.size() < 4 || io::parse_int(rec[1], mod) != static_cast<long long>(i))
      throw where("malformed layer record");
    LayerSpec l;
    l.kind = detail::parse_layer_kind(rec[2], i);
    l.activation = detail::parse_activation(rec[3], i);
    std::map<std::string, std::string> kv;
    for (std::size_t t = 4; t < rec.size(); ++t) {
      auto eq = rec[t].find('=');
      if (eq == std::string::npos)
        throw where("expected key=value, got '" + rec[t] + "'");
      kv[rec[t].substr(0, eq)] = rec[t].substr(eq + 1);
    }
    auto need = [&](const std::string &key) -> const std::string & {
      auto it = kv.find(key);
      if (it == kv.end())
        throw where("missing '" + key + "'");
      return it->second;
    };
    auto block = [&](const std::string &key) {
      const auto &spec = need(key);
      auto colon = spec.find(':');
      if (colon == std::string::npos)
        throw where("block '" + key + "' must be offset:count");
      auto off = io::parse_int(spec.substr(0, colon), mod);
      auto n = io::parse_int(spec.substr(colon + 1), mod);
      if (off < 0 || n < 0)
        throw where("negative block bounds");
      try {
        payload.seek(static_cast<std::size_t>(off));
        return payload.get_reals(static_cast<std::size_t>(n), dtype);
      } catch (const FormatError &) {
        throw where("block '" + key + "' runs past end of file");
      }
    };
    l.input_shape = io::parse_dims(need("in"), mod);
    l.output_shape = io::parse_dims(need("out"), mod);
    if (l.kind == LayerKind::conv2d || l.kind == LayerKind::maxpool2d) {
      auto w = io::parse_dims(need("window"), mod);
      if (w.size() != 2)
        throw where("window must have two dimensions");
      l.window = {w[0], w[1]};
      auto s = kv.count("stride") ? io::parse_dims(kv["stride"], mod)
                                  : (l.kind == LayerKind::maxpool2d ? w : std::vector<std::size_t>{1, 1});
      if (s.size() != 2)
        throw where("stride must have two dimensions");
      l.stride = {s[0], s[1]};
    }
    if (l.kind == LayerKind::dense || l.kind == LayerKind::conv2d) {
      l.weights = block("weights");
      l.bias = kv.count("bias") ? block("bias") : std::vector<double>{0.0};
    } else if (kv.count("weights") || kv.count("bias")) {
      throw where(std::string(to_string(l.kind)) + " carries no weights");
    }
    m.layers.push_back(std::move(l));
  }
  if (seen != count)
    throw FormatError(mod, "header declares " + std::to_string(count) + " layers, found " +
                               std::to_string(seen));
  validate(m);
  return m;
}

inline Model load_model(const std::filesystem::path &path) {
  return parse_model(io::read_file(path, "model"));
}

inline std::string serialize_model(const Model &m, io::DType dtype = io::DType::f32) {
  validate(m);
  io::ByteWriter payload;
  std::string head = "BNM 1\n";
  head += "dtype " + std::string(io::dtype_name(dtype)) + "\n";
  head += "input " + io::join_dims(m.input_shape) + "\n";
  if (m.input_domain.size() != 1)
    throw ArgumentError("model", "per-component input domains are not serialisable");
  head += "domain " + io::format_real(m.input_domain[0].lo) + " " +
          io::format_real(m.input_domain[0].hi) + "\n";
  head += "labels " + std::to_string(m.label_count) + "\n";
  head += "layers " + std::to_string(m.layers.size()) + "\n";
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto &l = m.layers[i];
    head += "layer " + std::to_string(i) + " " + to_string(l.kind) + " " + to_string(l.activation) +
            " in=" + io::join_dims(l.input_shape) + " out=" + io::join_dims(l.output_shape);
    if (l.kind == LayerKind::conv2d || l.kind == LayerKind::maxpool2d)
      head += " window=" + io::join_dims({l.window[0], l.window[1]}) +
              " stride=" + io::join_dims({l.stride[0], l.stride[1]});
    if (l.has_affine_form()) {
      head += " weights=" + std::to_string(payload.size()) + ":" + std::to_string(l.weights.size());
      for (double w : l.weights)
        payload.put_real(w, dtype);
      head += " bias=" + std::to_string(payload.size()) + ":" + std::to_string(l.bias.size());
      for (double b : l.bias)
        payload.put_real(b, dtype);
    }
    head += "\n";
  }
  head += "end\n";
  return head + payload.bytes();
}

inline void save_model(const Model &m, const std::filesystem::path &path,
                       io::DType dtype = io::DType::f32) {
  io::write_file_atomic(path, serialize_model(m, dtype));
}

/// Inputs in row-major tensor order plus optional integer labels.
struct Dataset {
  Shape shape;
  std::vector<std::vector<double>> inputs;
  std::vector<std::size_t> labels;

  std::size_t size() const { return inputs.size(); }
  bool has_labels() const { return !labels.empty(); }
};

inline void validate(const Dataset &d, const Model &m) {
  if (shape_size(d.shape) != m.input_size())
    throw ShapeError("dataset", "input shape " + shape_str(d.shape) + " does not match model input " +
                                    shape_str(m.input_shape));
  for (std::size_t n = 0; n < d.size(); ++n) {
    if (d.inputs[n].size() != m.input_size())
      throw ShapeError("dataset", "input " + std::to_string(n) + " has wrong length");
    if (!m.within_domain(d.inputs[n]))
      throw ArgumentError("dataset", "input " + std::to_string(n) + " lies outside the input domain");
  }
  if (d.has_labels()) {
    if (d.labels.size() != d.size())
      throw ShapeError("dataset", "label count differs from input count");
    for (std::size_t n = 0; n < d.size(); ++n)
      if (m.label_count && d.labels[n] >= m.label_count)
        throw ArgumentError("dataset", "label of input " + std::to_string(n) + " out of range");
  }
}

inline Dataset parse_dataset(std::string_view bytes) {
  const std::string mod = "dataset";
  auto h = io::parse_header(bytes, "BND", 1, mod);
  Dataset d;
  auto count = io::parse_int(h.require("count", mod).at(1), mod);
  if (count < 0)
    throw FormatError(mod, "negative count");
  d.shape = io::parse_dims(h.require("shape", mod).at(1), mod);
  auto dtype = io::parse_dtype(h.require("dtype", mod).at(1), mod);
  bool labelled = io::parse_int(h.require("labels", mod).at(1), mod) != 0;
  io::ByteReader r(bytes.substr(h.payload_offset), mod);
  const std::size_t n = static_cast<std::size_t>(count), sz = shape_size(d.shape);
  d.inputs.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    d.inputs.push_back(r.get_reals(sz, dtype));
  if (labelled) {
    d.labels.resize(n);
    for (auto &l : d.labels)
      l = r.get_u8();
  }
  if (r.remaining() != 0)
    throw FormatError(mod, "trailing bytes after payload");
  return d;
}

inline Dataset load_dataset(const std::filesystem::path &path) {
  return parse_dataset(io::read_file(path, "dataset"));
}

inline std::string serialize_dataset(const Dataset &d, io::DType dtype = io::DType::f32) {
  const std::size_t sz = shape_size(d.shape);
  io::ByteWriter w;
  w.put_text("BND 1\ncount " + std::to_string(d.size()) + "\nshape " + io::join_dims(d.shape) +
             "\ndtype " + std::string(io::dtype_name(dtype)) + "\nlabels " +
             (d.has_labels() ? "1" : "0") + "\nend\n");
  for (const auto &x : d.inputs) {
    if (x.size() != sz)
      throw ShapeError("dataset", "input length differs from shape");
    for (double v : x)
      w.put_real(v, dtype);
  }
  if (d.has_labels()) {
    if (d.labels.size() != d.size())
      throw ShapeError("dataset", "label count differs from input count");
    for (auto l : d.labels) {
      if (l > 255)
        throw ArgumentError("dataset", "labels must fit in one byte");
      w.put_u8(static_cast<std::uint8_t>(l));
    }
  }
  return w.take();
}

inline void save_dataset(const Dataset &d, const std::filesystem::path &path,
                         io::DType dtype = io::DType::f32) {
  io::write_file_atomic(path, serialize_dataset(d, dtype));
}

} // namespace featcov
