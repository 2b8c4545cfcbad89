#pragma once

// Shared plumbing for the on-disk containers (.bnm, .bnd, .bnf, .bna):
// little-endian scalar blocks, a line-oriented text header, atomic writes
// and content hashing.

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <openssl/evp.h>
#include <unistd.h>

#include "featcov/error.hpp"

namespace featcov::io {

enum class DType { f32, f64 };

inline std::string_view dtype_name(DType t) { return t == DType::f32 ? "f32" : "f64"; }

inline DType parse_dtype(std::string_view s, const std::string &module) {
  if (s == "f32")
    return DType::f32;
  if (s == "f64")
    return DType::f64;
  throw FormatError(module, "unsupported dtype '" + std::string(s) + "'");
}

inline std::size_t dtype_size(DType t) { return t == DType::f32 ? 4 : 8; }

namespace detail {
template <class U> U to_le(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    U r = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      r = (r << 8) | ((v >> (8 * i)) & 0xff);
    return r;
  } else {
    return v;
  }
}
} // namespace detail

class ByteWriter {
public:
  void put_u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }

  void put_u64(std::uint64_t v) { put_raw(detail::to_le(v)); }

  void put_f64(double v) { put_raw(detail::to_le(std::bit_cast<std::uint64_t>(v))); }

  void put_f32(float v) { put_raw(detail::to_le(std::bit_cast<std::uint32_t>(v))); }

  void put_real(double v, DType t) {
    if (t == DType::f32)
      put_f32(static_cast<float>(v));
    else
      put_f64(v);
  }

  void put_text(std::string_view s) { buf_.append(s); }

  std::size_t size() const { return buf_.size(); }
  const std::string &bytes() const { return buf_; }
  std::string take() { return std::move(buf_); }

private:
  template <class U> void put_raw(U v) {
    char tmp[sizeof(U)];
    std::memcpy(tmp, &v, sizeof(U));
    buf_.append(tmp, sizeof(U));
  }

  std::string buf_;
};

class ByteReader {
public:
  ByteReader(std::string_view data, std::string module)
      : data_(data), module_(std::move(module)) {}

  void seek(std::size_t pos) {
    if (pos > data_.size())
      throw FormatError(module_, "offset " + std::to_string(pos) + " past end of file");
    pos_ = pos;
  }
  std::size_t tell() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

  std::uint8_t get_u8() { return static_cast<std::uint8_t>(take(1)[0]); }

  std::uint64_t get_u64() { return detail::to_le(get_raw<std::uint64_t>()); }

  double get_f64() { return std::bit_cast<double>(detail::to_le(get_raw<std::uint64_t>())); }

  float get_f32() { return std::bit_cast<float>(detail::to_le(get_raw<std::uint32_t>())); }

  double get_real(DType t) { return t == DType::f32 ? static_cast<double>(get_f32()) : get_f64(); }

  std::vector<double> get_reals(std::size_t n, DType t) {
    std::vector<double> out(n);
    for (auto &v : out)
      v = get_real(t);
    return out;
  }

private:
  std::string_view take(std::size_t n) {
    if (n > remaining())
      throw FormatError(module_, "truncated data block");
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  template <class U> U get_raw() {
    U v;
    std::memcpy(&v, take(sizeof(U)).data(), sizeof(U));
    return v;
  }

  std::string_view data_;
  std::string module_;
  std::size_t pos_ = 0;
};

/// Line-oriented header: "<MAGIC> <version>" followed by whitespace-separated
/// records, terminated by a line reading "end". The binary payload starts
/// right after the terminator's newline.
struct TextHeader {
  std::string magic;
  int version = 0;
  std::vector<std::vector<std::string>> records;
  std::size_t payload_offset = 0;

  /// First record whose leading token equals `key`, or nullptr.
  const std::vector<std::string> *find(std::string_view key) const {
    for (const auto &r : records)
      if (!r.empty() && r[0] == key)
        return &r;
    return nullptr;
  }

  const std::vector<std::string> &require(std::string_view key, const std::string &module) const {
    const auto *r = find(key);
    if (!r)
      throw FormatError(module, "header is missing '" + std::string(key) + "'");
    return *r;
  }
};

inline std::vector<std::string> split_ws(std::string_view line) {
  std::vector<std::string> out;
  std::istringstream in{std::string(line)};
  std::string tok;
  while (in >> tok)
    out.push_back(tok);
  return out;
}

inline TextHeader parse_header(std::string_view data, std::string_view magic, int max_version,
                               const std::string &module) {
  TextHeader h;
  std::size_t pos = 0;
  bool first = true;
  for (;;) {
    auto nl = data.find('\n', pos);
    if (nl == std::string_view::npos)
      throw FormatError(module, "unterminated header");
    auto line = data.substr(pos, nl - pos);
    pos = nl + 1;
    auto toks = split_ws(line);
    if (first) {
      if (toks.size() != 2 || toks[0] != magic)
        throw FormatError(module, "bad magic, expected '" + std::string(magic) + "'");
      try {
        h.version = std::stoi(toks[1]);
      } catch (const std::exception &) {
        throw FormatError(module, "bad version '" + toks[1] + "'");
      }
      if (h.version < 1 || h.version > max_version)
        throw FormatError(module, "unsupported version " + toks[1]);
      h.magic = toks[0];
      first = false;
      continue;
    }
    if (toks.size() == 1 && toks[0] == "end")
      break;
    if (!toks.empty())
      h.records.push_back(std::move(toks));
  }
  h.payload_offset = pos;
  return h;
}

inline long long parse_int(const std::string &s, const std::string &module) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception &) {
    used = 0;
  }
  if (used != s.size() || s.empty())
    throw FormatError(module, "expected integer, got '" + s + "'");
  return v;
}

inline double parse_double(const std::string &s, const std::string &module) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception &) {
    used = 0;
  }
  if (used != s.size() || s.empty())
    throw FormatError(module, "expected number, got '" + s + "'");
  return v;
}

/// Comma-separated non-negative integers ("26,26,8").
inline std::vector<std::size_t> parse_dims(const std::string &s, const std::string &module) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    auto comma = s.find(',', start);
    auto tok = s.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    auto v = parse_int(tok, module);
    if (v < 0)
      throw FormatError(module, "negative dimension in '" + s + "'");
    out.push_back(static_cast<std::size_t>(v));
    if (comma == std::string::npos)
      break;
    start = comma + 1;
  }
  return out;
}

inline std::string join_dims(const std::vector<std::size_t> &d) {
  std::string s;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (i)
      s += ',';
    s += std::to_string(d[i]);
  }
  return s;
}

/// Shortest round-trip text for a double (17 significant digits).
inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string read_file(const std::filesystem::path &path, const std::string &module) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw FormatError(module, "cannot open '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

/// Writes to a sibling temporary file and renames it over `path`.
inline void write_file_atomic(const std::filesystem::path &path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out)
      throw Error("io", "cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out)
      throw Error("io", "short write to '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw Error("io", "cannot rename into '" + path.string() + "': " + ec.message());
  }
}

inline std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw Error("io", "sha256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xf];
  }
  return out;
}

} // namespace featcov::io
