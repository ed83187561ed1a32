#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "birdgp/errors.hpp"
#include "birdgp/matrix.hpp"

namespace birdgp {

// Tensor files carry a single ASCII header line
//   dtype=f64 shape=<d1>x<d2>...
// followed by the row-major payload as little-endian IEEE-754 doubles.

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;

  std::size_t size() const {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
  }
};

namespace detail {

inline std::uint64_t to_little_endian(std::uint64_t x) {
  if constexpr (std::endian::native == std::endian::little) return x;
  std::uint64_t y = 0;
  for (int i = 0; i < 8; ++i) y |= ((x >> (8 * i)) & 0xFFu) << (8 * (7 - i));
  return y;
}

}  // namespace detail

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  if (t.values.size() != t.size())
    throw ShapeError("write_tensor: payload does not match shape");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_tensor: cannot open " + path.string());
  out << "dtype=f64 shape=";
  for (std::size_t i = 0; i < t.shape.size(); ++i) {
    if (i) out << 'x';
    out << t.shape[i];
  }
  out << '\n';
  for (double v : t.values) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    bits = detail::to_little_endian(bits);
    out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
  }
  if (!out) throw IoError("write_tensor: write failed for " + path.string());
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_tensor: cannot open " + path.string());
  std::string header;
  if (!std::getline(in, header))
    throw FormatError("read_tensor: missing header line", 0);
  std::istringstream hs(header);
  std::string dtype_tok, shape_tok;
  hs >> dtype_tok >> shape_tok;
  if (dtype_tok != "dtype=f64")
    throw FormatError("read_tensor: unsupported dtype in '" + header + "'", 0);
  if (shape_tok.rfind("shape=", 0) != 0)
    throw FormatError("read_tensor: missing shape field in '" + header + "'", 0);

  Tensor t;
  std::string dims = shape_tok.substr(6);
  std::size_t pos = 0;
  while (pos < dims.size()) {
    std::size_t next = dims.find('x', pos);
    const std::string piece =
        dims.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
    if (piece.empty() || piece.find_first_not_of("0123456789") != std::string::npos)
      throw FormatError("read_tensor: bad shape token '" + piece + "'", 0);
    t.shape.push_back(static_cast<std::size_t>(std::stoull(piece)));
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  if (t.shape.empty()) throw FormatError("read_tensor: empty shape", 0);

  const std::size_t n = t.size();
  t.values.resize(n);
  const std::int64_t payload_start = static_cast<std::int64_t>(header.size()) + 1;
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits;
    if (!in.read(reinterpret_cast<char*>(&bits), sizeof bits))
      throw FormatError("read_tensor: truncated payload",
                        payload_start + static_cast<std::int64_t>(8 * i));
    bits = detail::to_little_endian(bits);
    std::memcpy(&t.values[i], &bits, sizeof bits);
  }
  char extra;
  if (in.read(&extra, 1))
    throw FormatError("read_tensor: trailing bytes after payload",
                      payload_start + static_cast<std::int64_t>(8 * n));
  return t;
}

inline void write_matrix(const std::filesystem::path& path, const Matrix& m) {
  Tensor t;
  t.shape = {m.rows(), m.cols()};
  t.values = m.storage();
  write_tensor(path, t);
}

inline Matrix read_matrix(const std::filesystem::path& path) {
  Tensor t = read_tensor(path);
  if (t.shape.size() != 2)
    throw FormatError("read_matrix: expected a rank-2 tensor in " + path.string(), 0);
  return Matrix(t.shape[0], t.shape[1], std::move(t.values));
}

inline void write_vector(const std::filesystem::path& path,
                         const std::vector<double>& v) {
  Tensor t;
  t.shape = {v.size()};
  t.values = v;
  write_tensor(path, t);
}

inline std::vector<double> read_vector(const std::filesystem::path& path) {
  Tensor t = read_tensor(path);
  if (t.shape.size() != 1)
    throw FormatError("read_vector: expected a rank-1 tensor in " + path.string(), 0);
  return std::move(t.values);
}

// Manifests are plain key=value lines; '#' starts a comment. Keys are unique.
using Manifest = std::map<std::string, std::string>;

inline void write_manifest(const std::filesystem::path& path, const Manifest& kv) {
  std::ofstream out(path);
  if (!out) throw IoError("write_manifest: cannot open " + path.string());
  for (const auto& [key, value] : kv) out << key << '=' << value << '\n';
  if (!out) throw IoError("write_manifest: write failed for " + path.string());
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("read_manifest: cannot open " + path.string());
  Manifest kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError("read_manifest: line " + std::to_string(lineno) +
                            " lacks '=' in " + path.string(),
                        0);
    auto trim = [](std::string s) {
      const std::size_t a = s.find_first_not_of(" \t\r");
      const std::size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    if (key.empty())
      throw FormatError("read_manifest: empty key at line " + std::to_string(lineno), 0);
    if (kv.count(key))
      throw FormatError("read_manifest: duplicate key '" + key + "'", 0);
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline const std::string& manifest_get(const Manifest& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw FormatError("manifest: missing key '" + key + "'", 0);
  return it->second;
}

inline double manifest_get_double(const Manifest& kv, const std::string& key) {
  const std::string& s = manifest_get(kv, key);
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("manifest: key '" + key + "' is not a number: " + s, 0);
  }
}

inline std::int64_t manifest_get_int(const Manifest& kv, const std::string& key) {
  const std::string& s = manifest_get(kv, key);
  try {
    std::size_t used = 0;
    const std::int64_t v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("manifest: key '" + key + "' is not an integer: " + s, 0);
  }
}

}  // namespace birdgp
