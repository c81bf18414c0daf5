#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "metal/errors.hpp"
#include "metal/ndmath/dense_array.hpp"
#include "metal/ndmath/mlp.hpp"

namespace metal {

namespace binio {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(bytes), 8);
}

inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline bool try_get_u64(std::istream& is, std::uint64_t& v) {
  unsigned char bytes[8];
  is.read(reinterpret_cast<char*>(bytes), 8);
  if (is.gcount() == 0 && is.eof()) return false;
  if (is.gcount() != 8) throw FormatError("truncated file: partial 64-bit word");
  v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return true;
}

inline std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  if (!try_get_u64(is, v)) throw FormatError("truncated file: unexpected end of data");
  return v;
}

inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

inline void put_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), static_cast<std::streamsize>(magic.size())); }

inline void expect_magic(std::istream& is, std::string_view magic) {
  std::string got(magic.size(), '\0');
  is.read(got.data(), static_cast<std::streamsize>(got.size()));
  if (is.gcount() != static_cast<std::streamsize>(magic.size()) || got != magic)
    throw FormatError("bad magic string: expected \"" + std::string(magic) + "\"");
}

/// Writes via a sibling temp file and renames, so readers never observe a
/// half-written file.
template <class WriteFn>
void write_atomically(const std::filesystem::path& path, WriteFn&& write) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    write(os);
    os.flush();
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace binio

inline constexpr std::string_view kParamMagic = "METALNN1";

/// "METALNN1", then for every array: rank, dims, values; all little-endian 64-bit.
inline void write_param_block(std::ostream& os, const std::vector<DenseArray>& arrays) {
  binio::put_magic(os, kParamMagic);
  for (const auto& a : arrays) {
    binio::put_u64(os, a.rank());
    for (auto d : a.shape()) binio::put_u64(os, d);
    for (double v : a.data()) binio::put_f64(os, v);
  }
}

inline std::vector<DenseArray> read_param_block(std::istream& is) {
  binio::expect_magic(is, kParamMagic);
  std::vector<DenseArray> arrays;
  std::uint64_t rank = 0;
  while (binio::try_get_u64(is, rank)) {
    if (rank > 8) throw FormatError("parameter block: implausible rank " + std::to_string(rank));
    std::vector<std::size_t> shape(rank);
    std::uint64_t count = 1;
    for (auto& d : shape) {
      d = binio::get_u64(is);
      count *= d;
    }
    if (count > (1ULL << 32)) throw FormatError("parameter block: implausible array size");
    std::vector<double> data(count);
    for (auto& v : data) v = binio::get_f64(is);
    arrays.emplace_back(std::move(shape), std::move(data));
  }
  return arrays;
}

/// Weight (out × in, row-major) then bias for every layer.
inline std::vector<DenseArray> mlp_to_arrays(const Mlp& net) {
  std::vector<DenseArray> arrays;
  for (int l = 0; l < net.num_layers(); ++l) {
    arrays.push_back(DenseArray::from_matrix(net.weight(l).transpose()));
    arrays.push_back(DenseArray::from_vector(net.bias(l)));
  }
  return arrays;
}

/// Rebuilds a network from `2·layers` arrays starting at `first`.
inline Mlp mlp_from_arrays(const std::vector<DenseArray>& arrays, std::size_t first, std::size_t layers) {
  if (arrays.size() < first + 2 * layers) throw FormatError("parameter block: too few arrays for network");
  std::vector<int> widths;
  for (std::size_t l = 0; l < layers; ++l) {
    const auto& w = arrays[first + 2 * l];
    if (w.rank() != 2) throw FormatError("parameter block: weight array must have rank 2");
    if (l == 0) widths.push_back(static_cast<int>(w.shape()[1]));
    if (static_cast<int>(w.shape()[1]) != widths.back()) throw FormatError("parameter block: incompatible layer shapes");
    widths.push_back(static_cast<int>(w.shape()[0]));
    const auto& b = arrays[first + 2 * l + 1];
    if (b.rank() != 1 || b.shape()[0] != w.shape()[0]) throw FormatError("parameter block: bias shape mismatch");
  }
  Mlp net(widths);
  for (std::size_t l = 0; l < layers; ++l) {
    const int li = static_cast<int>(l);
    net.weight(li) = arrays[first + 2 * l].as_columns().transpose();
    net.bias(li) = arrays[first + 2 * l + 1].to_vector();
  }
  return net;
}

}  // namespace metal
