#pragma once

// Binary tensor format (little-endian, independent of host byte order):
//
//   bytes 0..7   magic "GCTENSOR"
//   u64          rank
//   u64 x rank   dims
//   f64 x prod   values, row-major
//
// Several tensors may be concatenated in one stream.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gaitcast/error.hpp"
#include "gaitcast/features.hpp"

namespace gaitcast {

inline constexpr std::string_view kTensorMagic = "GCTENSOR";

struct RawTensor {
  std::vector<std::uint64_t> shape;
  std::vector<double> values;
};

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b.data(), 8);
}

inline std::uint64_t get_u64(std::istream& in) {
  std::array<unsigned char, 8> b{};
  in.read(reinterpret_cast<char*>(b.data()), 8);
  if (!in) throw FormatError("truncated tensor stream");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write_tensor(std::ostream& out, std::span<const std::uint64_t> shape,
                         std::span<const double> values) {
  std::uint64_t count = 1;
  for (auto d : shape) count *= d;
  if (count != values.size()) throw DimensionError("write_tensor: shape does not match value count");
  out.write(kTensorMagic.data(), static_cast<std::streamsize>(kTensorMagic.size()));
  detail::put_u64(out, shape.size());
  for (auto d : shape) detail::put_u64(out, d);
  for (double v : values) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
}

inline RawTensor read_tensor(std::istream& in) {
  std::array<char, 8> magic{};
  in.read(magic.data(), 8);
  if (!in || std::string_view(magic.data(), 8) != kTensorMagic) throw FormatError("bad tensor magic");
  RawTensor t;
  const auto rank = detail::get_u64(in);
  if (rank > 16) throw FormatError("implausible tensor rank");
  std::uint64_t count = 1;
  for (std::uint64_t i = 0; i < rank; ++i) {
    t.shape.push_back(detail::get_u64(in));
    count *= t.shape.back();
  }
  t.values.resize(count);
  for (auto& v : t.values) v = std::bit_cast<double>(detail::get_u64(in));
  return t;
}

inline void save_tensor3(const Tensor3& t, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  const std::array<std::uint64_t, 3> shape = {t.d0, t.d1, t.d2};
  write_tensor(out, shape, t.data);
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline Tensor3 load_tensor3(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  auto raw = read_tensor(in);
  if (raw.shape.size() != 3) throw DimensionError("expected a rank-3 tensor in '" + path.string() + "'");
  Tensor3 t;
  t.d0 = raw.shape[0];
  t.d1 = raw.shape[1];
  t.d2 = raw.shape[2];
  t.data = std::move(raw.values);
  return t;
}

/// CSV `window,channel_or_joint,feature_or_quantity,value`. Axis-1 entries
/// are 1-based channel labels (emg1..emg9) or joint names; axis-2 entries are
/// feature or quantity names.
inline void write_tensor_csv(const Tensor3& t, const std::filesystem::path& path, bool is_target) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "window,channel_or_joint,feature_or_quantity,value\n";
  for (std::size_t w = 0; w < t.d0; ++w) {
    for (std::size_t a = 0; a < t.d1; ++a) {
      const std::string axis1 = is_target ? std::string(kJointNames.at(a)) : "emg" + std::to_string(a + 1);
      for (std::size_t b = 0; b < t.d2; ++b) {
        const std::string_view axis2 = is_target ? kQuantityNames.at(b) : kFeatureNames.at(b);
        out << w << ',' << axis1 << ',' << axis2 << ',' << format_double(t(w, a, b)) << '\n';
      }
    }
  }
}

}  // namespace gaitcast
