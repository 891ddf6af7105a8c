#pragma once

// Model checkpoints: `<dir>/manifest.json` (kind, config, tensor names and
// shapes) plus `<dir>/weights.bin`, the tensors in manifest order, each in
// the shape-prefixed little-endian float64 tensor format.

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "gaitcast/error.hpp"
#include "gaitcast/nn.hpp"
#include "gaitcast/tensor_io.hpp"

namespace gaitcast {

inline constexpr const char* kCheckpointFormat = "gaitcast-checkpoint-1";

inline void save_checkpoint(const std::filesystem::path& dir, const std::string& kind, const nlohmann::json& config,
                            const nn::ParamList& params) {
  std::filesystem::create_directories(dir);
  nlohmann::json tensors = nlohmann::json::array();
  std::ofstream bin(dir / "weights.bin", std::ios::binary);
  if (!bin) throw IoError("cannot write checkpoint in '" + dir.string() + "'");
  for (const auto* p : params) {
    const std::vector<std::uint64_t> shape = {static_cast<std::uint64_t>(p->value.rows()),
                                              static_cast<std::uint64_t>(p->value.cols())};
    std::vector<double> rowmajor(static_cast<std::size_t>(p->value.size()));
    for (Eigen::Index r = 0; r < p->value.rows(); ++r) {
      for (Eigen::Index c = 0; c < p->value.cols(); ++c) {
        rowmajor[static_cast<std::size_t>(r * p->value.cols() + c)] = p->value(r, c);
      }
    }
    write_tensor(bin, shape, rowmajor);
    tensors.push_back({{"name", p->name}, {"shape", shape}});
  }
  if (!bin) throw IoError("failed writing '" + (dir / "weights.bin").string() + "'");
  const nlohmann::json manifest = {
      {"format", kCheckpointFormat}, {"kind", kind}, {"config", config}, {"tensors", tensors}};
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError("failed writing checkpoint manifest in '" + dir.string() + "'");
}

inline nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("no checkpoint manifest in '" + dir.string() + "'");
  nlohmann::json m;
  try {
    in >> m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint manifest: " + std::string(e.what()));
  }
  if (m.value("format", "") != kCheckpointFormat) throw FormatError("checkpoint manifest: unknown format");
  return m;
}

/// Fills `params` (which must match the manifest's names and shapes, in
/// order) and returns the manifest.
inline nlohmann::json load_checkpoint(const std::filesystem::path& dir, const std::string& kind,
                                      const nn::ParamList& params) {
  auto m = read_checkpoint_manifest(dir);
  if (m.at("kind") != kind) throw FormatError("checkpoint holds a '" + m.at("kind").get<std::string>() + "' model");
  const auto& tensors = m.at("tensors");
  if (tensors.size() != params.size()) throw DimensionError("checkpoint tensor count does not match the model");
  std::ifstream bin(dir / "weights.bin", std::ios::binary);
  if (!bin) throw IoError("cannot read '" + (dir / "weights.bin").string() + "'");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    const auto t = read_tensor(bin);
    if (tensors[i].at("name") != p.name || t.shape.size() != 2 ||
        t.shape[0] != static_cast<std::uint64_t>(p.value.rows()) ||
        t.shape[1] != static_cast<std::uint64_t>(p.value.cols())) {
      throw DimensionError("checkpoint tensor " + std::to_string(i) + " does not match parameter " + p.name);
    }
    for (Eigen::Index r = 0; r < p.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) {
        p.value(r, c) = t.values[static_cast<std::size_t>(r * p.value.cols() + c)];
      }
    }
  }
  return m;
}

}  // namespace gaitcast
