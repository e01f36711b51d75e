#pragma once

// Named-parameter checkpoints.
// Layout: magic "MCKP", u32 count, then per entry
//   u32 name length, name bytes, u32 rank, u32 dims..., little-endian f64 payload.

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "molang/common.hpp"
#include "molang/tensor.hpp"

namespace molang {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

inline void save_checkpoint(const std::filesystem::path& path, const NamedParams& params) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  check(f.good(), "cannot open checkpoint for writing: " + path.string());
  f.write("MCKP", 4);
  write_u32(f, static_cast<uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    write_u32(f, static_cast<uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(f, static_cast<uint32_t>(t.shape().size()));
    for (int d : t.shape()) write_u32(f, static_cast<uint32_t>(d));
    for (double v : t.values()) write_f64(f, v);
  }
  check(f.good(), "checkpoint write failed: " + path.string());
}

struct CheckpointEntry {
  std::vector<int> shape;
  std::vector<double> values;
};

inline std::map<std::string, CheckpointEntry> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), "cannot open checkpoint: " + path.string());
  char magic[4];
  f.read(magic, 4);
  check(f.good() && std::string(magic, 4) == "MCKP",
        "corrupted checkpoint " + path.string() + ": expected magic bytes MCKP");
  uint32_t count = read_u32(f);
  std::map<std::string, CheckpointEntry> out;
  for (uint32_t e = 0; e < count; ++e) {
    uint32_t name_len = read_u32(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    check(f.good(), "corrupted checkpoint " + path.string() + ": truncated entry name");
    uint32_t rank = read_u32(f);
    CheckpointEntry entry;
    int64_t n = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      int dim = static_cast<int>(read_u32(f));
      entry.shape.push_back(dim);
      n *= dim;
    }
    entry.values.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) entry.values[static_cast<size_t>(i)] = read_f64(f);
    check(f.good(), "corrupted checkpoint " + path.string() + ": truncated payload for " + name);
    out.emplace(std::move(name), std::move(entry));
  }
  return out;
}

// Copies checkpoint values into an existing parameter list, shape-checked.
inline void restore_params(const std::map<std::string, CheckpointEntry>& ckpt, NamedParams& params) {
  for (auto& [name, t] : params) {
    auto it = ckpt.find(name);
    check(it != ckpt.end(), "checkpoint missing parameter: " + name);
    check(it->second.shape == t.shape(),
          "checkpoint shape mismatch for " + name + ": " + shape_str(it->second.shape) +
              " vs " + shape_str(t.shape()));
    t.values() = it->second.values;
  }
}

}  // namespace molang
