#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "circuitscope/engine/tensor.hpp"

namespace circuitscope {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[4] = {'N', 'P', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  engine::Tensor<float> tensor;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedArray> arrays;

  const engine::Tensor<float>& array(const std::string& name) const;
  bool has(const std::string& name) const;
};

// Layout: magic "NPCK", u32 version, u64 header length, UTF-8 JSON header
// {"meta": ..., "arrays": [{"name", "shape", "offset"}]}, then the raw
// little-endian float32 arrays back to back. Offsets are relative to the
// first byte after the header.
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace circuitscope
