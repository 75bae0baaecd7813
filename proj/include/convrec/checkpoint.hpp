#pragma once

#include "convrec/model.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace convrec {

/// On-disk layout: 8-byte magic, u32 format version, length-prefixed UTF-8
/// metadata (key = value lines), u64 array count, then per array a
/// length-prefixed name, u64 rank, u64 dims, raw little-endian float32 data;
/// a CRC32 of everything before it closes the file.
struct CheckpointArray {
  std::string name;
  std::vector<Index> shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::uint32_t version = 1;
  std::map<std::string, std::string> meta;  // includes "component"
  std::vector<CheckpointArray> arrays;      // enumeration order of the model

  const std::string& meta_at(const std::string& key) const;
};

inline constexpr char kDualEncoderComponent[] = "dual-encoder";
inline constexpr char kGeneratorComponent[] = "generator";

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint make_checkpoint(const DualEncoderParams<float>& params,
                           std::map<std::string, std::string> extra_meta = {});
Checkpoint make_checkpoint(const GeneratorParams<float>& params,
                           std::map<std::string, std::string> extra_meta = {});

/// Rebuilds parameters from a checkpoint; the component name, the parameter
/// name set, and every shape must match exactly.
DualEncoderParams<float> dual_encoder_from_checkpoint(const Checkpoint& ckpt);
GeneratorParams<float> generator_from_checkpoint(const Checkpoint& ckpt);

}  // namespace convrec
