#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "grsn/adam.hpp"
#include "grsn/detector.hpp"

namespace grsn {

// Binary checkpoint: magic "GRSN", a version integer, a length-prefixed JSON
// metadata block (variant, config hash, model seed, optimizer step count and
// the tensor manifest), then one contiguous little-endian 32-bit float
// payload.  Round trips are byte-identical.

struct TensorRecord {
  std::string name;
  std::vector<int> shape;
  std::uint64_t offset = 0;  // element offset into the payload
  std::vector<float> data;
};

struct Checkpoint {
  std::uint32_t version = 1;
  std::string variant;
  std::uint64_t config_hash = 0;
  std::uint64_t model_seed = 0;
  long step_count = 0;
  std::vector<TensorRecord> tensors;
};

// Captures model parameters plus, when an optimizer is given, its Adam
// moment vectors under "opt.m.<param>" / "opt.v.<param>".
Checkpoint make_checkpoint(const DetectorModel<float>& model, AdamOptimizer<float>* opt,
                           std::uint64_t config_hash);

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// Copies checkpoint tensors into the model (and optimizer state when given),
// validating version, config hash, variant, tensor names and shapes.
void restore_checkpoint(const DetectorModel<float>& model, AdamOptimizer<float>* opt,
                        const Checkpoint& ck, std::uint64_t expected_config_hash);

}  // namespace grsn
