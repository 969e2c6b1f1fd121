#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "grsn/data.hpp"
#include "grsn/detector.hpp"
#include "grsn/eval.hpp"
#include "grsn/fusion.hpp"

namespace grsn {

// JSON run configuration: the config file is the source of truth, command
// line flags override individual values.  Every command is reproducible
// from (config, seed) alone.

struct BenchConfig {
  // Each timed repeat must span several hundred milliseconds; shorter windows
  // sit inside the CPU frequency ramp and make repeat medians unstable.
  int n_images = 600;
  int warmup = 100;
  int repeats = 3;
};

struct RunConfig {
  Variant variant = Variant::kBaseline;
  std::uint64_t seed = 1;
  std::string dataset;       // GRSD file consumed by train/eval/compare
  std::string out_dir = "."; // artifacts (checkpoints, logs, reports) land here
  ModelConfig model;
  TrainOptions train;        // train.seed mirrors the top-level seed
  EvalConfig eval;
  BenchConfig bench;
  GenSpec gen;
  std::vector<std::uint64_t> compare_seeds = {1, 2, 3};

  void validate() const;
};

Variant parse_variant(const std::string& name);  // UsageError on unknown name

RunConfig load_run_config(const std::string& path);
RunConfig parse_run_config_json(const std::string& text, const std::string& origin);

// Canonical serialization of the model section; its FNV-1a hash ties
// checkpoints to the architecture they were trained with.
std::string canonical_model_json(const ModelConfig& mc);
std::uint64_t config_hash(const ModelConfig& mc);

std::string run_config_to_json(const RunConfig& rc);  // pretty, for `inspect --dump-config`

}  // namespace grsn
