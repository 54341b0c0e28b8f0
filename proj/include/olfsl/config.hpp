#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "olfsl/episodes.hpp"
#include "olfsl/eval.hpp"
#include "olfsl/model.hpp"
#include "olfsl/train.hpp"

namespace olfsl {

// The whole run configuration: model, training, evaluation, data paths,
// augmentation and synthesis settings. Loaded from a key=value file with
// CLI-flag overrides; unknown keys are fatal.
struct RunConfig {
  RunConfig() {
    // desk-scale model widths; the paper-scale configs under configs/ widen
    // them back to 256
    model.relation_hidden = {24, 24};
    model.relation_out = 24;
    model.similarity_hidden = {24};
  }

  std::string dtype = "float32";  // float32 | float64

  std::string data_root;
  std::string data_manifest;

  AugmentationSpec aug;

  // model.* — feature_stack "auto" derives a conv/halving stack from
  // (input_size, d, c) at resolve time
  ModelConfig model;
  std::string feature_stack_text = "auto";

  TrainConfig train;

  struct EvalParams {
    int n_way = 5;
    int k_shot = 1;
    int q_queries = 15;
    std::int64_t episodes = 600;
    KShotMode kshot_mode = KShotMode::representation_average;
  } eval;

  struct SynthParams {
    int classes = 10;
    int images_per_class = 20;
    int size = 16;
    std::array<int, 3> split = {6, 2, 2};
  } synth;

  std::uint64_t seed = 1;
  int threads = 1;
  std::string out = "out";
};

// Applies one key=value assignment; throws ConfigError on unknown keys or
// malformed values.
void apply_config_entry(RunConfig& rc, const std::string& key, const std::string& value);

// Parses a config file ('#' comments and blank lines ignored).
RunConfig load_run_config(const std::string& path);

// Canonical echo of the full key set; reloading the result reproduces the
// configuration.
std::string serialize_run_config(const RunConfig& rc);

// Materializes the model config (resolving feature_stack=auto) and validates it.
ModelConfig resolve_model_config(const RunConfig& rc);

}  // namespace olfsl
