#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "clipdesk/datagen.hpp"
#include "clipdesk/eval.hpp"
#include "clipdesk/trainer.hpp"

namespace clipdesk {

// JSON config files. Every key is optional and falls back to the struct
// default; unknown keys and wrongly typed values raise ConfigError.

// {"seed", "n_train", "n_test", "side", "noise_sigma", "swap_background",
//  "heldout": [["triangle", "magenta"], ...]}
CorpusConfig corpus_config_from_json(std::string_view text);

// {"seed", "batch_size", "steps", "learning_rate", "beta1", "beta2", "epsilon",
//  "text_mode", "dims": {"text_width", "hidden_width", "embed_dim", "patch",
//  "image_side", "max_tokens"}}
TrainConfig train_config_from_json(std::string_view text);

struct SweepConfig {
  bool enabled = false;
  std::vector<std::size_t> counts = {256, 512, 1024, 2048, 4096};
  std::vector<TextMode> modes = {TextMode::kBow, TextMode::kPositional};
  std::vector<std::size_t> batch_sizes = {4, 8, 16, 32, 64};
  std::size_t sample_budget = 32768;
  TrainConfig train;
};

struct EvalConfig {
  EvalOptions options;
  SweepConfig sweeps;
};

// {"seed", "recall_k", "shots", "probe": {"iterations", "learning_rate", "lambda"},
//  "sweeps": {"enabled", "counts", "modes", "batch_sizes", "sample_budget", "train": {...}}}
EvalConfig eval_config_from_json(std::string_view text);

}  // namespace clipdesk
