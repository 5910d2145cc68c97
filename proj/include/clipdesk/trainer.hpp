#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "clipdesk/datagen.hpp"
#include "clipdesk/encoders.hpp"
#include "clipdesk/tensor.hpp"

namespace clipdesk {

// Aligned image/caption pairs: pair i is (images[i], captions[i]).
struct Batch {
  std::vector<Image> images;
  std::vector<std::vector<std::size_t>> captions;

  std::size_t size() const noexcept { return images.size(); }
};

// Reference value only; the desk default is far smaller.
inline constexpr std::size_t kReferenceBatchSize = 32768;

struct AdamHyper {
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t steps = 1500;
  AdamHyper adam;
  std::uint64_t seed = 7;
  TextMode mode = TextMode::kBow;
  ModelDims dims;  // vocab_size is filled in from the corpus

  void validate() const;
};

// First and second moments for one parameter tensor.
struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

// One Adam step with bias correction.
void adam_update(AdamMoments& state, Tensor& param, std::span<const double> grad,
                 const AdamHyper& hyper);

// Moments for every tensor of ModelParams::tensors(), in canonical order.
struct OptimizerState {
  std::vector<AdamMoments> moments;
  std::size_t step = 0;

  static OptimizerState for_params(const ModelParams& params);
};

// S[i,j] = exp(log_scale) * <img_i, txt_j>. Rows must be unit within 1e-6.
Tensor similarity_matrix(const Tensor& img, const Tensor& txt, double log_scale);
// Tape form used in training; inputs are already normalized by the encoders.
Var similarity_logits(Tape& tape, Var img, Var txt, Var log_scale);

// Mean of the row-wise and column-wise cross-entropy against the diagonal.
double contrastive_loss(const Tensor& logits);
Var contrastive_loss(Tape& tape, Var logits);

// Full forward loss on a batch; records onto the given tape.
Var batch_loss(Tape& tape, const ParamVars& vars, const ModelDims& dims, const Batch& batch,
               TextMode mode);

// Forward, backward, one Adam update of every tensor, then clamps log_scale.
// Returns the loss before the update.
double train_step(ModelParams& params, const Batch& batch, OptimizerState& state,
                  const TrainConfig& config);

struct TrainReport {
  std::uint64_t seed = 0;
  TrainConfig config;
  std::vector<double> loss_trace;
  double wall_ms = 0.0;
};

struct TrainResult {
  Model model;
  TrainReport report;
};

// Token ids for every training caption under the given vocabulary.
std::vector<std::vector<std::size_t>> tokenize_all(std::span<const std::string> texts,
                                                   const Vocabulary& vocab,
                                                   std::size_t max_tokens);

// Builds the vocabulary from the train split, initializes from config.seed and
// runs config.steps steps over seeded per-epoch shuffles of the train pairs.
TrainResult train(const TrainConfig& config, const Corpus& corpus);

std::string train_report_json(const TrainReport& report);

}  // namespace clipdesk
