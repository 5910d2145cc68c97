#include "clipdesk/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "json.hpp"

#include "clipdesk/errors.hpp"
#include "clipdesk/rng.hpp"
#include "clipdesk/simd/kernels.hpp"

namespace clipdesk {

namespace {

constexpr double kUnitTolerance = 1e-6;
constexpr std::uint64_t kShuffleSalt = 0x73687566666c65ULL;

void check_unit_rows(const Tensor& t, const char* what) {
  for (std::size_t r = 0; r < t.rows(); ++r) {
    const double norm = std::sqrt(simd::dot(t.row(r), t.row(r), t.cols()));
    if (std::abs(norm - 1.0) > kUnitTolerance) {
      throw ContractError(std::string("similarity_matrix: ") + what + " row " + std::to_string(r) +
                          " has norm " + std::to_string(norm));
    }
  }
}

std::vector<std::size_t> diagonal_targets(std::size_t n) {
  std::vector<std::size_t> t(n);
  std::iota(t.begin(), t.end(), std::size_t{0});
  return t;
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 2) throw ConfigError("batch size must be at least 2");
  if (steps < 1) throw ConfigError("steps must be at least 1");
  if (!(adam.learning_rate >= 0.0) || !std::isfinite(adam.learning_rate)) {
    throw ConfigError("learning rate must be finite and non-negative");
  }
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(adam.epsilon > 0.0)) throw ConfigError("adam epsilon must be positive");
}

void adam_update(AdamMoments& state, Tensor& param, std::span<const double> grad,
                 const AdamHyper& hyper) {
  const std::size_t n = param.size();
  if (grad.size() != n) {
    throw ShapeError("adam_update: gradient has " + std::to_string(grad.size()) +
                     " values for a parameter of " + std::to_string(n));
  }
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(n, 0.0);
    state.v.assign(n, 0.0);
  }
  if (state.m.size() != n || state.v.size() != n) {
    throw ShapeError("adam_update: moment buffers do not match the parameter");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad[i];
    state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
    state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    param.data[i] -= hyper.learning_rate * m_hat / (std::sqrt(v_hat) + hyper.epsilon);
  }
}

OptimizerState OptimizerState::for_params(const ModelParams& params) {
  OptimizerState state;
  for (const Tensor* t : params.tensors()) {
    AdamMoments m;
    m.m.assign(t->size(), 0.0);
    m.v.assign(t->size(), 0.0);
    state.moments.push_back(std::move(m));
  }
  return state;
}

Tensor similarity_matrix(const Tensor& img, const Tensor& txt, double log_scale) {
  if (img.cols() != txt.cols()) throw ShapeError("similarity_matrix: embedding widths differ");
  check_unit_rows(img, "image");
  check_unit_rows(txt, "text");
  const double scale = std::exp(log_scale);
  Tensor s = Tensor::zeros({img.rows(), txt.rows()});
  for (std::size_t i = 0; i < img.rows(); ++i) {
    for (std::size_t j = 0; j < txt.rows(); ++j) {
      s.at(i, j) = scale * simd::dot(img.row(i), txt.row(j), img.cols());
    }
  }
  return s;
}

Var similarity_logits(Tape& tape, Var img, Var txt, Var log_scale) {
  return tape.scale_by_scalar_param(tape.matmul(img, tape.transpose(txt)), tape.exp(log_scale));
}

Var contrastive_loss(Tape& tape, Var logits) {
  const Tensor& s = tape.value(logits);
  if (s.rank() != 2 || s.rows() != s.cols()) {
    throw ShapeError("contrastive_loss: logits must be square, got " + shape_string(s.shape));
  }
  const auto targets = diagonal_targets(s.rows());
  Var rows = tape.mean_nll(tape.log_softmax_rows(logits), targets);
  Var cols = tape.mean_nll(tape.log_softmax_rows(tape.transpose(logits)), targets);
  return tape.scale(tape.add(rows, cols), 0.5);
}

double contrastive_loss(const Tensor& logits) {
  Tape tape;
  Var loss = contrastive_loss(tape, tape.input(logits));
  return tape.value(loss).data[0];
}

Var batch_loss(Tape& tape, const ParamVars& vars, const ModelDims& dims, const Batch& batch,
               TextMode mode) {
  if (batch.images.size() != batch.captions.size()) {
    throw ShapeError("batch: image and caption counts differ");
  }
  if (batch.size() == 0) throw EmptyInputError("batch is empty");
  Var img = encode_image_batch(tape, vars, dims, batch.images);
  Var txt = encode_text_batch(tape, vars, dims, batch.captions, mode);
  return contrastive_loss(tape, similarity_logits(tape, img, txt, vars.log_scale));
}

double train_step(ModelParams& params, const Batch& batch, OptimizerState& state,
                  const TrainConfig& config) {
  auto tensors = params.tensors();
  if (state.moments.size() != tensors.size()) {
    throw ShapeError("train_step: optimizer state does not match the parameters");
  }
  if (batch.images.size() != batch.captions.size()) {
    throw ShapeError("batch: image and caption counts differ");
  }
  for (const Tensor* t : tensors) {
    if (!std::all_of(t->data.begin(), t->data.end(), [](double v) { return std::isfinite(v); })) {
      throw DivergenceError("parameters became non-finite before step " +
                                std::to_string(state.step),
                            state.step);
    }
  }
  params.set_requires_grad(true);
  zero_grads(tensors);
  double loss_value;
  {
    Tape tape;
    const ParamVars vars = ParamVars::bind(tape, params);
    Var img = encode_image_batch(tape, vars, params.dims, batch.images);
    Var txt = encode_text_batch(tape, vars, params.dims, batch.captions, config.mode);
    Var logits = similarity_logits(tape, img, txt, vars.log_scale);
    const auto& s = tape.value(logits).data;
    const bool finite = std::all_of(s.begin(), s.end(), [](double v) { return std::isfinite(v); });
    Var loss = finite ? contrastive_loss(tape, logits) : logits;
    loss_value = finite ? tape.value(loss).data[0] : std::nan("");
    if (!std::isfinite(loss_value)) {
      throw DivergenceError("loss became non-finite at step " + std::to_string(state.step),
                            state.step);
    }
    tape.backward(loss);
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    adam_update(state.moments[i], *tensors[i], tensors[i]->grad, config.adam);
  }
  clamp_log_scale(params);
  ++state.step;
  return loss_value;
}

std::vector<std::vector<std::size_t>> tokenize_all(std::span<const std::string> texts,
                                                   const Vocabulary& vocab,
                                                   std::size_t max_tokens) {
  std::vector<std::vector<std::size_t>> out;
  out.reserve(texts.size());
  for (const auto& text : texts) {
    auto ids = tokenize(text, vocab, max_tokens);
    if (ids.empty()) throw EmptyInputError("caption '" + text + "' has no tokens");
    out.push_back(std::move(ids));
  }
  return out;
}

TrainResult train(const TrainConfig& config, const Corpus& corpus) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();

  std::vector<std::string> texts;
  std::vector<const Image*> images;
  for (std::size_t i = 0; i < corpus.manifest.entries.size(); ++i) {
    const auto& e = corpus.manifest.entries[i];
    if (e.split != Split::kTrain) continue;
    texts.push_back(e.caption);
    images.push_back(&corpus.images.at(i));
  }
  const std::size_t n = texts.size();
  if (n < config.batch_size) {
    throw InsufficientDataError("train split has " + std::to_string(n) +
                                " pairs, fewer than the batch size " +
                                std::to_string(config.batch_size));
  }

  TrainResult result;
  result.model.mode = config.mode;
  result.model.vocab = Vocabulary::from_texts(texts);
  ModelDims dims = config.dims;
  dims.vocab_size = result.model.vocab.size();
  dims.validate();
  result.model.params = init_params(dims, config.seed);
  const auto captions = tokenize_all(texts, result.model.vocab, dims.max_tokens);

  result.report.seed = config.seed;
  result.report.config = config;
  result.report.config.dims = dims;
  result.report.loss_trace.reserve(config.steps);

  OptimizerState state = OptimizerState::for_params(result.model.params);
  Rng shuffle_rng(config.seed ^ kShuffleSalt);
  std::vector<std::size_t> order(n);
  const std::size_t per_epoch = n / config.batch_size;
  std::size_t cursor = per_epoch;
  Batch batch;
  for (std::size_t step = 0; step < config.steps; ++step) {
    if (cursor == per_epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      shuffle_rng.shuffle(std::span<std::size_t>(order));
      cursor = 0;
    }
    batch.images.clear();
    batch.captions.clear();
    for (std::size_t j = 0; j < config.batch_size; ++j) {
      const std::size_t idx = order[cursor * config.batch_size + j];
      batch.images.push_back(*images[idx]);
      batch.captions.push_back(captions[idx]);
    }
    ++cursor;
    result.report.loss_trace.push_back(train_step(result.model.params, batch, state, config));
  }
  result.model.params.set_requires_grad(false);
  for (Tensor* t : result.model.params.tensors()) t->grad.clear();

  result.report.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return result;
}

std::string train_report_json(const TrainReport& report) {
  const TrainConfig& c = report.config;
  nlohmann::json config = {
      {"batch_size", c.batch_size},
      {"steps", c.steps},
      {"learning_rate", c.adam.learning_rate},
      {"beta1", c.adam.beta1},
      {"beta2", c.adam.beta2},
      {"epsilon", c.adam.epsilon},
      {"text_mode", std::string(to_string(c.mode))},
      {"dims",
       {{"vocab_size", c.dims.vocab_size},
        {"text_width", c.dims.text_width},
        {"hidden_width", c.dims.hidden_width},
        {"embed_dim", c.dims.embed_dim},
        {"patch", c.dims.patch},
        {"image_side", c.dims.image_side},
        {"max_tokens", c.dims.max_tokens}}},
  };
  nlohmann::json j = {{"seed", report.seed},
                      {"config", std::move(config)},
                      {"loss_trace", report.loss_trace},
                      {"wall_ms", report.wall_ms}};
  return j.dump() + "\n";
}

}  // namespace clipdesk
