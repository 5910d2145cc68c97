#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>

#include "json.hpp"

#include "clipdesk/errors.hpp"
#include "clipdesk/rng.hpp"
#include "clipdesk/trainer.hpp"
#include "test_util.hpp"

using namespace clipdesk;

namespace {

Tensor random_unit_rows(Rng& rng, std::size_t n, std::size_t d) {
  Tensor t = Tensor::zeros({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      t.at(i, j) = rng.normal();
      ss += t.at(i, j) * t.at(i, j);
    }
    for (std::size_t j = 0; j < d; ++j) t.at(i, j) /= std::sqrt(ss);
  }
  return t;
}

// Scalar two-direction softmax cross-entropy, written independently of the tape.
double oracle_loss(const std::vector<std::vector<double>>& s) {
  const std::size_t n = s.size();
  double rows = 0.0, cols = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double zr = 0.0, zc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      zr += std::exp(s[i][j]);
      zc += std::exp(s[j][i]);
    }
    rows += std::log(zr) - s[i][i];
    cols += std::log(zc) - s[i][i];
  }
  return 0.5 * (rows / n + cols / n);
}

Batch random_batch(Rng& rng, std::size_t n, std::size_t vocab, std::size_t side = 32) {
  Batch b;
  for (std::size_t i = 0; i < n; ++i) {
    Image im = Image::filled(side, side, 0.0, 0.0, 0.0);
    for (double& v : im.rgb) v = rng.uniform();
    b.images.push_back(std::move(im));
    std::vector<std::size_t> ids(1 + rng.below(5));
    for (auto& id : ids) id = rng.below(vocab);
    b.captions.push_back(std::move(ids));
  }
  return b;
}

ModelDims small_dims(std::size_t vocab) {
  ModelDims d;
  d.vocab_size = vocab;
  return d;
}

Corpus small_corpus() {
  CorpusConfig c;
  c.n_train = 256;
  c.n_test = 32;
  return generate_corpus(c);
}

std::vector<std::vector<double>> snapshot(const ModelParams& p) {
  std::vector<std::vector<double>> out;
  for (const Tensor* t : p.tensors()) out.push_back(t->data);
  return out;
}

}  // namespace

TEST_CASE("similarity matrix") {
  const Tensor e = Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  const Tensor s = similarity_matrix(e, e, 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) CHECK(s.at(i, j) == (i == j ? 1.0 : 0.0));
  }

  const Tensor same = Tensor::matrix({{0.6, 0.8}, {0.6, 0.8}, {0.6, 0.8}});
  const Tensor c = similarity_matrix(same, same, std::log(3.0));
  for (double v : c.data) CHECK(v == doctest::Approx(3.0).epsilon(1e-12));

  Rng rng(4);
  const Tensor a = random_unit_rows(rng, 9, 16);
  const Tensor b = random_unit_rows(rng, 9, 16);
  const double scale = std::exp(2.5);
  for (double v : similarity_matrix(a, b, 2.5).data) CHECK(std::abs(v) <= scale + 1e-9);

  CHECK_THROWS_AS(similarity_matrix(Tensor::matrix({{1.0, 1.0}}), Tensor::matrix({{1.0, 0.0}}), 0.0),
                  ContractError);
  CHECK_THROWS_AS(similarity_matrix(Tensor::matrix({{1.0, 0.0}}), Tensor::matrix({{1.0, 0.0, 0.0}}), 0.0),
                  ShapeError);
}

TEST_CASE("contrastive loss analytic values") {
  Tensor uniform = Tensor::zeros({4, 4});
  for (double& v : uniform.data) v = 14.285714;
  CHECK(std::abs(contrastive_loss(uniform) - std::log(4.0)) < 1e-9);

  CHECK(contrastive_loss(Tensor::matrix({{7.5}})) == 0.0);

  const std::vector<std::vector<double>> s = {{10, -10, -10}, {-10, 10, -10}, {-10, -10, 10}};
  Tensor t = Tensor::zeros({3, 3});
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) t.at(i, j) = s[i][j];
  }
  // closed form: log(1 + 2 e^-20)
  CHECK(std::abs(contrastive_loss(t) - oracle_loss(s)) < 1e-10);
  CHECK(std::abs(contrastive_loss(t) - std::log1p(2.0 * std::exp(-20.0))) < 1e-10);

  CHECK_THROWS_AS(contrastive_loss(Tensor::zeros({2, 3})), ShapeError);
}

TEST_CASE("contrastive loss matches the scalar oracle on random logits") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng.below(7);
    std::vector<std::vector<double>> s(n, std::vector<double>(n));
    Tensor t = Tensor::zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) t.at(i, j) = s[i][j] = 5.0 * rng.normal();
    }
    const double loss = contrastive_loss(t);
    CHECK(loss >= 0.0);
    CHECK(std::abs(loss - oracle_loss(s)) < 1e-10);
  }
}

TEST_CASE("full model gradient check") {
  Rng rng(12);
  const std::size_t vocab = 20;
  const Batch batch = random_batch(rng, 4, vocab);
  for (TextMode mode : {TextMode::kBow, TextMode::kPositional}) {
    ModelParams params = init_params(small_dims(vocab), 3);
    params.set_requires_grad(true);
    auto tensors = params.tensors();
    const double err = grad_check(
        [&](Tape& tape) {
          return batch_loss(tape, ParamVars::bind(tape, params), params.dims, batch, mode);
        },
        tensors, 1e-5, 40, 5);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("pair permutation leaves the loss unchanged") {
  Rng rng(21);
  const std::size_t vocab = 15;
  const Batch batch = random_batch(rng, 8, vocab);
  const ModelParams params = init_params(small_dims(vocab), 9);
  auto loss_of = [&](const Batch& b) {
    Tape tape;
    return tape.value(batch_loss(tape, ParamVars::bind_frozen(tape, params), params.dims, b,
                                 TextMode::kBow))
        .data[0];
  };
  const double base = loss_of(batch);
  std::vector<std::size_t> perm(batch.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (int trial = 0; trial < 5; ++trial) {
    rng.shuffle(std::span<std::size_t>(perm));
    Batch p;
    for (std::size_t i : perm) {
      p.images.push_back(batch.images[i]);
      p.captions.push_back(batch.captions[i]);
    }
    CHECK(std::abs(loss_of(p) - base) < 1e-9);
  }
}

TEST_CASE("adam matches a scalar oracle") {
  AdamHyper hyper;
  hyper.learning_rate = 0.1;
  AdamMoments state;
  Tensor p = Tensor::scalar(1.0);
  const double g1 = 0.5, g2 = -0.25;
  adam_update(state, p, std::vector<double>{g1}, hyper);
  // step 1: m = 0.05, v = 0.00025, m_hat = 0.5, v_hat = 0.25
  const double p1 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
  CHECK(std::abs(p.data[0] - p1) < 1e-12);
  adam_update(state, p, std::vector<double>{g2}, hyper);
  // step 2: m = 0.02, v = 0.00031225, corrections 0.19 and 0.001999
  const double m_hat = 0.02 / 0.19;
  const double v_hat = 0.00031225 / 0.001999;
  const double p2 = p1 - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8);
  CHECK(std::abs(p.data[0] - p2) < 1e-12);

  AdamMoments fresh;
  Tensor q = Tensor::scalar(p1);
  adam_update(fresh, q, std::vector<double>{g2}, hyper);
  CHECK(q.data[0] != p.data[0]);

  AdamMoments zero_state;
  Tensor z = Tensor::matrix({{1.5, -2.0}});
  for (int i = 0; i < 5; ++i) adam_update(zero_state, z, std::vector<double>{0.0, 0.0}, hyper);
  CHECK(z.data == std::vector<double>{1.5, -2.0});

  CHECK_THROWS_AS(adam_update(zero_state, z, std::vector<double>{0.0}, hyper), ShapeError);
}

TEST_CASE("train step") {
  Rng rng(30);
  const std::size_t vocab = 12;
  const Batch batch = random_batch(rng, 6, vocab);
  TrainConfig config;
  config.adam.learning_rate = 0.0;

  ModelParams params = init_params(small_dims(vocab), 2);
  const auto before = snapshot(params);
  OptimizerState state = OptimizerState::for_params(params);
  const double l1 = train_step(params, batch, state, config);
  const double l2 = train_step(params, batch, state, config);
  CHECK(snapshot(params) == before);
  CHECK(l1 == l2);

  config.adam.learning_rate = 3e-3;
  ModelParams a = init_params(small_dims(vocab), 2);
  ModelParams b = init_params(small_dims(vocab), 2);
  OptimizerState sa = OptimizerState::for_params(a);
  OptimizerState sb = OptimizerState::for_params(b);
  std::vector<double> ta, tb;
  for (int i = 0; i < 5; ++i) {
    ta.push_back(train_step(a, batch, sa, config));
    tb.push_back(train_step(b, batch, sb, config));
  }
  CHECK(ta == tb);
  CHECK(snapshot(a) == snapshot(b));
  CHECK(ta.back() < ta.front());

  ModelParams broken = init_params(small_dims(vocab), 2);
  broken.image.hidden.data[0] = std::nan("");
  OptimizerState sbroken = OptimizerState::for_params(broken);
  sbroken.step = 17;
  try {
    train_step(broken, batch, sbroken, config);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.step() == 17);
  }
}

TEST_CASE("log scale stays clamped") {
  Rng rng(31);
  const Batch batch = random_batch(rng, 4, 10);
  ModelParams params = init_params(small_dims(10), 1);
  params.log_scale.data[0] = std::log(100.0);
  TrainConfig config;
  config.adam.learning_rate = 0.5;
  OptimizerState state = OptimizerState::for_params(params);
  for (int i = 0; i < 5; ++i) {
    train_step(params, batch, state, config);
    CHECK(params.logit_scale() <= 100.0 + 1e-9);
  }
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.batch_size = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.steps = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.adam.learning_rate = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  CorpusConfig tiny;
  tiny.n_train = 10;
  tiny.n_test = 2;
  c = TrainConfig{};
  CHECK_THROWS_AS(train(c, generate_corpus(tiny)), InsufficientDataError);
}

TEST_CASE("training on the synthetic corpus") {
  const Corpus corpus = small_corpus();
  TrainConfig config;
  config.steps = 100;
  const TrainResult a = train(config, corpus);
  const TrainResult b = train(config, corpus);
  CHECK(a.report.loss_trace.size() == 100);
  CHECK(a.report.loss_trace == b.report.loss_trace);
  CHECK(serialize_checkpoint(a.model) == serialize_checkpoint(b.model));
  CHECK(a.model.params.log_scale.data[0] != std::log(1.0 / kInitialTemperature));
  for (double l : a.report.loss_trace) CHECK(std::isfinite(l));

  // aligned pairs score lower than captions shuffled against their images
  Batch aligned;
  for (const auto* e : corpus.manifest.entries_in(Split::kTestIid)) {
    aligned.images.push_back(corpus.images[e->id]);
    aligned.captions.push_back(tokenize(e->caption, a.model.vocab, a.model.params.dims.max_tokens));
  }
  Batch misaligned = aligned;
  std::rotate(misaligned.captions.begin(), misaligned.captions.begin() + 1, misaligned.captions.end());
  auto loss_of = [&](const Batch& batch) {
    Tape tape;
    return tape.value(batch_loss(tape, ParamVars::bind_frozen(tape, a.model.params),
                                 a.model.params.dims, batch, a.model.mode))
        .data[0];
  };
  CHECK(loss_of(misaligned) > loss_of(aligned));

  const auto j = nlohmann::json::parse(train_report_json(a.report));
  CHECK(j.at("seed") == 7);
  CHECK(j.at("loss_trace").size() == 100);
  CHECK(j.at("config").at("batch_size") == 64);
  CHECK(j.contains("wall_ms"));
}

TEST_CASE("single step training equals one train step") {
  const Corpus corpus = small_corpus();
  TrainConfig config;
  config.steps = 1;
  config.batch_size = 256;  // one batch covers the whole split, so order does not matter
  const TrainResult r = train(config, corpus);

  std::vector<std::string> texts;
  Batch batch;
  for (const auto* e : corpus.manifest.entries_in(Split::kTrain)) texts.push_back(e->caption);
  const Vocabulary vocab = Vocabulary::from_texts(texts);
  ModelDims dims = config.dims;
  dims.vocab_size = vocab.size();
  ModelParams params = init_params(dims, config.seed);
  for (const auto* e : corpus.manifest.entries_in(Split::kTrain)) {
    batch.images.push_back(corpus.images[e->id]);
    batch.captions.push_back(tokenize(e->caption, vocab, dims.max_tokens));
  }
  OptimizerState state = OptimizerState::for_params(params);
  const double loss = train_step(params, batch, state, config);
  CHECK(std::abs(loss - r.report.loss_trace[0]) < 1e-12);
  const auto got = snapshot(r.model.params);
  const auto want = snapshot(params);
  for (std::size_t i = 0; i < got.size(); ++i) {
    REQUIRE(got[i].size() == want[i].size());
    double worst = 0.0;
    for (std::size_t k = 0; k < got[i].size(); ++k) worst = std::max(worst, std::abs(got[i][k] - want[i][k]));
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("pinned 300 step loss on the default corpus") {
  TrainConfig config;
  config.steps = 300;
  const TrainResult r = train(config, generate_corpus(CorpusConfig{}));
  CHECK(r.report.loss_trace.back() == doctest::Approx(1.9582328177893618).epsilon(1e-12));
}
