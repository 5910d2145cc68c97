#include "clipdesk/zeroshot.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <tuple>

#include "clipdesk/errors.hpp"
#include "clipdesk/rng.hpp"
#include "clipdesk/simd/kernels.hpp"

namespace clipdesk {

namespace {

constexpr std::string_view kPlaceholder = "{}";

std::size_t argmax_lowest(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

void require_class_count(std::span<const std::string> classes) {
  if (classes.empty()) throw EmptyInputError("class list is empty");
}

}  // namespace

PromptTemplate::PromptTemplate(std::string pattern) : pattern_(std::move(pattern)) {
  const auto first = pattern_.find(kPlaceholder);
  if (first == std::string::npos || pattern_.find(kPlaceholder, first + 1) != std::string::npos) {
    throw ConfigError("template '" + pattern_ + "' must contain exactly one {} placeholder");
  }
}

std::string PromptTemplate::instantiate(std::string_view class_name) const {
  std::string out = pattern_;
  out.replace(out.find(kPlaceholder), kPlaceholder.size(), class_name);
  return out;
}

std::vector<PromptTemplate> default_templates() {
  return {PromptTemplate("a photo of a {}"), PromptTemplate("an image of a {}"),
          PromptTemplate("a picture of a {}"), PromptTemplate("{}")};
}

std::vector<PromptTemplate> make_templates(std::span<const std::string> patterns) {
  std::vector<PromptTemplate> out;
  for (const auto& p : patterns) out.emplace_back(p);
  return out;
}

std::vector<ClassEmbedding> build_class_embeddings(const Model& model,
                                                   std::span<const std::string> classes,
                                                   std::span<const PromptTemplate> templates) {
  require_class_count(classes);
  if (templates.empty()) throw EmptyInputError("template list is empty");
  std::vector<ClassEmbedding> out;
  out.reserve(classes.size());
  for (const auto& name : classes) {
    ClassEmbedding ce;
    ce.class_name = name;
    ce.n_templates = templates.size();
    for (const auto& t : templates) {
      const std::string prompt = t.instantiate(name);
      std::vector<double> v;
      try {
        v = encode_query(model, prompt);
      } catch (const EmptyInputError&) {
        throw EmptyInputError("prompt '" + prompt + "' has no tokens");
      }
      if (ce.vector.empty()) {
        ce.vector = std::move(v);
      } else {
        for (std::size_t i = 0; i < v.size(); ++i) ce.vector[i] += v[i];
      }
    }
    if (templates.size() > 1) {
      const double norm = std::sqrt(simd::dot(ce.vector.data(), ce.vector.data(), ce.vector.size()));
      if (!(norm > 0.0)) throw DegenerateVectorError("class '" + name + "' averages to zero", 0);
      for (double& x : ce.vector) x /= norm;
    }
    out.push_back(std::move(ce));
  }
  return out;
}

Classification softmax_argmax(std::span<const double> logits) {
  if (logits.empty()) throw EmptyInputError("classify: no classes");
  Classification c;
  c.argmax = argmax_lowest(logits);
  const double top = logits[c.argmax];
  c.probs.resize(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    c.probs[i] = std::exp(logits[i] - top);
    z += c.probs[i];
  }
  for (double& p : c.probs) p /= z;
  return c;
}

Classification classify(std::span<const double> image_emb, std::span<const ClassEmbedding> classes,
                        double log_scale) {
  if (classes.empty()) throw EmptyInputError("classify: no classes");
  const double scale = std::exp(log_scale);
  std::vector<double> logits(classes.size());
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i].vector.size() != image_emb.size()) {
      throw ShapeError("classify: class '" + classes[i].class_name + "' has width " +
                       std::to_string(classes[i].vector.size()) + ", image has " +
                       std::to_string(image_emb.size()));
    }
    logits[i] = scale * simd::dot(image_emb.data(), classes[i].vector.data(), image_emb.size());
  }
  return softmax_argmax(logits);
}

std::vector<std::size_t> label_indices(std::span<const std::string> labels,
                                       std::span<const std::string> classes) {
  std::map<std::string_view, std::size_t> index;
  for (std::size_t i = 0; i < classes.size(); ++i) index.emplace(classes[i], i);
  std::vector<std::size_t> out;
  out.reserve(labels.size());
  for (const auto& l : labels) {
    auto it = index.find(l);
    if (it == index.end()) throw LabelError("label '" + l + "' is not in the class set");
    out.push_back(it->second);
  }
  return out;
}

std::vector<std::string> corpus_classes(const CorpusManifest& manifest, Split split) {
  std::set<std::tuple<ShapeKind, Color, SizeClass, Background>> present;
  for (const auto* e : manifest.entries_in(split)) {
    present.emplace(e->spec.shape, e->spec.color, e->spec.size, e->spec.background);
  }
  std::vector<std::string> out;
  for (ShapeKind shape : kAllShapes) {
    for (Color color : kAllColors) {
      for (SizeClass size : kAllSizes) {
        for (Background bg : kAllBackgrounds) {
          if (!present.count({shape, color, size, bg})) continue;
          SceneSpec s;
          s.shape = shape;
          s.color = color;
          s.size = size;
          s.background = bg;
          out.push_back(combo_class_name(s));
        }
      }
    }
  }
  return out;
}

LabeledSet embed_split(const Model& model, const Corpus& corpus, Split split,
                       std::span<const std::string> classes, bool skip_unknown) {
  std::vector<Image> images;
  std::vector<std::string> names;
  const auto& entries = corpus.manifest.entries;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].split != split) continue;
    std::string name = combo_class_name(entries[i].spec);
    if (skip_unknown && std::find(classes.begin(), classes.end(), name) == classes.end()) continue;
    images.push_back(corpus.images.at(i));
    names.push_back(std::move(name));
  }
  LabeledSet set;
  set.labels = label_indices(names, classes);
  set.embeddings = images.empty() ? Tensor::zeros({0, model.params.dims.embed_dim})
                                  : encode_images(model.params, images);
  return set;
}

double zero_shot_accuracy(const LabeledSet& set, std::span<const ClassEmbedding> classes,
                          double log_scale) {
  if (set.size() == 0) throw EmptyInputError("zero_shot_accuracy: no examples");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (set.labels[i] >= classes.size()) throw LabelError("label index outside the class list");
    const auto c = classify({set.embeddings.row(i), set.embeddings.cols()}, classes, log_scale);
    correct += c.argmax == set.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

double zero_shot_accuracy(const Model& model, std::span<const Image> images,
                          std::span<const std::string> labels,
                          std::span<const std::string> classes,
                          std::span<const PromptTemplate> templates) {
  if (images.size() != labels.size()) throw ShapeError("image and label counts differ");
  LabeledSet set;
  set.labels = label_indices(labels, classes);
  if (images.empty()) throw EmptyInputError("zero_shot_accuracy: no examples");
  set.embeddings = encode_images(model.params, images);
  const auto class_embs = build_class_embeddings(model, classes, templates);
  return zero_shot_accuracy(set, class_embs, model.params.log_scale.data[0]);
}

std::vector<double> ProbeModel::logits(std::span<const double> embedding) const {
  const std::size_t c = weights.cols();
  if (embedding.size() != weights.rows()) throw ShapeError("probe: embedding width mismatch");
  std::vector<double> out(bias.data.begin(), bias.data.end());
  for (std::size_t k = 0; k < embedding.size(); ++k) simd::axpy(embedding[k], weights.row(k), out.data(), c);
  return out;
}

std::size_t ProbeModel::predict(std::span<const double> embedding) const {
  return argmax_lowest(logits(embedding));
}

std::vector<double> balanced_weights(std::span<const std::size_t> labels) {
  std::map<std::size_t, std::size_t> counts;
  for (std::size_t l : labels) ++counts[l];
  std::vector<double> w(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) w[i] = 1.0 / static_cast<double>(counts[labels[i]]);
  return w;
}

Var probe_objective(Tape& tape, Var w, Var bias, Var x, std::span<const std::size_t> labels,
                    std::span<const double> weights, double lambda) {
  Var logits = tape.add_row_broadcast(tape.matmul(x, w), bias);
  Var ce = tape.weighted_nll(tape.log_softmax_rows(logits),
                             std::vector<std::size_t>(labels.begin(), labels.end()),
                             std::vector<double>(weights.begin(), weights.end()));
  return tape.add(ce, tape.scale(tape.sum_squares(w), 0.5 * lambda));
}

ProbeModel train_probe(const LabeledSet& set, std::span<const std::string> classes, std::size_t k,
                       std::uint64_t seed, const ProbeConfig& config) {
  require_class_count(classes);
  if (k == 0) throw ConfigError("probe needs at least one example per class");
  if (!(config.lambda >= 0.0)) throw ConfigError("ridge strength must be non-negative");
  const std::size_t n_classes = classes.size();
  std::vector<std::vector<std::size_t>> by_class(n_classes);
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (set.labels[i] >= n_classes) throw LabelError("label index outside the class list");
    by_class[set.labels[i]].push_back(i);
  }

  Rng rng(seed);
  std::vector<std::size_t> chosen;
  for (std::size_t c = 0; c < n_classes; ++c) {
    auto& idx = by_class[c];
    if (k == kAllExamples) {
      chosen.insert(chosen.end(), idx.begin(), idx.end());
      continue;
    }
    if (idx.size() < k) {
      throw InsufficientDataError("class '" + classes[c] + "' has " + std::to_string(idx.size()) +
                                  " examples, fewer than k=" + std::to_string(k));
    }
    rng.shuffle(std::span<std::size_t>(idx));
    chosen.insert(chosen.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  }
  if (chosen.empty()) throw InsufficientDataError("probe has no training examples");

  // Features are standardized per dimension with sample statistics so plain
  // gradient descent is well conditioned; the affine map is folded back into
  // W and b at the end, so the probe acts on raw embeddings.
  const std::size_t d = set.embeddings.cols();
  const double inv_n = 1.0 / static_cast<double>(chosen.size());
  std::vector<double> mean(d, 0.0), stddev(d, 0.0);
  for (std::size_t i : chosen) simd::axpy(inv_n, set.embeddings.row(i), mean.data(), d);
  for (std::size_t i : chosen) {
    for (std::size_t j = 0; j < d; ++j) {
      const double c = set.embeddings.at(i, j) - mean[j];
      stddev[j] += c * c * inv_n;
    }
  }
  for (double& sd : stddev) sd = sd > 1e-24 ? std::sqrt(sd) : 1.0;
  Tensor x = Tensor::zeros({chosen.size(), d});
  std::vector<std::size_t> labels(chosen.size());
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    const double* src = set.embeddings.row(chosen[i]);
    for (std::size_t j = 0; j < d; ++j) x.at(i, j) = (src[j] - mean[j]) / stddev[j];
    labels[i] = set.labels[chosen[i]];
  }

  const std::vector<double> example_weights = balanced_weights(labels);
  ProbeModel probe;
  probe.classes.assign(classes.begin(), classes.end());
  probe.weights = Tensor::zeros({d, n_classes}, true);
  probe.bias = Tensor::zeros({1, n_classes}, true);
  const double shrink = 1.0 / (1.0 + config.learning_rate * config.lambda);
  for (std::size_t it = 0; it < config.iterations; ++it) {
    Tensor* params[] = {&probe.weights, &probe.bias};
    zero_grads(params);
    {
      Tape tape;
      Var loss = probe_objective(tape, tape.leaf(probe.weights), tape.leaf(probe.bias),
                                 tape.input(x), labels, example_weights, 0.0);
      tape.backward(loss);
    }
    for (std::size_t i = 0; i < probe.weights.size(); ++i) {
      double& w = probe.weights.data[i];
      w = (w - config.learning_rate * probe.weights.grad[i]) * shrink;
    }
    for (std::size_t i = 0; i < probe.bias.size(); ++i) {
      probe.bias.data[i] -= config.learning_rate * probe.bias.grad[i];
    }
  }
  for (std::size_t j = 0; j < d; ++j) {
    double* row = probe.weights.row(j);
    for (std::size_t c = 0; c < n_classes; ++c) row[c] /= stddev[j];
    simd::axpy(-mean[j], row, probe.bias.data.data(), n_classes);
  }
  probe.weights.requires_grad = probe.bias.requires_grad = false;
  probe.weights.grad.clear();
  probe.bias.grad.clear();
  return probe;
}

double probe_accuracy(const ProbeModel& probe, const LabeledSet& set) {
  if (set.size() == 0) throw EmptyInputError("probe_accuracy: no examples");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    correct += probe.predict({set.embeddings.row(i), set.embeddings.cols()}) == set.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

std::vector<FewShotPoint> few_shot_curve(const Model& model, const EvalData& data,
                                         std::span<const PromptTemplate> templates,
                                         std::span<const std::size_t> ks, std::uint64_t seed,
                                         const ProbeConfig& config) {
  std::vector<FewShotPoint> out;
  const auto class_embs = build_class_embeddings(model, data.classes, templates);
  out.push_back({0, zero_shot_accuracy(data.test, class_embs, model.params.log_scale.data[0])});
  for (std::size_t k : ks) {
    const ProbeModel probe = train_probe(data.train, data.classes, k, seed, config);
    out.push_back({k, probe_accuracy(probe, data.test)});
  }
  return out;
}

ShiftGap shift_gap(const Model& model, std::span<const std::string> classes,
                   std::span<const PromptTemplate> templates, const LabeledSet& iid,
                   const LabeledSet& shifted) {
  const auto class_embs = build_class_embeddings(model, classes, templates);
  const double ls = model.params.log_scale.data[0];
  ShiftGap g;
  g.acc_iid = zero_shot_accuracy(iid, class_embs, ls);
  g.acc_shifted = zero_shot_accuracy(shifted, class_embs, ls);
  g.gap = g.acc_iid - g.acc_shifted;
  return g;
}

ShiftGap probe_shift_gap(const ProbeModel& probe, const LabeledSet& iid, const LabeledSet& shifted) {
  ShiftGap g;
  g.acc_iid = probe_accuracy(probe, iid);
  g.acc_shifted = probe_accuracy(probe, shifted);
  g.gap = g.acc_iid - g.acc_shifted;
  return g;
}

}  // namespace clipdesk
