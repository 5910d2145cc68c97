#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "clipdesk/datagen.hpp"
#include "clipdesk/encoders.hpp"
#include "clipdesk/tensor.hpp"

namespace clipdesk {

// Pattern with exactly one "{}" placeholder; "{}" alone is the contextless prompt.
class PromptTemplate {
 public:
  explicit PromptTemplate(std::string pattern);
  const std::string& pattern() const noexcept { return pattern_; }
  std::string instantiate(std::string_view class_name) const;
  bool operator==(const PromptTemplate&) const = default;

 private:
  std::string pattern_;
};

std::vector<PromptTemplate> default_templates();
std::vector<PromptTemplate> make_templates(std::span<const std::string> patterns);

struct ClassEmbedding {
  std::string class_name;
  std::vector<double> vector;  // unit norm
  std::size_t n_templates = 0;
};

// Encodes every template instantiation per class, averages the unit vectors and
// renormalizes. A single template yields the plain prompt encoding unchanged.
std::vector<ClassEmbedding> build_class_embeddings(const Model& model,
                                                   std::span<const std::string> classes,
                                                   std::span<const PromptTemplate> templates);

struct Classification {
  std::vector<double> probs;
  std::size_t argmax = 0;  // ties resolve to the lowest class index
};

// Softmax over exp(log_scale) * <image_emb, class_i>.
Classification classify(std::span<const double> image_emb, std::span<const ClassEmbedding> classes,
                        double log_scale);
// Softmax with max shift; argmax taken on the logits with lowest-index ties.
Classification softmax_argmax(std::span<const double> logits);

// Frozen image embeddings with class indices into a fixed class list.
struct LabeledSet {
  Tensor embeddings;  // n × embed_dim
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
};

// Label index of every name; LabelError if a name is not a class.
std::vector<std::size_t> label_indices(std::span<const std::string> labels,
                                       std::span<const std::string> classes);

// Full-attribute class names present in a split, in canonical enumeration order.
std::vector<std::string> corpus_classes(const CorpusManifest& manifest, Split split);

// Embeds every image of a split; labels are full-attribute class names.
// Images whose class is missing from `classes` raise LabelError, or are
// left out when skip_unknown is set.
LabeledSet embed_split(const Model& model, const Corpus& corpus, Split split,
                       std::span<const std::string> classes, bool skip_unknown = false);

double zero_shot_accuracy(const LabeledSet& set, std::span<const ClassEmbedding> classes,
                          double log_scale);
double zero_shot_accuracy(const Model& model, std::span<const Image> images,
                          std::span<const std::string> labels,
                          std::span<const std::string> classes,
                          std::span<const PromptTemplate> templates);

// k examples per class; kAllExamples uses every example.
inline constexpr std::size_t kAllExamples = std::numeric_limits<std::size_t>::max();

struct ProbeConfig {
  std::size_t iterations = 500;
  double learning_rate = 0.1;
  double lambda = 1e-3;
};

struct ProbeModel {
  Tensor weights;  // embed_dim × C
  Tensor bias;     // 1 × C
  std::vector<std::string> classes;

  std::vector<double> logits(std::span<const double> embedding) const;
  std::size_t predict(std::span<const double> embedding) const;
};

// Per-example weights 1 / (examples of its class), so every class counts equally.
std::vector<double> balanced_weights(std::span<const std::size_t> labels);

// Weighted cross-entropy of softmax(x W + b) plus lambda/2 * |W|^2.
Var probe_objective(Tape& tape, Var w, Var bias, Var x, std::span<const std::size_t> labels,
                    std::span<const double> weights, double lambda);

// Seeded per-class sampling, then full-batch proximal gradient descent on the
// class-balanced objective above over standardized features (the ridge term
// is applied in closed form each iteration).
ProbeModel train_probe(const LabeledSet& set, std::span<const std::string> classes, std::size_t k,
                       std::uint64_t seed, const ProbeConfig& config = {});

double probe_accuracy(const ProbeModel& probe, const LabeledSet& set);

struct FewShotPoint {
  std::size_t k = 0;  // 0 marks the zero-shot classifier
  double accuracy = 0.0;
};

struct EvalData {
  std::vector<std::string> classes;
  LabeledSet train;
  LabeledSet test;
};

// Zero-shot entry first (k = 0), then one probe per k, all scored on data.test.
std::vector<FewShotPoint> few_shot_curve(const Model& model, const EvalData& data,
                                         std::span<const PromptTemplate> templates,
                                         std::span<const std::size_t> ks, std::uint64_t seed,
                                         const ProbeConfig& config = {});

struct ShiftGap {
  double acc_iid = 0.0;
  double acc_shifted = 0.0;
  double gap = 0.0;  // acc_iid - acc_shifted
};

ShiftGap shift_gap(const Model& model, std::span<const std::string> classes,
                   std::span<const PromptTemplate> templates, const LabeledSet& iid,
                   const LabeledSet& shifted);
ShiftGap probe_shift_gap(const ProbeModel& probe, const LabeledSet& iid, const LabeledSet& shifted);

}  // namespace clipdesk
