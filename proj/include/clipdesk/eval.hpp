#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "clipdesk/datagen.hpp"
#include "clipdesk/encoders.hpp"
#include "clipdesk/trainer.hpp"
#include "clipdesk/zeroshot.hpp"

namespace clipdesk {

struct RecallResult {
  double recall = 0.0;        // mean over evaluated queries
  std::size_t evaluated = 0;
  std::size_t excluded = 0;   // queries with no relevant item
};

// Mean over queries of |top-k ∩ relevant| / min(k, |relevant|).
RecallResult recall_at_k(std::span<const std::vector<std::uint64_t>> ranked,
                         std::span<const std::set<std::uint64_t>> relevant, std::size_t k);

// Expected recall of a uniformly random ranking of n items: per query
// k·R / (n·min(k, R)) with k capped at n; queries with R = 0 are skipped.
double random_recall_baseline(std::span<const std::size_t> relevant_sizes, std::size_t n_items,
                              std::size_t k);

struct RetrievalEval {
  RecallResult result;
  double random_baseline = 0.0;
};

// Indexes the split's images and queries with the split's own captions;
// relevance is "matches every attribute the caption mentions".
RetrievalEval caption_retrieval(const Model& model, const Corpus& corpus, Split split,
                                std::size_t k);

// One report row. k is absent when it does not apply.
struct ReportRow {
  std::string metric;
  std::optional<std::size_t> k;  // kAllExamples is written as "all"
  std::string split;
  std::string mode;
  std::optional<std::size_t> batch_size;
  double value = 0.0;
  std::uint64_t seed = 0;

  bool operator==(const ReportRow&) const = default;
};

// Values are kept at 6 significant digits so reports round-trip exactly.
double round_significant(double value, int digits = 6);
ReportRow make_row(std::string metric, std::optional<std::size_t> k, std::string split,
                   std::string mode, std::optional<std::size_t> batch_size, double value,
                   std::uint64_t seed);

enum class ReportFormat { kJson, kCsv };
ReportFormat parse_report_format(std::string_view name);
ReportFormat report_format_for(const std::filesystem::path& path);

inline constexpr std::string_view kCsvHeader = "metric,k,split,mode,batch_size,value,seed";

std::string format_report(std::span<const ReportRow> rows, ReportFormat format);
std::vector<ReportRow> parse_report(std::string_view text, ReportFormat format);
void write_report(std::span<const ReportRow> rows, const std::filesystem::path& path,
                  ReportFormat format);

// Train split restricted to its first n pairs; other splits unchanged.
Corpus limit_train(const Corpus& corpus, std::size_t n);

// One model per (mode, n) from identical configs, scored zero-shot on test_iid.
std::vector<ReportRow> efficiency_curve(const Corpus& corpus, std::span<const std::size_t> counts,
                                        std::span<const TextMode> modes, const TrainConfig& base);

// steps = budget / N for every N, so each run sees the same number of pairs (±N).
std::size_t sweep_steps(std::size_t budget, std::size_t batch_size);
std::vector<ReportRow> batch_size_sweep(const Corpus& corpus, std::span<const std::size_t> sizes,
                                        std::size_t budget, const TrainConfig& base);

struct TemplateSet {
  std::string name;
  std::vector<PromptTemplate> templates;
};
// contextless "{}", a single engineered template, and the default ensemble.
std::vector<TemplateSet> ablation_template_sets();
std::vector<ReportRow> prompt_ablation(const Model& model, std::span<const std::string> classes,
                                       const LabeledSet& test, std::uint64_t seed);

struct EvalOptions {
  std::uint64_t seed = 7;
  std::size_t recall_k = 10;
  std::vector<std::size_t> shots = {1, 2, 4, 8, 16};
  ProbeConfig probe;
};

// Every metric that needs only a trained model and its corpus.
std::vector<ReportRow> evaluate_model(const Model& model, const Corpus& corpus,
                                      const EvalOptions& options);

}  // namespace clipdesk
