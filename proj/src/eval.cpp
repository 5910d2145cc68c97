#include "clipdesk/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>

#include "json.hpp"

#include "clipdesk/errors.hpp"
#include "clipdesk/index.hpp"

namespace clipdesk {

namespace {

constexpr std::string_view kAllToken = "all";

std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void check_field(const std::string& text, const char* name) {
  if (text.find_first_of(",\"\r\n") != std::string::npos) {
    throw ContractError(std::string("report ") + name + " '" + text +
                        "' contains a comma, quote or line break");
  }
}

std::uint64_t parse_u64(const std::string& text, const char* what) {
  if (text.empty() || text.find_first_not_of("0123456789") != std::string::npos) {
    throw FormatError(std::string("report: bad ") + what + " '" + text + "'");
  }
  return std::stoull(text);
}

double parse_double(const std::string& text) {
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size() || !std::isfinite(v)) {
    throw FormatError("report: bad value '" + text + "'");
  }
  return v;
}

nlohmann::ordered_json row_json(const ReportRow& r) {
  nlohmann::ordered_json j;
  j["metric"] = r.metric;
  if (!r.k) {
    j["k"] = nullptr;
  } else if (*r.k == kAllExamples) {
    j["k"] = kAllToken;
  } else {
    j["k"] = *r.k;
  }
  j["split"] = r.split;
  j["mode"] = r.mode;
  j["batch_size"] = r.batch_size ? nlohmann::ordered_json(*r.batch_size) : nlohmann::ordered_json(nullptr);
  j["value"] = r.value;
  j["seed"] = r.seed;
  return j;
}

ReportRow row_from_json(const nlohmann::json& j) {
  ReportRow r;
  r.metric = j.at("metric").get<std::string>();
  const auto& k = j.at("k");
  if (k.is_string()) {
    if (k.get<std::string>() != kAllToken) throw FormatError("report: bad k");
    r.k = kAllExamples;
  } else if (!k.is_null()) {
    r.k = k.get<std::size_t>();
  }
  r.split = j.at("split").get<std::string>();
  r.mode = j.at("mode").get<std::string>();
  if (!j.at("batch_size").is_null()) r.batch_size = j.at("batch_size").get<std::size_t>();
  r.value = j.at("value").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  return r;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

double zero_shot_on(const Model& model, const Corpus& corpus, Split split,
                    std::span<const std::string> classes, std::span<const PromptTemplate> templates) {
  const LabeledSet set = embed_split(model, corpus, split, classes, true);
  const auto class_embs = build_class_embeddings(model, classes, templates);
  return zero_shot_accuracy(set, class_embs, model.params.log_scale.data[0]);
}

}  // namespace

RecallResult recall_at_k(std::span<const std::vector<std::uint64_t>> ranked,
                         std::span<const std::set<std::uint64_t>> relevant, std::size_t k) {
  if (k < 1) throw OutOfRangeError("recall_at_k: k must be at least 1", static_cast<std::int64_t>(k));
  if (ranked.size() != relevant.size()) {
    throw ShapeError("recall_at_k: " + std::to_string(ranked.size()) + " rankings for " +
                     std::to_string(relevant.size()) + " relevance sets");
  }
  RecallResult r;
  double total = 0.0;
  for (std::size_t q = 0; q < ranked.size(); ++q) {
    if (relevant[q].empty()) {
      ++r.excluded;
      continue;
    }
    const std::size_t depth = std::min(k, ranked[q].size());
    std::size_t found = 0;
    for (std::size_t i = 0; i < depth; ++i) found += relevant[q].count(ranked[q][i]);
    total += static_cast<double>(found) / static_cast<double>(std::min(k, relevant[q].size()));
    ++r.evaluated;
  }
  r.recall = r.evaluated ? total / static_cast<double>(r.evaluated) : 0.0;
  return r;
}

double random_recall_baseline(std::span<const std::size_t> relevant_sizes, std::size_t n_items,
                              std::size_t k) {
  if (k < 1) throw OutOfRangeError("baseline: k must be at least 1", static_cast<std::int64_t>(k));
  const double depth = static_cast<double>(std::min(k, n_items));
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t r : relevant_sizes) {
    if (r == 0) continue;
    if (r > n_items) throw ContractError("baseline: relevant set larger than the collection");
    total += depth * static_cast<double>(r) /
             (static_cast<double>(n_items) * static_cast<double>(std::min(k, r)));
    ++counted;
  }
  return counted ? total / static_cast<double>(counted) : 0.0;
}

RetrievalEval caption_retrieval(const Model& model, const Corpus& corpus, Split split,
                                std::size_t k) {
  const auto& entries = corpus.manifest.entries;
  Index index(static_cast<std::uint32_t>(model.params.dims.embed_dim));
  std::vector<Image> images;
  std::vector<std::size_t> members;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].split != split) continue;
    members.push_back(i);
    images.push_back(corpus.images.at(i));
  }
  if (members.empty()) throw EmptyInputError("caption_retrieval: split is empty");
  const Tensor embs = encode_images(model.params, images);
  for (std::size_t m = 0; m < members.size(); ++m) {
    const auto& e = entries[members[m]];
    index.add(e.id, {embs.row(m), embs.cols()}, e.caption, e.path);
  }

  std::vector<std::vector<std::uint64_t>> ranked;
  std::vector<std::set<std::uint64_t>> relevant_sets;
  std::vector<std::size_t> sizes;
  for (std::size_t q : members) {
    const auto attrs = parse_caption(entries[q].caption);
    if (!attrs) throw FormatError("caption '" + entries[q].caption + "' does not parse");
    std::set<std::uint64_t> rel;
    for (std::size_t m : members) {
      if (relevant(*attrs, entries[m].spec)) rel.insert(entries[m].id);
    }
    std::vector<std::uint64_t> ids;
    for (const auto& hit : index.search(encode_query(model, entries[q].caption), k)) ids.push_back(hit.id);
    sizes.push_back(rel.size());
    ranked.push_back(std::move(ids));
    relevant_sets.push_back(std::move(rel));
  }
  RetrievalEval out;
  out.result = recall_at_k(ranked, relevant_sets, k);
  out.random_baseline = random_recall_baseline(sizes, members.size(), k);
  return out;
}

double round_significant(double value, int digits) {
  if (!std::isfinite(value)) throw ContractError("report values must be finite");
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, value);
  return std::strtod(buf, nullptr);
}

ReportRow make_row(std::string metric, std::optional<std::size_t> k, std::string split,
                   std::string mode, std::optional<std::size_t> batch_size, double value,
                   std::uint64_t seed) {
  return ReportRow{std::move(metric), k,     std::move(split), std::move(mode),
                   batch_size,        round_significant(value), seed};
}

ReportFormat parse_report_format(std::string_view name) {
  if (name == "json") return ReportFormat::kJson;
  if (name == "csv") return ReportFormat::kCsv;
  throw ConfigError("unknown report format '" + std::string(name) + "'");
}

ReportFormat report_format_for(const std::filesystem::path& path) {
  return path.extension() == ".csv" ? ReportFormat::kCsv : ReportFormat::kJson;
}

std::string format_report(std::span<const ReportRow> rows, ReportFormat format) {
  for (const auto& r : rows) {
    check_field(r.metric, "metric");
    check_field(r.split, "split");
    check_field(r.mode, "mode");
    if (!std::isfinite(r.value)) throw ContractError("report values must be finite");
  }
  if (format == ReportFormat::kJson) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& r : rows) arr.push_back(row_json(r));
    return arr.dump(2) + "\n";
  }
  std::string out(kCsvHeader);
  out += '\n';
  for (const auto& r : rows) {
    out += r.metric + ',';
    if (r.k) out += *r.k == kAllExamples ? std::string(kAllToken) : std::to_string(*r.k);
    out += ',' + r.split + ',' + r.mode + ',';
    if (r.batch_size) out += std::to_string(*r.batch_size);
    out += ',' + format_value(r.value) + ',' + std::to_string(r.seed) + '\n';
  }
  return out;
}

std::vector<ReportRow> parse_report(std::string_view text, ReportFormat format) {
  std::vector<ReportRow> rows;
  if (format == ReportFormat::kJson) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("report: ") + e.what());
    }
    if (!j.is_array()) throw FormatError("report: expected a JSON array");
    try {
      for (const auto& row : j) rows.push_back(row_from_json(row));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("report: ") + e.what());
    }
    return rows;
  }
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw FormatError("report: missing CSV header");
  while (std::getline(in, line)) {
    const auto f = split_csv_line(line);
    if (f.size() != 7) {
      throw FormatError("report: expected 7 fields, got " + std::to_string(f.size()) + " in '" +
                        line + "'");
    }
    ReportRow r;
    r.metric = f[0];
    if (f[1] == kAllToken) {
      r.k = kAllExamples;
    } else if (!f[1].empty()) {
      r.k = parse_u64(f[1], "k");
    }
    r.split = f[2];
    r.mode = f[3];
    if (!f[4].empty()) r.batch_size = parse_u64(f[4], "batch_size");
    r.value = parse_double(f[5]);
    r.seed = parse_u64(f[6], "seed");
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_report(std::span<const ReportRow> rows, const std::filesystem::path& path,
                  ReportFormat format) {
  write_file(path, format_report(rows, format));
}

Corpus limit_train(const Corpus& corpus, std::size_t n) {
  Corpus out;
  out.manifest.config = corpus.manifest.config;
  std::size_t kept = 0;
  for (std::size_t i = 0; i < corpus.manifest.entries.size(); ++i) {
    const auto& e = corpus.manifest.entries[i];
    if (e.split == Split::kTrain) {
      if (kept == n) continue;
      ++kept;
    }
    out.manifest.entries.push_back(e);
    out.images.push_back(corpus.images.at(i));
  }
  if (kept < n) {
    throw InsufficientDataError("train split has " + std::to_string(kept) + " pairs, " +
                                std::to_string(n) + " requested");
  }
  return out;
}

std::vector<ReportRow> efficiency_curve(const Corpus& corpus, std::span<const std::size_t> counts,
                                        std::span<const TextMode> modes, const TrainConfig& base) {
  const auto classes = corpus_classes(corpus.manifest, Split::kTrain);
  const auto templates = default_templates();
  std::vector<ReportRow> rows;
  for (TextMode mode : modes) {
    for (std::size_t n : counts) {
      TrainConfig config = base;
      config.mode = mode;
      const TrainResult run = train(config, limit_train(corpus, n));
      const double acc = zero_shot_on(run.model, corpus, Split::kTestIid, classes, templates);
      rows.push_back(make_row("efficiency_zero_shot_acc", n, "test_iid", std::string(to_string(mode)),
                              config.batch_size, acc, config.seed));
    }
  }
  return rows;
}

std::size_t sweep_steps(std::size_t budget, std::size_t batch_size) {
  if (batch_size == 0 || budget < batch_size) {
    throw ConfigError("sample budget " + std::to_string(budget) +
                      " is smaller than batch size " + std::to_string(batch_size));
  }
  return budget / batch_size;
}

std::vector<ReportRow> batch_size_sweep(const Corpus& corpus, std::span<const std::size_t> sizes,
                                        std::size_t budget, const TrainConfig& base) {
  const auto classes = corpus_classes(corpus.manifest, Split::kTrain);
  const auto templates = default_templates();
  std::vector<ReportRow> rows;
  for (std::size_t n : sizes) {
    TrainConfig config = base;
    config.batch_size = n;
    config.steps = sweep_steps(budget, n);
    const TrainResult run = train(config, corpus);
    const double acc = zero_shot_on(run.model, corpus, Split::kTestIid, classes, templates);
    rows.push_back(make_row("batch_sweep_zero_shot_acc", std::nullopt, "test_iid",
                            std::string(to_string(config.mode)), n, acc, config.seed));
  }
  return rows;
}

std::vector<TemplateSet> ablation_template_sets() {
  return {{"contextless", {PromptTemplate("{}")}},
          {"single", {PromptTemplate("a photo of a {}")}},
          {"ensemble", default_templates()}};
}

std::vector<ReportRow> prompt_ablation(const Model& model, std::span<const std::string> classes,
                                       const LabeledSet& test, std::uint64_t seed) {
  std::vector<ReportRow> rows;
  for (const auto& set : ablation_template_sets()) {
    const auto class_embs = build_class_embeddings(model, classes, set.templates);
    const double acc = zero_shot_accuracy(test, class_embs, model.params.log_scale.data[0]);
    rows.push_back(make_row("prompt_ablation", std::nullopt, "test_iid", set.name, std::nullopt, acc, seed));
  }
  return rows;
}

std::vector<ReportRow> evaluate_model(const Model& model, const Corpus& corpus,
                                      const EvalOptions& options) {
  const std::uint64_t seed = options.seed;
  const auto templates = default_templates();
  std::vector<ReportRow> rows;

  EvalData data;
  data.classes = corpus_classes(corpus.manifest, Split::kTrain);
  data.train = embed_split(model, corpus, Split::kTrain, data.classes);
  // test items of combos never seen in training have no class to be scored against
  data.test = embed_split(model, corpus, Split::kTestIid, data.classes, true);
  const LabeledSet shifted = embed_split(model, corpus, Split::kTestShifted, data.classes, true);

  rows.push_back(make_row("chance", std::nullopt, "test_iid", "uniform", std::nullopt,
                          1.0 / static_cast<double>(data.classes.size()), seed));
  for (const auto& p : few_shot_curve(model, data, templates, options.shots, seed, options.probe)) {
    if (p.k == 0) {
      rows.push_back(make_row("zero_shot_acc", 0, "test_iid", "ensemble", std::nullopt, p.accuracy, seed));
    } else {
      rows.push_back(make_row("probe_acc", p.k, "test_iid", "probe", std::nullopt, p.accuracy, seed));
    }
  }

  const ProbeModel supervised = train_probe(data.train, data.classes, kAllExamples, seed, options.probe);
  const ShiftGap probe_gap = probe_shift_gap(supervised, data.test, shifted);
  const ShiftGap zs_gap = shift_gap(model, data.classes, templates, data.test, shifted);
  rows.push_back(make_row("probe_acc", kAllExamples, "test_iid", "probe", std::nullopt, probe_gap.acc_iid, seed));
  rows.push_back(make_row("zero_shot_acc", 0, "test_shifted", "ensemble", std::nullopt, zs_gap.acc_shifted, seed));
  rows.push_back(make_row("probe_acc", kAllExamples, "test_shifted", "probe", std::nullopt, probe_gap.acc_shifted, seed));
  rows.push_back(make_row("shift_gap", 0, "test_shifted", "zero_shot", std::nullopt, zs_gap.gap, seed));
  rows.push_back(make_row("shift_gap", kAllExamples, "test_shifted", "probe", std::nullopt, probe_gap.gap, seed));

  if (corpus.manifest.count(Split::kTestHeldout) > 0) {
    const auto heldout_classes = corpus_classes(corpus.manifest, Split::kTestHeldout);
    const double acc = zero_shot_on(model, corpus, Split::kTestHeldout, heldout_classes, templates);
    rows.push_back(make_row("zero_shot_acc", 0, "test_heldout", "ensemble", std::nullopt, acc, seed));
    rows.push_back(make_row("chance", std::nullopt, "test_heldout", "uniform", std::nullopt,
                            1.0 / static_cast<double>(heldout_classes.size()), seed));
  }

  for (auto& r : prompt_ablation(model, data.classes, data.test, seed)) rows.push_back(std::move(r));

  const RetrievalEval retrieval = caption_retrieval(model, corpus, Split::kTestIid, options.recall_k);
  rows.push_back(make_row("recall_at_k", options.recall_k, "test_iid", "text_to_image", std::nullopt,
                          retrieval.result.recall, seed));
  rows.push_back(make_row("recall_random_baseline", options.recall_k, "test_iid", "text_to_image",
                          std::nullopt, retrieval.random_baseline, seed));
  rows.push_back(make_row("recall_excluded_queries", options.recall_k, "test_iid", "text_to_image",
                          std::nullopt, static_cast<double>(retrieval.result.excluded), seed));
  return rows;
}

}  // namespace clipdesk
