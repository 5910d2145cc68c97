#include <csignal>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <pthread.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"

#include "clipdesk/config.hpp"
#include "clipdesk/datagen.hpp"
#include "clipdesk/encoders.hpp"
#include "clipdesk/errors.hpp"
#include "clipdesk/eval.hpp"
#include "clipdesk/index.hpp"
#include "clipdesk/service.hpp"
#include "clipdesk/trainer.hpp"

using namespace clipdesk;

namespace {

struct Options {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out;
  std::string index;
  std::string ckpt;
  std::string data;
  std::string bind = "127.0.0.1:8080";
  std::int64_t k = 10;
  std::string query;
  std::uint64_t id = 0;
  std::vector<std::string> classes;
  std::vector<std::string> templates;
  std::string report;
  std::string format;
  bool sweeps = false;
};

void gen_data(const Options& o) {
  CorpusConfig config = o.config.empty() ? CorpusConfig{} : corpus_config_from_json(read_file(o.config));
  if (o.seed) config.seed = *o.seed;
  const Corpus corpus = generate_corpus(config);
  write_corpus(corpus, o.out);
  spdlog::info("wrote {} items to {}", corpus.manifest.entries.size(), o.out);
}

void train_model(const Options& o) {
  TrainConfig config = o.config.empty() ? TrainConfig{} : train_config_from_json(read_file(o.config));
  if (o.seed) config.seed = *o.seed;
  const Corpus corpus = load_corpus(o.data);
  const TrainResult result = train(config, corpus);
  save_checkpoint(result.model, o.out);
  if (!o.report.empty()) write_file(o.report, train_report_json(result.report));
  spdlog::info("trained {} steps, final loss {:.6f}, wrote {}", config.steps,
               result.report.loss_trace.back(), o.out);
}

void build_index(const Options& o) {
  const Model model = load_checkpoint(o.ckpt);
  Index index(static_cast<std::uint32_t>(model.params.dims.embed_dim));
  const std::size_t n = build_from_corpus(model.params, read_manifest(o.data), o.data, index);
  index.save(o.out);
  spdlog::info("indexed {} items into {}", n, o.out);
}

void search(const Options& o) {
  const Model model = load_checkpoint(o.ckpt);
  const Index index = Index::load(o.index);
  std::cout << search_body(search_items(model, index, o.query, o.k)) << "\n";
}

void classify_cmd(const Options& o) {
  const Model model = load_checkpoint(o.ckpt);
  const Index index = Index::load(o.index);
  const auto templates = o.templates.empty() ? default_templates() : make_templates(o.templates);
  std::cout << classify_body(o.classes, classify_item(model, index, o.id, o.classes, templates)) << "\n";
}

void eval_cmd(const Options& o) {
  EvalConfig config = o.config.empty() ? EvalConfig{} : eval_config_from_json(read_file(o.config));
  if (o.seed) {
    config.options.seed = *o.seed;
    config.sweeps.train.seed = *o.seed;
  }
  if (o.sweeps) config.sweeps.enabled = true;
  const ReportFormat format = o.format.empty() ? report_format_for(o.out) : parse_report_format(o.format);
  const Model model = load_checkpoint(o.ckpt);
  const Corpus corpus = load_corpus(o.data);
  std::vector<ReportRow> rows = evaluate_model(model, corpus, config.options);
  if (config.sweeps.enabled) {
    for (auto& r : efficiency_curve(corpus, config.sweeps.counts, config.sweeps.modes, config.sweeps.train)) {
      rows.push_back(std::move(r));
    }
    for (auto& r : batch_size_sweep(corpus, config.sweeps.batch_sizes, config.sweeps.sample_budget,
                                    config.sweeps.train)) {
      rows.push_back(std::move(r));
    }
  }
  write_report(rows, o.out, format);
  spdlog::info("wrote {} report rows to {}", rows.size(), o.out);
}

void serve(const Options& o) {
  const auto [host, port] = parse_bind_address(o.bind);
  const AppState state = AppState::load(o.ckpt, o.index, o.data);

  // Interrupts are collected by this thread; the server threads never see them.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  HttpService service(state);
  const int bound = service.bind(host, port);
  spdlog::info("listening on {}:{}", host, bound);
  std::thread runner([&] {
    service.run();
    kill(getpid(), SIGTERM);
  });
  int received = 0;
  sigwait(&signals, &received);
  spdlog::info("shutting down");
  service.stop();
  runner.join();
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  Options o;
  CLI::App app{"clipdesk: contrastive text and image search on a synthetic photo corpus"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus");
  gen->add_option("--out", o.out, "Output directory")->required();
  gen->add_option("--seed", o.seed, "Corpus seed");
  gen->add_option("--config", o.config, "Corpus config JSON");

  auto* tr = app.add_subcommand("train", "Train a model on a corpus");
  tr->add_option("--data", o.data, "Corpus directory")->required();
  tr->add_option("--out", o.out, "Checkpoint path")->required();
  tr->add_option("--seed", o.seed, "Initialization and shuffle seed");
  tr->add_option("--config", o.config, "Train config JSON");
  tr->add_option("--report", o.report, "Optional training report JSON path");

  auto* bi = app.add_subcommand("build-index", "Embed every corpus image into an index file");
  bi->add_option("--ckpt", o.ckpt, "Checkpoint path")->required();
  bi->add_option("--data", o.data, "Corpus directory")->required();
  bi->add_option("--out", o.out, "Index path")->required();

  auto* se = app.add_subcommand("search", "Text query against an index");
  se->add_option("--index", o.index, "Index path")->required();
  se->add_option("--ckpt", o.ckpt, "Checkpoint path")->required();
  se->add_option("--query", o.query, "Query text")->required();
  se->add_option("--k", o.k, "Number of hits (1 to 100)");

  auto* cl = app.add_subcommand("classify", "Zero-shot classification of an indexed item");
  cl->add_option("--index", o.index, "Index path")->required();
  cl->add_option("--ckpt", o.ckpt, "Checkpoint path")->required();
  cl->add_option("--id", o.id, "Item id")->required();
  cl->add_option("--class", o.classes, "Class name, repeatable")->required();
  cl->add_option("--template", o.templates, "Prompt template with one {}, repeatable");

  auto* ev = app.add_subcommand("eval", "Write the evaluation report");
  ev->add_option("--ckpt", o.ckpt, "Checkpoint path")->required();
  ev->add_option("--data", o.data, "Corpus directory")->required();
  ev->add_option("--out", o.out, "Report path (.json or .csv)")->required();
  ev->add_option("--seed", o.seed, "Probe sampling and sweep seed");
  ev->add_option("--config", o.config, "Eval config JSON");
  ev->add_option("--format", o.format, "json or csv; default from the file extension");
  ev->add_flag("--sweeps", o.sweeps, "Also run the training-size and batch-size sweeps");

  auto* sv = app.add_subcommand("serve", "Serve search, classification and items over HTTP");
  sv->add_option("--ckpt", o.ckpt, "Checkpoint path")->required();
  sv->add_option("--index", o.index, "Index path")->required();
  sv->add_option("--data", o.data, "Corpus directory")->required();
  sv->add_option("--bind", o.bind, "host:port");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) gen_data(o);
    if (tr->parsed()) train_model(o);
    if (bi->parsed()) build_index(o);
    if (se->parsed()) search(o);
    if (cl->parsed()) classify_cmd(o);
    if (ev->parsed()) eval_cmd(o);
    if (sv->parsed()) serve(o);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  return 0;
}
