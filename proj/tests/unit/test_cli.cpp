#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>

#include "clipdesk/errors.hpp"
#include "clipdesk/image.hpp"
#include "clipdesk/index.hpp"
#include "clipdesk/service.hpp"
#include "clipdesk/trainer.hpp"

using namespace clipdesk;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
};

std::string quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

Run run(const std::vector<std::string>& args) {
  std::string cmd = quote(CLIPDESK_CLI_PATH);
  for (const auto& a : args) cmd += " " + quote(a);
  cmd += " 2>/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe);
  std::string out;
  char buf[4096];
  while (std::size_t n = fread(buf, 1, sizeof buf, pipe)) out.append(buf, n);
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

const fs::path& work() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "clipdesk_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    write_file(d / "corpus.json", R"({"n_train": 200, "n_test": 16})");
    write_file(d / "train.json", R"({"steps": 1, "batch_size": 200})");
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("usage errors exit 1") {
  CHECK(run({}).code == 1);
  CHECK(run({"frobnicate"}).code == 1);
  CHECK(run({"gen-data"}).code == 1);
  CHECK(run({"search", "--index", "x", "--ckpt", "y", "--query", "q", "--k", "many"}).code == 1);
  CHECK(run({"gen-data", "--out", "x", "--nonsense"}).code == 1);
  CHECK(run({"--help"}).code == 0);
}

TEST_CASE("runtime errors exit 2") {
  const fs::path w = work();
  CHECK(run({"train", "--data", (w / "missing").string(), "--out", (w / "m.ckpt").string()}).code == 2);
  write_file(w / "broken.json", "{\"n_train\": -1}");
  CHECK(run({"gen-data", "--out", (w / "d").string(), "--config", (w / "broken.json").string()}).code == 2);
}

TEST_CASE("pipeline") {
  const fs::path w = work();
  const auto data = (w / "data").string(), data2 = (w / "data2").string();
  REQUIRE(run({"gen-data", "--seed", "7", "--out", data, "--config", (w / "corpus.json").string()}).code == 0);
  REQUIRE(run({"gen-data", "--seed", "7", "--out", data2, "--config", (w / "corpus.json").string()}).code == 0);
  CHECK(read_file(fs::path(data) / kManifestFile) == read_file(fs::path(data2) / kManifestFile));
  REQUIRE(run({"gen-data", "--seed", "8", "--out", data2, "--config", (w / "corpus.json").string()}).code == 0);
  CHECK(read_file(fs::path(data) / kManifestFile) != read_file(fs::path(data2) / kManifestFile));

  // one training step from the CLI equals one in-process train_step
  const auto ckpt = (w / "m.ckpt").string();
  REQUIRE(run({"train", "--data", data, "--out", ckpt, "--config", (w / "train.json").string()}).code == 0);
  const Corpus corpus = load_corpus(data);
  TrainConfig config;
  config.steps = 1;
  config.batch_size = 200;
  const Model expected = train(config, corpus).model;
  CHECK(read_file(ckpt) == serialize_checkpoint(expected));

  const auto index = (w / "idx.bin").string();
  REQUIRE(run({"build-index", "--ckpt", ckpt, "--data", data, "--out", index}).code == 0);
  const Index idx = Index::load(index);
  CHECK(idx.size() == corpus.manifest.entries.size());

  const Run hits = run({"search", "--index", index, "--ckpt", ckpt, "--query", "a red circle", "--k", "5"});
  CHECK(hits.code == 0);
  CHECK(hits.out == search_body(search_items(expected, idx, "a red circle", 5)) + "\n");
  CHECK(run({"search", "--index", index, "--ckpt", ckpt, "--query", "", "--k", "5"}).code == 2);
  CHECK(run({"search", "--index", index, "--ckpt", ckpt, "--query", "red", "--k", "0"}).code == 2);

  const Run cls = run({"classify", "--index", index, "--ckpt", ckpt, "--id", "4", "--class", "red circle",
                       "--class", "blue square", "--template", "a {}"});
  CHECK(cls.code == 0);
  const std::vector<std::string> classes = {"red circle", "blue square"};
  const std::vector<PromptTemplate> templates = {PromptTemplate("a {}")};
  CHECK(cls.out == classify_body(classes, classify_item(expected, idx, 4, classes, templates)) + "\n");

  write_file(w / "eval.json", R"({"shots": [1], "probe": {"iterations": 5}})");
  const auto report = (w / "r.csv").string();
  REQUIRE(run({"eval", "--ckpt", ckpt, "--data", data, "--out", report, "--config", (w / "eval.json").string()}).code == 0);
  const std::string csv = read_file(report);
  CHECK(csv.rfind("metric,k,split,mode,batch_size,value,seed\n", 0) == 0);
  CHECK(run({"eval", "--ckpt", ckpt, "--data", data, "--out", report, "--format", "xml"}).code == 2);
}
