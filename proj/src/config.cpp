#include "clipdesk/config.hpp"

#include <set>

#include "json.hpp"

#include "clipdesk/errors.hpp"

namespace clipdesk {

namespace {

using json = nlohmann::json;

// Reads typed fields from one JSON object and rejects keys nobody asked for.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_unsigned_v<T>) {
        if (!it->is_number_unsigned()) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError("");
      }
      out = it->get<T>();
    } catch (const std::exception&) {
      throw ConfigError(where_ + ": '" + key + "' has the wrong type");
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

json parse(std::string_view text, const char* what) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ConfigError(std::string(what) + ": not valid JSON");
  return j;
}

template <typename T>
std::vector<T> list_of(const json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + ": expected an array");
  std::vector<T> out;
  for (const auto& item : j) {
    if (!item.is_number_unsigned()) throw ConfigError(where + ": expected non-negative integers");
    out.push_back(item.get<T>());
  }
  return out;
}

TrainConfig train_config(const json& j, const std::string& where) {
  TrainConfig c;
  Fields f(j, where);
  f.read("seed", c.seed);
  f.read("batch_size", c.batch_size);
  f.read("steps", c.steps);
  f.read("learning_rate", c.adam.learning_rate);
  f.read("beta1", c.adam.beta1);
  f.read("beta2", c.adam.beta2);
  f.read("epsilon", c.adam.epsilon);
  std::string mode(to_string(c.mode));
  f.read("text_mode", mode);
  c.mode = parse_text_mode(mode);
  if (const json* dims = f.child("dims")) {
    Fields d(*dims, where + ".dims");
    d.read("text_width", c.dims.text_width);
    d.read("hidden_width", c.dims.hidden_width);
    d.read("embed_dim", c.dims.embed_dim);
    d.read("patch", c.dims.patch);
    d.read("image_side", c.dims.image_side);
    d.read("max_tokens", c.dims.max_tokens);
    d.finish();
  }
  f.finish();
  c.validate();
  return c;
}

}  // namespace

CorpusConfig corpus_config_from_json(std::string_view text) {
  const json j = parse(text, "corpus config");
  CorpusConfig c;
  Fields f(j, "corpus config");
  f.read("seed", c.seed);
  f.read("n_train", c.n_train);
  f.read("n_test", c.n_test);
  f.read("side", c.side);
  f.read("noise_sigma", c.shift.noise_sigma);
  f.read("swap_background", c.shift.swap_background);
  if (const json* heldout = f.child("heldout")) {
    if (!heldout->is_array()) throw ConfigError("corpus config: 'heldout' must be an array");
    c.heldout.clear();
    for (const auto& pair : *heldout) {
      if (!pair.is_array() || pair.size() != 2 || !pair[0].is_string() || !pair[1].is_string()) {
        throw ConfigError("corpus config: heldout entries look like [\"shape\", \"color\"]");
      }
      const auto shape = parse_shape(pair[0].get<std::string>());
      const auto color = parse_color(pair[1].get<std::string>());
      if (!shape || !color) throw ConfigError("corpus config: unknown heldout entry " + pair.dump());
      c.heldout.emplace_back(*shape, *color);
    }
  }
  f.finish();
  return c;
}

TrainConfig train_config_from_json(std::string_view text) {
  return train_config(parse(text, "train config"), "train config");
}

EvalConfig eval_config_from_json(std::string_view text) {
  const json j = parse(text, "eval config");
  EvalConfig c;
  Fields f(j, "eval config");
  f.read("seed", c.options.seed);
  f.read("recall_k", c.options.recall_k);
  if (c.options.recall_k < 1) throw ConfigError("eval config: recall_k must be at least 1");
  if (const json* shots = f.child("shots")) c.options.shots = list_of<std::size_t>(*shots, "eval config.shots");
  if (const json* probe = f.child("probe")) {
    Fields p(*probe, "eval config.probe");
    p.read("iterations", c.options.probe.iterations);
    p.read("learning_rate", c.options.probe.learning_rate);
    p.read("lambda", c.options.probe.lambda);
    p.finish();
  }
  if (const json* sweeps = f.child("sweeps")) {
    const std::string where = "eval config.sweeps";
    Fields s(*sweeps, where);
    s.read("enabled", c.sweeps.enabled);
    if (const json* v = s.child("counts")) c.sweeps.counts = list_of<std::size_t>(*v, where + ".counts");
    if (const json* v = s.child("batch_sizes")) {
      c.sweeps.batch_sizes = list_of<std::size_t>(*v, where + ".batch_sizes");
    }
    if (const json* v = s.child("modes")) {
      if (!v->is_array()) throw ConfigError(where + ".modes: expected an array");
      c.sweeps.modes.clear();
      for (const auto& m : *v) {
        if (!m.is_string()) throw ConfigError(where + ".modes: expected strings");
        c.sweeps.modes.push_back(parse_text_mode(m.get<std::string>()));
      }
    }
    s.read("sample_budget", c.sweeps.sample_budget);
    if (const json* v = s.child("train")) c.sweeps.train = train_config(*v, where + ".train");
    s.finish();
  }
  f.finish();
  return c;
}

}  // namespace clipdesk
