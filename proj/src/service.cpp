#include "clipdesk/service.hpp"

#include <charconv>
#include <cstdlib>

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

// Room for a burst of simultaneous clients on a small thread pool.
#define CPPHTTPLIB_LISTEN_BACKLOG 128
#include "httplib.h"
#include "json.hpp"

#include "clipdesk/errors.hpp"
#include "clipdesk/eval.hpp"
#include "clipdesk/image.hpp"

namespace clipdesk {

namespace {

using json = nlohmann::ordered_json;

constexpr std::int64_t kDefaultK = 10;

// Signals a request that is well-formed HTTP but violates the JSON contract.
struct RequestError {
  int status;
  std::string code;
  std::string detail;
};

HttpResponse json_response(int status, const json& body) { return {status, body.dump()}; }

HttpResponse error_response(int status, std::string_view code, std::string_view detail) {
  json body;
  body["error"] = code;
  body["detail"] = detail;
  return json_response(status, body);
}

json parse_body(std::string_view body) {
  json j = json::parse(body, nullptr, false);
  if (j.is_discarded()) throw RequestError{400, "bad_request", "body is not valid JSON"};
  if (!j.is_object()) throw RequestError{400, "bad_request", "body must be a JSON object"};
  return j;
}

const json& require(const json& j, const char* field) {
  auto it = j.find(field);
  if (it == j.end()) throw RequestError{400, "bad_request", std::string("missing field '") + field + "'"};
  return *it;
}

std::vector<std::string> string_list(const json& j, const char* field) {
  if (!j.is_array()) throw RequestError{400, "bad_request", std::string("'") + field + "' must be an array"};
  std::vector<std::string> out;
  for (const auto& item : j) {
    if (!item.is_string()) {
      throw RequestError{400, "bad_request", std::string("'") + field + "' must hold strings"};
    }
    out.push_back(item.get<std::string>());
  }
  return out;
}

std::optional<std::uint64_t> parse_id(std::string_view text) {
  std::uint64_t id = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, id);
  if (text.empty() || ec != std::errc() || ptr != end) return std::nullopt;
  return id;
}

HttpResponse health(const AppState& state) {
  json body;
  body["status"] = "ok";
  body["items"] = state.index().size();
  body["dim"] = state.index().dim();
  return json_response(200, body);
}

HttpResponse search(const AppState& state, std::string_view raw) {
  const json req = parse_body(raw);
  const json& query = require(req, "query");
  if (!query.is_string()) throw RequestError{400, "bad_request", "'query' must be a string"};
  std::int64_t k = kDefaultK;
  if (auto it = req.find("k"); it != req.end()) {
    if (it->is_number_unsigned() && it->get<std::uint64_t>() > kMaxSearchK) {
      throw RequestError{400, "k_out_of_range", "k must be between 1 and 100"};
    }
    if (!it->is_number_integer()) throw RequestError{400, "bad_request", "'k' must be an integer"};
    k = it->get<std::int64_t>();
  }
  std::vector<SearchHit> hits;
  try {
    hits = search_items(state, query.get<std::string>(), k);
  } catch (const OutOfRangeError& e) {
    throw RequestError{400, "k_out_of_range", e.what()};
  } catch (const EmptyInputError& e) {
    throw RequestError{400, "empty_query", e.what()};
  }
  return {200, search_body(hits)};
}

HttpResponse classify(const AppState& state, std::string_view raw) {
  const json req = parse_body(raw);
  const json& id = require(req, "id");
  if (!id.is_number_unsigned()) {
    throw RequestError{400, "bad_request", "'id' must be a non-negative integer"};
  }
  const auto classes = string_list(require(req, "classes"), "classes");
  std::vector<PromptTemplate> templates = default_templates();
  if (auto it = req.find("templates"); it != req.end()) {
    try {
      templates = make_templates(string_list(*it, "templates"));
    } catch (const ConfigError& e) {
      throw RequestError{400, "bad_template", e.what()};
    }
    if (templates.empty()) throw RequestError{400, "bad_template", "template list is empty"};
  }
  Classification result;
  try {
    result = classify_item(state, id.get<std::uint64_t>(), classes, templates);
  } catch (const OutOfRangeError& e) {
    throw RequestError{404, "not_found", e.what()};
  } catch (const EmptyInputError& e) {
    throw RequestError{400, classes.empty() ? "empty_classes" : "bad_request", e.what()};
  }
  return {200, classify_body(classes, result)};
}

const ManifestEntry& item_entry(const AppState& state, std::string_view id_text) {
  const auto id = parse_id(id_text);
  if (!id || !state.index().contains(*id)) {
    throw RequestError{404, "not_found", "no item '" + std::string(id_text) + "'"};
  }
  return state.entry(*id);
}

HttpResponse item(const AppState& state, std::string_view id_text) {
  const ManifestEntry& e = item_entry(state, id_text);
  RawRaster raster;
  try {
    raster = item_raster(state, e.id);
  } catch (const Error& err) {
    throw RequestError{500, "io_error", err.what()};
  }
  json body;
  body["id"] = e.id;
  body["width"] = raster.width;
  body["height"] = raster.height;
  body["rgb_base64"] =
      httplib::detail::base64_encode(std::string(raster.pixels.begin(), raster.pixels.end()));
  body["caption"] = e.caption;
  body["split"] = to_string(e.split);
  return json_response(200, body);
}

HttpResponse item_meta(const AppState& state, std::string_view id_text) {
  const ManifestEntry& e = item_entry(state, id_text);
  json spec;
  spec["shape"] = to_string(e.spec.shape);
  spec["color"] = to_string(e.spec.color);
  spec["size"] = to_string(e.spec.size);
  spec["background"] = to_string(e.spec.background);
  spec["dx"] = e.spec.dx;
  spec["dy"] = e.spec.dy;
  spec["seed"] = e.spec.seed;
  json body;
  body["id"] = e.id;
  body["path"] = e.path;
  body["caption"] = e.caption;
  body["split"] = to_string(e.split);
  body["spec"] = std::move(spec);
  return json_response(200, body);
}

HttpResponse dispatch(const AppState& state, std::string_view method, std::string_view path,
                      std::string_view body) {
  auto only = [&](std::string_view allowed) {
    if (method != allowed) {
      throw RequestError{405, "method_not_allowed", std::string(path) + " accepts " + std::string(allowed)};
    }
  };
  if (path == "/health") {
    only("GET");
    return health(state);
  }
  if (path == "/search") {
    only("POST");
    return search(state, body);
  }
  if (path == "/classify") {
    only("POST");
    return classify(state, body);
  }
  constexpr std::string_view kItems = "/items/";
  constexpr std::string_view kMeta = "/meta";
  if (path.starts_with(kItems)) {
    std::string_view rest = path.substr(kItems.size());
    if (rest.ends_with(kMeta)) {
      only("GET");
      return item_meta(state, rest.substr(0, rest.size() - kMeta.size()));
    }
    if (rest.find('/') == std::string_view::npos) {
      only("GET");
      return item(state, rest);
    }
  }
  throw RequestError{404, "not_found", "no route for " + std::string(path)};
}

}  // namespace

std::string search_body(std::span<const SearchHit> hits) {
  json body;
  body["hits"] = json::array();
  for (const auto& h : hits) {
    json hit;
    hit["id"] = h.id;
    hit["score"] = round_significant(h.score, kScoreDigits);
    hit["caption"] = h.caption;
    body["hits"].push_back(std::move(hit));
  }
  return body.dump();
}

std::string classify_body(std::span<const std::string> classes, const Classification& result) {
  json body;
  body["probs"] = json::array();
  for (std::size_t i = 0; i < classes.size(); ++i) {
    json row;
    row["class"] = classes[i];
    row["p"] = result.probs[i];
    body["probs"].push_back(std::move(row));
  }
  body["argmax"] = classes[result.argmax];
  return body.dump();
}

AppState::AppState(Model model, Index index, CorpusManifest manifest, std::filesystem::path data_dir)
    : model_(std::move(model)),
      index_(std::move(index)),
      manifest_(std::move(manifest)),
      data_dir_(std::move(data_dir)) {
  if (index_.dim() != model_.params.dims.embed_dim) {
    throw ContractError("index dimension " + std::to_string(index_.dim()) +
                        " differs from model embedding size " +
                        std::to_string(model_.params.dims.embed_dim));
  }
  for (std::size_t i = 0; i < manifest_.entries.size(); ++i) entries_.emplace(manifest_.entries[i].id, i);
  for (const auto& rec : index_.records()) {
    if (!entries_.count(rec.id)) {
      throw ContractError("indexed id " + std::to_string(rec.id) + " is not in the manifest");
    }
  }
}

AppState AppState::load(const std::filesystem::path& ckpt, const std::filesystem::path& index,
                        const std::filesystem::path& data_dir) {
  return AppState(load_checkpoint(ckpt), Index::load(index), read_manifest(data_dir), data_dir);
}

const ManifestEntry& AppState::entry(std::uint64_t id) const {
  auto it = entries_.find(id);
  if (it == entries_.end() || !index_.contains(id)) {
    throw OutOfRangeError("unknown item " + std::to_string(id), static_cast<std::int64_t>(id));
  }
  return manifest_.entries[it->second];
}

std::vector<SearchHit> search_items(const Model& model, const Index& index, std::string_view query,
                                    std::int64_t k) {
  if (k < 1 || k > static_cast<std::int64_t>(kMaxSearchK)) {
    throw OutOfRangeError("k must be between 1 and 100, got " + std::to_string(k), k);
  }
  return index.search(encode_query(model, query), static_cast<std::size_t>(k));
}

std::vector<SearchHit> search_items(const AppState& state, std::string_view query, std::int64_t k) {
  return search_items(state.model(), state.index(), query, k);
}

Classification classify_item(const Model& model, const Index& index, std::uint64_t id,
                             std::span<const std::string> classes,
                             std::span<const PromptTemplate> templates) {
  if (!index.contains(id)) {
    throw OutOfRangeError("unknown item " + std::to_string(id), static_cast<std::int64_t>(id));
  }
  if (classes.empty()) throw EmptyInputError("classify: no classes given");
  const auto class_embs = build_class_embeddings(model, classes, templates);
  return classify(index.vector(id), class_embs, model.params.log_scale.data[0]);
}

Classification classify_item(const AppState& state, std::uint64_t id,
                             std::span<const std::string> classes,
                             std::span<const PromptTemplate> templates) {
  return classify_item(state.model(), state.index(), id, classes, templates);
}

RawRaster item_raster(const AppState& state, std::uint64_t id) {
  return read_ppm_raw(state.data_dir() / state.entry(id).path);
}

HttpResponse handle_request(const AppState& state, std::string_view method, std::string_view path,
                            std::string_view body) {
  try {
    return dispatch(state, method, path, body);
  } catch (const RequestError& e) {
    return error_response(e.status, e.code, e.detail);
  } catch (const std::exception& e) {
    spdlog::error("{} {} failed: {}", method, path, e.what());
    return error_response(500, "internal", e.what());
  }
}

void configure_logging() {
  auto logger = spdlog::get("clipdesk");
  if (!logger) logger = spdlog::stderr_logger_mt("clipdesk");
  spdlog::set_default_logger(logger);
  spdlog::level::level_enum level = spdlog::level::info;
  if (const char* env = std::getenv("CLIPDESK_LOG")) {
    const std::string_view name(env);
    if (name == "error") {
      level = spdlog::level::err;
    } else if (name == "debug") {
      level = spdlog::level::debug;
    } else if (name != "info") {
      spdlog::warn("CLIPDESK_LOG='{}' is not one of error, info, debug; using info", name);
    }
  }
  spdlog::set_level(level);
}

struct HttpService::Impl {
  explicit Impl(const AppState& s) : state(s) {}
  const AppState& state;
  httplib::Server server;
};

HttpService::HttpService(const AppState& state) : impl_(std::make_unique<Impl>(state)) {
  auto handler = [this](const httplib::Request& req, httplib::Response& res) {
    const HttpResponse out = handle_request(impl_->state, req.method, req.path, req.body);
    res.status = out.status;
    res.set_content(out.body, "application/json");
    spdlog::debug("{} {} -> {}", req.method, req.path, out.status);
  };
  // SO_REUSEADDR only: the library default of SO_REUSEPORT would let a second
  // server share the port instead of failing as busy.
  impl_->server.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  });
  const std::string all = ".*";
  impl_->server.Get(all, handler);
  impl_->server.Post(all, handler);
  impl_->server.Put(all, handler);
  impl_->server.Delete(all, handler);
  impl_->server.Patch(all, handler);
}

HttpService::~HttpService() { stop(); }

int HttpService::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw IoError("cannot bind " + host + " to any port");
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port)) {
    throw IoError("cannot bind " + host + ":" + std::to_string(port) + " (port busy or address invalid)");
  }
  return port;
}

void HttpService::run() {
  spdlog::info("serving {} items", impl_->state.index().size());
  impl_->server.listen_after_bind();
}

void HttpService::stop() {
  if (impl_->server.is_running()) impl_->server.stop();
}

std::pair<std::string, int> parse_bind_address(std::string_view text) {
  const auto colon = text.rfind(':');
  if (colon == std::string_view::npos || colon == 0) {
    throw ConfigError("bind address '" + std::string(text) + "' must look like host:port");
  }
  int port = 0;
  const std::string_view digits = text.substr(colon + 1);
  const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), port);
  if (digits.empty() || ec != std::errc() || ptr != digits.data() + digits.size() || port < 0 ||
      port > 65535) {
    throw ConfigError("bind address '" + std::string(text) + "' has an invalid port");
  }
  return {std::string(text.substr(0, colon)), port};
}

}  // namespace clipdesk
