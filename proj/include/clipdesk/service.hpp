#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "clipdesk/datagen.hpp"
#include "clipdesk/encoders.hpp"
#include "clipdesk/index.hpp"
#include "clipdesk/zeroshot.hpp"

namespace clipdesk {

inline constexpr std::size_t kMaxSearchK = 100;
inline constexpr int kScoreDigits = 9;

// Everything the service reads. Built once, then only read.
class AppState {
 public:
  // Throws ContractError if an indexed id has no manifest entry or the
  // index dimension differs from the model's embedding size.
  AppState(Model model, Index index, CorpusManifest manifest, std::filesystem::path data_dir);
  static AppState load(const std::filesystem::path& ckpt, const std::filesystem::path& index,
                       const std::filesystem::path& data_dir);

  const Model& model() const noexcept { return model_; }
  const Index& index() const noexcept { return index_; }
  const std::filesystem::path& data_dir() const noexcept { return data_dir_; }
  // Throws OutOfRangeError for ids that are not indexed.
  const ManifestEntry& entry(std::uint64_t id) const;

 private:
  Model model_;
  Index index_;
  CorpusManifest manifest_;
  std::unordered_map<std::uint64_t, std::size_t> entries_;
  std::filesystem::path data_dir_;
};

// Library calls behind the endpoints.
// k outside [1, 100] -> OutOfRangeError; no tokens -> EmptyInputError.
std::vector<SearchHit> search_items(const Model& model, const Index& index, std::string_view query,
                                    std::int64_t k);
std::vector<SearchHit> search_items(const AppState& state, std::string_view query, std::int64_t k);
// Classifies the stored embedding of an indexed item.
// Unknown id -> OutOfRangeError; no classes -> EmptyInputError.
Classification classify_item(const Model& model, const Index& index, std::uint64_t id,
                             std::span<const std::string> classes,
                             std::span<const PromptTemplate> templates);
Classification classify_item(const AppState& state, std::uint64_t id,
                             std::span<const std::string> classes,
                             std::span<const PromptTemplate> templates);
// The item's raster file as raw RGB bytes, row-major.
RawRaster item_raster(const AppState& state, std::uint64_t id);

// Response bodies shared by the HTTP endpoints and the CLI. Scores carry 9
// significant digits; probabilities are written at full precision.
std::string search_body(std::span<const SearchHit> hits);
std::string classify_body(std::span<const std::string> classes, const Classification& result);

struct HttpResponse {
  int status = 200;
  std::string body;  // always JSON
};

// Errors are {"error": code, "detail": text}. Codes: bad_request, empty_query,
// k_out_of_range, empty_classes, bad_template (400); not_found (404);
// method_not_allowed (405); io_error, internal (500).
HttpResponse handle_request(const AppState& state, std::string_view method, std::string_view path,
                            std::string_view body);

// Log threshold from CLIPDESK_LOG (error, info, debug); default info.
void configure_logging();

// HTTP/1.1 front end over handle_request.
class HttpService {
 public:
  explicit HttpService(const AppState& state);
  ~HttpService();
  HttpService(const HttpService&) = delete;
  HttpService& operator=(const HttpService&) = delete;

  // Port 0 picks a free port. Returns the bound port; IoError if busy.
  int bind(const std::string& host, int port);
  // Blocks until stop().
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// "host:port" -> parts; ConfigError when malformed.
std::pair<std::string, int> parse_bind_address(std::string_view text);

}  // namespace clipdesk
