#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "clipdesk/datagen.hpp"
#include "clipdesk/encoders.hpp"

namespace clipdesk {

struct EmbeddingRecord {
  std::uint64_t id = 0;
  std::vector<float> vector;
  std::string caption;
  std::string source;  // raster path relative to the corpus directory

  bool operator==(const EmbeddingRecord&) const = default;
};

struct SearchHit {
  std::uint64_t id = 0;
  double score = 0.0;
  std::string caption;

  bool operator==(const SearchHit&) const = default;
};

inline constexpr double kIndexNormTolerance = 1e-3;
inline constexpr double kMinQueryNorm = 0.9;
inline constexpr std::uint32_t kIndexVersion = 1;

// Exact cosine top-k over unit vectors stored as 32-bit floats. Scores are
// accumulated in 64 bits. Ranking: score descending, then id ascending.
// Mutation needs exclusive access; concurrent const searches are safe.
class Index {
 public:
  explicit Index(std::uint32_t dim);

  std::uint32_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return ids_.size(); }

  void add(std::uint64_t id, std::span<const double> vector, std::string caption,
           std::string source);
  std::vector<SearchHit> search(std::span<const double> query, std::size_t k) const;

  bool contains(std::uint64_t id) const { return slots_.count(id) != 0; }
  // Throws OutOfRangeError for unknown ids.
  EmbeddingRecord record(std::uint64_t id) const;
  std::vector<double> vector(std::uint64_t id) const;
  // Every record in ascending id order.
  std::vector<EmbeddingRecord> records() const;

  std::string serialize() const;
  static Index parse(std::string_view bytes);
  void save(const std::filesystem::path& path) const;
  static Index load(const std::filesystem::path& path);

 private:
  std::size_t slot(std::uint64_t id) const;
  void append(std::uint64_t id, const float* values, std::string caption, std::string source);

  std::uint32_t dim_;
  std::vector<std::uint64_t> ids_;
  std::vector<float> values_;  // size() × dim_, in insertion order
  std::vector<std::string> captions_;
  std::vector<std::string> sources_;
  std::unordered_map<std::uint64_t, std::size_t> slots_;
};

// Encodes every manifest image read from data_dir and adds it under its
// manifest id. Returns the number of records added.
std::size_t build_from_corpus(const ModelParams& params, const CorpusManifest& manifest,
                              const std::filesystem::path& data_dir, Index& index);
// Same, for rasters already in memory (aligned with manifest entries).
std::size_t build_from_corpus(const ModelParams& params, const Corpus& corpus, Index& index);

}  // namespace clipdesk
