#include "clipdesk/index.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>

#include "clipdesk/binio.hpp"
#include "clipdesk/errors.hpp"
#include "clipdesk/simd/kernels.hpp"

namespace clipdesk {

namespace {

constexpr std::string_view kMagic = "CLIPIDX1";
constexpr std::size_t kMaxText = 0xffff;
constexpr std::size_t kEncodeChunk = 256;

struct Ranked {
  double score;
  std::uint64_t id;
  std::size_t slot;
};

// True when a ranks strictly ahead of b.
bool ahead(const Ranked& a, const Ranked& b) {
  return a.score != b.score ? a.score > b.score : a.id < b.id;
}

double l2_norm(std::span<const double> v) {
  return std::sqrt(simd::dot(v.data(), v.data(), v.size()));
}

void check_text(const std::string& text, const char* what) {
  if (text.size() > kMaxText) {
    throw ContractError(std::string("index: ") + what + " longer than 65535 bytes");
  }
}

}  // namespace

Index::Index(std::uint32_t dim) : dim_(dim) {
  if (dim == 0) throw ConfigError("index dimension must be positive");
}

void Index::append(std::uint64_t id, const float* values, std::string caption, std::string source) {
  slots_.emplace(id, ids_.size());
  ids_.push_back(id);
  values_.insert(values_.end(), values, values + dim_);
  captions_.push_back(std::move(caption));
  sources_.push_back(std::move(source));
}

void Index::add(std::uint64_t id, std::span<const double> vector, std::string caption,
                std::string source) {
  if (vector.size() != dim_) {
    throw ShapeError("index: vector has " + std::to_string(vector.size()) +
                     " values, index dimension is " + std::to_string(dim_));
  }
  if (contains(id)) throw DuplicateIdError("index: id " + std::to_string(id) + " already present");
  const double norm = l2_norm(vector);
  if (!(std::abs(norm - 1.0) <= kIndexNormTolerance)) {
    throw NormError("index: vector for id " + std::to_string(id) + " has norm " +
                        std::to_string(norm) + ", expected 1",
                    norm);
  }
  check_text(caption, "caption");
  check_text(source, "source");
  std::vector<float> narrow(vector.begin(), vector.end());
  append(id, narrow.data(), std::move(caption), std::move(source));
}

std::vector<SearchHit> Index::search(std::span<const double> query, std::size_t k) const {
  if (k < 1) throw OutOfRangeError("search: k must be at least 1", static_cast<std::int64_t>(k));
  if (query.size() != dim_) {
    throw ShapeError("search: query has " + std::to_string(query.size()) +
                     " values, index dimension is " + std::to_string(dim_));
  }
  const double norm = l2_norm(query);
  if (!(norm >= kMinQueryNorm)) {
    throw NormError("search: query norm " + std::to_string(norm) + " is below 0.9", norm);
  }
  // Bounded heap whose top is the weakest retained candidate.
  auto weaker_on_top = [](const Ranked& a, const Ranked& b) { return ahead(a, b); };
  std::priority_queue<Ranked, std::vector<Ranked>, decltype(weaker_on_top)> heap(weaker_on_top);
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    const Ranked r{simd::dot_widen(values_.data() + i * dim_, query.data(), dim_), ids_[i], i};
    if (heap.size() < k) {
      heap.push(r);
    } else if (ahead(r, heap.top())) {
      heap.pop();
      heap.push(r);
    }
  }
  std::vector<SearchHit> hits(heap.size());
  for (std::size_t i = hits.size(); i-- > 0;) {
    const Ranked& r = heap.top();
    hits[i] = SearchHit{r.id, r.score, captions_[r.slot]};
    heap.pop();
  }
  return hits;
}

std::size_t Index::slot(std::uint64_t id) const {
  auto it = slots_.find(id);
  if (it == slots_.end()) {
    throw OutOfRangeError("index: unknown id " + std::to_string(id), static_cast<std::int64_t>(id));
  }
  return it->second;
}

EmbeddingRecord Index::record(std::uint64_t id) const {
  const std::size_t s = slot(id);
  EmbeddingRecord r;
  r.id = id;
  r.vector.assign(values_.begin() + static_cast<std::ptrdiff_t>(s * dim_),
                  values_.begin() + static_cast<std::ptrdiff_t>((s + 1) * dim_));
  r.caption = captions_[s];
  r.source = sources_[s];
  return r;
}

std::vector<double> Index::vector(std::uint64_t id) const {
  const std::size_t s = slot(id);
  return {values_.begin() + static_cast<std::ptrdiff_t>(s * dim_),
          values_.begin() + static_cast<std::ptrdiff_t>((s + 1) * dim_)};
}

std::vector<EmbeddingRecord> Index::records() const {
  std::vector<std::uint64_t> sorted = ids_;
  std::sort(sorted.begin(), sorted.end());
  std::vector<EmbeddingRecord> out;
  out.reserve(sorted.size());
  for (std::uint64_t id : sorted) out.push_back(record(id));
  return out;
}

std::string Index::serialize() const {
  binio::Writer w;
  w.bytes(kMagic);
  w.put<std::uint32_t>(kIndexVersion);
  w.put<std::uint32_t>(dim_);
  w.put<std::uint64_t>(ids_.size());
  std::vector<std::size_t> order(ids_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ids_[a] < ids_[b]; });
  for (std::size_t s : order) {
    w.put<std::uint64_t>(ids_[s]);
    for (std::size_t j = 0; j < dim_; ++j) w.put<float>(values_[s * dim_ + j]);
    w.put<std::uint16_t>(static_cast<std::uint16_t>(captions_[s].size()));
    w.bytes(captions_[s]);
    w.put<std::uint16_t>(static_cast<std::uint16_t>(sources_[s].size()));
    w.bytes(sources_[s]);
  }
  return w.take();
}

Index Index::parse(std::string_view bytes) {
  binio::Reader r(bytes, "index");
  if (r.bytes(kMagic.size()) != kMagic) throw FormatError("index: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kIndexVersion) {
    throw VersionError("index: unsupported version " + std::to_string(version));
  }
  const auto dim = r.get<std::uint32_t>();
  if (dim == 0) throw FormatError("index: dimension is zero");
  const auto count = r.get<std::uint64_t>();
  Index index(dim);
  std::vector<float> values(dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto id = r.get<std::uint64_t>();
    if (i > 0 && id <= index.ids_.back()) {
      throw FormatError("index: record ids are not strictly ascending at id " + std::to_string(id));
    }
    for (auto& v : values) v = r.get<float>();
    std::string caption(r.bytes(r.get<std::uint16_t>()));
    std::string source(r.bytes(r.get<std::uint16_t>()));
    index.append(id, values.data(), std::move(caption), std::move(source));
  }
  if (r.remaining() != 0) {
    throw FormatError("index: " + std::to_string(r.remaining()) + " trailing bytes");
  }
  return index;
}

void Index::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

Index Index::load(const std::filesystem::path& path) { return parse(read_file(path)); }

namespace {

template <typename LoadImage>
std::size_t build(const ModelParams& params, const CorpusManifest& manifest, Index& index,
                  LoadImage load) {
  const auto& entries = manifest.entries;
  std::vector<Image> chunk;
  for (std::size_t start = 0; start < entries.size(); start += kEncodeChunk) {
    const std::size_t end = std::min(entries.size(), start + kEncodeChunk);
    chunk.clear();
    for (std::size_t i = start; i < end; ++i) chunk.push_back(load(i));
    const Tensor embs = encode_images(params, chunk);
    for (std::size_t i = start; i < end; ++i) {
      const auto& e = entries[i];
      index.add(e.id, {embs.row(i - start), embs.cols()}, e.caption, e.path);
    }
  }
  return entries.size();
}

}  // namespace

std::size_t build_from_corpus(const ModelParams& params, const CorpusManifest& manifest,
                              const std::filesystem::path& data_dir, Index& index) {
  return build(params, manifest, index, [&](std::size_t i) {
    const auto path = data_dir / manifest.entries[i].path;
    try {
      return read_ppm(path);
    } catch (const IoError&) {
      throw;
    } catch (const Error& e) {
      throw IoError("cannot read raster " + path.string() + ": " + e.what());
    }
  });
}

std::size_t build_from_corpus(const ModelParams& params, const Corpus& corpus, Index& index) {
  if (corpus.images.size() != corpus.manifest.entries.size()) {
    throw ShapeError("corpus: image and manifest counts differ");
  }
  return build(params, corpus.manifest, index, [&](std::size_t i) { return corpus.images[i]; });
}

}  // namespace clipdesk
