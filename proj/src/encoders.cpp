#include "clipdesk/encoders.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

#include "clipdesk/binio.hpp"
#include "clipdesk/errors.hpp"
#include "clipdesk/rng.hpp"

namespace clipdesk {

std::string_view to_string(TextMode mode) {
  return mode == TextMode::kBow ? "bow" : "positional";
}

TextMode parse_text_mode(std::string_view name) {
  if (name == "bow") return TextMode::kBow;
  if (name == "positional") return TextMode::kPositional;
  throw ConfigError("unknown text mode '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Vocabulary and tokenizer

Vocabulary::Vocabulary() : tokens_{std::string(kUnknownToken)} {
  ids_.emplace(tokens_[0], 0);
}

Vocabulary Vocabulary::from_texts(std::span<const std::string> texts) {
  std::set<std::string> seen;
  for (const auto& text : texts) {
    for (auto& word : split_words(text)) seen.insert(std::move(word));
  }
  seen.erase(std::string(kUnknownToken));
  std::vector<std::string> tokens{std::string(kUnknownToken)};
  tokens.insert(tokens.end(), seen.begin(), seen.end());
  return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.empty() || tokens[0] != kUnknownToken) {
    throw FormatError("vocabulary must start with " + std::string(kUnknownToken));
  }
  Vocabulary vocab;
  vocab.tokens_ = std::move(tokens);
  vocab.ids_.clear();
  for (std::size_t i = 0; i < vocab.tokens_.size(); ++i) {
    if (!vocab.ids_.emplace(vocab.tokens_[i], i).second) {
      throw FormatError("vocabulary token '" + vocab.tokens_[i] + "' appears twice");
    }
  }
  return vocab;
}

std::size_t Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnknownId : it->second;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalnum(u)) {
      current.push_back(static_cast<char>(std::tolower(u)));
    } else if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

std::vector<std::size_t> tokenize(std::string_view text, const Vocabulary& vocab,
                                  std::size_t max_tokens) {
  std::vector<std::size_t> ids;
  for (const auto& word : split_words(text)) {
    if (ids.size() == max_tokens) break;
    ids.push_back(vocab.id(word));
  }
  return ids;
}

// ---------------------------------------------------------------------------
// Parameters

void ModelDims::validate() const {
  const std::pair<const char*, std::size_t> fields[] = {
      {"vocab_size", vocab_size}, {"text_width", text_width}, {"hidden_width", hidden_width},
      {"embed_dim", embed_dim},   {"patch", patch},           {"image_side", image_side},
      {"max_tokens", max_tokens}};
  for (const auto& [name, value] : fields) {
    if (value == 0) throw ConfigError(std::string("model dimension ") + name + " must be positive");
  }
  if (image_side % patch != 0) {
    throw ConfigError("image side " + std::to_string(image_side) + " is not a multiple of patch " +
                      std::to_string(patch));
  }
}

std::vector<Tensor*> ModelParams::tensors() {
  return {&text.token_table, &text.positional_table, &text.proj_text, &image.patch_proj,
          &image.hidden,     &image.proj_image,       &log_scale};
}

std::vector<const Tensor*> ModelParams::tensors() const {
  return {&text.token_table, &text.positional_table, &text.proj_text, &image.patch_proj,
          &image.hidden,     &image.proj_image,       &log_scale};
}

double ModelParams::logit_scale() const { return std::exp(log_scale.data.at(0)); }

void ModelParams::set_requires_grad(bool flag) {
  for (Tensor* t : tensors()) t->requires_grad = flag;
}

ModelParams init_params(const ModelDims& dims, std::uint64_t seed) {
  dims.validate();
  Rng rng(seed);
  auto gaussian = [&](std::size_t rows, std::size_t cols) {
    Tensor t = Tensor::zeros({rows, cols});
    const double stddev = 1.0 / std::sqrt(static_cast<double>(rows));
    for (double& v : t.data) v = rng.normal() * stddev;
    return t;
  };
  ModelParams p;
  p.dims = dims;
  p.text.token_table = gaussian(dims.vocab_size, dims.text_width);
  p.text.positional_table = gaussian(dims.max_tokens, dims.text_width);
  p.text.proj_text = gaussian(dims.text_width, dims.embed_dim);
  p.image.patch_proj = gaussian(dims.patch_features(), dims.hidden_width);
  p.image.hidden = gaussian(dims.hidden_width, dims.hidden_width);
  p.image.proj_image = gaussian(dims.hidden_width, dims.embed_dim);
  p.log_scale = Tensor::scalar(std::log(1.0 / kInitialTemperature));
  return p;
}

void clamp_log_scale(ModelParams& params) {
  double& v = params.log_scale.data.at(0);
  v = std::min(v, std::log(kMaxLogitScale));
}

// ---------------------------------------------------------------------------
// Encoders

ParamVars ParamVars::bind(Tape& tape, ModelParams& p) {
  return {tape.leaf(p.text.token_table), tape.leaf(p.text.positional_table),
          tape.leaf(p.text.proj_text),   tape.leaf(p.image.patch_proj),
          tape.leaf(p.image.hidden),     tape.leaf(p.image.proj_image),
          tape.leaf(p.log_scale)};
}

ParamVars ParamVars::bind_frozen(Tape& tape, const ModelParams& p) {
  return {tape.input(p.text.token_table), tape.input(p.text.positional_table),
          tape.input(p.text.proj_text),   tape.input(p.image.patch_proj),
          tape.input(p.image.hidden),     tape.input(p.image.proj_image),
          tape.input(p.log_scale)};
}

Var encode_text_batch(Tape& tape, const ParamVars& vars, const ModelDims& dims,
                      std::span<const std::vector<std::size_t>> captions, TextMode mode) {
  if (captions.empty()) throw EmptyInputError("encode_text: no captions");
  std::vector<std::size_t> ids, positions, lengths;
  for (const auto& caption : captions) {
    if (caption.empty()) throw EmptyInputError("encode_text: caption has no tokens");
    if (caption.size() > dims.max_tokens) {
      throw ShapeError("encode_text: " + std::to_string(caption.size()) + " tokens exceed limit " +
                       std::to_string(dims.max_tokens));
    }
    ids.insert(ids.end(), caption.begin(), caption.end());
    for (std::size_t i = 0; i < caption.size(); ++i) positions.push_back(i);
    lengths.push_back(caption.size());
  }
  Var rows = tape.embedding_lookup(vars.token_table, std::move(ids));
  if (mode == TextMode::kPositional) {
    // relu keeps position information from cancelling out under mean pooling
    rows = tape.relu(
        tape.add(rows, tape.embedding_lookup(vars.positional_table, std::move(positions))));
  }
  Var pooled = tape.segment_mean_rows(rows, std::move(lengths));
  return tape.l2_normalize_rows(tape.matmul(pooled, vars.proj_text));
}

Tensor image_patches(const ModelDims& dims, std::span<const Image> images) {
  const std::size_t p = dims.patch;
  std::size_t total = 0;
  for (const Image& im : images) {
    if (im.width != im.height || im.width == 0 || im.width % p != 0 ||
        im.rgb.size() != im.width * im.height * 3) {
      throw ShapeError("image " + std::to_string(im.width) + "x" + std::to_string(im.height) +
                       " is not a square RGB raster divisible by patch " + std::to_string(p));
    }
    total += (im.width / p) * (im.width / p);
  }
  if (total == 0) throw EmptyInputError("encode_image: no images");
  Tensor out = Tensor::zeros({total, dims.patch_features()});
  std::size_t r = 0;
  for (const Image& im : images) {
    const std::size_t grid = im.width / p;
    for (std::size_t py = 0; py < grid; ++py) {
      for (std::size_t px = 0; px < grid; ++px, ++r) {
        double* dst = out.row(r);
        for (std::size_t y = 0; y < p; ++y) {
          for (std::size_t x = 0; x < p; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
              *dst++ = im.at(px * p + x, py * p + y, c) - 0.5;
            }
          }
        }
      }
    }
  }
  return out;
}

Var encode_image_batch(Tape& tape, const ParamVars& vars, const ModelDims& dims,
                       std::span<const Image> images) {
  Var patches = tape.constant(image_patches(dims, images));
  std::vector<std::size_t> lengths;
  for (const Image& im : images) {
    const std::size_t grid = im.width / dims.patch;
    lengths.push_back(grid * grid);
  }
  Var features = tape.relu(tape.matmul(patches, vars.patch_proj));
  Var pooled = tape.segment_mean_rows(features, std::move(lengths));
  Var hidden = tape.relu(tape.matmul(pooled, vars.hidden));
  return tape.l2_normalize_rows(tape.matmul(hidden, vars.proj_image));
}

Tensor encode_texts(const ModelParams& params, std::span<const std::vector<std::size_t>> captions,
                    TextMode mode) {
  Tape tape;
  const ParamVars vars = ParamVars::bind_frozen(tape, params);
  return tape.value(encode_text_batch(tape, vars, params.dims, captions, mode));
}

std::vector<double> encode_text(const ModelParams& params, std::span<const std::size_t> ids,
                                TextMode mode) {
  const std::vector<std::vector<std::size_t>> one{{ids.begin(), ids.end()}};
  return encode_texts(params, one, mode).data;
}

Tensor encode_images(const ModelParams& params, std::span<const Image> images, std::size_t chunk) {
  if (images.empty()) throw EmptyInputError("encode_images: no images");
  chunk = std::max<std::size_t>(chunk, 1);
  const std::size_t d = params.dims.embed_dim;
  Tensor out = Tensor::zeros({images.size(), d});
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const std::size_t n = std::min(chunk, images.size() - start);
    Tape tape;
    const ParamVars vars = ParamVars::bind_frozen(tape, params);
    const Tensor& part =
        tape.value(encode_image_batch(tape, vars, params.dims, images.subspan(start, n)));
    std::copy(part.data.begin(), part.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(start * d));
  }
  return out;
}

std::vector<double> encode_image(const ModelParams& params, const Image& image) {
  return encode_images(params, std::span(&image, 1)).data;
}

std::vector<double> encode_query(const Model& model, std::string_view text) {
  const auto ids = tokenize(text, model.vocab, model.params.dims.max_tokens);
  if (ids.empty()) throw EmptyInputError("query has no tokens");
  return encode_text(model.params, ids, model.mode);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::string_view kCheckpointMagic = "CLIPCKP1";

void put_tensor(binio::Writer& w, const Tensor& t) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t dim : t.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(dim));
  for (double v : t.data) w.put<double>(v);
}

Tensor get_tensor(binio::Reader& r, const Shape& expected, const char* name) {
  const auto rank = r.get<std::uint32_t>();
  if (rank != expected.size()) {
    throw FormatError(std::string("checkpoint: tensor ") + name + " has rank " + std::to_string(rank));
  }
  Shape shape(rank);
  for (auto& dim : shape) dim = r.get<std::uint32_t>();
  if (shape != expected) {
    throw FormatError(std::string("checkpoint: tensor ") + name + " has shape " +
                      shape_string(shape) + ", header implies " + shape_string(expected));
  }
  std::size_t n = 1;
  for (std::size_t dim : shape) n *= dim;
  std::vector<double> data(n);
  for (double& v : data) v = r.get<double>();
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace

std::string serialize_checkpoint(const Model& model) {
  const ModelParams& p = model.params;
  const ModelDims& d = p.dims;
  if (d.vocab_size != model.vocab.size()) {
    throw ConfigError("checkpoint: vocabulary size differs from model dims");
  }
  binio::Writer w;
  w.bytes(kCheckpointMagic);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(model.mode));
  for (std::size_t v : {d.vocab_size, d.text_width, d.max_tokens, d.hidden_width, d.embed_dim,
                        d.patch, d.image_side}) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.vocab.size()));
  for (const auto& token : model.vocab.tokens()) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(token.size()));
    w.bytes(token);
  }
  const auto tensors = p.tensors();
  for (std::size_t i = 0; i + 1 < tensors.size(); ++i) put_tensor(w, *tensors[i]);
  w.put<double>(p.log_scale.data.at(0));
  return w.take();
}

Model parse_checkpoint(std::string_view bytes) {
  binio::Reader r(bytes, "checkpoint");
  if (bytes.size() < kCheckpointMagic.size() ||
      bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
    throw FormatError("checkpoint: bad magic");
  }
  r.bytes(kCheckpointMagic.size());
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint: unsupported version " + std::to_string(version));
  }
  Model model;
  const auto mode = r.get<std::uint8_t>();
  if (mode > 1) throw FormatError("checkpoint: unknown text mode " + std::to_string(mode));
  model.mode = static_cast<TextMode>(mode);

  ModelDims& d = model.params.dims;
  d.vocab_size = r.get<std::uint32_t>();
  d.text_width = r.get<std::uint32_t>();
  d.max_tokens = r.get<std::uint32_t>();
  d.hidden_width = r.get<std::uint32_t>();
  d.embed_dim = r.get<std::uint32_t>();
  d.patch = r.get<std::uint32_t>();
  d.image_side = r.get<std::uint32_t>();
  try {
    d.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }

  const auto count = r.get<std::uint32_t>();
  if (count != d.vocab_size) throw FormatError("checkpoint: vocabulary count differs from header");
  std::vector<std::string> tokens;
  tokens.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    tokens.emplace_back(r.bytes(len));
  }
  model.vocab = Vocabulary::from_tokens(std::move(tokens));

  ModelParams& p = model.params;
  p.text.token_table = get_tensor(r, {d.vocab_size, d.text_width}, "token_table");
  p.text.positional_table = get_tensor(r, {d.max_tokens, d.text_width}, "positional_table");
  p.text.proj_text = get_tensor(r, {d.text_width, d.embed_dim}, "proj_text");
  p.image.patch_proj = get_tensor(r, {d.patch_features(), d.hidden_width}, "patch_proj");
  p.image.hidden = get_tensor(r, {d.hidden_width, d.hidden_width}, "hidden");
  p.image.proj_image = get_tensor(r, {d.hidden_width, d.embed_dim}, "proj_image");
  p.log_scale = Tensor::scalar(r.get<double>());
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes after log_scale");
  return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(model));
}

Model load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

}  // namespace clipdesk
