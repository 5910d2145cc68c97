#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "clipdesk/image.hpp"
#include "clipdesk/tensor.hpp"

namespace clipdesk {

enum class TextMode : std::uint8_t { kBow = 0, kPositional = 1 };

std::string_view to_string(TextMode mode);
TextMode parse_text_mode(std::string_view name);

// Token <-> id map. Id 0 is reserved for <unk>; the remaining ids follow the
// lexicographic order of the tokens.
class Vocabulary {
 public:
  static constexpr std::size_t kUnknownId = 0;
  static constexpr std::string_view kUnknownToken = "<unk>";

  Vocabulary();
  static Vocabulary from_texts(std::span<const std::string> texts);
  // Tokens listed in id order; entry 0 must be <unk>.
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  std::size_t size() const noexcept { return tokens_.size(); }
  std::size_t id(std::string_view token) const;
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::size_t, std::less<>> ids_;
};

// Lowercases and splits on every run of non-alphanumeric characters.
std::vector<std::string> split_words(std::string_view text);

// Word ids with unknown words mapped to 0, truncated to max_tokens.
std::vector<std::size_t> tokenize(std::string_view text, const Vocabulary& vocab,
                                  std::size_t max_tokens);

struct ModelDims {
  std::size_t vocab_size = 1;
  std::size_t text_width = 64;    // token embedding width
  std::size_t hidden_width = 128; // image MLP width
  std::size_t embed_dim = 32;     // shared space
  std::size_t patch = 8;
  std::size_t image_side = 32;
  std::size_t max_tokens = 16;

  void validate() const;
  std::size_t patch_features() const noexcept { return 3 * patch * patch; }
  bool operator==(const ModelDims&) const = default;
};

inline constexpr double kInitialTemperature = 0.07;
inline constexpr double kMaxLogitScale = 100.0;

struct TextEncoderParams {
  Tensor token_table;       // vocab_size × text_width
  Tensor positional_table;  // max_tokens × text_width, read only in positional mode
  Tensor proj_text;         // text_width × embed_dim
};

struct ImageEncoderParams {
  Tensor patch_proj;  // patch_features × hidden_width
  Tensor hidden;      // hidden_width × hidden_width
  Tensor proj_image;  // hidden_width × embed_dim
};

struct ModelParams {
  ModelDims dims;
  TextEncoderParams text;
  ImageEncoderParams image;
  Tensor log_scale;  // 1×1; similarities are multiplied by exp(log_scale)

  // Canonical order: token, positional, proj_text, patch_proj, hidden,
  // proj_image, log_scale.
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
  double logit_scale() const;
  void set_requires_grad(bool flag);
};

// Weights ~ N(0, 1/sqrt(rows)) drawn in canonical order from Rng(seed);
// log_scale = ln(1 / 0.07).
ModelParams init_params(const ModelDims& dims, std::uint64_t seed);

// Keeps exp(log_scale) within (0, 100].
void clamp_log_scale(ModelParams& params);

// Parameters together with everything needed to interpret text.
struct Model {
  ModelParams params;
  TextMode mode = TextMode::kBow;
  Vocabulary vocab;
};

// Tape handles for every parameter tensor. bind() registers trainable leaves;
// bind_frozen() aliases the tensors read-only so concurrent inference on
// shared parameters is safe.
struct ParamVars {
  Var token_table, positional_table, proj_text;
  Var patch_proj, hidden, proj_image;
  Var log_scale;

  static ParamVars bind(Tape& tape, ModelParams& params);
  static ParamVars bind_frozen(Tape& tape, const ModelParams& params);
};

// N captions -> N×embed_dim unit rows. bow: mean of token rows; positional:
// mean of relu(token row + position row).
Var encode_text_batch(Tape& tape, const ParamVars& vars, const ModelDims& dims,
                      std::span<const std::vector<std::size_t>> captions, TextMode mode);

// N square images -> N×embed_dim unit rows. Pixels are centred to [-0.5, 0.5]
// and cut into P×P patches; each patch is flattened row by row, channels
// innermost.
Var encode_image_batch(Tape& tape, const ParamVars& vars, const ModelDims& dims,
                       std::span<const Image> images);

Tensor image_patches(const ModelDims& dims, std::span<const Image> images);

std::vector<double> encode_text(const ModelParams& params, std::span<const std::size_t> ids,
                                TextMode mode);
std::vector<double> encode_image(const ModelParams& params, const Image& image);
Tensor encode_texts(const ModelParams& params, std::span<const std::vector<std::size_t>> captions,
                    TextMode mode);
// Batched image encoding; chunk bounds peak memory only, results do not
// depend on it.
Tensor encode_images(const ModelParams& params, std::span<const Image> images,
                     std::size_t chunk = 256);

// Tokenizes and encodes free text; throws EmptyInputError when no tokens remain.
std::vector<double> encode_query(const Model& model, std::string_view text);

// Checkpoint container "CLIPCKP1", version 1.
inline constexpr std::uint32_t kCheckpointVersion = 1;
std::string serialize_checkpoint(const Model& model);
Model parse_checkpoint(std::string_view bytes);
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace clipdesk
