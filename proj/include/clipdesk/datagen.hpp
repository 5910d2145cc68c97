#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "clipdesk/image.hpp"

namespace clipdesk {

enum class ShapeKind : std::uint8_t { kCircle, kSquare, kTriangle, kCross };
enum class Color : std::uint8_t { kRed, kGreen, kBlue, kYellow, kMagenta, kCyan };
enum class SizeClass : std::uint8_t { kSmall, kLarge };
enum class Background : std::uint8_t { kBlack, kWhite };

inline constexpr std::array kAllShapes{ShapeKind::kCircle, ShapeKind::kSquare, ShapeKind::kTriangle,
                                       ShapeKind::kCross};
inline constexpr std::array kAllColors{Color::kRed,    Color::kGreen,   Color::kBlue,
                                       Color::kYellow, Color::kMagenta, Color::kCyan};
inline constexpr std::array kAllSizes{SizeClass::kSmall, SizeClass::kLarge};
inline constexpr std::array kAllBackgrounds{Background::kBlack, Background::kWhite};

std::string_view to_string(ShapeKind v);
std::string_view to_string(Color v);
std::string_view to_string(SizeClass v);
std::string_view to_string(Background v);
std::optional<ShapeKind> parse_shape(std::string_view s);
std::optional<Color> parse_color(std::string_view s);
std::optional<SizeClass> parse_size(std::string_view s);
std::optional<Background> parse_background(std::string_view s);

inline constexpr int kMaxJitter = 4;
inline constexpr std::size_t kSmallExtent = 10;
inline constexpr std::size_t kLargeExtent = 20;

struct SceneSpec {
  ShapeKind shape = ShapeKind::kCircle;
  Color color = Color::kRed;
  SizeClass size = SizeClass::kSmall;
  Background background = Background::kBlack;
  int dx = 0;
  int dy = 0;
  std::uint64_t seed = 0;

  bool operator==(const SceneSpec&) const = default;
};

// Attributes a caption mentions; absent ones match anything.
struct CaptionAttrs {
  std::optional<ShapeKind> shape;
  std::optional<Color> color;
  std::optional<SizeClass> size;
  std::optional<Background> background;

  bool operator==(const CaptionAttrs&) const = default;
};

// Background fill, then the filled shape centred at (side/2 + dx, side/2 + dy).
Image render(const SceneSpec& spec, std::size_t side = 32);

// Caption template family; the template is picked by Rng(spec.seed).
inline constexpr std::array<std::string_view, 6> kCaptionTemplates{
    "a {size} {color} {shape} on a {background} background",
    "a {color} {shape}",
    "the {shape} is {color}",
    "a photo of a {size} {color} {shape}",
    "an image of a {color} {shape} on a {background} background",
    "a picture of a {color} {shape}",
};

std::size_t caption_template_index(const SceneSpec& spec);
std::string caption(const SceneSpec& spec);
std::string caption_with_template(const SceneSpec& spec, std::size_t template_index);
CaptionAttrs mentioned_attributes(const SceneSpec& spec);
// Recovers mentioned attributes from a caption of the template family.
std::optional<CaptionAttrs> parse_caption(std::string_view text);

bool relevant(const CaptionAttrs& query, const SceneSpec& candidate);

// Class label naming every attribute, e.g. "small red circle on a black background".
std::string combo_class_name(const SceneSpec& spec);

enum class Split : std::uint8_t { kTrain, kTestIid, kTestHeldout, kTestShifted };
std::string_view to_string(Split split);
Split parse_split(std::string_view name);

struct ShiftConfig {
  double noise_sigma = 0.1;
  bool swap_background = true;
};

using ShapeColor = std::pair<ShapeKind, Color>;

struct CorpusConfig {
  std::uint64_t seed = 7;
  std::size_t n_train = 4096;
  std::size_t n_test = 512;
  std::vector<ShapeColor> heldout = default_heldout();
  ShiftConfig shift;
  std::size_t side = 32;

  static std::vector<ShapeColor> default_heldout();
};

struct ManifestEntry {
  std::uint64_t id = 0;
  std::string path;  // relative to the corpus directory
  std::string caption;
  SceneSpec spec;
  Split split = Split::kTrain;

  bool operator==(const ManifestEntry&) const = default;
};

struct CorpusManifest {
  CorpusConfig config;
  std::vector<ManifestEntry> entries;

  std::size_t count(Split split) const;
  std::vector<const ManifestEntry*> entries_in(Split split) const;
};

// Manifest plus 8-bit-faithful rasters aligned with entries.
struct Corpus {
  CorpusManifest manifest;
  std::vector<Image> images;
};

Corpus generate_corpus(const CorpusConfig& config);

inline constexpr std::string_view kManifestFile = "manifest.jsonl";

// JSON lines: header line then one entry per line.
std::string serialize_manifest(const CorpusManifest& manifest);
CorpusManifest parse_manifest(std::string_view text);

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
CorpusManifest read_manifest(const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

// FNV-1a 64-bit, used to pin manifests and rasters.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace clipdesk
