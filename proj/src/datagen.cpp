#include "clipdesk/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "json.hpp"

#include "clipdesk/encoders.hpp"
#include "clipdesk/errors.hpp"
#include "clipdesk/rng.hpp"

namespace clipdesk {

using nlohmann::json;

namespace {

template <typename Enum, std::size_t N>
std::optional<Enum> parse_enum(std::string_view s, const std::array<Enum, N>& all) {
  for (Enum v : all) {
    if (to_string(v) == s) return v;
  }
  return std::nullopt;
}

template <typename Enum, std::size_t N>
Enum pick(Rng& rng, const std::array<Enum, N>& all) {
  return all[rng.below(N)];
}

std::array<double, 3> rgb_of(Color c) {
  switch (c) {
    case Color::kRed: return {1, 0, 0};
    case Color::kGreen: return {0, 1, 0};
    case Color::kBlue: return {0, 0, 1};
    case Color::kYellow: return {1, 1, 0};
    case Color::kMagenta: return {1, 0, 1};
    case Color::kCyan: return {0, 1, 1};
  }
  return {0, 0, 0};
}

bool inside(const SceneSpec& spec, double px, double py, double cx, double cy) {
  const double extent =
      static_cast<double>(spec.size == SizeClass::kSmall ? kSmallExtent : kLargeExtent);
  const double half = extent / 2.0;
  const double ox = px - cx, oy = py - cy;
  switch (spec.shape) {
    case ShapeKind::kCircle:
      return ox * ox + oy * oy <= half * half;
    case ShapeKind::kSquare:
      return std::abs(ox) <= half && std::abs(oy) <= half;
    case ShapeKind::kTriangle: {
      // apex up, base as wide as the extent
      const double down = oy + half;
      return down >= 0.0 && down <= extent && std::abs(ox) <= down / 2.0;
    }
    case ShapeKind::kCross: {
      const double arm = extent / 6.0;
      return std::abs(ox) <= half && std::abs(oy) <= half &&
             (std::abs(ox) <= arm || std::abs(oy) <= arm);
    }
  }
  return false;
}

constexpr std::uint64_t kNoiseSalt = 0x6e6f697365ULL;  // "noise"

}  // namespace

std::string_view to_string(ShapeKind v) {
  constexpr std::array<std::string_view, 4> names{"circle", "square", "triangle", "cross"};
  return names[static_cast<std::size_t>(v)];
}
std::string_view to_string(Color v) {
  constexpr std::array<std::string_view, 6> names{"red", "green", "blue", "yellow", "magenta", "cyan"};
  return names[static_cast<std::size_t>(v)];
}
std::string_view to_string(SizeClass v) { return v == SizeClass::kSmall ? "small" : "large"; }
std::string_view to_string(Background v) { return v == Background::kBlack ? "black" : "white"; }

std::optional<ShapeKind> parse_shape(std::string_view s) { return parse_enum(s, kAllShapes); }
std::optional<Color> parse_color(std::string_view s) { return parse_enum(s, kAllColors); }
std::optional<SizeClass> parse_size(std::string_view s) { return parse_enum(s, kAllSizes); }
std::optional<Background> parse_background(std::string_view s) {
  return parse_enum(s, kAllBackgrounds);
}

Image render(const SceneSpec& spec, std::size_t side) {
  const std::size_t needed = 2 * (kLargeExtent / 2 + kMaxJitter);
  if (side < needed) throw ConfigError("render: side must be at least " + std::to_string(needed));
  if (std::abs(spec.dx) > kMaxJitter || std::abs(spec.dy) > kMaxJitter) {
    throw ConfigError("render: jitter beyond +-" + std::to_string(kMaxJitter));
  }
  const double bg = spec.background == Background::kBlack ? 0.0 : 1.0;
  Image image = Image::filled(side, side, bg, bg, bg);
  const auto fg = rgb_of(spec.color);
  const double cx = static_cast<double>(side) / 2.0 + spec.dx;
  const double cy = static_cast<double>(side) / 2.0 + spec.dy;
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      if (!inside(spec, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5, cx, cy)) continue;
      for (std::size_t c = 0; c < 3; ++c) image.at(x, y, c) = fg[c];
    }
  }
  return image;
}

// ---------------------------------------------------------------------------
// Captions

std::size_t caption_template_index(const SceneSpec& spec) {
  Rng rng(spec.seed);
  return static_cast<std::size_t>(rng.below(kCaptionTemplates.size()));
}

std::string caption_with_template(const SceneSpec& spec, std::size_t template_index) {
  std::string out(kCaptionTemplates.at(template_index));
  auto substitute = [&](std::string_view key, std::string_view value) {
    const std::string slot = "{" + std::string(key) + "}";
    if (auto pos = out.find(slot); pos != std::string::npos) out.replace(pos, slot.size(), value);
  };
  substitute("size", to_string(spec.size));
  substitute("color", to_string(spec.color));
  substitute("shape", to_string(spec.shape));
  substitute("background", to_string(spec.background));
  return out;
}

std::string caption(const SceneSpec& spec) {
  return caption_with_template(spec, caption_template_index(spec));
}

CaptionAttrs mentioned_attributes(const SceneSpec& spec) {
  const std::string_view pattern = kCaptionTemplates[caption_template_index(spec)];
  CaptionAttrs attrs;
  if (pattern.find("{shape}") != std::string_view::npos) attrs.shape = spec.shape;
  if (pattern.find("{color}") != std::string_view::npos) attrs.color = spec.color;
  if (pattern.find("{size}") != std::string_view::npos) attrs.size = spec.size;
  if (pattern.find("{background}") != std::string_view::npos) attrs.background = spec.background;
  return attrs;
}

std::optional<CaptionAttrs> parse_caption(std::string_view text) {
  auto words_of = [](std::string_view s) {
    std::vector<std::string> words;
    std::istringstream in{std::string(s)};
    for (std::string w; in >> w;) words.push_back(w);
    return words;
  };
  const auto words = words_of(text);
  for (std::string_view pattern : kCaptionTemplates) {
    const auto slots = words_of(pattern);
    if (slots.size() != words.size()) continue;
    CaptionAttrs attrs;
    bool ok = true;
    for (std::size_t i = 0; i < slots.size() && ok; ++i) {
      const std::string& slot = slots[i];
      const std::string& word = words[i];
      if (slot == "{shape}") {
        attrs.shape = parse_shape(word);
        ok = attrs.shape.has_value();
      } else if (slot == "{color}") {
        attrs.color = parse_color(word);
        ok = attrs.color.has_value();
      } else if (slot == "{size}") {
        attrs.size = parse_size(word);
        ok = attrs.size.has_value();
      } else if (slot == "{background}") {
        attrs.background = parse_background(word);
        ok = attrs.background.has_value();
      } else {
        ok = slot == word;
      }
    }
    if (ok) return attrs;
  }
  return std::nullopt;
}

bool relevant(const CaptionAttrs& query, const SceneSpec& candidate) {
  return (!query.shape || *query.shape == candidate.shape) &&
         (!query.color || *query.color == candidate.color) &&
         (!query.size || *query.size == candidate.size) &&
         (!query.background || *query.background == candidate.background);
}

std::string combo_class_name(const SceneSpec& spec) {
  return std::string(to_string(spec.size)) + " " + std::string(to_string(spec.color)) + " " +
         std::string(to_string(spec.shape)) + " on a " + std::string(to_string(spec.background)) +
         " background";
}

// ---------------------------------------------------------------------------
// Corpus

std::string_view to_string(Split split) {
  constexpr std::array<std::string_view, 4> names{"train", "test_iid", "test_heldout", "test_shifted"};
  return names[static_cast<std::size_t>(split)];
}

Split parse_split(std::string_view name) {
  for (Split s : {Split::kTrain, Split::kTestIid, Split::kTestHeldout, Split::kTestShifted}) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown split '" + std::string(name) + "'");
}

std::vector<ShapeColor> CorpusConfig::default_heldout() {
  return {{ShapeKind::kTriangle, Color::kMagenta},
          {ShapeKind::kCircle, Color::kCyan},
          {ShapeKind::kSquare, Color::kYellow},
          {ShapeKind::kCross, Color::kGreen}};
}

std::size_t CorpusManifest::count(Split split) const {
  return static_cast<std::size_t>(std::count_if(
      entries.begin(), entries.end(), [&](const ManifestEntry& e) { return e.split == split; }));
}

std::vector<const ManifestEntry*> CorpusManifest::entries_in(Split split) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries) {
    if (e.split == split) out.push_back(&e);
  }
  return out;
}

Corpus generate_corpus(const CorpusConfig& config) {
  if (config.n_train == 0 || config.n_test == 0) {
    throw ConfigError("generate_corpus: n_train and n_test must be at least 1");
  }
  if (config.heldout.empty()) throw ConfigError("generate_corpus: held-out combination list is empty");
  if (config.shift.noise_sigma < 0.0) throw ConfigError("generate_corpus: negative noise sigma");

  std::vector<ShapeColor> seen, held;
  for (ShapeKind s : kAllShapes) {
    for (Color c : kAllColors) {
      const ShapeColor combo{s, c};
      const bool is_held =
          std::find(config.heldout.begin(), config.heldout.end(), combo) != config.heldout.end();
      (is_held ? held : seen).push_back(combo);
    }
  }
  if (seen.empty()) {
    throw ConfigError("generate_corpus: every combination is held out, nothing left to train on");
  }

  Rng rng(config.seed);
  auto draw = [&](const std::vector<ShapeColor>& combos) {
    const ShapeColor& combo = combos[rng.below(combos.size())];
    SceneSpec spec;
    spec.shape = combo.first;
    spec.color = combo.second;
    spec.size = pick(rng, kAllSizes);
    spec.background = pick(rng, kAllBackgrounds);
    spec.dx = static_cast<int>(rng.below(2 * kMaxJitter + 1)) - kMaxJitter;
    spec.dy = static_cast<int>(rng.below(2 * kMaxJitter + 1)) - kMaxJitter;
    spec.seed = rng();
    return spec;
  };

  Corpus corpus;
  corpus.manifest.config = config;
  auto& entries = corpus.manifest.entries;
  auto add = [&](const SceneSpec& spec, Split split, Image image) {
    ManifestEntry e;
    e.id = entries.size();
    char name[32];
    std::snprintf(name, sizeof(name), "images/%06llu.ppm", static_cast<unsigned long long>(e.id));
    e.path = name;
    e.caption = caption(spec);
    e.spec = spec;
    e.split = split;
    entries.push_back(std::move(e));
    corpus.images.push_back(quantized(image));
  };

  for (std::size_t i = 0; i < config.n_train; ++i) {
    const SceneSpec spec = draw(seen);
    add(spec, Split::kTrain, render(spec, config.side));
  }
  std::vector<SceneSpec> iid;
  for (std::size_t i = 0; i < config.n_test; ++i) {
    iid.push_back(draw(seen));
    add(iid.back(), Split::kTestIid, render(iid.back(), config.side));
  }
  for (std::size_t i = 0; i < config.n_test; ++i) {
    const SceneSpec spec = draw(held);
    add(spec, Split::kTestHeldout, render(spec, config.side));
  }
  for (const SceneSpec& base : iid) {
    SceneSpec spec = base;
    if (config.shift.swap_background) {
      spec.background =
          spec.background == Background::kBlack ? Background::kWhite : Background::kBlack;
    }
    Image image = render(spec, config.side);
    Rng noise(spec.seed ^ kNoiseSalt);
    for (double& v : image.rgb) v = std::clamp(v + config.shift.noise_sigma * noise.normal(), 0.0, 1.0);
    add(spec, Split::kTestShifted, std::move(image));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Manifest files

namespace {

json spec_to_json(const SceneSpec& s) {
  return {{"shape", to_string(s.shape)},           {"color", to_string(s.color)},
          {"size", to_string(s.size)},             {"background", to_string(s.background)},
          {"dx", s.dx},                            {"dy", s.dy},
          {"seed", s.seed}};
}

template <typename T>
T required(const std::optional<T>& v, std::string_view field) {
  if (!v) throw FormatError("manifest: bad value for " + std::string(field));
  return *v;
}

SceneSpec spec_from_json(const json& j) {
  SceneSpec s;
  s.shape = required(parse_shape(j.at("shape").get<std::string>()), "shape");
  s.color = required(parse_color(j.at("color").get<std::string>()), "color");
  s.size = required(parse_size(j.at("size").get<std::string>()), "size");
  s.background = required(parse_background(j.at("background").get<std::string>()), "background");
  s.dx = j.at("dx").get<int>();
  s.dy = j.at("dy").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

}  // namespace

std::string serialize_manifest(const CorpusManifest& manifest) {
  const CorpusConfig& c = manifest.config;
  json heldout = json::array();
  for (const auto& [shape, color] : c.heldout) heldout.push_back({to_string(shape), to_string(color)});
  json counts = json::object();
  for (Split s : {Split::kTrain, Split::kTestIid, Split::kTestHeldout, Split::kTestShifted}) {
    counts[std::string(to_string(s))] = manifest.count(s);
  }
  const json header = {
      {"corpus_seed", c.seed},
      {"counts", counts},
      {"config",
       {{"n_train", c.n_train},
        {"n_test", c.n_test},
        {"heldout", heldout},
        {"noise_sigma", c.shift.noise_sigma},
        {"swap_background", c.shift.swap_background},
        {"side", c.side}}}};
  std::string out = header.dump() + "\n";
  for (const auto& e : manifest.entries) {
    const json line = {{"id", e.id},
                       {"path", e.path},
                       {"caption", e.caption},
                       {"spec", spec_to_json(e.spec)},
                       {"split", to_string(e.split)}};
    out += line.dump();
    out += '\n';
  }
  return out;
}

CorpusManifest parse_manifest(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line)) throw FormatError("manifest: missing header line");
  CorpusManifest manifest;
  try {
    const json header = json::parse(line);
    CorpusConfig& c = manifest.config;
    c.seed = header.at("corpus_seed").get<std::uint64_t>();
    if (header.contains("config")) {
      const json& cfg = header.at("config");
      c.n_train = cfg.at("n_train").get<std::size_t>();
      c.n_test = cfg.at("n_test").get<std::size_t>();
      c.shift.noise_sigma = cfg.at("noise_sigma").get<double>();
      c.shift.swap_background = cfg.at("swap_background").get<bool>();
      c.side = cfg.at("side").get<std::size_t>();
      c.heldout.clear();
      for (const auto& pair : cfg.at("heldout")) {
        c.heldout.emplace_back(required(parse_shape(pair.at(0).get<std::string>()), "heldout"),
                               required(parse_color(pair.at(1).get<std::string>()), "heldout"));
      }
    }
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      ManifestEntry e;
      e.id = j.at("id").get<std::uint64_t>();
      e.path = j.at("path").get<std::string>();
      e.caption = j.at("caption").get<std::string>();
      e.spec = spec_from_json(j.at("spec"));
      e.split = parse_split(j.at("split").get<std::string>());
      manifest.entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  return manifest;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  const auto& entries = corpus.manifest.entries;
  for (std::size_t i = 0; i < entries.size(); ++i) write_ppm(dir / entries[i].path, corpus.images[i]);
  write_file(dir / kManifestFile, serialize_manifest(corpus.manifest));
}

CorpusManifest read_manifest(const std::filesystem::path& dir) {
  return parse_manifest(read_file(dir / kManifestFile));
}

Corpus load_corpus(const std::filesystem::path& dir) {
  Corpus corpus;
  corpus.manifest = read_manifest(dir);
  corpus.images.reserve(corpus.manifest.entries.size());
  for (const auto& e : corpus.manifest.entries) corpus.images.push_back(read_ppm(dir / e.path));
  return corpus;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace clipdesk
