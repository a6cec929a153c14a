#include "clora/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "clora/errors.hpp"
#include "json.hpp"

namespace clora {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// model input conversion

Tensor to_model_input(const SegmentationSample& sample) {
  const size_t h = sample.height, w = sample.width;
  if (sample.rgb.size() != h * w * 3) {
    throw DimensionError("sample pixel buffer does not match its dimensions");
  }
  Tensor out = Tensor::zeros({3, h, w});
  auto& d = out.data_mut();
  for (size_t y = 0; y < h; ++y) {
    for (size_t x = 0; x < w; ++x) {
      for (size_t c = 0; c < 3; ++c) {
        const double px = sample.rgb[(y * w + x) * 3 + c];
        d[c * h * w + y * w + x] = px / 127.5 - 1.0;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// synthetic scenes

namespace {

const char* const kKinds[] = {"circle", "square",  "triangle",
                              "diamond", "cross", "ring"};

bool known_kind(const std::string& kind) {
  for (const char* k : kKinds) {
    if (kind == k) return true;
  }
  return false;
}

// Is offset (dx, dy) from the center inside a shape of half-extent s?
bool inside_shape(const std::string& kind, long dx, long dy, long s) {
  const long r2 = dx * dx + dy * dy;
  if (kind == "circle") return r2 <= s * s;
  if (kind == "square") return std::max(std::labs(dx), std::labs(dy)) <= s;
  if (kind == "triangle") {
    return dy >= -s && dy <= s && 2 * std::labs(dx) <= dy + s;
  }
  if (kind == "diamond") return std::labs(dx) + std::labs(dy) <= s;
  if (kind == "cross") {
    const long arm = std::max<long>(1, s / 3);
    return (std::labs(dx) <= arm && std::labs(dy) <= s) ||
           (std::labs(dy) <= arm && std::labs(dx) <= s);
  }
  if (kind == "ring") return r2 <= s * s && 4 * r2 >= s * s;
  throw ConfigError("unknown shape kind: " + kind);
}

uint8_t clamp8(double v) {
  const double c = std::min(255.0, std::max(0.0, std::round(v)));
  return static_cast<uint8_t>(c);
}

constexpr double kTwoPi = 6.283185307179586476925286766559;

double stripe_cue(const ShapeSpec& sh, long x, long y) {
  if (sh.texture_amp == 0.0) return 0.0;
  const double phase = kTwoPi * sh.texture_freq * static_cast<double>(x + y);
  return sh.texture_amp * std::sin(phase);
}

constexpr double kBackgroundBase = 96.0;
constexpr double kBackgroundTone = 12.0;  // checker contrast
constexpr double kShapeNoise = 3.0;       // per-pixel fill noise

void paint_background(const SynthSpec& spec, Rng& rng,
                      std::vector<uint8_t>& rgb) {
  const size_t S = spec.image_size;
  for (size_t y = 0; y < S; ++y) {
    for (size_t x = 0; x < S; ++x) {
      const double tone =
          (((x / 4) + (y / 4)) % 2 == 0) ? kBackgroundTone : -kBackgroundTone;
      for (size_t c = 0; c < 3; ++c) {
        const double noise = rng.uniform(-spec.noise_level, spec.noise_level);
        rgb[(y * S + x) * 3 + c] = clamp8(kBackgroundBase + tone + noise);
      }
    }
  }
}

void paint_shape(const SynthSpec& spec, int class_id, size_t half, long cx,
                 long cy, const std::array<double, 3>& jitter, Rng* noise_rng,
                 SegmentationSample& out) {
  const ShapeSpec& sh = spec.shapes[static_cast<size_t>(class_id) - 1];
  const long s = static_cast<long>(half);
  const size_t S = spec.image_size;
  for (long y = cy - s; y <= cy + s; ++y) {
    for (long x = cx - s; x <= cx + s; ++x) {
      if (y < 0 || x < 0 || y >= static_cast<long>(S) ||
          x >= static_cast<long>(S)) {
        continue;
      }
      if (!inside_shape(sh.kind, x - cx, y - cy, s)) continue;
      const double cue = stripe_cue(sh, x, y);
      for (size_t c = 0; c < 3; ++c) {
        double v = static_cast<double>(sh.color[c]) + jitter[c] + cue;
        if (noise_rng != nullptr) {
          v += noise_rng->uniform(-kShapeNoise, kShapeNoise);
        }
        out.rgb[(static_cast<size_t>(y) * S + static_cast<size_t>(x)) * 3 + c] =
            clamp8(v);
      }
      out.labels.at_mut(static_cast<size_t>(y), static_cast<size_t>(x)) =
          static_cast<uint8_t>(class_id);
    }
  }
}

// One scene: textured background, 0-2 extra shapes, then the primary class
// drawn on top so it is always present in the labels.
SegmentationSample render_scene(const SynthSpec& spec, Rng& rng,
                                int primary_class) {
  const size_t S = spec.image_size;
  SegmentationSample sample;
  sample.height = S;
  sample.width = S;
  sample.rgb.assign(S * S * 3, 0);
  sample.labels = LabelMap::filled(S, S, 0);

  paint_background(spec, rng, sample.rgb);

  const size_t extra = rng.next_below(3);
  std::vector<int> order;
  for (size_t e = 0; e < extra; ++e) {
    order.push_back(1 + static_cast<int>(rng.next_below(spec.num_classes - 1)));
  }
  order.push_back(primary_class);

  for (int cls : order) {
    const ShapeSpec& sh = spec.shapes[static_cast<size_t>(cls) - 1];
    const size_t half =
        sh.min_size + rng.next_below(sh.max_size - sh.min_size + 1);
    const long cx =
        static_cast<long>(half + rng.next_below(S - 2 * half));
    const long cy =
        static_cast<long>(half + rng.next_below(S - 2 * half));
    std::array<double, 3> jitter{};
    for (double& j : jitter) j = rng.uniform(-sh.color_jitter, sh.color_jitter);
    paint_shape(spec, cls, half, cx, cy, jitter, &rng, sample);
  }
  return sample;
}

std::string index_name(size_t index, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05zu.%s", index, ext);
  return buf;
}

}  // namespace

void SynthSpec::validate() const {
  if (num_classes < 2) throw ConfigError("need background plus one class");
  if (num_classes > 255) {
    throw ConfigError("class ids must fit below the ignore sentinel 255");
  }
  if (samples_per_class == 0) throw ConfigError("samples_per_class must be >= 1");
  if (image_size < 8) throw ConfigError("image_size must be >= 8");
  if (noise_level < 0.0) throw ConfigError("noise_level must be >= 0");
  if (shapes.size() != num_classes - 1) {
    throw ConfigError("need exactly one shape spec per non-background class");
  }
  for (const ShapeSpec& sh : shapes) {
    if (!known_kind(sh.kind)) throw ConfigError("unknown shape kind: " + sh.kind);
    if (sh.min_size < 2 || sh.max_size < sh.min_size) {
      throw ConfigError("shape sizes must satisfy 2 <= min <= max");
    }
    if (2 * sh.max_size + 1 > image_size) {
      throw ConfigError("shape does not fit inside the image");
    }
    if (sh.color_jitter < 0.0 || sh.texture_amp < 0.0) {
      throw ConfigError("jitter and texture amplitudes must be >= 0");
    }
  }
  for (const auto& [a, b] : twin_pairs) {
    if (a < 1 || b < 1 || a >= static_cast<int>(num_classes) ||
        b >= static_cast<int>(num_classes) || a == b) {
      throw ConfigError("twin pair must name two distinct non-background classes");
    }
  }
}

SynthSpec SynthSpec::desk_default(size_t num_classes, size_t samples_per_class,
                                  uint64_t seed) {
  static const std::array<std::array<uint8_t, 3>, 8> kPalette = {{
      {205, 70, 70},
      {70, 180, 70},
      {70, 90, 210},
      {210, 190, 60},
      {190, 70, 200},
      {60, 195, 195},
      {230, 140, 50},
      {150, 150, 220},
  }};
  SynthSpec spec;
  spec.num_classes = num_classes;
  spec.samples_per_class = samples_per_class;
  spec.seed = seed;
  for (size_t c = 1; c < num_classes; ++c) {
    ShapeSpec sh;
    sh.kind = kKinds[(c - 1) % 6];
    sh.color = kPalette[(c - 1) % kPalette.size()];
    sh.min_size = 4;
    sh.max_size = 8;
    spec.shapes.push_back(sh);
  }
  spec.validate();
  return spec;
}

SynthSpec SynthSpec::twin_default(size_t samples_per_class, uint64_t seed) {
  SynthSpec spec;
  spec.num_classes = 3;
  spec.samples_per_class = samples_per_class;
  spec.seed = seed;
  ShapeSpec plain;
  plain.kind = "circle";
  plain.color = {205, 70, 70};
  plain.min_size = 5;
  plain.max_size = 9;
  ShapeSpec striped = plain;
  striped.texture_amp = 10.0;
  spec.shapes = {plain, striped};
  spec.twin_pairs = {{1, 2}};
  spec.validate();
  return spec;
}

SegmentationSample render_prototype(const SynthSpec& spec, int class_id) {
  spec.validate();
  if (class_id < 1 || class_id >= static_cast<int>(spec.num_classes)) {
    throw ContractError("prototype class id out of range");
  }
  const size_t S = spec.image_size;
  SegmentationSample sample;
  sample.height = S;
  sample.width = S;
  sample.rgb.assign(S * S * 3, clamp8(kBackgroundBase));
  sample.labels = LabelMap::filled(S, S, 0);
  const ShapeSpec& sh = spec.shapes[static_cast<size_t>(class_id) - 1];
  const size_t half = (sh.min_size + sh.max_size) / 2;
  const long c = static_cast<long>(S / 2);
  paint_shape(spec, class_id, half, c, c, {0.0, 0.0, 0.0}, nullptr, sample);
  return sample;
}

// ---------------------------------------------------------------------------
// PPM / PGM

namespace {

void write_pnm(const fs::path& path, const char* magic, size_t height,
               size_t width, size_t channels, const std::vector<uint8_t>& px) {
  if (px.size() != height * width * channels) {
    throw ContractError("pixel buffer does not match image dimensions");
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f << magic << "\n" << width << " " << height << "\n255\n";
  f.write(reinterpret_cast<const char*>(px.data()),
          static_cast<std::streamsize>(px.size()));
  if (!f.good()) throw IoError("write failed: " + path.string());
}

// Next header token; skips whitespace and '#' comments.
std::string pnm_token(std::istream& in, const fs::path& path) {
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (!std::isspace(c)) break;
  }
  if (c == EOF) throw ParseError("truncated header: " + path.string());
  std::string tok(1, static_cast<char>(c));
  while ((c = in.get()) != EOF && !std::isspace(c)) {
    tok += static_cast<char>(c);
  }
  return tok;
}

size_t pnm_number(std::istream& in, const fs::path& path, const char* what) {
  const std::string tok = pnm_token(in, path);
  size_t value = 0;
  for (char ch : tok) {
    if (!std::isdigit(static_cast<unsigned char>(ch))) {
      throw ParseError(std::string("bad ") + what + " in " + path.string() +
                       ": " + tok);
    }
    value = value * 10 + static_cast<size_t>(ch - '0');
    if (value > (1u << 20)) {
      throw ParseError(std::string("implausible ") + what + " in " +
                       path.string());
    }
  }
  return value;
}

RawImage read_pnm(const fs::path& path, const char* magic, size_t channels) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  const std::string found = pnm_token(f, path);
  if (found != magic) {
    throw ParseError("bad magic in " + path.string() + ": expected " +
                     std::string(magic) + ", got " + found);
  }
  RawImage img;
  img.width = pnm_number(f, path, "width");
  img.height = pnm_number(f, path, "height");
  if (img.width == 0 || img.height == 0) {
    throw ParseError("zero dimension in " + path.string());
  }
  const size_t maxval = pnm_number(f, path, "maxval");
  if (maxval != 255) {
    throw ParseError("unsupported maxval in " + path.string() + ": " +
                     std::to_string(maxval) + " (only 255)");
  }
  const size_t n = img.height * img.width * channels;
  img.bytes.resize(n);
  f.read(reinterpret_cast<char*>(img.bytes.data()),
         static_cast<std::streamsize>(n));
  if (static_cast<size_t>(f.gcount()) != n) {
    throw ParseError("truncated pixel data: " + path.string());
  }
  return img;
}

}  // namespace

void write_ppm(const fs::path& path, size_t height, size_t width,
               const std::vector<uint8_t>& rgb) {
  write_pnm(path, "P6", height, width, 3, rgb);
}

void write_pgm(const fs::path& path, size_t height, size_t width,
               const std::vector<uint8_t>& gray) {
  write_pnm(path, "P5", height, width, 1, gray);
}

RawImage read_ppm(const fs::path& path) { return read_pnm(path, "P6", 3); }

RawImage read_pgm(const fs::path& path) { return read_pnm(path, "P5", 1); }

SegmentationSample load_sample(const fs::path& image_path,
                               const fs::path& label_path) {
  const RawImage img = read_ppm(image_path);
  const RawImage lab = read_pgm(label_path);
  if (img.height != lab.height || img.width != lab.width) {
    throw DataError("image/label size mismatch: " + image_path.string() +
                    " vs " + label_path.string());
  }
  SegmentationSample sample;
  sample.height = img.height;
  sample.width = img.width;
  sample.rgb = img.bytes;
  sample.labels.height = lab.height;
  sample.labels.width = lab.width;
  sample.labels.ids = lab.bytes;
  return sample;
}

// ---------------------------------------------------------------------------
// dataset generation and manifest

namespace {

json spec_to_json(const SynthSpec& spec) {
  json shapes = json::array();
  for (const ShapeSpec& sh : spec.shapes) {
    shapes.push_back({{"kind", sh.kind},
                      {"color", {sh.color[0], sh.color[1], sh.color[2]}},
                      {"color_jitter", sh.color_jitter},
                      {"min_size", sh.min_size},
                      {"max_size", sh.max_size},
                      {"texture_amp", sh.texture_amp},
                      {"texture_freq", sh.texture_freq}});
  }
  json twins = json::array();
  for (const auto& [a, b] : spec.twin_pairs) twins.push_back({a, b});
  return {{"num_classes", spec.num_classes},
          {"samples_per_class", spec.samples_per_class},
          {"image_size", spec.image_size},
          {"shapes", shapes},
          {"noise_level", spec.noise_level},
          {"twin_pairs", twins},
          {"seed", spec.seed}};
}

template <typename T>
T manifest_get(const json& j, const char* key, const fs::path& path) {
  if (!j.contains(key)) {
    throw ParseError("manifest missing key '" + std::string(key) + "': " +
                     path.string());
  }
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ParseError("manifest key '" + std::string(key) + "' has the wrong " +
                     "type: " + e.what());
  }
}

SynthSpec spec_from_json(const json& j, const fs::path& path) {
  SynthSpec spec;
  spec.num_classes = manifest_get<size_t>(j, "num_classes", path);
  spec.samples_per_class = manifest_get<size_t>(j, "samples_per_class", path);
  spec.image_size = manifest_get<size_t>(j, "image_size", path);
  spec.noise_level = manifest_get<double>(j, "noise_level", path);
  spec.seed = manifest_get<uint64_t>(j, "seed", path);
  spec.shapes.clear();
  for (const json& sj : manifest_get<json>(j, "shapes", path)) {
    ShapeSpec sh;
    sh.kind = manifest_get<std::string>(sj, "kind", path);
    const auto color = manifest_get<std::vector<int>>(sj, "color", path);
    if (color.size() != 3) throw ParseError("shape color must have 3 entries");
    for (size_t c = 0; c < 3; ++c) {
      if (color[c] < 0 || color[c] > 255) {
        throw ParseError("shape color channel out of byte range");
      }
      sh.color[c] = static_cast<uint8_t>(color[c]);
    }
    sh.color_jitter = manifest_get<double>(sj, "color_jitter", path);
    sh.min_size = manifest_get<size_t>(sj, "min_size", path);
    sh.max_size = manifest_get<size_t>(sj, "max_size", path);
    sh.texture_amp = manifest_get<double>(sj, "texture_amp", path);
    sh.texture_freq = manifest_get<double>(sj, "texture_freq", path);
    spec.shapes.push_back(sh);
  }
  spec.twin_pairs.clear();
  for (const json& tj : manifest_get<json>(j, "twin_pairs", path)) {
    const auto pair = tj.get<std::vector<int>>();
    if (pair.size() != 2) throw ParseError("twin pair must have 2 entries");
    spec.twin_pairs.emplace_back(pair[0], pair[1]);
  }
  spec.validate();
  return spec;
}

}  // namespace

SynthSpec load_synth_spec(const fs::path& json_path) {
  std::ifstream f(json_path);
  if (!f) throw ConfigError("cannot open spec file: " + json_path.string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ConfigError("spec file is not valid JSON: " + json_path.string() +
                      ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("spec file must hold a JSON object");
  static const std::set<std::string> kAllowed = {
      "preset",      "num_classes", "samples_per_class", "image_size",
      "noise_level", "seed",        "shapes",            "twin_pairs"};
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (kAllowed.find(key) == kAllowed.end()) {
      throw ConfigError("unknown spec key '" + key + "' in " +
                        json_path.string());
    }
  }
  auto get_or = [&](const char* key, auto fallback) {
    using T = decltype(fallback);
    if (!j.contains(key)) return fallback;
    try {
      return j.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("spec key '" + std::string(key) +
                        "' has the wrong type: " + e.what());
    }
  };

  const std::string preset = get_or("preset", std::string("desk"));
  const size_t samples = get_or("samples_per_class", size_t{20});
  const uint64_t seed = get_or("seed", uint64_t{1});
  SynthSpec spec;
  if (preset == "desk") {
    spec = SynthSpec::desk_default(get_or("num_classes", size_t{6}), samples,
                                   seed);
  } else if (preset == "twins") {
    if (j.contains("num_classes")) {
      throw ConfigError("the twins preset fixes num_classes at 3");
    }
    spec = SynthSpec::twin_default(samples, seed);
  } else {
    throw ConfigError("unknown preset '" + preset + "' (desk or twins)");
  }
  spec.image_size = get_or("image_size", spec.image_size);
  spec.noise_level = get_or("noise_level", spec.noise_level);
  if (j.contains("shapes")) {
    try {
      spec.shapes.clear();
      for (const json& sj : j.at("shapes")) {
        ShapeSpec sh;
        sh.kind = sj.at("kind").get<std::string>();
        const auto color = sj.at("color").get<std::vector<int>>();
        if (color.size() != 3) throw ConfigError("shape color needs 3 entries");
        for (size_t c = 0; c < 3; ++c) {
          sh.color[c] = static_cast<uint8_t>(color[c]);
        }
        if (sj.contains("color_jitter")) sh.color_jitter = sj.at("color_jitter");
        if (sj.contains("min_size")) sh.min_size = sj.at("min_size");
        if (sj.contains("max_size")) sh.max_size = sj.at("max_size");
        if (sj.contains("texture_amp")) sh.texture_amp = sj.at("texture_amp");
        if (sj.contains("texture_freq")) sh.texture_freq = sj.at("texture_freq");
        spec.shapes.push_back(sh);
      }
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad 'shapes' entry: ") + e.what());
    }
  }
  if (j.contains("twin_pairs")) {
    try {
      spec.twin_pairs.clear();
      for (const json& tj : j.at("twin_pairs")) {
        const auto pair = tj.get<std::vector<int>>();
        if (pair.size() != 2) throw ConfigError("twin pair needs 2 entries");
        spec.twin_pairs.emplace_back(pair[0], pair[1]);
      }
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad 'twin_pairs' entry: ") + e.what());
    }
  }
  spec.validate();
  return spec;
}

void generate(const SynthSpec& spec, const fs::path& out_dir) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "labels", ec);
  if (ec) throw IoError("cannot create dataset directory: " + out_dir.string());

  Rng rng = Rng::stream(spec.seed, "data");
  const size_t total = spec.samples_per_class * (spec.num_classes - 1);
  std::vector<uint64_t> pixel_counts(spec.num_classes, 0);
  for (size_t i = 0; i < total; ++i) {
    const int primary =
        1 + static_cast<int>(i % (spec.num_classes - 1));
    const SegmentationSample sample = render_scene(spec, rng, primary);
    for (uint8_t id : sample.labels.ids) ++pixel_counts[id];
    write_ppm(out_dir / "images" / index_name(i, "ppm"), sample.height,
              sample.width, sample.rgb);
    write_pgm(out_dir / "labels" / index_name(i, "pgm"), sample.height,
              sample.width, sample.labels.ids);
  }

  const size_t n_val = total / 5;  // 80/20 by index, earliest indices train
  json train = json::array(), val = json::array();
  for (size_t i = 0; i < total - n_val; ++i) train.push_back(i);
  for (size_t i = total - n_val; i < total; ++i) val.push_back(i);

  json names = json::array();
  names.push_back("background");
  for (size_t c = 1; c < spec.num_classes; ++c) {
    names.push_back(spec.shapes[c - 1].kind + "-" + std::to_string(c));
  }

  const json manifest = {{"spec", spec_to_json(spec)},
                         {"class_names", names},
                         {"train", train},
                         {"val", val},
                         {"pixel_counts", pixel_counts}};
  const fs::path mpath = out_dir / "manifest.json";
  std::ofstream f(mpath);
  if (!f) throw IoError("cannot open for writing: " + mpath.string());
  f << manifest.dump(2) << "\n";
  if (!f.good()) throw IoError("write failed: " + mpath.string());
}

Manifest read_manifest(const fs::path& dataset_dir) {
  const fs::path mpath = dataset_dir / "manifest.json";
  std::ifstream f(mpath);
  if (!f) throw IoError("cannot open: " + mpath.string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ParseError("manifest is not valid JSON: " + mpath.string() + ": " +
                     e.what());
  }
  Manifest m;
  m.spec = spec_from_json(manifest_get<json>(j, "spec", mpath), mpath);
  m.class_names = manifest_get<std::vector<std::string>>(j, "class_names", mpath);
  m.train = manifest_get<std::vector<size_t>>(j, "train", mpath);
  m.val = manifest_get<std::vector<size_t>>(j, "val", mpath);
  m.pixel_counts = manifest_get<std::vector<uint64_t>>(j, "pixel_counts", mpath);
  if (m.class_names.size() != m.spec.num_classes ||
      m.pixel_counts.size() != m.spec.num_classes) {
    throw ParseError("manifest class tables do not match num_classes: " +
                     mpath.string());
  }
  const size_t total = m.spec.samples_per_class * (m.spec.num_classes - 1);
  for (size_t idx : m.train) {
    if (idx >= total) throw ParseError("train index out of range: " + mpath.string());
  }
  for (size_t idx : m.val) {
    if (idx >= total) throw ParseError("val index out of range: " + mpath.string());
  }
  return m;
}

std::vector<SegmentationSample> load_split(const fs::path& dataset_dir,
                                           const std::string& split) {
  const Manifest m = read_manifest(dataset_dir);
  const std::vector<size_t>* indices = nullptr;
  if (split == "train") {
    indices = &m.train;
  } else if (split == "val") {
    indices = &m.val;
  } else {
    throw ContractError("split must be 'train' or 'val', got '" + split + "'");
  }
  std::vector<SegmentationSample> samples;
  samples.reserve(indices->size());
  for (size_t idx : *indices) {
    samples.push_back(
        load_sample(dataset_dir / "images" / index_name(idx, "ppm"),
                    dataset_dir / "labels" / index_name(idx, "pgm")));
  }
  return samples;
}

// ---------------------------------------------------------------------------
// checkpoint container

namespace {

constexpr char kMagic[4] = {'C', 'L', 'R', 'A'};
constexpr uint32_t kVersion = 1;
constexpr size_t kMaxNameLen = 4096;
constexpr size_t kMaxTensorElems = 100'000'000;

void put_u32(std::string& buf, uint32_t v) {
  for (int k = 0; k < 4; ++k) buf += static_cast<char>((v >> (8 * k)) & 0xff);
}

void put_u64(std::string& buf, uint64_t v) {
  for (int k = 0; k < 8; ++k) buf += static_cast<char>((v >> (8 * k)) & 0xff);
}

void put_f64(std::string& buf, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  put_u64(buf, bits);
}

struct Cursor {
  const uint8_t* p;
  size_t n;
  size_t pos = 0;

  void need(size_t k) const {
    if (pos + k > n) throw ParseError("truncated checkpoint tensor table");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<uint32_t>(p[pos + k]) << (8 * k);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int k = 0; k < 8; ++k) v |= static_cast<uint64_t>(p[pos + k]) << (8 * k);
    pos += 8;
    return v;
  }
  double f64() {
    const uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
  }
  std::string str(size_t k) {
    need(k);
    std::string s(reinterpret_cast<const char*>(p + pos), k);
    pos += k;
    return s;
  }
};

void put_entry(std::string& buf, const std::string& name,
               const std::vector<size_t>& dims,
               const std::vector<double>& data) {
  put_u32(buf, static_cast<uint32_t>(name.size()));
  buf += name;
  put_u32(buf, static_cast<uint32_t>(dims.size()));
  size_t numel = 1;
  for (size_t d : dims) {
    put_u64(buf, d);
    numel *= d;
  }
  if (numel != data.size()) {
    throw ContractError("checkpoint entry size mismatch for " + name);
  }
  for (double v : data) put_f64(buf, v);
}

struct Entry {
  std::vector<size_t> dims;
  std::vector<double> data;
};

size_t meta_dim(double v, const char* what) {
  if (!(v >= 1.0) || v != std::floor(v) || v > 1e9) {
    throw ParseError(std::string("bad model metadata value for ") + what);
  }
  return static_cast<size_t>(v);
}

}  // namespace

uint64_t container_checksum(const void* bytes, size_t n) {
  const uint8_t* p = static_cast<const uint8_t*>(bytes);
  uint64_t h = 14695981039346656037ULL;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

void save_checkpoint(const SegModel& model, const AdapterSet& adapters,
                     const fs::path& path) {
  if (!adapters.empty() && adapters.merged) {
    throw ContractError("cannot save a merged adapter set");
  }
  // The set must be exactly what is attached to this model.
  std::set<const LoRAAdapter*> attached;
  for (const TransformerBlock& b : model.blocks) {
    if (b.q.lora) attached.insert(b.q.lora.get());
    if (b.v.lora) attached.insert(b.v.lora.get());
  }
  std::set<const LoRAAdapter*> given;
  for (const auto& ad : adapters.adapters) given.insert(ad.get());
  if (attached != given) {
    throw ContractError("adapter set does not match the model's attachments");
  }

  std::string buf;
  buf.append(kMagic, 4);
  put_u32(buf, kVersion);

  const std::vector<NamedParam> params = model.parameters();
  const uint64_t count = 1 + params.size() + 4 * adapters.size();
  put_u64(buf, count);

  const ModelSpec& ms = model.spec;
  put_entry(buf, "meta.model", {7},
            {static_cast<double>(ms.image_size),
             static_cast<double>(ms.patch_size),
             static_cast<double>(ms.embed_dim),
             static_cast<double>(ms.num_heads),
             static_cast<double>(ms.num_layers),
             static_cast<double>(ms.mlp_ratio),
             static_cast<double>(ms.num_classes)});
  for (const NamedParam& p : params) {
    put_entry(buf, p.name, p.tensor.shape(), p.tensor.data());
  }
  for (const auto& ad : adapters.adapters) {
    const std::string base = "lora." + ad->target_name;
    put_entry(buf, base + ".A", ad->down.shape(), ad->down.data());
    put_entry(buf, base + ".B", ad->up.shape(), ad->up.data());
    put_entry(buf, base + ".rank", {1}, {static_cast<double>(ad->rank)});
    put_entry(buf, base + ".scale", {1}, {ad->scaling});
  }

  put_u64(buf, container_checksum(buf.data(), buf.size()));

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f.good()) throw IoError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string buf = ss.str();
  if (!f.good() && !f.eof()) throw IoError("read failed: " + path.string());

  if (buf.size() < 4 + 4 + 8 + 8) {
    throw ParseError("checkpoint too short: " + path.string());
  }
  Cursor cur{reinterpret_cast<const uint8_t*>(buf.data()), buf.size() - 8};
  // Verify integrity before trusting any field.
  Cursor tail{reinterpret_cast<const uint8_t*>(buf.data()), buf.size()};
  tail.pos = buf.size() - 8;
  const uint64_t stored = tail.u64();
  const uint64_t actual = container_checksum(buf.data(), buf.size() - 8);
  if (stored != actual) {
    throw ParseError("checkpoint checksum mismatch: " + path.string());
  }
  if (cur.str(4) != std::string(kMagic, 4)) {
    throw ParseError("bad checkpoint magic: " + path.string());
  }
  const uint32_t version = cur.u32();
  if (version != kVersion) {
    throw ParseError("unsupported checkpoint version " +
                     std::to_string(version) + ": " + path.string());
  }
  const uint64_t count = cur.u64();

  std::map<std::string, Entry> entries;
  for (uint64_t i = 0; i < count; ++i) {
    const uint32_t name_len = cur.u32();
    if (name_len == 0 || name_len > kMaxNameLen) {
      throw ParseError("implausible tensor name length in " + path.string());
    }
    const std::string name = cur.str(name_len);
    const uint32_t rank = cur.u32();
    if (rank > 8) throw ParseError("implausible tensor rank in " + path.string());
    Entry e;
    size_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      const uint64_t dim = cur.u64();
      if (dim == 0 || numel > kMaxTensorElems / dim) {
        throw ParseError("implausible tensor dimensions in " + path.string());
      }
      e.dims.push_back(static_cast<size_t>(dim));
      numel *= dim;
    }
    e.data.resize(numel);
    for (size_t k = 0; k < numel; ++k) e.data[k] = cur.f64();
    if (!entries.emplace(name, std::move(e)).second) {
      throw ParseError("duplicate tensor name '" + name + "' in " +
                       path.string());
    }
  }
  if (cur.pos != cur.n) {
    throw ParseError("trailing bytes after tensor table: " + path.string());
  }

  const auto meta_it = entries.find("meta.model");
  if (meta_it == entries.end() || meta_it->second.data.size() != 7) {
    throw ParseError("missing model metadata: " + path.string());
  }
  const std::vector<double>& md = meta_it->second.data;
  ModelSpec ms;
  ms.image_size = meta_dim(md[0], "image_size");
  ms.patch_size = meta_dim(md[1], "patch_size");
  ms.embed_dim = meta_dim(md[2], "embed_dim");
  ms.num_heads = meta_dim(md[3], "num_heads");
  ms.num_layers = meta_dim(md[4], "num_layers");
  ms.mlp_ratio = meta_dim(md[5], "mlp_ratio");
  ms.num_classes = meta_dim(md[6], "num_classes");
  ms.validate();
  entries.erase(meta_it);

  Checkpoint ckpt;
  Rng scratch(0);  // values are overwritten below
  ckpt.model = SegModel::init(ms, scratch);

  for (const NamedParam& p : ckpt.model.parameters()) {
    const auto it = entries.find(p.name);
    if (it == entries.end()) {
      throw ParseError("missing tensor '" + p.name + "' in " + path.string());
    }
    if (it->second.dims != p.tensor.shape()) {
      throw ParseError("shape mismatch for tensor '" + p.name + "' in " +
                       path.string());
    }
    p.tensor.impl().data = it->second.data;
    entries.erase(it);
  }

  for (LinearLayer* layer : ckpt.model.adapter_targets()) {
    const std::string base = "lora." + layer->name;
    const auto a_it = entries.find(base + ".A");
    if (a_it == entries.end()) continue;
    const auto b_it = entries.find(base + ".B");
    const auto r_it = entries.find(base + ".rank");
    const auto s_it = entries.find(base + ".scale");
    if (b_it == entries.end() || r_it == entries.end() ||
        s_it == entries.end()) {
      throw ParseError("incomplete adapter entry for '" + layer->name +
                       "' in " + path.string());
    }
    const size_t rank = meta_dim(r_it->second.data.at(0), "adapter rank");
    const Entry& ea = a_it->second;
    const Entry& eb = b_it->second;
    const std::vector<size_t> want_a = {layer->in_dim(), rank};
    const std::vector<size_t> want_b = {rank, layer->out_dim()};
    if (ea.dims != want_a || eb.dims != want_b) {
      throw ParseError("adapter factor shape mismatch for '" + layer->name +
                       "' in " + path.string());
    }
    auto ad = std::make_shared<LoRAAdapter>();
    ad->target_name = layer->name;
    ad->rank = rank;
    ad->down = Tensor::from_data(want_a, ea.data, /*requires_grad=*/true);
    ad->up = Tensor::from_data(want_b, eb.data, /*requires_grad=*/true);
    ad->scaling = s_it->second.data.at(0);
    layer->lora = ad;
    ckpt.adapters.adapters.push_back(ad);
    entries.erase(a_it);
    entries.erase(base + ".B");
    entries.erase(base + ".rank");
    entries.erase(base + ".scale");
  }
  if (!entries.empty()) {
    throw ParseError("unexpected tensor '" + entries.begin()->first + "' in " +
                     path.string());
  }

  // Match the trainability convention of a freshly adapted model.
  if (!ckpt.adapters.empty()) ckpt.model.set_encoder_trainable(false);
  return ckpt;
}

}  // namespace clora
