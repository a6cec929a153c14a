#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "clora/labels.hpp"
#include "clora/lora.hpp"
#include "clora/nn.hpp"
#include "clora/tensor.hpp"

namespace clora {

struct SegmentationSample {
  size_t height = 0;
  size_t width = 0;
  std::vector<uint8_t> rgb;  // interleaved RGB, row-major
  LabelMap labels;
};

// 8-bit pixels to the model's [-1, 1] channel-planar layout [3 x H x W].
Tensor to_model_input(const SegmentationSample& sample);

struct ShapeSpec {
  std::string kind;  // circle, square, triangle, diamond, cross, ring
  std::array<uint8_t, 3> color{};
  double color_jitter = 12.0;   // per-instance uniform fill shift
  size_t min_size = 5;          // half-extent in pixels
  size_t max_size = 9;
  double texture_amp = 0.0;     // diagonal stripe cue, 8-bit units
  double texture_freq = 0.25;   // stripes per pixel along x+y
};

struct SynthSpec {
  size_t num_classes = 6;  // background included
  size_t samples_per_class = 20;
  size_t image_size = 32;
  std::vector<ShapeSpec> shapes;  // one per class 1..num_classes-1
  double noise_level = 8.0;       // background texture amplitude
  std::vector<std::pair<int, int>> twin_pairs;
  uint64_t seed = 1;

  void validate() const;

  // Distinct geometry/color per class, no twins.
  static SynthSpec desk_default(size_t num_classes, size_t samples_per_class,
                                uint64_t seed);
  // Three classes where 1 and 2 share geometry and color and differ only in
  // a faint stripe cue on class 2.
  static SynthSpec twin_default(size_t samples_per_class, uint64_t seed);
};

struct Manifest {
  SynthSpec spec;
  std::vector<std::string> class_names;
  std::vector<size_t> train;  // image indices, 80% by index
  std::vector<size_t> val;    // remaining 20%
  std::vector<uint64_t> pixel_counts;  // per class id, across all label files
};

// Writes images/NNNNN.ppm, labels/NNNNN.pgm and manifest.json. Every output
// byte is a function of (spec, spec.seed).
void generate(const SynthSpec& spec, const std::filesystem::path& out_dir);

Manifest read_manifest(const std::filesystem::path& dataset_dir);

// Reads a generation spec file: {"preset": "desk"|"twins", ...overrides}.
// Starts from the named preset and applies any overriding keys; unknown
// keys are rejected. Used by the synth command.
SynthSpec load_synth_spec(const std::filesystem::path& json_path);

SegmentationSample load_sample(const std::filesystem::path& image_path,
                               const std::filesystem::path& label_path);

// split is "train" or "val"; samples come back in manifest index order.
std::vector<SegmentationSample> load_split(
    const std::filesystem::path& dataset_dir, const std::string& split);

// Canonical centered instance of one class on a flat background: no jitter,
// no noise, fixed middle size. Twin classes are compared through these.
SegmentationSample render_prototype(const SynthSpec& spec, int class_id);

struct RawImage {
  size_t height = 0;
  size_t width = 0;
  std::vector<uint8_t> bytes;  // 3 per pixel for PPM, 1 for PGM
};

void write_ppm(const std::filesystem::path& path, size_t height, size_t width,
               const std::vector<uint8_t>& rgb);
void write_pgm(const std::filesystem::path& path, size_t height, size_t width,
               const std::vector<uint8_t>& gray);
RawImage read_ppm(const std::filesystem::path& path);
RawImage read_pgm(const std::filesystem::path& path);

// Binary container: magic "CLRA", version, tensor count, then per tensor
// name/rank/dims/row-major f64 payload (all little-endian), and a trailing
// FNV-1a checksum of everything before it. Attached adapters ride along as
// "lora.<target>.A" / ".B" plus a rank entry; model dimensions as a meta
// entry, so a load rebuilds the architecture without outside help.
void save_checkpoint(const SegModel& model, const AdapterSet& adapters,
                     const std::filesystem::path& path);

// FNV-1a over a byte range; the container's trailing integrity word.
uint64_t container_checksum(const void* bytes, size_t n);

struct Checkpoint {
  SegModel model;
  AdapterSet adapters;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace clora
