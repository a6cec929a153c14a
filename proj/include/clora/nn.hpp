#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "clora/rng.hpp"
#include "clora/tensor.hpp"

namespace clora {

struct LoRAAdapter;

struct ModelSpec {
  size_t image_size = 32;
  size_t patch_size = 4;
  size_t embed_dim = 64;
  size_t num_heads = 4;
  size_t num_layers = 4;
  size_t mlp_ratio = 2;
  size_t num_classes = 2;  // classifier width, background included

  void validate() const;
  size_t grid() const { return image_size / patch_size; }
  size_t tokens() const { return grid() * grid(); }
  size_t patch_dim() const { return 3 * patch_size * patch_size; }
  size_t head_dim() const { return embed_dim / num_heads; }
};

// A named dense projection; the unit LoRA attaches to.
struct LinearLayer {
  std::string name;
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
  std::shared_ptr<LoRAAdapter> lora;  // null unless adapted

  size_t in_dim() const { return weight.shape()[0]; }
  size_t out_dim() const { return weight.shape()[1]; }
};

struct TransformerBlock {
  Tensor ln1_gamma, ln1_beta;
  LinearLayer q, k, v, proj;
  Tensor ln2_gamma, ln2_beta;
  LinearLayer fc1, fc2;
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

// Patch-embedding ViT encoder with a single 1x1-conv classifier decoder.
// Trainability lives on the tensors themselves: requires_grad doubles as the
// frozen mask, and the optimizer only ever sees trainable parameters.
struct SegModel {
  ModelSpec spec;
  LinearLayer patch_embed;  // [patch_dim x d]
  Tensor pos_embed;         // [tokens x d]
  std::vector<TransformerBlock> blocks;
  Tensor ln_f_gamma, ln_f_beta;
  LinearLayer decoder;  // [d x num_classes], 1x1 conv over the patch grid

  static SegModel init(const ModelSpec& spec, Rng& rng);

  // Base parameters in a fixed documented order; excludes adapter tensors.
  std::vector<NamedParam> parameters() const;
  std::vector<NamedParam> encoder_parameters() const;
  std::vector<NamedParam> decoder_parameters() const;
  // Attached adapter tensors as "lora.<target>.A" / "lora.<target>.B".
  std::vector<NamedParam> adapter_parameters() const;
  // parameters() + adapter_parameters().
  std::vector<NamedParam> all_parameters() const;

  std::vector<LinearLayer*> adapter_targets();  // q and v of every block

  void set_encoder_trainable(bool on);
  void set_decoder_trainable(bool on);
  void set_all_trainable(bool on);

  // Deep copy; attached adapters are cloned and re-attached on the copy.
  SegModel clone() const;
};

// Rearranges one [3 x H x W] image into per-patch feature rows
// [tokens x patch_dim]; plain data movement, never part of the graph.
Tensor patchify(const Tensor& image, const ModelSpec& spec);

// Pixel values are expected normalized to [-1, 1] by the caller (data module).
// images: [B x 3 x H x W] with H = W = spec.image_size.
Tensor forward_segmentation(const SegModel& model, const Tensor& images);
// Single-sample path: [3 x H x W] -> [num_classes x H x W].
Tensor forward_one(const SegModel& model, const Tensor& image);

// Appends `new_class_count` zero-initialized output channels; existing
// channel weights are preserved exactly.
void extend_classifier(SegModel& model, size_t new_class_count);

size_t count_params(const SegModel& model, bool trainable_only);

enum class MacPhase { kForward, kTraining };

// Analytic multiply-accumulate count. Training is 3x forward (one forward
// plus two backward passes of equal cost). Attached adapters contribute
// tokens * r * (d_in + d_out) each.
uint64_t count_macs(const SegModel& model, size_t batch, MacPhase phase);

}  // namespace clora
