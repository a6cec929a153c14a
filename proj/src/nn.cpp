#include "clora/nn.hpp"

#include <cmath>
#include <string>
#include <utility>

#include "clora/errors.hpp"
#include "clora/lora.hpp"

namespace clora {

void ModelSpec::validate() const {
  if (image_size == 0 || patch_size == 0 || embed_dim == 0 || num_heads == 0 ||
      num_layers == 0 || mlp_ratio == 0) {
    throw ConfigError("model spec fields must be positive");
  }
  if (image_size % patch_size != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) +
                      " not divisible by patch_size " +
                      std::to_string(patch_size));
  }
  if (embed_dim % num_heads != 0) {
    throw ConfigError("embed_dim " + std::to_string(embed_dim) +
                      " not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
}

namespace {

constexpr double kInitStd = 0.02;

LinearLayer make_linear(std::string name, size_t in, size_t out, Rng& rng) {
  LinearLayer l;
  l.name = std::move(name);
  l.weight = Tensor::randn({in, out}, rng, kInitStd, /*requires_grad=*/true);
  l.bias = Tensor::zeros({out}, /*requires_grad=*/true);
  return l;
}

void push_linear(std::vector<NamedParam>& out, const LinearLayer& l) {
  out.push_back({l.name + ".W", l.weight});
  out.push_back({l.name + ".b", l.bias});
}

void set_trainable(std::vector<NamedParam> params, bool on) {
  for (auto& p : params) p.tensor.set_requires_grad(on);
}

}  // namespace

SegModel SegModel::init(const ModelSpec& spec, Rng& rng) {
  spec.validate();
  SegModel m;
  m.spec = spec;
  const size_t d = spec.embed_dim;
  m.patch_embed = make_linear("patch_embed", spec.patch_dim(), d, rng);
  m.pos_embed = Tensor::randn({spec.tokens(), d}, rng, kInitStd, true);
  for (size_t i = 0; i < spec.num_layers; ++i) {
    const std::string p = "block" + std::to_string(i);
    TransformerBlock b;
    b.ln1_gamma = Tensor::full({d}, 1.0, true);
    b.ln1_beta = Tensor::zeros({d}, true);
    b.q = make_linear(p + ".attn.q", d, d, rng);
    b.k = make_linear(p + ".attn.k", d, d, rng);
    b.v = make_linear(p + ".attn.v", d, d, rng);
    b.proj = make_linear(p + ".attn.proj", d, d, rng);
    b.ln2_gamma = Tensor::full({d}, 1.0, true);
    b.ln2_beta = Tensor::zeros({d}, true);
    b.fc1 = make_linear(p + ".mlp.fc1", d, spec.mlp_ratio * d, rng);
    b.fc2 = make_linear(p + ".mlp.fc2", spec.mlp_ratio * d, d, rng);
    m.blocks.push_back(std::move(b));
  }
  m.ln_f_gamma = Tensor::full({d}, 1.0, true);
  m.ln_f_beta = Tensor::zeros({d}, true);
  m.decoder = make_linear("decoder", d, spec.num_classes, rng);
  return m;
}

std::vector<NamedParam> SegModel::encoder_parameters() const {
  std::vector<NamedParam> out;
  push_linear(out, patch_embed);
  out.push_back({"pos_embed", pos_embed});
  for (size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "block" + std::to_string(i);
    const TransformerBlock& b = blocks[i];
    out.push_back({p + ".ln1.gamma", b.ln1_gamma});
    out.push_back({p + ".ln1.beta", b.ln1_beta});
    push_linear(out, b.q);
    push_linear(out, b.k);
    push_linear(out, b.v);
    push_linear(out, b.proj);
    out.push_back({p + ".ln2.gamma", b.ln2_gamma});
    out.push_back({p + ".ln2.beta", b.ln2_beta});
    push_linear(out, b.fc1);
    push_linear(out, b.fc2);
  }
  out.push_back({"ln_f.gamma", ln_f_gamma});
  out.push_back({"ln_f.beta", ln_f_beta});
  return out;
}

std::vector<NamedParam> SegModel::decoder_parameters() const {
  std::vector<NamedParam> out;
  push_linear(out, decoder);
  return out;
}

std::vector<NamedParam> SegModel::parameters() const {
  std::vector<NamedParam> out = encoder_parameters();
  push_linear(out, decoder);
  return out;
}

std::vector<NamedParam> SegModel::adapter_parameters() const {
  std::vector<NamedParam> out;
  for (const TransformerBlock& b : blocks) {
    for (const LinearLayer* l : {&b.q, &b.v}) {
      if (!l->lora) continue;
      out.push_back({"lora." + l->lora->target_name + ".A", l->lora->down});
      out.push_back({"lora." + l->lora->target_name + ".B", l->lora->up});
    }
  }
  return out;
}

std::vector<NamedParam> SegModel::all_parameters() const {
  std::vector<NamedParam> out = parameters();
  std::vector<NamedParam> ad = adapter_parameters();
  out.insert(out.end(), ad.begin(), ad.end());
  return out;
}

std::vector<LinearLayer*> SegModel::adapter_targets() {
  std::vector<LinearLayer*> out;
  for (TransformerBlock& b : blocks) {
    out.push_back(&b.q);
    out.push_back(&b.v);
  }
  return out;
}

void SegModel::set_encoder_trainable(bool on) {
  set_trainable(encoder_parameters(), on);
}

void SegModel::set_decoder_trainable(bool on) {
  set_trainable(decoder_parameters(), on);
}

void SegModel::set_all_trainable(bool on) {
  set_trainable(parameters(), on);
}

namespace {

LinearLayer clone_linear(const LinearLayer& l) {
  LinearLayer out;
  out.name = l.name;
  out.weight = l.weight.clone();
  out.bias = l.bias.clone();
  if (l.lora) {
    auto ad = std::make_shared<LoRAAdapter>();
    ad->target_name = l.lora->target_name;
    ad->rank = l.lora->rank;
    ad->scaling = l.lora->scaling;
    ad->down = l.lora->down.clone();
    ad->up = l.lora->up.clone();
    out.lora = std::move(ad);
  }
  return out;
}

}  // namespace

SegModel SegModel::clone() const {
  SegModel m;
  m.spec = spec;
  m.patch_embed = clone_linear(patch_embed);
  m.pos_embed = pos_embed.clone();
  for (const TransformerBlock& b : blocks) {
    TransformerBlock c;
    c.ln1_gamma = b.ln1_gamma.clone();
    c.ln1_beta = b.ln1_beta.clone();
    c.q = clone_linear(b.q);
    c.k = clone_linear(b.k);
    c.v = clone_linear(b.v);
    c.proj = clone_linear(b.proj);
    c.ln2_gamma = b.ln2_gamma.clone();
    c.ln2_beta = b.ln2_beta.clone();
    c.fc1 = clone_linear(b.fc1);
    c.fc2 = clone_linear(b.fc2);
    m.blocks.push_back(std::move(c));
  }
  m.ln_f_gamma = ln_f_gamma.clone();
  m.ln_f_beta = ln_f_beta.clone();
  m.decoder = clone_linear(decoder);
  return m;
}

Tensor patchify(const Tensor& image, const ModelSpec& spec) {
  const auto& sh = image.shape();
  if (sh.size() != 3 || sh[0] != 3 || sh[1] != spec.image_size ||
      sh[2] != spec.image_size) {
    throw DimensionError("patchify expects [3 x " +
                         std::to_string(spec.image_size) + " x " +
                         std::to_string(spec.image_size) + "], got " +
                         shape_str(sh));
  }
  const size_t g = spec.grid();
  const size_t p = spec.patch_size;
  const size_t hw = spec.image_size;
  Tensor out = Tensor::zeros({spec.tokens(), spec.patch_dim()});
  const std::vector<double>& src = image.data();
  std::vector<double>& dst = out.data_mut();
  for (size_t gy = 0; gy < g; ++gy) {
    for (size_t gx = 0; gx < g; ++gx) {
      const size_t tok = gy * g + gx;
      for (size_t c = 0; c < 3; ++c) {
        for (size_t py = 0; py < p; ++py) {
          for (size_t px = 0; px < p; ++px) {
            const size_t y = gy * p + py;
            const size_t x = gx * p + px;
            dst[tok * spec.patch_dim() + c * p * p + py * p + px] =
                src[c * hw * hw + y * hw + x];
          }
        }
      }
    }
  }
  return out;
}

Tensor forward_one(const SegModel& model, const Tensor& image) {
  const ModelSpec& s = model.spec;
  Tensor x = patchify(image, s);
  Tensor h = add(lora_forward(model.patch_embed, x), model.pos_embed);
  const size_t hd = s.head_dim();
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (const TransformerBlock& b : model.blocks) {
    Tensor n1 = layer_norm(h, b.ln1_gamma, b.ln1_beta);
    Tensor q = lora_forward(b.q, n1);
    Tensor k = lora_forward(b.k, n1);
    Tensor v = lora_forward(b.v, n1);
    std::vector<Tensor> heads;
    heads.reserve(s.num_heads);
    for (size_t i = 0; i < s.num_heads; ++i) {
      Tensor qh = slice_cols(q, i * hd, (i + 1) * hd);
      Tensor kh = slice_cols(k, i * hd, (i + 1) * hd);
      Tensor vh = slice_cols(v, i * hd, (i + 1) * hd);
      Tensor att = softmax(scale(matmul(qh, kh, false, true), att_scale), 1);
      heads.push_back(matmul(att, vh));
    }
    h = add(h, lora_forward(b.proj, concat_cols(heads)));
    Tensor n2 = layer_norm(h, b.ln2_gamma, b.ln2_beta);
    h = add(h, lora_forward(b.fc2, gelu(lora_forward(b.fc1, n2))));
  }
  h = layer_norm(h, model.ln_f_gamma, model.ln_f_beta);
  Tensor logits = lora_forward(model.decoder, h);  // [tokens x num_classes]
  return tokens_to_grid(logits, s.image_size, s.patch_size);
}

Tensor forward_segmentation(const SegModel& model, const Tensor& images) {
  const auto& sh = images.shape();
  if (sh.size() != 4 || sh[1] != 3 || sh[2] != model.spec.image_size ||
      sh[3] != model.spec.image_size) {
    throw DimensionError(
        "forward_segmentation expects [B x 3 x " +
        std::to_string(model.spec.image_size) + " x " +
        std::to_string(model.spec.image_size) + "], got " + shape_str(sh));
  }
  if (images.requires_grad()) {
    throw ContractError("input images must not require grad");
  }
  const size_t b = sh[0];
  const size_t per = 3 * sh[2] * sh[3];
  std::vector<Tensor> outs;
  outs.reserve(b);
  for (size_t i = 0; i < b; ++i) {
    Tensor img = Tensor::zeros({3, sh[2], sh[3]});
    std::copy(images.data().begin() + static_cast<ptrdiff_t>(i * per),
              images.data().begin() + static_cast<ptrdiff_t>((i + 1) * per),
              img.data_mut().begin());
    outs.push_back(forward_one(model, img));
  }
  return stack(outs);
}

void extend_classifier(SegModel& model, size_t new_class_count) {
  if (new_class_count == 0) {
    throw ContractError("extend_classifier needs at least one new class");
  }
  const size_t d = model.spec.embed_dim;
  const size_t oldc = model.spec.num_classes;
  const size_t newc = oldc + new_class_count;
  Tensor w = Tensor::zeros({d, newc});
  for (size_t i = 0; i < d; ++i) {
    for (size_t j = 0; j < oldc; ++j) {
      w.at_mut(i, j) = model.decoder.weight.at(i, j);
    }
  }
  Tensor bias = Tensor::zeros({newc});
  std::copy(model.decoder.bias.data().begin(), model.decoder.bias.data().end(),
            bias.data_mut().begin());
  w.set_requires_grad(model.decoder.weight.requires_grad());
  bias.set_requires_grad(model.decoder.bias.requires_grad());
  model.decoder.weight = w;
  model.decoder.bias = bias;
  model.spec.num_classes = newc;
}

size_t count_params(const SegModel& model, bool trainable_only) {
  size_t total = 0;
  for (const NamedParam& p : model.all_parameters()) {
    if (trainable_only && !p.tensor.requires_grad()) continue;
    total += p.tensor.numel();
  }
  return total;
}

uint64_t count_macs(const SegModel& model, size_t batch, MacPhase phase) {
  const ModelSpec& s = model.spec;
  const uint64_t t = s.tokens();
  const uint64_t d = s.embed_dim;
  uint64_t per_sample = t * s.patch_dim() * d;  // patch embedding
  for (const TransformerBlock& b : model.blocks) {
    per_sample += 4 * t * d * d;      // q, k, v, proj
    per_sample += 2 * t * t * d;      // QK^T scores + attention-weighted V
    per_sample += 2 * t * d * (s.mlp_ratio * d);  // fc1 + fc2
    for (const LinearLayer* l : {&b.q, &b.v}) {
      if (l->lora) {
        per_sample += t * l->lora->rank * (l->in_dim() + l->out_dim());
      }
    }
  }
  per_sample += t * d * s.num_classes;  // 1x1-conv classifier per token
  uint64_t total = per_sample * batch;
  if (phase == MacPhase::kTraining) total *= 3;
  return total;
}

}  // namespace clora
