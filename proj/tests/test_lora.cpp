#include "clora/lora.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>
#include <vector>

#include "clora/errors.hpp"
#include "clora/nn.hpp"
#include "clora/rng.hpp"
#include "clora/tensor.hpp"
#include "doctest.h"

using namespace clora;

namespace {

SegModel desk_model(size_t num_classes, uint64_t seed = 7) {
  ModelSpec spec;
  spec.num_classes = num_classes;
  Rng rng = Rng::stream(seed, "init");
  return SegModel::init(spec, rng);
}

Tensor random_images(size_t batch, size_t hw, uint64_t seed) {
  Rng rng = Rng::stream(seed, "data");
  Tensor t = Tensor::zeros({batch, 3, hw, hw});
  for (double& v : t.data_mut()) v = rng.uniform(-1.0, 1.0);
  return t;
}

void fill_random(Tensor t, Rng& rng, double scale) {
  for (double& v : t.data_mut()) v = rng.uniform(-scale, scale);
}

// dense ΔW = scaling * down * up, by plain loops (the oracle path)
std::vector<std::vector<double>> dense_delta(const LoRAAdapter& ad) {
  const size_t in = ad.down.shape()[0];
  const size_t out = ad.up.shape()[1];
  std::vector<std::vector<double>> d(in, std::vector<double>(out, 0.0));
  for (size_t i = 0; i < in; ++i)
    for (size_t j = 0; j < out; ++j)
      for (size_t r = 0; r < ad.rank; ++r)
        d[i][j] += ad.scaling * ad.down.at(i, r) * ad.up.at(r, j);
  return d;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST_CASE("creation attaches eight adapters and freezes the encoder") {
  SegModel model = desk_model(4);
  Tensor images = random_images(2, 32, 31);
  Tensor before;
  {
    NoGradGuard ng;
    before = forward_segmentation(model, images);
  }

  AdapterSet set = create_adapters(model, 8, 99);
  CHECK(set.size() == 8);  // q and v of each of 4 blocks
  CHECK(model.adapter_parameters().size() == 16);
  for (const NamedParam& p : model.encoder_parameters())
    CHECK_FALSE(p.tensor.requires_grad());
  CHECK(model.decoder.weight.requires_grad());
  for (const auto& ad : set.adapters) {
    for (double v : ad->up.data()) CHECK(v == 0.0);
    bool any_nonzero = false;
    for (double v : ad->down.data()) any_nonzero |= (v != 0.0);
    CHECK(any_nonzero);
  }

  NoGradGuard ng;
  Tensor after = forward_segmentation(model, images);
  CHECK(max_abs_diff(before, after) == 0.0);  // zero-init neutrality
}

TEST_CASE("creation rejects bad ranks and double attachment") {
  SegModel model = desk_model(2);
  CHECK_THROWS_AS(create_adapters(model, 0, 1), ContractError);
  CHECK_THROWS_AS(create_adapters(model, 65, 1), ContractError);
  create_adapters(model, 4, 1);
  CHECK_THROWS_AS(create_adapters(model, 4, 1), ContractError);
}

TEST_CASE("adapter creation is seed-deterministic") {
  SegModel a = desk_model(2);
  SegModel b = desk_model(2);
  AdapterSet sa = create_adapters(a, 8, 5);
  AdapterSet sb = create_adapters(b, 8, 5);
  for (size_t i = 0; i < sa.size(); ++i)
    CHECK(sa.adapters[i]->down.data() == sb.adapters[i]->down.data());
  SegModel c = desk_model(2);
  AdapterSet sc = create_adapters(c, 8, 6);
  CHECK(sa.adapters[0]->down.data() != sc.adapters[0]->down.data());
}

TEST_CASE("adapted forward with zero up-factor equals plain linear") {
  Rng rng(42);
  LinearLayer l;
  l.name = "probe";
  l.weight = Tensor::randn({6, 5}, rng, 0.5);
  l.bias = Tensor::randn({5}, rng, 0.5);
  Tensor x = Tensor::randn({3, 6}, rng, 1.0);
  NoGradGuard ng;
  Tensor plain = lora_forward(l, x);
  auto ad = std::make_shared<LoRAAdapter>();
  ad->target_name = l.name;
  ad->rank = 2;
  ad->down = Tensor::randn({6, 2}, rng, 0.5);
  ad->up = Tensor::zeros({2, 5});
  l.lora = ad;
  Tensor adapted = lora_forward(l, x);
  CHECK(max_abs_diff(plain, adapted) == 0.0);
}

TEST_CASE("hand case: identity weight plus rank-1 delta") {
  // W = I2, delta = [[0.5, 0], [0, 0]], x = (1, 1) -> h = (1.5, 1)
  LinearLayer l;
  l.name = "hand";
  l.weight = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  l.bias = Tensor::zeros({2});
  auto ad = std::make_shared<LoRAAdapter>();
  ad->target_name = l.name;
  ad->rank = 1;
  ad->down = Tensor::from_data({2, 1}, {1, 0});
  ad->up = Tensor::from_data({1, 2}, {0.5, 0});
  l.lora = ad;
  NoGradGuard ng;
  Tensor h = lora_forward(l, Tensor::from_data({1, 2}, {1, 1}));
  CHECK(h.at(0, 0) == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(h.at(0, 1) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("adapted forward matches a dense W+dW oracle") {
  Rng rng(77);
  LinearLayer l;
  l.name = "probe";
  l.weight = Tensor::randn({5, 4}, rng, 0.7);
  l.bias = Tensor::randn({4}, rng, 0.3);
  auto ad = std::make_shared<LoRAAdapter>();
  ad->target_name = l.name;
  ad->rank = 2;
  ad->down = Tensor::randn({5, 2}, rng, 0.6);
  ad->up = Tensor::randn({2, 4}, rng, 0.6);
  ad->scaling = 1.25;
  l.lora = ad;
  Tensor x = Tensor::randn({3, 5}, rng, 1.0);

  NoGradGuard ng;
  Tensor h = lora_forward(l, x);

  auto dw = dense_delta(*ad);
  for (size_t i = 0; i < 3; ++i) {
    for (size_t j = 0; j < 4; ++j) {
      double expect = l.bias.data()[j];
      for (size_t k = 0; k < 5; ++k)
        expect += x.at(i, k) * (l.weight.at(k, j) + dw[k][j]);
      CHECK(std::abs(h.at(i, j) - expect) <= 1e-10);
    }
  }
}

TEST_CASE("input width mismatch is a dimension error") {
  LinearLayer l;
  l.name = "probe";
  l.weight = Tensor::zeros({4, 4});
  l.bias = Tensor::zeros({4});
  CHECK_THROWS_AS(lora_forward(l, Tensor::zeros({2, 3})), DimensionError);
}

TEST_CASE("merge preserves forward outputs and detaches adapters") {
  SegModel model = desk_model(3);
  AdapterSet set = create_adapters(model, 8, 12);
  Rng rng(88);
  for (auto& ad : set.adapters) fill_random(ad->up, rng, 0.05);

  std::vector<Tensor> inputs;
  for (uint64_t s = 0; s < 10; ++s) inputs.push_back(random_images(1, 32, 100 + s));
  std::vector<Tensor> adapted_out;
  {
    NoGradGuard ng;
    for (const Tensor& in : inputs)
      adapted_out.push_back(forward_segmentation(model, in));
  }

  merge(model, set);
  CHECK(model.adapter_parameters().empty());
  CHECK(collect_adapters(model).empty());

  NoGradGuard ng;
  for (size_t i = 0; i < inputs.size(); ++i) {
    Tensor merged_out = forward_segmentation(model, inputs[i]);
    CHECK(max_abs_diff(merged_out, adapted_out[i]) <= 1e-9);
  }
}

TEST_CASE("merge with zero up-factor leaves weights bitwise unchanged") {
  SegModel model = desk_model(2);
  std::vector<Tensor> before;
  for (LinearLayer* l : model.adapter_targets()) before.push_back(l->weight.clone());
  AdapterSet set = create_adapters(model, 8, 12);
  merge(model, set);
  auto targets = model.adapter_targets();
  for (size_t i = 0; i < targets.size(); ++i)
    CHECK(targets[i]->weight.data() == before[i].data());
}

TEST_CASE("double merge is a contract error") {
  SegModel model = desk_model(2);
  AdapterSet set = create_adapters(model, 4, 12);
  merge(model, set);
  CHECK_THROWS_AS(merge(model, set), ContractError);
}

TEST_CASE("merged model has zero adapter trainables") {
  SegModel model = desk_model(2);
  model.set_decoder_trainable(false);
  AdapterSet set = create_adapters(model, 8, 12);
  CHECK(count_params(model, true) == lora_param_count(set));
  merge(model, set);
  CHECK(count_params(model, true) == 0);
}

TEST_CASE("reinit merges then re-attaches, preserving outputs") {
  SegModel model = desk_model(3);
  AdapterSet set = create_adapters(model, 8, 12);
  Rng rng(31);
  for (auto& ad : set.adapters) fill_random(ad->up, rng, 0.05);
  Tensor images = random_images(2, 32, 41);
  Tensor before;
  {
    NoGradGuard ng;
    before = forward_segmentation(model, images);
  }

  Tensor w0 = model.blocks[0].q.weight.clone();
  AdapterSet fresh = reinit(model, set, 13);
  CHECK(fresh.size() == 8);
  CHECK(set.merged);
  // base weights moved by the merged delta
  CHECK(model.blocks[0].q.weight.data() != w0.data());
  for (const auto& ad : fresh.adapters)
    for (double v : ad->up.data()) CHECK(v == 0.0);

  NoGradGuard ng;
  Tensor after = forward_segmentation(model, images);
  CHECK(max_abs_diff(before, after) <= 1e-9);
}

TEST_CASE("two reinit cycles accumulate like one dense sum") {
  SegModel model = desk_model(2);
  std::vector<Tensor> w0;
  for (LinearLayer* l : model.adapter_targets()) w0.push_back(l->weight.clone());

  AdapterSet set = create_adapters(model, 4, 1);
  Rng rng(55);
  for (auto& ad : set.adapters) fill_random(ad->up, rng, 0.08);
  std::vector<std::vector<std::vector<double>>> delta1;
  for (auto& ad : set.adapters) delta1.push_back(dense_delta(*ad));

  set = reinit(model, set, 2);
  for (auto& ad : set.adapters) fill_random(ad->up, rng, 0.08);
  std::vector<std::vector<std::vector<double>>> delta2;
  for (auto& ad : set.adapters) delta2.push_back(dense_delta(*ad));

  set = reinit(model, set, 3);

  auto targets = model.adapter_targets();
  for (size_t t = 0; t < targets.size(); ++t) {
    const Tensor& w = targets[t]->weight;
    for (size_t i = 0; i < w.rows(); ++i)
      for (size_t j = 0; j < w.cols(); ++j)
        CHECK(std::abs(w.at(i, j) -
                       (w0[t].at(i, j) + delta1[t][i][j] + delta2[t][i][j])) <=
              1e-9);
  }
}

TEST_CASE("dense delta has numerical rank at most r") {
  SegModel model = desk_model(2);
  AdapterSet set = create_adapters(model, 8, 23);
  Rng rng(66);
  for (auto& ad : set.adapters) fill_random(ad->up, rng, 0.5);
  for (const auto& ad : set.adapters) {
    auto dw = dense_delta(*ad);
    Eigen::MatrixXd m(64, 64);
    for (size_t i = 0; i < 64; ++i)
      for (size_t j = 0; j < 64; ++j) m(i, j) = dw[i][j];
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    const auto& sv = svd.singularValues();
    REQUIRE(sv(0) > 0.0);
    for (int k = 8; k < sv.size(); ++k) CHECK(sv(k) <= 1e-10 * sv(0));
  }
}

TEST_CASE("gradients reach the factors but never a frozen base weight") {
  SegModel model = desk_model(2);
  AdapterSet set = create_adapters(model, 8, 9);
  Rng rng(91);
  for (auto& ad : set.adapters) fill_random(ad->up, rng, 0.05);

  Tensor images = random_images(1, 32, 71);
  Tensor loss = sum(forward_segmentation(model, images));
  backward(loss);

  for (const auto& ad : set.adapters) {
    REQUIRE(ad->down.has_grad());
    REQUIRE(ad->up.has_grad());
    double down_norm = 0.0, up_norm = 0.0;
    for (double g : ad->down.grad()) down_norm += std::abs(g);
    for (double g : ad->up.grad()) up_norm += std::abs(g);
    CHECK(down_norm > 0.0);
    CHECK(up_norm > 0.0);
  }
  for (const NamedParam& p : model.encoder_parameters())
    CHECK_FALSE(p.tensor.has_grad());
  CHECK(model.decoder.weight.has_grad());
}

TEST_CASE("adapter parameter accounting") {
  SegModel model = desk_model(2);
  AdapterSet set = create_adapters(model, 8, 3);
  // one adapter: r * (d_in + d_out) = 8 * 128
  const size_t per = set.adapters[0]->rank *
                     (set.adapters[0]->down.shape()[0] + set.adapters[0]->up.shape()[1]);
  CHECK(per == 1024);
  CHECK(lora_param_count(set) == 8 * 1024);
  CHECK(lora_param_count(set) == set.size() * per);

  SegModel m4 = desk_model(2);
  AdapterSet s4 = create_adapters(m4, 4, 3);
  CHECK(lora_param_count(s4) < lora_param_count(set));  // monotone in r

  // fraction of the full model, against the enumeration total
  const double fraction =
      static_cast<double>(lora_param_count(set)) /
      static_cast<double>(count_params(model, false));
  size_t walked = 0;
  for (const NamedParam& p : model.all_parameters()) {
    size_t n = 1;
    for (size_t s : p.tensor.shape()) n *= s;
    walked += n;
  }
  CHECK(fraction == doctest::Approx(8192.0 / static_cast<double>(walked)));
}

TEST_CASE("cloned models keep their adapters independent") {
  SegModel model = desk_model(2);
  AdapterSet set = create_adapters(model, 8, 44);
  Rng rng(14);
  for (auto& ad : set.adapters) fill_random(ad->up, rng, 0.05);

  SegModel copy = model.clone();
  AdapterSet copied = collect_adapters(copy);
  CHECK(copied.size() == 8);
  Tensor images = random_images(1, 32, 15);
  NoGradGuard ng;
  Tensor a = forward_segmentation(model, images);
  Tensor b = forward_segmentation(copy, images);
  CHECK(max_abs_diff(a, b) == 0.0);

  copied.adapters[0]->up.data_mut()[0] += 1.0;
  CHECK(set.adapters[0]->up.data()[0] != copied.adapters[0]->up.data()[0]);
}
