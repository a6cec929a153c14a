#include "clora/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "clora/errors.hpp"
#include "clora/rng.hpp"
#include "doctest.h"

using namespace clora;

namespace {

LabelMap random_labels(size_t h, size_t w, size_t classes, Rng& rng,
                       double ignore_rate) {
  LabelMap m = LabelMap::filled(h, w, 0);
  for (uint8_t& id : m.ids) {
    if (rng.uniform() < ignore_rate) {
      id = kIgnoreLabel;
    } else {
      id = static_cast<uint8_t>(rng.next_below(classes));
    }
  }
  return m;
}

}  // namespace

TEST_SUITE_BEGIN("metrics");

TEST_CASE("perfect predictions build a diagonal matrix") {
  Rng rng(1);
  LabelMap gt = random_labels(8, 8, 4, rng, 0.1);
  ConfusionMatrix cm(4);
  cm.accumulate(gt, gt);
  uint64_t off_diag = 0, scored = 0;
  for (size_t g = 0; g < 4; ++g)
    for (size_t p = 0; p < 4; ++p) {
      if (g != p) off_diag += cm.at(g, p);
      scored += cm.at(g, p);
    }
  CHECK(off_diag == 0);
  size_t live = 0;
  for (uint8_t id : gt.ids) live += (id != kIgnoreLabel);
  CHECK(scored == live);
  CHECK(cm.total() == live);
}

TEST_CASE("fully ignored input leaves the matrix untouched") {
  ConfusionMatrix cm(3);
  LabelMap ignore_all = LabelMap::filled(4, 4, kIgnoreLabel);
  LabelMap pred = LabelMap::filled(4, 4, 1);
  cm.accumulate(pred, ignore_all);
  CHECK(cm.total() == 0);
}

TEST_CASE("accumulation matches a per-pixel counting oracle") {
  Rng rng(2);
  LabelMap gt = random_labels(8, 8, 5, rng, 0.15);
  LabelMap pred = random_labels(8, 8, 5, rng, 0.0);
  ConfusionMatrix cm(5);
  cm.accumulate(pred, gt);

  uint64_t oracle[5][5] = {};
  for (size_t i = 0; i < 64; ++i) {
    if (gt.ids[i] == kIgnoreLabel) continue;
    oracle[gt.ids[i]][pred.ids[i]] += 1;
  }
  for (size_t g = 0; g < 5; ++g)
    for (size_t p = 0; p < 5; ++p) CHECK(cm.at(g, p) == oracle[g][p]);
}

TEST_CASE("out-of-range ids raise data errors naming the id") {
  ConfusionMatrix cm(3);
  LabelMap gt = LabelMap::filled(1, 1, 9);
  LabelMap pred = LabelMap::filled(1, 1, 0);
  try {
    cm.accumulate(pred, gt);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find('9') != std::string::npos);
  }
  LabelMap bad_pred = LabelMap::filled(1, 1, 7);
  LabelMap ok_gt = LabelMap::filled(1, 1, 1);
  CHECK_THROWS_AS(cm.accumulate(bad_pred, ok_gt), DataError);
  CHECK_THROWS_AS(cm.accumulate(LabelMap::filled(2, 2, 0), ok_gt),
                  DimensionError);
}

TEST_CASE("accumulation is additive across batches") {
  Rng rng(3);
  LabelMap gt1 = random_labels(6, 6, 4, rng, 0.1);
  LabelMap pr1 = random_labels(6, 6, 4, rng, 0.0);
  LabelMap gt2 = random_labels(6, 6, 4, rng, 0.1);
  LabelMap pr2 = random_labels(6, 6, 4, rng, 0.0);

  ConfusionMatrix together(4);
  together.accumulate(pr1, gt1);
  together.accumulate(pr2, gt2);

  ConfusionMatrix a(4), b(4);
  a.accumulate(pr1, gt1);
  b.accumulate(pr2, gt2);
  a.merge(b);

  for (size_t g = 0; g < 4; ++g)
    for (size_t p = 0; p < 4; ++p) CHECK(a.at(g, p) == together.at(g, p));
  CHECK_THROWS_AS(a.merge(ConfusionMatrix(5)), DimensionError);
}

TEST_CASE("hand confusion matrix gives sixty percent") {
  // [[3,1],[1,3]]: both classes have TP=3, FP=1, FN=1 -> IoU 0.6 each
  ConfusionMatrix cm(2);
  LabelMap gt = LabelMap::filled(1, 8, 0);
  LabelMap pred = LabelMap::filled(1, 8, 0);
  for (size_t i = 4; i < 8; ++i) gt.ids[i] = 1;
  pred.ids[3] = 1;                       // gt 0, pred 1
  for (size_t i = 5; i < 8; ++i) pred.ids[i] = 1;
  pred.ids[4] = 0;                       // gt 1, pred 0
  cm.accumulate(pred, gt);
  REQUIRE(cm.at(0, 0) == 3);
  REQUIRE(cm.at(0, 1) == 1);
  REQUIRE(cm.at(1, 0) == 1);
  REQUIRE(cm.at(1, 1) == 3);

  auto ious = per_class_iou(cm);
  CHECK(*ious[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(*ious[1] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(*miou(cm, {0, 1}) == doctest::Approx(60.0).epsilon(1e-12));
}

TEST_CASE("perfect matrix scores exactly one hundred") {
  ConfusionMatrix cm(3);
  LabelMap gt = LabelMap::filled(2, 3, 0);
  gt.ids = {0, 1, 2, 0, 1, 2};
  cm.accumulate(gt, gt);
  CHECK(*miou(cm, {0, 1, 2}) == 100.0);
}

TEST_CASE("absent classes are excluded, not scored zero") {
  ConfusionMatrix cm(3);
  LabelMap gt = LabelMap::filled(1, 4, 0);
  LabelMap pred = LabelMap::filled(1, 4, 0);
  gt.ids = {0, 0, 1, 1};
  pred.ids = {0, 1, 1, 1};  // class 2 never appears
  cm.accumulate(pred, gt);
  auto ious = per_class_iou(cm);
  CHECK(ious[0].has_value());
  CHECK(ious[1].has_value());
  CHECK_FALSE(ious[2].has_value());
  const double with_absent = *miou(cm, {0, 1, 2});
  const double without = *miou(cm, {0, 1});
  CHECK(with_absent == without);
  // range of only the absent class: undefined, not a number
  CHECK_FALSE(miou(cm, {2}).has_value());
  CHECK_THROWS_AS(miou(cm, {}), ContractError);
  CHECK_THROWS_AS(miou(cm, {7}), ContractError);
}

TEST_CASE("miou is permutation-invariant and bounded") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    LabelMap gt = random_labels(8, 8, 4, rng, 0.1);
    LabelMap pred = random_labels(8, 8, 4, rng, 0.0);
    ConfusionMatrix cm(4);
    cm.accumulate(pred, gt);

    // permute ids 0..3 by a fixed cycle
    auto permute = [](const LabelMap& m) {
      LabelMap out = m;
      for (uint8_t& id : out.ids)
        if (id != kIgnoreLabel) id = static_cast<uint8_t>((id + 1) % 4);
      return out;
    };
    ConfusionMatrix pcm(4);
    pcm.accumulate(permute(pred), permute(gt));

    auto a = per_class_iou(cm);
    auto b = per_class_iou(pcm);
    for (size_t c = 0; c < 4; ++c) {
      CHECK(a[c].has_value() == b[(c + 1) % 4].has_value());
      if (a[c].has_value())
        CHECK(*a[c] == doctest::Approx(*b[(c + 1) % 4]).epsilon(1e-12));
    }
    auto m1 = miou(cm, {0, 1, 2, 3});
    auto m2 = miou(pcm, {0, 1, 2, 3});
    if (m1.has_value()) {
      CHECK(*m1 == doctest::Approx(*m2).epsilon(1e-12));
      CHECK(*m1 >= 0.0);
      CHECK(*m1 <= 100.0);
    }
  }
}

TEST_CASE("forget score reproduces the published table rows") {
  CHECK(forget_score(81.69, 14.12) == doctest::Approx(67.57).epsilon(1e-10));
  CHECK(forget_score(81.69, 70.91) == doctest::Approx(10.78).epsilon(1e-10));
  CHECK(forget_score(81.69, 81.69) == 0.0);
  // a method that beats joint training goes negative
  CHECK(forget_score(81.69, 82.00) < 0.0);
}

TEST_CASE("netscore of all-ones is zero") {
  NetScoreInput in;
  in.a_n = 1.0;
  in.p_n = 1.0;
  in.m_n = 1.0;
  CHECK(netscore(in) == 0.0);
}

TEST_CASE("netscore matches an extended-precision oracle") {
  NetScoreInput in;
  in.a_n = 81.69;
  in.p_n = 100.0;
  in.m_n = 1000.0;
  const long double oracle =
      20.0L * std::log10(std::pow(81.69L, 2.0L) /
                         (std::sqrt(100.0L) * std::sqrt(1000.0L)));
  CHECK(netscore(in) == doctest::Approx((double)oracle).epsilon(1e-12));
  CHECK(netscore(in) == doctest::Approx(26.487).epsilon(1e-3));
}

TEST_CASE("doubling accuracy adds twenty log-ten of four") {
  NetScoreInput in;
  in.a_n = 20.0;
  in.p_n = 7.0;
  in.m_n = 3.0;
  NetScoreInput twice = in;
  twice.a_n = 40.0;
  CHECK(netscore(twice) - netscore(in) ==
        doctest::Approx(20.0 * std::log10(4.0)).epsilon(1e-10));
}

TEST_CASE("netscore is monotone in each argument") {
  NetScoreInput in;
  in.a_n = 50.0;
  in.p_n = 10.0;
  in.m_n = 100.0;
  const double base = netscore(in);
  NetScoreInput higher_a = in;
  higher_a.a_n = 51.0;
  CHECK(netscore(higher_a) > base);
  NetScoreInput more_params = in;
  more_params.p_n = 11.0;
  CHECK(netscore(more_params) < base);
  NetScoreInput more_macs = in;
  more_macs.m_n = 110.0;
  CHECK(netscore(more_macs) < base);
}

TEST_CASE("netscore rejects out-of-domain inputs") {
  NetScoreInput in;
  in.a_n = 50.0;
  in.p_n = 1.0;
  in.m_n = 1.0;
  NetScoreInput bad = in;
  bad.a_n = 0.0;
  CHECK_THROWS_AS(netscore(bad), ContractError);
  bad = in;
  bad.a_n = 101.0;
  CHECK_THROWS_AS(netscore(bad), ContractError);
  bad = in;
  bad.p_n = 0.0;
  CHECK_THROWS_AS(netscore(bad), ContractError);
  bad = in;
  bad.m_n = -5.0;
  CHECK_THROWS_AS(netscore(bad), ContractError);
}

TEST_CASE("parameter averaging across phases") {
  CHECK(averaged_params(100000000, 2000000) == doctest::Approx(51.0));
  CHECK(averaged_params(5000000, 5000000) == doctest::Approx(5.0));
  CHECK(averaged_params(141378, 141378) ==
        doctest::Approx(141378.0 / 1e6));  // full fine-tuning both phases
  CHECK_THROWS_AS(averaged_params(0, 5), ContractError);
}

TEST_CASE("pareto front drops the dominated point") {
  std::vector<ParetoPoint> pts{{1, 50, "a"}, {2, 60, "b"}, {3, 55, "c"}};
  auto front = pareto_front(pts);
  REQUIRE(front.size() == 2);
  CHECK(front[0].label == "a");
  CHECK(front[1].label == "b");
}

TEST_CASE("single point is its own front") {
  auto front = pareto_front({{4.0, 30.0, "only"}});
  REQUIRE(front.size() == 1);
  CHECK(front[0].label == "only");
  CHECK_THROWS_AS(pareto_front({}), ContractError);
}

TEST_CASE("random fronts match the pairwise-dominance oracle") {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<ParetoPoint> pts;
    for (int i = 0; i < 50; ++i) {
      // coarse grid so ties in either coordinate actually happen
      pts.push_back({static_cast<double>(rng.next_below(12)),
                     static_cast<double>(rng.next_below(12)) * 9.0,
                     "p" + std::to_string(i)});
    }
    auto front = pareto_front(pts);

    auto dominates = [](const ParetoPoint& y, const ParetoPoint& x) {
      return y.params <= x.params && y.miou >= x.miou &&
             (y.params < x.params || y.miou > x.miou);
    };
    // no output point is dominated by any input point
    for (const ParetoPoint& f : front) {
      for (const ParetoPoint& p : pts) CHECK_FALSE(dominates(p, f));
    }
    // every excluded point is dominated by some output point
    for (const ParetoPoint& p : pts) {
      const bool kept =
          std::any_of(front.begin(), front.end(), [&](const ParetoPoint& f) {
            return f.label == p.label;
          });
      if (!kept) {
        CHECK(std::any_of(front.begin(), front.end(),
                          [&](const ParetoPoint& f) { return dominates(f, p); }));
      }
    }
    // sorted by params ascending
    for (size_t i = 1; i < front.size(); ++i)
      CHECK(front[i - 1].params <= front[i].params);
  }
}

TEST_CASE("argmax picks the winning channel with low-id ties") {
  Tensor logits = Tensor::zeros({1, 3, 1, 2});
  // pixel 0: channel 2 wins; pixel 1: all equal -> background
  logits.data_mut()[2 * 2 + 0] = 1.5;
  auto labels = argmax_labels(logits);
  REQUIRE(labels.size() == 1);
  CHECK(labels[0].ids[0] == 2);
  CHECK(labels[0].ids[1] == 0);
  CHECK_THROWS_AS(argmax_labels(Tensor::zeros({3, 1, 2})), DimensionError);
}

TEST_CASE("report serializes to json and csv") {
  MetricsReport r;
  r.mode = "CLORA";
  r.schedule = "5-1";
  r.seed = 3;
  r.ranges = {{"0-5", 72.5}, {"6-10", std::nullopt}, {"All", 61.25}};
  r.forget = 4.5;
  r.trainable_params = 8389;
  r.total_params = 141378;
  r.averaged_params_m = 0.008389;
  r.training_macs_m = 1234.5;
  r.net = 31.7;

  const std::string json = r.to_json();
  CHECK(json.find("\"CLORA\"") != std::string::npos);
  CHECK(json.find("\"0-5\": 72.5") != std::string::npos);
  CHECK(json.find("\"6-10\": null") != std::string::npos);
  CHECK(json.find("\"percent\"") != std::string::npos);

  CHECK(r.csv_header() ==
        "mode,schedule,seed,miou_0-5,miou_6-10,miou_All,forget_score,"
        "trainable_params,total_params,averaged_params_millions,"
        "training_macs_millions,netscore");
  const std::string row = r.csv_row();
  CHECK(row.find("CLORA,5-1,3,72.500000,,61.250000,4.500000,8389,141378,") !=
        std::string::npos);
  // undefined netscore leaves the trailing cell empty
  r.net.reset();
  const std::string row2 = r.csv_row();
  CHECK(row2.back() == ',');
}

TEST_SUITE_END();
