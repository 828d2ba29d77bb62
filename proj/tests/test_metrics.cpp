#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "depthc/metrics.hpp"
#include "depthc/rng.hpp"
#include "depthc/synth.hpp"

using namespace depthc;

TEST_CASE("perfect predictions score zero on every metric") {
    std::mt19937_64 rng(1);
    Tensor gt = Tensor::uniform({1, 8, 8}, 1000, 80000, rng);
    MetricsReport r = evaluate(gt, gt);
    CHECK(r.rmse_mm == 0.0);
    CHECK(r.mae_mm == 0.0);
    CHECK(r.irmse_1perkm == 0.0);
    CHECK(r.imae_1perkm == 0.0);
    CHECK(r.valid_pixels == 64);
    CHECK(!r.degenerate);
}

TEST_CASE("single-pixel hand evaluation") {
    Tensor gt({1, 1, 1}, {10000.0});
    Tensor pred({1, 1, 1}, {12000.0});
    MetricsReport r = evaluate(pred, gt);
    CHECK(r.rmse_mm == 2000.0);
    CHECK(r.mae_mm == 2000.0);
    // i(gt) = 100 1/km, i(pred) = 83.333..., diff = 50/3
    CHECK(std::abs(r.irmse_1perkm - 50.0 / 3.0) < 1e-9);
    CHECK(std::abs(r.imae_1perkm - 50.0 / 3.0) < 1e-9);
}

TEST_CASE("aggregation pools pixels rather than averaging samples") {
    // sample A: 1 valid pixel with error 3000; sample B: 3 valid pixels with
    // error 1000 each
    Tensor gt_a({1, 1, 1}, {10000.0});
    Tensor pred_a({1, 1, 1}, {13000.0});
    Tensor gt_b({1, 1, 3}, {20000.0, 20000.0, 20000.0});
    Tensor pred_b({1, 1, 3}, {21000.0, 19000.0, 21000.0});

    MetricsAccumulator acc;
    acc.add(pred_a, gt_a);
    acc.add(pred_b, gt_b);
    MetricsReport pooled = acc.finalize();
    CHECK(pooled.samples == 2);
    CHECK(pooled.valid_pixels == 4);

    const double pooled_rmse = std::sqrt((9e6 + 3 * 1e6) / 4.0);
    CHECK(pooled.rmse_mm == doctest::Approx(pooled_rmse).epsilon(1e-12));

    const double sample_avg =
        (evaluate(pred_a, gt_a).rmse_mm + evaluate(pred_b, gt_b).rmse_mm) / 2.0;
    CHECK(pooled.rmse_mm != doctest::Approx(sample_avg).epsilon(1e-9));
}

TEST_CASE("swap symmetry of absolute errors") {
    std::mt19937_64 rng(2);
    Tensor gt = Tensor::uniform({1, 6, 6}, 2000, 80000, rng);
    Tensor pred = Tensor::uniform({1, 6, 6}, 2000, 80000, rng);
    MetricsReport a = evaluate(pred, gt);
    MetricsReport b = evaluate(gt, pred);
    CHECK(a.rmse_mm == b.rmse_mm);
    CHECK(a.mae_mm == b.mae_mm);
}

TEST_CASE("scaling all depths by two doubles direct and halves inverse metrics") {
    std::mt19937_64 rng(3);
    Tensor gt = Tensor::uniform({1, 6, 6}, 2000, 40000, rng);
    Tensor pred = Tensor::uniform({1, 6, 6}, 2000, 40000, rng);
    std::vector<double> gt2 = gt.data(), pred2 = pred.data();
    for (auto& v : gt2) v *= 2.0;
    for (auto& v : pred2) v *= 2.0;
    MetricsReport base = evaluate(pred, gt);
    MetricsReport scaled = evaluate(Tensor(pred.shape(), pred2), Tensor(gt.shape(), gt2));
    CHECK(scaled.rmse_mm == 2.0 * base.rmse_mm);
    CHECK(scaled.mae_mm == 2.0 * base.mae_mm);
    CHECK(scaled.irmse_1perkm == 0.5 * base.irmse_1perkm);
    CHECK(scaled.imae_1perkm == 0.5 * base.imae_1perkm);
}

TEST_CASE("RMSE dominates MAE") {
    std::mt19937_64 rng(4);
    for (int rep = 0; rep < 10; ++rep) {
        Tensor gt = Tensor::uniform({1, 5, 5}, 2000, 80000, rng);
        Tensor pred = Tensor::uniform({1, 5, 5}, 2000, 80000, rng);
        MetricsReport r = evaluate(pred, gt);
        CHECK(r.rmse_mm >= r.mae_mm);
        CHECK(r.irmse_1perkm >= r.imae_1perkm);
    }
}

TEST_CASE("zero predictions under valid labels are excluded from inverse metrics") {
    Tensor gt({1, 1, 3}, {10000.0, 10000.0, 0.0});
    Tensor pred({1, 1, 3}, {0.0, 12000.0, 5000.0});
    MetricsReport r = evaluate(pred, gt);
    CHECK(r.valid_pixels == 2);
    CHECK(r.excluded_inverse_pixels == 1);
    // only the second pixel contributes to the inverse metrics
    CHECK(std::abs(r.imae_1perkm - 50.0 / 3.0) < 1e-9);
    // but it still counts toward the direct metrics
    CHECK(r.mae_mm == doctest::Approx((10000.0 + 2000.0) / 2).epsilon(1e-12));
}

TEST_CASE("no valid pixels yields a flagged degenerate report") {
    Tensor gt({1, 2, 2}, 0.0);
    Tensor pred({1, 2, 2}, 5.0);
    MetricsReport r = evaluate(pred, gt);
    CHECK(r.degenerate);
    CHECK(r.valid_pixels == 0);
    CHECK(r.rmse_mm == 0.0);
}

TEST_CASE("report CSV round trips to an identical report") {
    std::mt19937_64 rng(5);
    Tensor gt = Tensor::uniform({1, 7, 7}, 2000, 80000, rng);
    Tensor pred = Tensor::uniform({1, 7, 7}, 0, 80000, rng);
    MetricsReport r = evaluate(pred, gt);
    MetricsReport back = metrics_from_csv(metrics_csv(r));
    CHECK(back == r);
    CHECK_THROWS_AS(metrics_from_csv("bad,header\n1,2\n"), ParseError);
}

TEST_CASE("a full-density sparse map fed back as the prediction scores zero") {
    SceneConfig sc;
    sc.seed = 6;
    Scene scene = gen_scene(sc);
    SparsifyConfig sp;
    sp.keep_rate = 1.0;
    Sparsified s = sparsify(scene.gt, sp);
    MetricsReport r = evaluate(s.sparse, scene.gt);
    CHECK(r.rmse_mm == 0.0);
    CHECK(r.mae_mm == 0.0);
    CHECK(r.irmse_1perkm == 0.0);
}

TEST_CASE("shape mismatches are rejected") {
    CHECK_THROWS_AS(evaluate(Tensor({1, 2, 2}, 1.0), Tensor({1, 3, 3}, 1.0)), DimensionError);
}
