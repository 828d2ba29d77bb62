#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "depthc/enhancer.hpp"
#include "depthc/serialize.hpp"
#include "depthc/rng.hpp"
#include "depthc/training.hpp"
#include "oracles.hpp"

using namespace depthc;

namespace {

Enhancer make_enhancer(int channels, int reduction, uint64_t seed,
                       ChannelVariant cv = ChannelVariant::kProposed,
                       FusionVariant fv = FusionVariant::kProposed, bool spatial = true) {
    EnhancerConfig cfg;
    cfg.channels = channels;
    cfg.reduction = reduction;
    cfg.spatial = spatial;
    cfg.channel = cv;
    cfg.fusion = fv;
    return Enhancer(cfg, seed);
}

void zero_params(Enhancer& e) {
    for (auto& [name, t] : e.parameters()) {
        std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
    }
}

}  // namespace

TEST_CASE("spatial attention with zero projections averages all positions") {
    Enhancer e = make_enhancer(8, 2, 1);
    for (const char* name : {"wq", "wk"}) {
        for (auto& [n, t] : e.parameters()) {
            if (n == name) std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
        }
    }
    std::mt19937_64 rng(2);
    Tensor a = Tensor::uniform({8, 2, 2}, -1, 1, rng);
    Tape t;
    auto [enh, s] = e.spatial_attention(t, a);
    const int n = 4;
    for (int64_t i = 0; i < s.size(); ++i) CHECK(s[i] == doctest::Approx(0.25).epsilon(1e-12));
    for (int c = 0; c < 8; ++c) {
        double mean = 0.0;
        for (int p = 0; p < n; ++p) mean += a[static_cast<int64_t>(c) * n + p];
        mean /= n;
        for (int p = 0; p < n; ++p) {
            CHECK(enh[static_cast<int64_t>(c) * n + p] == doctest::Approx(mean).epsilon(1e-12));
        }
    }
}

TEST_CASE("spatial attention at a single position is the identity") {
    Enhancer e = make_enhancer(8, 2, 3);
    std::mt19937_64 rng(4);
    Tensor a = Tensor::uniform({8, 1, 1}, -1, 1, rng);
    Tape t;
    auto [enh, s] = e.spatial_attention(t, a);
    CHECK(s.size() == 1);
    CHECK(s[0] == 1.0);
    CHECK(max_abs_diff(enh, a) < 1e-15);
}

TEST_CASE("spatial attention matches the per-pair oracle") {
    Enhancer e = make_enhancer(8, 2, 5);
    std::mt19937_64 rng(6);
    Tensor a = Tensor::uniform({8, 2, 2}, -1, 1, rng);
    Tape t;
    auto [enh, s] = e.spatial_attention(t, a);

    Tensor wq, wk;
    for (const auto& [name, p] : e.parameters()) {
        if (name == "wq") wq = p;
        if (name == "wk") wk = p;
    }
    auto want = oracle::naive_spatial_attention(a, wq, wk);
    CHECK(max_abs_diff(enh, want.enhanced) < 1e-9);
    CHECK(max_abs_diff(s, want.attention) < 1e-9);

    // rows sum to one, entries lie in [0,1]
    const int n = 4;
    for (int j = 0; j < n; ++j) {
        double sum = 0.0;
        for (int i = 0; i < n; ++i) {
            const double v = s[static_cast<int64_t>(j) * n + i];
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            sum += v;
        }
        CHECK(std::abs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("channel count must divide by 8 for the spatial branch") {
    CHECK_THROWS_AS(make_enhancer(12, 2, 1), ConfigError);
    CHECK_NOTHROW(make_enhancer(12, 2, 1, ChannelVariant::kProposed,
                                FusionVariant::kProposed, /*spatial=*/false));
}

TEST_CASE("squeeze produces means then variances") {
    Tape t;
    Tensor constant({1, 3, 3}, 5.0);
    Tensor z1 = Enhancer::squeeze(t, constant);
    CHECK(z1[0] == 5.0);
    CHECK(z1[1] == 0.0);

    Tensor ch({1, 2, 2}, {1, 3, 3, 1});
    Tensor z2 = Enhancer::squeeze(t, ch);
    CHECK(z2[0] == 2.0);  // mean
    CHECK(z2[1] == 1.0);  // population variance

    std::mt19937_64 rng(7);
    Tensor a = Tensor::uniform({2, 3, 3}, -1, 1, rng);
    Tensor z3 = Enhancer::squeeze(t, a);
    REQUIRE(z3.shape() == Shape{4});
    auto [m0, v0] = oracle::two_pass_mean_var(
        {a.data().begin(), a.data().begin() + 9});
    CHECK(std::abs(z3[0] - m0) < 1e-12);
    CHECK(std::abs(z3[2] - v0) < 1e-12);
}

TEST_CASE("squeeze against the streaming oracle over 100 random channels") {
    std::mt19937_64 rng(8);
    for (int rep = 0; rep < 10; ++rep) {
        Tensor a = Tensor::uniform({10, 4, 4}, -5, 5, rng);
        Tape t;
        Tensor z = Enhancer::squeeze(t, a);
        for (int c = 0; c < 10; ++c) {
            std::vector<double> ch(a.data().begin() + c * 16, a.data().begin() + (c + 1) * 16);
            auto [mean, var] = oracle::two_pass_mean_var(ch);
            CHECK(std::abs(z[c] - mean) < 1e-12);
            CHECK(std::abs(z[10 + c] - var) < 1e-12);
        }
    }
}

TEST_CASE("adding a constant shifts the mean and leaves the variance") {
    std::mt19937_64 rng(9);
    Tensor a = Tensor::uniform({4, 3, 3}, -1, 1, rng);
    Tensor shifted = a;
    std::vector<double> moved = a.data();
    for (auto& v : moved) v += 2.5;
    Tensor b({4, 3, 3}, std::move(moved));
    Tape t;
    Tensor za = Enhancer::squeeze(t, a);
    Tensor zb = Enhancer::squeeze(t, b);
    for (int c = 0; c < 4; ++c) {
        CHECK(std::abs(zb[c] - (za[c] + 2.5)) < 1e-12);
        CHECK(std::abs(zb[4 + c] - za[4 + c]) < 1e-12);
    }
}

TEST_CASE("excite with zero weights emits 0.5 everywhere") {
    Enhancer e = make_enhancer(8, 2, 10);
    for (auto& [n, t] : e.parameters()) {
        if (n == "w1" || n == "w2") {
            std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
        }
    }
    Tape t;
    std::mt19937_64 rng(11);
    Tensor z = Tensor::uniform({16}, -3, 3, rng);
    Tensor s = e.excite(t, z);
    for (int64_t i = 0; i < s.size(); ++i) CHECK(s[i] == 0.5);

    Enhancer e2 = make_enhancer(8, 2, 12);
    Tensor s2 = e2.excite(t, Tensor({16}, 0.0));
    for (int64_t i = 0; i < s2.size(); ++i) CHECK(s2[i] == 0.5);
}

TEST_CASE("excite matches direct two-layer evaluation") {
    Enhancer e = make_enhancer(4, 2, 13, ChannelVariant::kProposed, FusionVariant::kProposed,
                               /*spatial=*/false);
    std::mt19937_64 rng(14);
    Tensor z = Tensor::uniform({8}, -1, 1, rng);
    Tape t;
    Tensor s = e.excite(t, z);

    Tensor w1, w2;
    for (const auto& [name, p] : e.parameters()) {
        if (name == "w1") w1 = p;
        if (name == "w2") w2 = p;
    }
    const int hidden = w1.dim(0);
    std::vector<double> h(static_cast<size_t>(hidden), 0.0);
    for (int i = 0; i < hidden; ++i) {
        for (int j = 0; j < 8; ++j) h[static_cast<size_t>(i)] += w1[i * 8 + j] * z[j];
        h[static_cast<size_t>(i)] = std::max(0.0, h[static_cast<size_t>(i)]);
    }
    for (int c = 0; c < 4; ++c) {
        double acc = 0.0;
        for (int i = 0; i < hidden; ++i) acc += w2[c * hidden + i] * h[static_cast<size_t>(i)];
        const double sig = 1.0 / (1.0 + std::exp(-acc));
        CHECK(std::abs(s[c] - sig) < 1e-12);
        CHECK(s[c] > 0.0);
        CHECK(s[c] < 1.0);
    }
    CHECK_THROWS_AS(e.excite(t, Tensor({7}, 0.0)), ConfigError);
}

TEST_CASE("channel_rescale scales each channel by its weight") {
    Tape t;
    std::mt19937_64 rng(15);
    Tensor a = Tensor::uniform({2, 3, 3}, -1, 1, rng);
    CHECK(max_abs_diff(Enhancer::channel_rescale(t, a, Tensor({2}, 1.0)), a) == 0.0);
    Tensor zeroed = Enhancer::channel_rescale(t, a, Tensor({2}, 0.0));
    for (int64_t i = 0; i < zeroed.size(); ++i) CHECK(zeroed[i] == 0.0);
    Tensor s({2}, {2.0, 0.5});
    Tensor y = Enhancer::channel_rescale(t, a, s);
    for (int64_t i = 0; i < 9; ++i) CHECK(y[i] == 2.0 * a[i]);
    for (int64_t i = 9; i < 18; ++i) CHECK(y[i] == 0.5 * a[i]);
}

TEST_CASE("fusion with zero scalars returns the input bit for bit") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Enhancer e = make_enhancer(8, 2, 100 + seed);
        std::mt19937_64 rng(200 + seed);
        Tensor a = Tensor::uniform({8, 2, 2}, -1, 1, rng);
        Tape t;
        Tensor y = e.forward(t, a);
        REQUIRE(y.shape() == a.shape());
        for (int64_t i = 0; i < a.size(); ++i) {
            CHECK(std::memcmp(&y.data()[static_cast<size_t>(i)],
                              &a.data()[static_cast<size_t>(i)], 8) == 0);
        }
    }
}

TEST_CASE("fusion arithmetic") {
    Enhancer e = make_enhancer(8, 2, 16);
    std::mt19937_64 rng(17);
    Tensor a = Tensor::uniform({8, 2, 2}, -1, 1, rng);
    Tape t;

    e.lambda_param().mutable_data()[0] = 1.0;
    e.gamma_param().mutable_data()[0] = 0.0;
    Tensor doubled = e.fuse(t, a, a, a);  // E = X = A
    for (int64_t i = 0; i < a.size(); ++i) CHECK(doubled[i] == 2.0 * a[i]);

    e.lambda_param().mutable_data()[0] = 0.3;
    e.gamma_param().mutable_data()[0] = 0.7;
    Tensor espatial = Tensor::uniform({8, 2, 2}, -1, 1, rng);
    Tensor x = Tensor::uniform({8, 2, 2}, -1, 1, rng);
    Tensor y = e.fuse(t, espatial, x, a);
    for (int64_t i = 0; i < a.size(); ++i) {
        CHECK(std::abs(y[i] - (0.3 * espatial[i] + 0.7 * x[i] + a[i])) < 1e-12);
    }
    CHECK_THROWS_AS(e.fuse(t, Tensor({8, 2, 3}, 0.0), x, a), DimensionError);
}

TEST_CASE("full enhancer matches the composition of component oracles") {
    Enhancer e = make_enhancer(8, 2, 18);
    e.lambda_param().mutable_data()[0] = 0.4;
    e.gamma_param().mutable_data()[0] = -0.6;
    std::mt19937_64 rng(19);
    Tensor a = Tensor::uniform({8, 2, 2}, -1, 1, rng);
    Tape t;
    Tensor y = e.forward(t, a);

    Tensor wq, wk;
    for (const auto& [name, p] : e.parameters()) {
        if (name == "wq") wq = p;
        if (name == "wk") wk = p;
    }
    auto spatial = oracle::naive_spatial_attention(a, wq, wk);
    Tape t2;
    Tensor s = e.excite(t2, Enhancer::squeeze(t2, a));
    for (int c = 0; c < 8; ++c) {
        for (int p = 0; p < 4; ++p) {
            const double want = 0.4 * spatial.enhanced[static_cast<int64_t>(c) * 4 + p] +
                                (-0.6) * s[c] * a[static_cast<int64_t>(c) * 4 + p] +
                                a[static_cast<int64_t>(c) * 4 + p];
            CHECK(std::abs(y[static_cast<int64_t>(c) * 4 + p] - want) < 1e-9);
        }
    }
}

TEST_CASE("enhancer gradients agree with finite differences") {
    GradCheckReport r = gradcheck_unit("sc_enhance");
    CHECK(r.pass);
    for (const auto& g : r.groups) CHECK(g.max_rel_err < 1e-6);
    // input, wq, wk, w1, w2, lambda, gamma
    CHECK(r.groups.size() == 7);
}

TEST_CASE("channel attention variants") {
    Tape t;
    Tensor constant({4, 2, 2}, 3.0);

    Enhancer mean_e = make_enhancer(4, 2, 20, ChannelVariant::kMeanOnly,
                                    FusionVariant::kProposed, false);
    Enhancer var_e = make_enhancer(4, 2, 21, ChannelVariant::kVarianceOnly,
                                   FusionVariant::kProposed, false);
    CHECK(max_abs_diff(t.channel_mean(constant), Tensor({4}, 3.0)) == 0.0);
    CHECK(max_abs_diff(t.channel_var(constant), Tensor({4}, 0.0)) == 0.0);

    Tensor z = Enhancer::squeeze(t, constant);
    CHECK(z.shape() == Shape{8});  // proposed descriptor is 2C

    std::mt19937_64 rng(22);
    Tensor a = Tensor::uniform({4, 2, 2}, -1, 1, rng);
    for (Enhancer* e : {&mean_e, &var_e}) {
        zero_params(*e);
        Tensor s = e->channel_weights(t, a);
        REQUIRE(s.shape() == Shape{4});
        for (int64_t i = 0; i < 4; ++i) CHECK(s[i] == 0.5);
    }
    Enhancer prop_e = make_enhancer(8, 2, 23);
    zero_params(prop_e);
    Tensor sp = prop_e.channel_weights(t, Tensor::uniform({8, 2, 2}, -1, 1, rng));
    for (int64_t i = 0; i < 8; ++i) CHECK(sp[i] == 0.5);
}

TEST_CASE("concat fusion projects back to C channels") {
    Enhancer e = make_enhancer(8, 2, 24, ChannelVariant::kProposed, FusionVariant::kConcat);
    std::mt19937_64 rng(25);
    Tensor ef = Tensor::uniform({8, 2, 2}, -1, 1, rng);
    Tensor x = Tensor::uniform({8, 2, 2}, -1, 1, rng);
    Tape t;
    Tensor cat = t.concat_channels({ef, x});
    CHECK(cat.shape() == Shape{16, 2, 2});

    // selector projection [I ; 0] returns the spatial branch
    for (auto& [name, p] : e.parameters()) {
        if (name != "fuse_proj") continue;
        std::fill(p.mutable_data().begin(), p.mutable_data().end(), 0.0);
        for (int c = 0; c < 8; ++c) p.mutable_data()[static_cast<size_t>(c) * 16 + c] = 1.0;
    }
    Tensor sel = e.fuse_concat(t, ef, x);
    CHECK(max_abs_diff(sel, ef) < 1e-15);

    // two-channel inputs concatenate to four channels
    Tensor c2 = t.concat_channels(
        {Tensor::uniform({2, 3, 3}, -1, 1, rng), Tensor::uniform({2, 3, 3}, -1, 1, rng)});
    CHECK(c2.shape() == Shape{4, 3, 3});

    // random projection against a naive concat+1x1 oracle
    Enhancer e2 = make_enhancer(8, 2, 26, ChannelVariant::kMeanOnly, FusionVariant::kConcat);
    Tensor proj;
    for (const auto& [name, p] : e2.parameters()) {
        if (name == "fuse_proj") proj = p;
    }
    Tensor ef2 = Tensor::uniform({8, 3, 3}, -1, 1, rng);
    Tensor x2 = Tensor::uniform({8, 3, 3}, -1, 1, rng);
    Tensor got = e2.fuse_concat(t, ef2, x2);
    Tape t3;
    Tensor want = oracle::naive_conv2d(t3.concat_channels({ef2, x2}), proj, nullptr, 1, 0);
    CHECK(max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("parameter counts are the closed-form sums") {
    EnhancerConfig proposed;
    proposed.channels = 8;
    proposed.reduction = 2;
    CHECK(Enhancer::param_count_for(proposed) == 210);  // 16 + 128 + 64 + 2
    CHECK(Enhancer(proposed, 1).param_count() == 210);

    EnhancerConfig mean_only = proposed;
    mean_only.channel = ChannelVariant::kMeanOnly;
    CHECK(Enhancer::param_count_for(mean_only) == 82);  // 16 + 32 + 32 + 2
    CHECK(Enhancer(mean_only, 1).param_count() == 82);

    // lambda and gamma always contribute exactly 2
    EnhancerConfig off = proposed;
    off.channel = ChannelVariant::kOff;
    CHECK(Enhancer::param_count_for(off) - 2 == 16);

    for (auto fv : {FusionVariant::kProposed, FusionVariant::kConcat}) {
        EnhancerConfig c = proposed;
        c.fusion = fv;
        CHECK(Enhancer(c, 3).param_count() == Enhancer::param_count_for(c));
    }
}

TEST_CASE("a strong one-hot logit match makes attention copy one column") {
    Enhancer e = make_enhancer(8, 2, 27);
    // wq picks channel 0, wk picks channel 1
    for (auto& [name, p] : e.parameters()) {
        if (name == "wq" || name == "wk") {
            std::fill(p.mutable_data().begin(), p.mutable_data().end(), 0.0);
            p.mutable_data()[name == std::string("wq") ? 0 : 1] = 1.0;
        }
    }
    std::mt19937_64 rng(28);
    Tensor a = Tensor::uniform({8, 2, 2}, 0.0, 1.0, rng);
    const int target = 2;
    for (int p = 0; p < 4; ++p) {
        a.mutable_data()[0 * 4 + p] = 1.0;                      // q channel
        a.mutable_data()[1 * 4 + p] = p == target ? 50.0 : 0.0;  // k channel
    }
    Tape t;
    auto [enh, s] = e.spatial_attention(t, a);
    for (int c = 0; c < 8; ++c) {
        for (int j = 0; j < 4; ++j) {
            CHECK(std::abs(enh[static_cast<int64_t>(c) * 4 + j] -
                           a[static_cast<int64_t>(c) * 4 + target]) < 1e-6);
        }
    }
}

TEST_CASE("spatial attention is equivariant to position permutations") {
    Enhancer e = make_enhancer(8, 2, 29);
    std::mt19937_64 rng(30);
    Tensor a = Tensor::uniform({8, 2, 2}, -1, 1, rng);
    const int n = 4;
    std::vector<int> perm = {2, 0, 3, 1};
    std::vector<double> pd(a.data().size());
    for (int c = 0; c < 8; ++c)
        for (int p = 0; p < n; ++p)
            pd[static_cast<size_t>(c) * n + p] =
                a[static_cast<int64_t>(c) * n + perm[static_cast<size_t>(p)]];
    Tensor ap({8, 2, 2}, std::move(pd));

    Tape t;
    Tensor ea = e.spatial_attention(t, a).first;
    Tensor ep = e.spatial_attention(t, ap).first;
    for (int c = 0; c < 8; ++c)
        for (int p = 0; p < n; ++p) {
            CHECK(std::abs(ep[static_cast<int64_t>(c) * n + p] -
                           ea[static_cast<int64_t>(c) * n + perm[static_cast<size_t>(p)]]) <
                  1e-12);
        }
}

TEST_CASE("enhancer parameters serialize under fixed names") {
    const std::string path = "enhancer_test.dtar";
    Enhancer e = make_enhancer(8, 2, 31);
    e.lambda_param().mutable_data()[0] = 0.25;
    e.save(path);

    Archive ar = Archive::read(path);
    for (const char* name : {"wq", "wk", "w1", "w2", "lambda", "gamma"}) {
        CHECK(ar.has(name));
    }
    Enhancer loaded = Enhancer::load(path);
    auto pa = e.parameters();
    auto pb = loaded.parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].first == pb[i].first);
        CHECK(max_abs_diff(pa[i].second, pb[i].second) == 0.0);
    }
    std::remove(path.c_str());
}

TEST_CASE("channel weights stay strictly inside (0,1)") {
    std::mt19937_64 rng(32);
    for (int rep = 0; rep < 5; ++rep) {
        Enhancer e = make_enhancer(8, 2, 300 + static_cast<uint64_t>(rep));
        Tensor a = Tensor::uniform({8, 3, 3}, -2, 2, rng);
        Tape t;
        Tensor s = e.channel_weights(t, a);
        for (int64_t i = 0; i < s.size(); ++i) {
            CHECK(s[i] > 0.0);
            CHECK(s[i] < 1.0);
        }
    }
}

TEST_CASE("variant names parse strictly") {
    CHECK(channel_variant_from_string("mean") == ChannelVariant::kMeanOnly);
    CHECK(channel_variant_from_string("variance_only") == ChannelVariant::kVarianceOnly);
    CHECK_THROWS_AS(channel_variant_from_string("median"), ConfigError);
    CHECK(fusion_variant_from_string("concat") == FusionVariant::kConcat);
    CHECK_THROWS_AS(fusion_variant_from_string("sum"), ConfigError);
}
