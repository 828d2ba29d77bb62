#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "depthc/network.hpp"
#include "depthc/pgm.hpp"
#include "depthc/rng.hpp"
#include "depthc/training.hpp"

using namespace depthc;

namespace {

NetworkConfig small_cfg(uint64_t seed = 1) {
    NetworkConfig cfg;
    cfg.channels = {8, 8, 8};
    cfg.bottleneck_channels = 8;
    cfg.reduction = 2;
    cfg.seed = seed;
    return cfg;
}

DepthSample random_sample(int h, int w, uint64_t seed) {
    std::mt19937_64 rng(seed);
    DepthSample s;
    s.rgb = Tensor::uniform({3, h, w}, 0, 1, rng);
    std::vector<double> gt(static_cast<size_t>(h) * w, 0.0);
    std::vector<double> sparse(gt.size(), 0.0), mask(gt.size(), 0.0);
    for (size_t i = 0; i < gt.size(); ++i) {
        if (i / static_cast<size_t>(w) >= static_cast<size_t>(h) / 8) {
            gt[i] = rng_range(rng, 2000.0, 80000.0);
            if (rng_unit(rng) < 0.3) {
                sparse[i] = gt[i];
                mask[i] = 1.0;
            }
        }
    }
    s.gt = Tensor({1, h, w}, std::move(gt));
    s.sparse = Tensor({1, h, w}, std::move(sparse));
    s.mask = Tensor({1, h, w}, std::move(mask));
    return s;
}

void zero_all(Network& net) {
    for (auto& [name, t] : net.parameters()) {
        std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
    }
}

}  // namespace

TEST_CASE("encoder reduces by the configured output stride") {
    Tape t;
    DepthSample s = random_sample(32, 32, 1);
    {
        Network net(small_cfg());
        ActivationTrace trace;
        ForwardOptions opt;
        opt.trace = &trace;
        net.forward(t, s, opt);
        CHECK(trace.at("bottleneck").shape() == Shape{8, 4, 4});
    }
    {
        NetworkConfig cfg = small_cfg();
        cfg.output_stride = 16;
        Network net(cfg);
        ActivationTrace trace;
        ForwardOptions opt;
        opt.trace = &trace;
        net.forward(t, s, opt);
        CHECK(trace.at("bottleneck").shape() == Shape{8, 2, 2});
    }
}

TEST_CASE("zero input with zero biases gives a zero bottleneck") {
    Network net(small_cfg(2));
    Tape t;
    Tensor zero_in({5, 16, 16}, 0.0);
    auto enc = net.encoder_forward(t, zero_in);
    for (int64_t i = 0; i < enc.bottleneck.size(); ++i) CHECK(enc.bottleneck[i] == 0.0);
}

TEST_CASE("encoder rejects inputs not divisible by the output stride") {
    Network net(small_cfg(3));
    Tape t;
    CHECK_THROWS_AS(net.encoder_forward(t, Tensor({5, 12, 16}, 0.0)), ConfigError);
    CHECK_THROWS_AS(net.encoder_forward(t, Tensor({4, 16, 16}, 0.0)), DimensionError);
}

TEST_CASE("decoder runs three up-projection units at OS 8 and four at OS 16") {
    Tape t;
    DepthSample s = random_sample(32, 32, 4);
    {
        Network net(small_cfg(4));
        ActivationTrace trace;
        ForwardOptions opt;
        opt.trace = &trace;
        net.forward(t, s, opt);
        CHECK(trace.count("dec3") == 1);
        CHECK(trace.count("dec4") == 0);
    }
    {
        NetworkConfig cfg = small_cfg(4);
        cfg.output_stride = 16;
        Network net(cfg);
        ActivationTrace trace;
        ForwardOptions opt;
        opt.trace = &trace;
        net.forward(t, s, opt);
        CHECK(trace.count("dec4") == 1);
    }
}

TEST_CASE("disabling skips keeps the shape and removes the reduction convs") {
    NetworkConfig on = small_cfg(5);
    NetworkConfig off = on;
    off.skip = false;
    Tape t;
    DepthSample s = random_sample(16, 32, 5);
    Tensor a = Network(on).forward(t, s).coarse;
    Tensor b = Network(off).forward(t, s).coarse;
    CHECK(a.shape() == b.shape());

    const int64_t delta = count_params(on) - count_params(off);
    // two skip reducers at OS 8: 1x1 convs (+bias) from the encoder widths
    // onto the decoder widths at /4 and /2
    Network net(on);
    int64_t expected = 0;
    for (const auto& [name, p] : net.parameters()) {
        if (name.find("dec.skip") != std::string::npos) expected += p.size();
    }
    CHECK(delta == expected);
    CHECK(delta > 0);
}

TEST_CASE("all-zero weights produce an all-zero depth map") {
    Network net(small_cfg(6));
    zero_all(net);
    Tape t;
    DepthSample s = random_sample(16, 16, 6);
    ForwardResult fr = net.forward(t, s);
    for (int64_t i = 0; i < fr.coarse.size(); ++i) CHECK(fr.coarse[i] == 0.0);
}

TEST_CASE("zero refinement weights leave the coarse map untouched") {
    Network net(small_cfg(7));
    for (auto& [name, p] : net.parameters()) {
        if (name.rfind("refine.", 0) == 0) {
            std::fill(p.mutable_data().begin(), p.mutable_data().end(), 0.0);
        }
    }
    Tape t;
    DepthSample s = random_sample(16, 16, 7);
    ForwardResult fr = net.forward(t, s);
    for (int64_t i = 0; i < fr.coarse.size(); ++i) {
        CHECK(std::memcmp(&fr.coarse.data()[static_cast<size_t>(i)],
                          &fr.refined.data()[static_cast<size_t>(i)], 8) == 0);
    }
}

TEST_CASE("fresh networks refine as the identity (zero-initialized head)") {
    Network net(small_cfg(8));
    Tape t;
    DepthSample s = random_sample(16, 16, 8);
    ForwardResult fr = net.forward(t, s);
    CHECK(max_abs_diff(fr.coarse, fr.refined) == 0.0);
}

TEST_CASE("refinement handles degenerate all-zero sparse input") {
    Network net(small_cfg(9));
    Tape t;
    DepthSample s = random_sample(16, 16, 9);
    s.sparse = Tensor({1, 16, 16}, 0.0);
    s.mask = Tensor({1, 16, 16}, 0.0);
    ForwardResult fr = net.forward(t, s);
    for (int64_t i = 0; i < fr.refined.size(); ++i) {
        CHECK(std::isfinite(fr.refined[i]));
        CHECK(fr.refined[i] >= 0.0);
    }
}

TEST_CASE("refine_forward is finite and nonnegative on random weights") {
    Network net(small_cfg(10));
    // randomize the refinement head away from its zero init
    for (auto& [name, p] : net.parameters()) {
        if (name == "refine.head.w" || name == "refine.head.b") {
            std::mt19937_64 rng(11);
            p.mutable_data() = Tensor::uniform(p.shape(), -0.5, 0.5, rng).data();
        }
    }
    std::mt19937_64 rng(12);
    Tape t;
    Tensor coarse = Tensor::uniform({1, 16, 16}, 0, 80000, rng);
    Tensor sparse = Tensor::uniform({1, 16, 16}, 0, 80000, rng);
    Tensor mask({1, 16, 16}, 1.0);
    Tensor refined = net.refine_forward(t, coarse, sparse, mask);
    for (int64_t i = 0; i < refined.size(); ++i) {
        CHECK(std::isfinite(refined[i]));
        CHECK(refined[i] >= 0.0);
    }
    CHECK_THROWS_AS(net.refine_forward(t, coarse, Tensor({1, 8, 8}, 0.0), mask),
                    DimensionError);
}

TEST_CASE("full pipeline output shapes and nonnegativity") {
    NetworkConfig cfg;
    cfg.reduction = 2;
    cfg.seed = 13;
    Network net(cfg);
    Tape t;
    DepthSample s = random_sample(32, 96, 13);
    ForwardResult fr = net.forward(t, s);
    CHECK(fr.coarse.shape() == Shape{1, 32, 96});
    CHECK(fr.refined.shape() == Shape{1, 32, 96});
    for (int64_t i = 0; i < fr.coarse.size(); ++i) {
        CHECK(fr.coarse[i] >= 0.0);
        CHECK(fr.refined[i] >= 0.0);
    }
}

TEST_CASE("enhancer at zero scalars does not change the forward pass") {
    NetworkConfig with = small_cfg(14);
    NetworkConfig without = small_cfg(14);
    without.spatial = false;
    without.channel = ChannelVariant::kOff;
    Tape t;
    DepthSample s = random_sample(16, 32, 14);
    Tensor a = Network(with).forward(t, s).coarse;
    Tensor b = Network(without).forward(t, s).coarse;
    CHECK(max_abs_diff(a, b) == 0.0);
}

TEST_CASE("ablation floor: plain encoder-decoder runs") {
    NetworkConfig cfg = small_cfg(15);
    cfg.skip = false;
    cfg.spatial = false;
    cfg.channel = ChannelVariant::kOff;
    cfg.refinement = false;
    Network net(cfg);
    Tape t;
    DepthSample s = random_sample(16, 16, 15);
    ForwardResult fr = net.forward(t, s);
    CHECK(fr.coarse.shape() == Shape{1, 16, 16});
    CHECK(max_abs_diff(fr.coarse, fr.refined) == 0.0);
}

TEST_CASE("parameter accounting") {
    NetworkConfig with = small_cfg(16);
    NetworkConfig without = small_cfg(16);
    without.spatial = false;
    without.channel = ChannelVariant::kOff;

    EnhancerConfig ecfg;
    ecfg.channels = with.bottleneck_channels;
    ecfg.reduction = with.reduction;
    ecfg.spatial = true;
    ecfg.channel = with.channel;
    ecfg.fusion = with.fusion;
    CHECK(count_params(with) - count_params(without) == Enhancer::param_count_for(ecfg));

    NetworkConfig doubled = with;
    doubled.channels = {16, 16, 16};
    doubled.bottleneck_channels = 16;
    CHECK(count_params(doubled) > count_params(with));
}

TEST_CASE("OS 8 keeps more decoder activations at /2 and /4 than OS 16") {
    DepthSample s = random_sample(32, 32, 17);
    auto activations_at = [&](int os, int denom) {
        NetworkConfig cfg = small_cfg(17);
        cfg.bottleneck_channels = 32;  // representative width
        cfg.channels = {16, 32, 64};
        cfg.output_stride = os;
        Network net(cfg);
        Tape t;
        ActivationTrace trace;
        ForwardOptions opt;
        opt.trace = &trace;
        net.forward(t, s, opt);
        int64_t total = 0;
        for (const auto& [name, act] : trace) {
            if (name.rfind("dec", 0) != 0) continue;
            if (act.dim(1) == 32 / denom) total += act.size();
        }
        return total;
    };
    CHECK(activations_at(8, 2) > activations_at(16, 2));
    CHECK(activations_at(8, 4) > activations_at(16, 4));
    CHECK(activations_at(8, 1) > 0);
    CHECK(activations_at(16, 1) > 0);
}

TEST_CASE("checkpoints round trip bit-exactly") {
    const std::string path = "network_test_ckpt.dtar";
    NetworkConfig cfg = small_cfg(18);
    cfg.dropout = 0.25;
    Network net(cfg);
    DepthSample s = random_sample(16, 16, 18);
    Tape t1;
    Tensor before = net.forward(t1, s).refined;
    net.save_checkpoint(path);

    Network loaded = Network::load_checkpoint(path);
    CHECK(network_config_to_text(loaded.config()) == network_config_to_text(cfg));
    Tape t2;
    Tensor after = loaded.forward(t2, s).refined;
    CHECK(max_abs_diff(before, after) == 0.0);
    std::remove(path.c_str());
}

TEST_CASE("network config text round trips") {
    NetworkConfig cfg;
    cfg.output_stride = 16;
    cfg.channels = {4, 8};
    cfg.bottleneck_channels = 16;
    cfg.skip = false;
    cfg.channel = ChannelVariant::kVarianceOnly;
    cfg.fusion = FusionVariant::kConcat;
    cfg.dropout = 0.125;
    cfg.seed = 99;
    NetworkConfig back = network_config_from_text(network_config_to_text(cfg));
    CHECK(network_config_to_text(back) == network_config_to_text(cfg));
    CHECK_THROWS_AS(network_config_from_text("nonsense=1\n"), ParseError);
}

TEST_CASE("activation dumps match the in-memory activations") {
    const std::string dir = "network_test_dump";
    NetworkConfig cfg = small_cfg(19);
    Network net(cfg);
    DepthSample s = random_sample(16, 16, 19);

    auto channels = dump_activations(net, s, "bottleneck", dir);
    CHECK(channels.size() == 8);

    Tape t;
    ActivationTrace trace;
    ForwardOptions opt;
    opt.trace = &trace;
    net.forward(t, s, opt);
    const Tensor& bn = trace.at("bottleneck");
    for (size_t c = 0; c < channels.size(); ++c) {
        for (int64_t i = 0; i < channels[c].size(); ++i) {
            CHECK(channels[c][i] == bn[static_cast<int64_t>(c) * 4 + i]);
        }
    }

    // 16-bit quantization round-trips within one step
    int w = 0, h = 0;
    auto pixels = read_pgm16(dir + "/bottleneck.ch000.pgm", w, h);
    double lo = channels[0][0], hi = channels[0][0];
    for (int64_t i = 0; i < channels[0].size(); ++i) {
        lo = std::min(lo, channels[0][i]);
        hi = std::max(hi, channels[0][i]);
    }
    const double step = hi > lo ? (hi - lo) / 65535.0 : 0.0;
    for (int64_t i = 0; i < channels[0].size(); ++i) {
        const double deq = lo + pixels[static_cast<size_t>(i)] * step;
        CHECK(std::abs(deq - channels[0][i]) <= step * 0.5 + 1e-12);
    }

    CHECK_THROWS_AS(dump_activations(net, s, "no_such_layer", dir), LookupError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("end-to-end gradients agree with finite differences") {
    GradCheckReport r = gradcheck_unit("network");
    CHECK(r.pass);
    for (const auto& g : r.groups) CHECK(g.max_rel_err < 1e-5);
}

TEST_CASE("spatial attention demands a compatible bottleneck width") {
    NetworkConfig cfg = small_cfg(20);
    cfg.bottleneck_channels = 12;
    CHECK_THROWS_AS(Network{cfg}, ConfigError);
    cfg.spatial = false;
    cfg.channel = ChannelVariant::kOff;
    CHECK_NOTHROW(Network{cfg});
}
