#include "depthc/network.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "depthc/config.hpp"
#include "depthc/pgm.hpp"
#include "depthc/rng.hpp"
#include "depthc/serialize.hpp"

namespace fs = std::filesystem;

namespace depthc {

namespace {

constexpr int kRefineWidth = 16;

int stages_for(int output_stride) {
    switch (output_stride) {
        case 8: return 3;
        case 16: return 4;
        default:
            throw ConfigError("output stride must be 8 or 16, got " +
                              std::to_string(output_stride));
    }
}

int decoder_width(int c_enc, int unit) {  // unit is 0-based
    return std::max(c_enc >> unit, 8);
}

void record(ActivationTrace* trace, const std::string& name, const Tensor& t) {
    if (trace) (*trace)[name] = t;
}

}  // namespace

std::string network_config_to_text(const NetworkConfig& cfg) {
    std::string channels;
    for (size_t i = 0; i < cfg.channels.size(); ++i) {
        if (i) channels += ",";
        channels += std::to_string(cfg.channels[i]);
    }
    std::string s;
    s += "os=" + std::to_string(cfg.output_stride) + "\n";
    s += "channels=" + channels + "\n";
    s += "c_enc=" + std::to_string(cfg.bottleneck_channels) + "\n";
    s += "skip=" + std::string(cfg.skip ? "1" : "0") + "\n";
    s += "spatial=" + std::string(cfg.spatial ? "1" : "0") + "\n";
    s += "channel=" + to_string(cfg.channel) + "\n";
    s += "fusion=" + to_string(cfg.fusion) + "\n";
    s += "refinement=" + std::string(cfg.refinement ? "1" : "0") + "\n";
    s += "dropout=" + format_double(cfg.dropout) + "\n";
    s += "reduction=" + std::to_string(cfg.reduction) + "\n";
    s += "depth_scale_mm=" + format_double(cfg.depth_scale_mm) + "\n";
    s += "seed=" + std::to_string(cfg.seed) + "\n";
    return s;
}

NetworkConfig network_config_from_kv(KvReader& kv) {
    NetworkConfig cfg;
    cfg.output_stride = kv.take_int("os", cfg.output_stride);
    cfg.channels = kv.take_int_list("channels", cfg.channels);
    cfg.bottleneck_channels = kv.take_int("c_enc", cfg.bottleneck_channels);
    cfg.skip = kv.take_bool("skip", cfg.skip);
    cfg.spatial = kv.take_bool("spatial", cfg.spatial);
    cfg.channel = channel_variant_from_string(kv.take_string("channel", to_string(cfg.channel)));
    cfg.fusion = fusion_variant_from_string(kv.take_string("fusion", to_string(cfg.fusion)));
    cfg.refinement = kv.take_bool("refinement", cfg.refinement);
    cfg.dropout = kv.take_double("dropout", cfg.dropout);
    cfg.reduction = kv.take_int("reduction", cfg.reduction);
    cfg.depth_scale_mm = kv.take_double("depth_scale_mm", cfg.depth_scale_mm);
    cfg.seed = kv.take_u64("seed", cfg.seed);
    return cfg;
}

NetworkConfig network_config_from_text(const std::string& text) {
    KvReader kv(parse_kv_text(text));
    NetworkConfig cfg = network_config_from_kv(kv);
    if (!kv.empty()) {
        throw ParseError("unknown network config key '" + kv.remaining_keys().front() + "'");
    }
    return cfg;
}

Network::Conv Network::make_conv(int cout, int cin, int k, int stride, int pad,
                                 const std::string& tag, bool zero_init) {
    Conv c;
    c.stride = stride;
    c.pad = pad;
    if (zero_init) {
        c.w = Tensor({cout, cin, k, k}, 0.0, true);
    } else {
        std::mt19937_64 rng(seed_for(cfg_.seed, tag));
        const double bound = 1.0 / std::sqrt(static_cast<double>(cin) * k * k);
        c.w = Tensor::uniform({cout, cin, k, k}, -bound, bound, rng, true);
    }
    c.b = Tensor({cout}, 0.0, true);
    return c;
}

Tensor Network::apply(Tape& tape, const Conv& c, const Tensor& x, bool relu) const {
    Tensor y = tape.conv2d(x, c.w, c.b, c.stride, c.pad);
    return relu ? tape.relu(y) : y;
}

Network::Network(NetworkConfig cfg) : cfg_(std::move(cfg)) {
    stages_ = stages_for(cfg_.output_stride);
    if (cfg_.channels.empty()) throw ConfigError("encoder channel schedule is empty");
    for (int c : cfg_.channels) {
        if (c < 1) throw ConfigError("encoder channel schedule entries must be >= 1");
    }
    if (cfg_.bottleneck_channels < 1) throw ConfigError("bottleneck width must be >= 1");
    if (cfg_.dropout < 0.0 || cfg_.dropout >= 1.0) {
        throw ConfigError("dropout must lie in [0,1)");
    }
    if (cfg_.spatial && cfg_.bottleneck_channels % 8 != 0) {
        throw ConfigError("spatial attention needs a bottleneck width divisible by 8, got " +
                          std::to_string(cfg_.bottleneck_channels));
    }

    const int c_enc = cfg_.bottleneck_channels;
    int cin = 5;
    for (int i = 0; i < stages_; ++i) {
        const int cout =
            cfg_.channels[std::min<size_t>(static_cast<size_t>(i), cfg_.channels.size() - 1)];
        enc_.push_back(make_conv(cout, cin, 3, 2, 1, "enc" + std::to_string(i)));
        cin = cout;
    }
    bneck_ = make_conv(c_enc, cin, 3, 1, 1, "bneck");

    if (cfg_.enhancer_enabled()) {
        EnhancerConfig ecfg;
        ecfg.channels = c_enc;
        ecfg.reduction = cfg_.reduction;
        ecfg.spatial = cfg_.spatial;
        ecfg.channel = cfg_.channel;
        ecfg.fusion = cfg_.fusion;
        enhancer_.emplace(ecfg, seed_for(cfg_.seed, "enhancer"));
    }

    // Decoder features at skip resolutions always carry a second channel
    // block: the reduced skip when skips are on, zeros otherwise. Conv
    // shapes are therefore independent of the skip flag, and turning skips
    // off removes exactly the 1x1 reduction convolutions.
    int cur = c_enc;
    for (int k = 0; k < stages_; ++k) {
        const int dw = decoder_width(c_enc, k);
        dec_.push_back(make_conv(dw, cur, 3, 1, 1, "dec" + std::to_string(k)));
        cur = dw;
        if (k < stages_ - 1) {
            if (cfg_.skip) {
                const int enc_w = enc_[static_cast<size_t>(stages_ - k - 2)].w.dim(0);
                skip_reduce_.push_back(
                    make_conv(dw, enc_w, 1, 1, 0, "skip" + std::to_string(k)));
            }
            cur = 2 * dw;
        }
    }
    head_ = make_conv(1, cur, 3, 1, 1, "head");
    // start the depth head at mid range rather than zero
    head_.b.mutable_data()[0] = 0.5;

    if (cfg_.refinement) {
        ref_entry_ = make_conv(kRefineWidth, 3, 3, 1, 1, "ref_entry");
        for (int b = 0; b < 2; ++b) {
            Hourglass hg;
            hg.down = make_conv(kRefineWidth, kRefineWidth, 3, 2, 1,
                                "ref_hg" + std::to_string(b) + "_down");
            hg.mid = make_conv(kRefineWidth, kRefineWidth, 3, 1, 1,
                               "ref_hg" + std::to_string(b) + "_mid");
            hg.up = make_conv(kRefineWidth, kRefineWidth, 3, 1, 1,
                              "ref_hg" + std::to_string(b) + "_up");
            ref_blocks_.push_back(std::move(hg));
        }
        // zero so refinement starts as the identity on the coarse map
        ref_head_ = make_conv(1, kRefineWidth, 3, 1, 1, "ref_head", /*zero_init=*/true);
    }
}

Network::EncoderOut Network::encoder_forward(Tape& tape, const Tensor& input5,
                                             ActivationTrace* trace) const {
    if (input5.rank() != 3 || input5.dim(0) != 5) {
        throw DimensionError("encoder expects a [5,H,W] input, got " +
                             shape_str(input5.shape()));
    }
    const int h = input5.dim(1), w = input5.dim(2);
    if (h % cfg_.output_stride != 0 || w % cfg_.output_stride != 0) {
        throw ConfigError("input " + std::to_string(h) + "x" + std::to_string(w) +
                          " not divisible by output stride " +
                          std::to_string(cfg_.output_stride));
    }
    EncoderOut out;
    Tensor x = input5;
    for (size_t i = 0; i < enc_.size(); ++i) {
        x = apply(tape, enc_[i], x);
        record(trace, "enc" + std::to_string(i + 1), x);
        if (i + 1 < enc_.size()) out.skips.push_back(x);
    }
    out.bottleneck = apply(tape, bneck_, x);
    record(trace, "bottleneck", out.bottleneck);
    return out;
}

Tensor Network::decoder_forward(Tape& tape, const Tensor& enhanced,
                                const std::vector<Tensor>& skips,
                                ActivationTrace* trace) const {
    Tensor x = enhanced;
    for (int k = 0; k < stages_; ++k) {
        x = tape.upsample2_nearest(x);
        x = apply(tape, dec_[static_cast<size_t>(k)], x);
        if (k < stages_ - 1) {
            Tensor second;
            if (cfg_.skip) {
                const size_t skip_idx = static_cast<size_t>(stages_ - k - 2);
                if (skip_idx >= skips.size()) {
                    throw DimensionError("decoder: missing skip feature for unit " +
                                         std::to_string(k));
                }
                const Tensor& s = skips[skip_idx];
                if (s.dim(1) != x.dim(1) || s.dim(2) != x.dim(2)) {
                    throw DimensionError("decoder: skip resolution " + shape_str(s.shape()) +
                                         " does not match feature " + shape_str(x.shape()));
                }
                second = apply(tape, skip_reduce_[static_cast<size_t>(k)], s);
            } else {
                second = Tensor({x.dim(0), x.dim(1), x.dim(2)}, 0.0);
            }
            x = tape.concat_channels({x, second});
        }
        record(trace, "dec" + std::to_string(k + 1), x);
    }
    return apply(tape, head_, x);  // ReLU clamps depth at 0
}

Tensor Network::refine_residual(Tape& tape, const Tensor& coarse_norm,
                                const Tensor& sparse_norm, const Tensor& mask,
                                ActivationTrace* trace) const {
    Tensor x = tape.concat_channels({coarse_norm, sparse_norm, mask});
    x = apply(tape, ref_entry_, x);
    record(trace, "refine_entry", x);
    for (size_t b = 0; b < ref_blocks_.size(); ++b) {
        const auto& hg = ref_blocks_[b];
        Tensor t = apply(tape, hg.down, x);
        t = apply(tape, hg.mid, t);
        t = tape.upsample2_nearest(t);
        t = apply(tape, hg.up, t);
        x = tape.add(x, t);  // skip from block input to block output
        record(trace, "refine_hg" + std::to_string(b + 1), x);
    }
    return apply(tape, ref_head_, x, /*relu=*/false);
}

Tensor Network::refine_forward(Tape& tape, const Tensor& coarse_mm, const Tensor& sparse_mm,
                               const Tensor& mask, ActivationTrace* trace) const {
    if (!cfg_.refinement) throw ConfigError("refinement stage is disabled");
    if (coarse_mm.shape() != sparse_mm.shape() || coarse_mm.shape() != mask.shape()) {
        throw DimensionError("refine: inputs disagree: " + shape_str(coarse_mm.shape()) + ", " +
                             shape_str(sparse_mm.shape()) + ", " + shape_str(mask.shape()));
    }
    const double inv = 1.0 / cfg_.depth_scale_mm;
    Tensor coarse_norm = tape.scale(coarse_mm, inv);
    Tensor sparse_norm = tape.scale(sparse_mm, inv);
    Tensor residual = refine_residual(tape, coarse_norm, sparse_norm, mask, trace);
    Tensor refined_norm = tape.relu(tape.add(coarse_norm, residual));
    return tape.scale(refined_norm, cfg_.depth_scale_mm);
}

ForwardResult Network::forward(Tape& tape, const DepthSample& sample,
                               const ForwardOptions& opt) const {
    if (sample.sparse.shape() != sample.mask.shape()) {
        throw DimensionError("sample: sparse and mask shapes disagree");
    }
    const double inv = 1.0 / cfg_.depth_scale_mm;
    Tensor sparse_norm = tape.scale(sample.sparse, inv);
    Tensor input5 = tape.concat_channels({sample.rgb, sparse_norm, sample.mask});
    record(opt.trace, "input", input5);

    EncoderOut enc = encoder_forward(tape, input5, opt.trace);

    Tensor feat = enc.bottleneck;
    if (enhancer_) {
        Tensor attention;
        feat = enhancer_->forward(tape, feat, &attention);
        if (opt.trace && attention.defined()) {
            const int n = attention.dim(0);
            record(opt.trace, "attention", tape.reshape(attention, {1, n, n}));
        }
        record(opt.trace, "enhanced", feat);
    }
    if (cfg_.dropout > 0.0 && opt.training) {
        if (!opt.dropout_rng) {
            throw ContractError("training forward with dropout needs an RNG");
        }
        feat = tape.dropout(feat, cfg_.dropout, *opt.dropout_rng);
    }

    Tensor coarse_norm = decoder_forward(tape, feat, enc.skips, opt.trace);
    Tensor coarse_mm = tape.scale(coarse_norm, cfg_.depth_scale_mm);
    record(opt.trace, "coarse", coarse_mm);

    ForwardResult out;
    out.coarse = coarse_mm;
    if (cfg_.refinement) {
        Tensor residual =
            refine_residual(tape, coarse_norm, sparse_norm, sample.mask, opt.trace);
        Tensor refined_norm = tape.relu(tape.add(coarse_norm, residual));
        out.refined = tape.scale(refined_norm, cfg_.depth_scale_mm);
    } else {
        out.refined = coarse_mm;
    }
    record(opt.trace, "refined", out.refined);
    return out;
}

std::vector<std::pair<std::string, Tensor>> Network::parameters() const {
    std::vector<std::pair<std::string, Tensor>> ps;
    auto add_conv = [&ps](const std::string& name, const Conv& c) {
        ps.emplace_back(name + ".w", c.w);
        ps.emplace_back(name + ".b", c.b);
    };
    for (size_t i = 0; i < enc_.size(); ++i) add_conv("enc." + std::to_string(i), enc_[i]);
    add_conv("enc.bneck", bneck_);
    if (enhancer_) {
        for (const auto& [name, t] : enhancer_->parameters()) {
            ps.emplace_back("enhancer." + name, t);
        }
    }
    for (size_t k = 0; k < dec_.size(); ++k) add_conv("dec." + std::to_string(k), dec_[k]);
    for (size_t k = 0; k < skip_reduce_.size(); ++k) {
        add_conv("dec.skip" + std::to_string(k), skip_reduce_[k]);
    }
    add_conv("dec.head", head_);
    if (cfg_.refinement) {
        add_conv("refine.entry", ref_entry_);
        for (size_t b = 0; b < ref_blocks_.size(); ++b) {
            const std::string p = "refine.hg" + std::to_string(b);
            add_conv(p + ".down", ref_blocks_[b].down);
            add_conv(p + ".mid", ref_blocks_[b].mid);
            add_conv(p + ".up", ref_blocks_[b].up);
        }
        add_conv("refine.head", ref_head_);
    }
    return ps;
}

void Network::save_checkpoint(const std::string& path) const {
    ArchiveWriter w;
    w.add_text("config", network_config_to_text(cfg_));
    for (const auto& [name, t] : parameters()) w.add_tensor(name, t);
    w.write(path);
}

Network Network::load_checkpoint(const std::string& path) {
    Archive a = Archive::read(path);
    Network net(network_config_from_text(a.text("config")));
    for (auto& [name, t] : net.parameters()) {
        Tensor stored = a.tensor(name);
        if (stored.shape() != t.shape()) {
            throw ParseError(path + ": parameter '" + name + "' has shape " +
                             shape_str(stored.shape()) + ", expected " + shape_str(t.shape()));
        }
        t.mutable_data() = stored.data();
    }
    return net;
}

std::vector<std::string> Network::layer_names() const {
    std::vector<std::string> names = {"input"};
    for (size_t i = 0; i < enc_.size(); ++i) names.push_back("enc" + std::to_string(i + 1));
    names.push_back("bottleneck");
    if (enhancer_) {
        if (cfg_.spatial) names.push_back("attention");
        names.push_back("enhanced");
    }
    for (size_t k = 0; k < dec_.size(); ++k) names.push_back("dec" + std::to_string(k + 1));
    names.push_back("coarse");
    if (cfg_.refinement) {
        names.push_back("refine_entry");
        for (size_t b = 0; b < ref_blocks_.size(); ++b) {
            names.push_back("refine_hg" + std::to_string(b + 1));
        }
    }
    names.push_back("refined");
    return names;
}

int64_t count_params(const NetworkConfig& cfg) {
    Network net(cfg);
    int64_t n = 0;
    for (const auto& [name, t] : net.parameters()) n += t.size();
    return n;
}

std::vector<Tensor> dump_activations(const Network& net, const DepthSample& sample,
                                     const std::string& layer, const std::string& out_dir) {
    const auto names = net.layer_names();
    if (std::find(names.begin(), names.end(), layer) == names.end()) {
        std::string known;
        for (const auto& n : names) known += (known.empty() ? "" : ", ") + n;
        throw LookupError("unknown layer '" + layer + "' (known: " + known + ")");
    }
    Tape tape(/*recording=*/false);
    ActivationTrace trace;
    ForwardOptions opt;
    opt.trace = &trace;
    net.forward(tape, sample, opt);
    const Tensor& act = trace.at(layer);

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create directory " + out_dir + ": " + ec.message());

    const int c = act.dim(0), h = act.dim(1), w = act.dim(2);
    std::vector<Tensor> channels;
    std::string meta;
    for (int ch = 0; ch < c; ++ch) {
        std::vector<double> grid(static_cast<size_t>(h) * w);
        const double* src = act.data().data() + static_cast<int64_t>(ch) * h * w;
        double lo = src[0], hi = src[0];
        for (size_t i = 0; i < grid.size(); ++i) {
            grid[i] = src[i];
            lo = std::min(lo, src[i]);
            hi = std::max(hi, src[i]);
        }
        channels.emplace_back(Shape{h, w}, grid);

        std::vector<uint16_t> pixels(grid.size(), 0);
        if (hi > lo) {
            for (size_t i = 0; i < grid.size(); ++i) {
                pixels[i] = static_cast<uint16_t>(
                    std::llround((grid[i] - lo) / (hi - lo) * 65535.0));
            }
        }
        char name[64];
        std::snprintf(name, sizeof(name), "%s.ch%03d.pgm", layer.c_str(), ch);
        write_pgm16((fs::path(out_dir) / name).string(), w, h, pixels);
        meta += std::string(name) + " min=" + format_double(lo) + " max=" + format_double(hi) +
                "\n";
    }
    std::ofstream mf(fs::path(out_dir) / (layer + ".meta.txt"));
    if (!mf) throw IoError("cannot write activation metadata in " + out_dir);
    mf << meta;
    return channels;
}

}  // namespace depthc
