#include "depthc/enhancer.hpp"

#include <cmath>

#include "depthc/rng.hpp"
#include "depthc/serialize.hpp"

namespace depthc {

std::string to_string(ChannelVariant v) {
    switch (v) {
        case ChannelVariant::kProposed: return "proposed";
        case ChannelVariant::kMeanOnly: return "mean";
        case ChannelVariant::kVarianceOnly: return "variance";
        case ChannelVariant::kOff: return "off";
    }
    return "?";
}

std::string to_string(FusionVariant v) {
    return v == FusionVariant::kProposed ? "proposed" : "concat";
}

ChannelVariant channel_variant_from_string(const std::string& s) {
    if (s == "proposed") return ChannelVariant::kProposed;
    if (s == "mean" || s == "mean_only") return ChannelVariant::kMeanOnly;
    if (s == "variance" || s == "variance_only") return ChannelVariant::kVarianceOnly;
    if (s == "off") return ChannelVariant::kOff;
    throw ConfigError("unknown channel attention variant '" + s + "'");
}

FusionVariant fusion_variant_from_string(const std::string& s) {
    if (s == "proposed") return FusionVariant::kProposed;
    if (s == "concat") return FusionVariant::kConcat;
    throw ConfigError("unknown fusion variant '" + s + "'");
}

int Enhancer::descriptor_width() const {
    switch (cfg_.channel) {
        case ChannelVariant::kProposed: return 2 * cfg_.channels;
        case ChannelVariant::kMeanOnly:
        case ChannelVariant::kVarianceOnly: return cfg_.channels;
        case ChannelVariant::kOff: return 0;
    }
    return 0;
}

Enhancer::Enhancer(EnhancerConfig cfg, uint64_t seed) : cfg_(cfg) {
    const int c = cfg_.channels;
    if (c < 1) throw ConfigError("enhancer: channel count must be >= 1");
    if (!cfg_.spatial && cfg_.channel == ChannelVariant::kOff) {
        throw ConfigError("enhancer: both branches disabled");
    }
    if (cfg_.fusion == FusionVariant::kConcat &&
        (!cfg_.spatial || cfg_.channel == ChannelVariant::kOff)) {
        throw ConfigError("enhancer: concat fusion needs both branches enabled");
    }
    std::mt19937_64 rng(seed);
    if (cfg_.spatial) {
        if (c % 8 != 0) {
            throw ConfigError("enhancer: spatial attention needs channels divisible by 8, got " +
                              std::to_string(c));
        }
        const double bound = 1.0 / std::sqrt(static_cast<double>(c));
        wq_ = Tensor::uniform({c / 8, c, 1, 1}, -bound, bound, rng, true);
        wk_ = Tensor::uniform({c / 8, c, 1, 1}, -bound, bound, rng, true);
    }
    if (cfg_.channel != ChannelVariant::kOff) {
        const int desc = descriptor_width();
        if (cfg_.reduction < 1 || desc % cfg_.reduction != 0) {
            throw ConfigError("enhancer: descriptor width " + std::to_string(desc) +
                              " not divisible by reduction " + std::to_string(cfg_.reduction));
        }
        const int hidden = desc / cfg_.reduction;
        const double b1 = 1.0 / std::sqrt(static_cast<double>(desc));
        const double b2 = 1.0 / std::sqrt(static_cast<double>(hidden));
        w1_ = Tensor::uniform({hidden, desc}, -b1, b1, rng, true);
        w2_ = Tensor::uniform({c, hidden}, -b2, b2, rng, true);
    }
    if (cfg_.fusion == FusionVariant::kProposed) {
        // zero so the enhancer starts as an identity mapping
        lambda_ = Tensor::scalar(0.0, true);
        gamma_ = Tensor::scalar(0.0, true);
    } else {
        const double bf = 1.0 / std::sqrt(static_cast<double>(2 * c));
        fuse_proj_ = Tensor::uniform({c, 2 * c, 1, 1}, -bf, bf, rng, true);
    }
}

std::pair<Tensor, Tensor> Enhancer::spatial_attention(Tape& tape, const Tensor& a) const {
    if (!cfg_.spatial) throw ConfigError("enhancer: spatial branch is disabled");
    const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
    if (c != cfg_.channels) {
        throw DimensionError("enhancer: input has " + std::to_string(c) +
                             " channels, configured for " + std::to_string(cfg_.channels));
    }
    const int n = h * w;
    Tensor q = tape.conv2d(a, wq_, std::nullopt, 1, 0);  // [C/8,H,W]
    Tensor k = tape.conv2d(a, wk_, std::nullopt, 1, 0);
    Tensor qm = tape.reshape(q, {c / 8, n});
    Tensor km = tape.reshape(k, {c / 8, n});
    // logits[j,i] = K_i . Q_j; softmax over the source index i
    Tensor logits = tape.matmul(tape.transpose2d(qm), km);  // [N,N]
    Tensor s = tape.softmax_rows(logits);
    // the value map is the uncompressed input
    Tensor v = tape.reshape(a, {c, n});
    Tensor e = tape.matmul(v, tape.transpose2d(s));  // E[:,j] = sum_i s[j,i] V[:,i]
    return {tape.reshape(e, {c, h, w}), s};
}

Tensor Enhancer::squeeze(Tape& tape, const Tensor& a) {
    return tape.concat_vec({tape.channel_mean(a), tape.channel_var(a)});
}

Tensor Enhancer::excite(Tape& tape, const Tensor& z) const {
    if (cfg_.channel == ChannelVariant::kOff) {
        throw ConfigError("enhancer: channel branch is disabled");
    }
    const int desc = descriptor_width();
    if (z.rank() != 1 || z.dim(0) != desc) {
        throw ConfigError("enhancer: descriptor shape " + shape_str(z.shape()) +
                          " does not match expected width " + std::to_string(desc));
    }
    Tensor col = tape.reshape(z, {desc, 1});
    Tensor hidden = tape.relu(tape.matmul(w1_, col));
    Tensor s = tape.sigmoid(tape.matmul(w2_, hidden));
    return tape.reshape(s, {cfg_.channels});
}

Tensor Enhancer::channel_weights(Tape& tape, const Tensor& a) const {
    Tensor z;
    switch (cfg_.channel) {
        case ChannelVariant::kProposed: z = squeeze(tape, a); break;
        case ChannelVariant::kMeanOnly: z = tape.channel_mean(a); break;
        case ChannelVariant::kVarianceOnly: z = tape.channel_var(a); break;
        case ChannelVariant::kOff:
            throw ConfigError("enhancer: channel branch is disabled");
    }
    return excite(tape, z);
}

Tensor Enhancer::channel_rescale(Tape& tape, const Tensor& a, const Tensor& s) {
    return tape.channel_scale(a, s);
}

Tensor Enhancer::fuse(Tape& tape, const Tensor& e, const Tensor& x, const Tensor& a) const {
    if (cfg_.fusion != FusionVariant::kProposed) {
        throw ConfigError("enhancer: fuse() requires the proposed fusion");
    }
    Tensor acc;
    if (e.defined()) acc = tape.scale_by(lambda_, e);
    if (x.defined()) {
        Tensor gx = tape.scale_by(gamma_, x);
        acc = acc.defined() ? tape.add(acc, gx) : gx;
    }
    return acc.defined() ? tape.add(acc, a) : a;
}

Tensor Enhancer::fuse_concat(Tape& tape, const Tensor& e, const Tensor& x) const {
    if (!fuse_proj_.defined()) {
        throw ConfigError("enhancer: concat fusion is not configured");
    }
    Tensor cat = tape.concat_channels({e, x});
    return tape.conv2d(cat, fuse_proj_, std::nullopt, 1, 0);
}

Tensor Enhancer::forward(Tape& tape, const Tensor& a, Tensor* attention_out) const {
    Tensor e, x;
    if (cfg_.spatial) {
        auto [es, s] = spatial_attention(tape, a);
        e = es;
        if (attention_out) *attention_out = s;
    }
    if (cfg_.channel != ChannelVariant::kOff) {
        x = channel_rescale(tape, a, channel_weights(tape, a));
    }
    if (cfg_.fusion == FusionVariant::kConcat) return fuse_concat(tape, e, x);
    return fuse(tape, e, x, a);
}

std::vector<std::pair<std::string, Tensor>> Enhancer::parameters() const {
    std::vector<std::pair<std::string, Tensor>> ps;
    if (wq_.defined()) ps.emplace_back("wq", wq_);
    if (wk_.defined()) ps.emplace_back("wk", wk_);
    if (w1_.defined()) ps.emplace_back("w1", w1_);
    if (w2_.defined()) ps.emplace_back("w2", w2_);
    if (lambda_.defined()) ps.emplace_back("lambda", lambda_);
    if (gamma_.defined()) ps.emplace_back("gamma", gamma_);
    if (fuse_proj_.defined()) ps.emplace_back("fuse_proj", fuse_proj_);
    return ps;
}

int64_t Enhancer::param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.size();
    return n;
}

int64_t Enhancer::param_count_for(const EnhancerConfig& cfg) {
    const int64_t c = cfg.channels;
    int64_t n = 0;
    if (cfg.spatial) n += 2 * c * (c / 8);
    if (cfg.channel != ChannelVariant::kOff) {
        const int64_t desc = cfg.channel == ChannelVariant::kProposed ? 2 * c : c;
        const int64_t hidden = desc / cfg.reduction;
        n += hidden * desc + c * hidden;
    }
    if (cfg.fusion == FusionVariant::kProposed) {
        n += 2;  // lambda, gamma
    } else {
        n += c * 2 * c;
    }
    return n;
}

void Enhancer::save(const std::string& path) const {
    ArchiveWriter w;
    std::string cfg = "channels=" + std::to_string(cfg_.channels) +
                      "\nreduction=" + std::to_string(cfg_.reduction) +
                      "\nspatial=" + (cfg_.spatial ? "1" : "0") +
                      "\nchannel=" + to_string(cfg_.channel) +
                      "\nfusion=" + to_string(cfg_.fusion) + "\n";
    w.add_text("config", cfg);
    for (const auto& [name, t] : parameters()) w.add_tensor(name, t);
    w.write(path);
}

Enhancer Enhancer::load(const std::string& path) {
    Archive a = Archive::read(path);
    EnhancerConfig cfg;
    for (const auto& line : [&] {
             std::vector<std::pair<std::string, std::string>> kv;
             std::string text = a.text("config");
             size_t pos = 0;
             while (pos < text.size()) {
                 size_t nl = text.find('\n', pos);
                 if (nl == std::string::npos) nl = text.size();
                 std::string ln = text.substr(pos, nl - pos);
                 pos = nl + 1;
                 size_t eq = ln.find('=');
                 if (eq != std::string::npos) kv.emplace_back(ln.substr(0, eq), ln.substr(eq + 1));
             }
             return kv;
         }()) {
        if (line.first == "channels") cfg.channels = std::stoi(line.second);
        else if (line.first == "reduction") cfg.reduction = std::stoi(line.second);
        else if (line.first == "spatial") cfg.spatial = line.second == "1";
        else if (line.first == "channel") cfg.channel = channel_variant_from_string(line.second);
        else if (line.first == "fusion") cfg.fusion = fusion_variant_from_string(line.second);
        else throw ParseError(path + ": unknown enhancer config key '" + line.first + "'");
    }
    Enhancer e(cfg, 0);
    for (auto& [name, t] : e.parameters()) {
        Tensor stored = a.tensor(name);
        if (stored.shape() != t.shape()) {
            throw ParseError(path + ": entry '" + name + "' has shape " +
                             shape_str(stored.shape()) + ", expected " + shape_str(t.shape()));
        }
        t.mutable_data() = stored.data();
    }
    return e;
}

}  // namespace depthc
