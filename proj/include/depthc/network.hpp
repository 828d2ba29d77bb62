#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "depthc/enhancer.hpp"
#include "depthc/synth.hpp"
#include "depthc/tensor.hpp"

namespace depthc {

// Coarse-to-fine depth completion network. The encoder downsamples the
// 5-channel input (RGB + sparse depth + availability mask) by stride-2 3x3
// convolutions to the configured output stride, the enhancer runs on the
// bottleneck, and an up-projection decoder with 1x1-reduced skip
// connections produces the coarse depth. A two-block hourglass refinement
// stage corrects the coarse map using the sparse input (no RGB) and adds
// the correction residually.
struct NetworkConfig {
    int output_stride = 8;                   // 8 or 16
    std::vector<int> channels = {16, 32, 64};  // encoder stage widths
    int bottleneck_channels = 32;            // C_enc
    bool skip = true;
    bool spatial = true;
    ChannelVariant channel = ChannelVariant::kProposed;
    FusionVariant fusion = FusionVariant::kProposed;
    bool refinement = true;
    double dropout = 0.0;  // applied after the enhanced bottleneck, train only
    int reduction = 16;    // SE reduction ratio r
    // Depths are divided by this on the way in and multiplied back on the
    // way out; a power of two keeps the round trip exact.
    double depth_scale_mm = 65536.0;
    uint64_t seed = 1;

    bool enhancer_enabled() const { return spatial || channel != ChannelVariant::kOff; }
};

std::string network_config_to_text(const NetworkConfig& cfg);
NetworkConfig network_config_from_text(const std::string& text);  // rejects unknown keys

class KvReader;
NetworkConfig network_config_from_kv(KvReader& kv);  // leaves unrelated keys in place

// Named activations captured during one forward pass.
using ActivationTrace = std::map<std::string, Tensor>;

struct ForwardOptions {
    bool training = false;
    std::mt19937_64* dropout_rng = nullptr;  // required when training with dropout > 0
    ActivationTrace* trace = nullptr;
};

struct ForwardResult {
    Tensor coarse;   // [1,H,W] mm, nonnegative
    Tensor refined;  // == coarse when refinement is disabled
};

class Network {
public:
    explicit Network(NetworkConfig cfg);

    const NetworkConfig& config() const { return cfg_; }

    // bottleneck features plus one skip per intermediate resolution
    // (shallowest first: /2, /4, ... up to OS/2).
    struct EncoderOut {
        Tensor bottleneck;
        std::vector<Tensor> skips;
    };
    EncoderOut encoder_forward(Tape& tape, const Tensor& input5,
                               ActivationTrace* trace = nullptr) const;

    Tensor decoder_forward(Tape& tape, const Tensor& enhanced,
                           const std::vector<Tensor>& skips,
                           ActivationTrace* trace = nullptr) const;  // [1,H,W] normalized

    // coarse/sparse in mm, mask binary; returns refined depth in mm.
    Tensor refine_forward(Tape& tape, const Tensor& coarse_mm, const Tensor& sparse_mm,
                          const Tensor& mask, ActivationTrace* trace = nullptr) const;

    ForwardResult forward(Tape& tape, const DepthSample& sample,
                          const ForwardOptions& opt = {}) const;

    std::vector<std::pair<std::string, Tensor>> parameters() const;
    const Enhancer* enhancer() const { return enhancer_ ? &*enhancer_ : nullptr; }
    Enhancer* enhancer() { return enhancer_ ? &*enhancer_ : nullptr; }

    void save_checkpoint(const std::string& path) const;
    static Network load_checkpoint(const std::string& path);

    // Layer names usable with dump_activations / ForwardOptions::trace.
    std::vector<std::string> layer_names() const;

private:
    struct Conv {
        Tensor w, b;
        int stride = 1;
        int pad = 1;
    };
    Conv make_conv(int cout, int cin, int k, int stride, int pad, const std::string& tag,
                   bool zero_init = false);
    Tensor apply(Tape& tape, const Conv& c, const Tensor& x, bool relu = true) const;

    Tensor refine_residual(Tape& tape, const Tensor& coarse_norm, const Tensor& sparse_norm,
                           const Tensor& mask, ActivationTrace* trace) const;

    NetworkConfig cfg_;
    int stages_ = 0;
    std::vector<Conv> enc_;
    Conv bneck_;
    std::optional<Enhancer> enhancer_;
    std::vector<Conv> skip_reduce_;  // aligned with decoder units that consume a skip
    std::vector<Conv> dec_;
    Conv head_;
    // refinement
    Conv ref_entry_;
    struct Hourglass {
        Conv down, mid, up;
    };
    std::vector<Hourglass> ref_blocks_;
    Conv ref_head_;
};

// Exact trainable scalar count for a configuration.
int64_t count_params(const NetworkConfig& cfg);

// Per-channel grids of the named activation, written as 16-bit PGM files
// (min/max normalized; a .meta.txt records each channel's range). Returns
// the raw per-channel tensors. Unknown layer names raise LookupError.
std::vector<Tensor> dump_activations(const Network& net, const DepthSample& sample,
                                     const std::string& layer, const std::string& out_dir);

}  // namespace depthc
