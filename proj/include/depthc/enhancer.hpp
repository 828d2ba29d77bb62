#pragma once

#include <string>
#include <utility>
#include <vector>

#include "depthc/tensor.hpp"

namespace depthc {

enum class ChannelVariant { kProposed, kMeanOnly, kVarianceOnly, kOff };
enum class FusionVariant { kProposed, kConcat };

std::string to_string(ChannelVariant v);
std::string to_string(FusionVariant v);
ChannelVariant channel_variant_from_string(const std::string& s);
FusionVariant fusion_variant_from_string(const std::string& s);

struct EnhancerConfig {
    int channels = 32;   // C, must be divisible by 8 when spatial is on
    int reduction = 16;  // r
    bool spatial = true;
    ChannelVariant channel = ChannelVariant::kProposed;
    FusionVariant fusion = FusionVariant::kProposed;
};

// Dual-branch feature enhancer.
//
// Spatial branch: position j attends over all positions i with
// softmax(K_i . Q_j) weights, where Q and K come from bias-free 1x1
// convolutions compressing C to C/8; the value map is the input itself, so
// no channel information is lost. Channel branch: a squeeze-and-excitation
// bottleneck driven by per-channel mean and variance descriptors. The two
// enhanced maps are folded back with trainable scalars:
//     out = lambda * spatial + gamma * channel + input
// Both scalars start at zero, so a fresh enhancer is an identity mapping.
class Enhancer {
public:
    Enhancer(EnhancerConfig cfg, uint64_t seed);

    const EnhancerConfig& config() const { return cfg_; }

    // Returns (enhanced [C,H,W], attention map [N,N] with N = H*W).
    std::pair<Tensor, Tensor> spatial_attention(Tape& tape, const Tensor& a) const;

    // Per-channel [mean .. | var ..] descriptor of length 2C.
    static Tensor squeeze(Tape& tape, const Tensor& a);

    // Two bias-free dense layers with ReLU/Sigmoid; z length must match the
    // configured descriptor width.
    Tensor excite(Tape& tape, const Tensor& z) const;

    // Variant-aware descriptor + excitation: the weight vector s in (0,1)^C.
    Tensor channel_weights(Tape& tape, const Tensor& a) const;

    static Tensor channel_rescale(Tape& tape, const Tensor& a, const Tensor& s);

    // lambda*E + gamma*X + A. Branches that are disabled in the config are
    // skipped; pass undefined tensors for them.
    Tensor fuse(Tape& tape, const Tensor& e, const Tensor& x, const Tensor& a) const;

    // Concat fusion ablation: 1x1 projection of [E ; X] back to C channels.
    Tensor fuse_concat(Tape& tape, const Tensor& e, const Tensor& x) const;

    // Full forward pass. When attention_out is non-null and the spatial
    // branch is active, receives the [N,N] attention map.
    Tensor forward(Tape& tape, const Tensor& a, Tensor* attention_out = nullptr) const;

    std::vector<std::pair<std::string, Tensor>> parameters() const;
    int64_t param_count() const;

    // Closed-form trainable scalar count for a configuration.
    static int64_t param_count_for(const EnhancerConfig& cfg);

    void save(const std::string& path) const;
    static Enhancer load(const std::string& path);

    // Test hooks: the fusion scalars.
    Tensor lambda_param() const { return lambda_; }
    Tensor gamma_param() const { return gamma_; }

private:
    int descriptor_width() const;

    EnhancerConfig cfg_;
    Tensor wq_, wk_;          // [C/8, C, 1, 1]
    Tensor w1_, w2_;          // dense [hidden, desc] and [C, hidden]
    Tensor lambda_, gamma_;   // [1]
    Tensor fuse_proj_;        // [C, 2C, 1, 1] for concat fusion
};

}  // namespace depthc
