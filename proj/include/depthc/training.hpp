#pragma once

#include <functional>
#include <string>
#include <vector>

#include "depthc/network.hpp"
#include "depthc/synth.hpp"
#include "depthc/tensor.hpp"

namespace depthc {

// ---------------------------------------------------------------------------
// Objective

struct LossConfig {
    double alpha = 0.3;  // coarse term weight
    double beta = 0.7;   // refined term weight
};

struct MaskedMse {
    Tensor value;  // scalar on the tape
    int64_t valid_pixels = 0;
    bool degenerate = false;  // no gt > 0 pixels; value is a constant 0
};

// Mean over gt > 0 pixels of (pred - gt)^2. Pixels without labels never
// influence the value or the gradient.
MaskedMse masked_mse(Tape& tape, const Tensor& pred, const Tensor& gt);

struct DepthLoss {
    Tensor total;  // alpha * coarse_mse + beta * refined_mse
    double coarse_mse = 0.0;
    double refined_mse = 0.0;
    bool degenerate = false;
};

DepthLoss depth_loss(Tape& tape, const Tensor& coarse, const Tensor& refined, const Tensor& gt,
                     const LossConfig& cfg);

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam(std::vector<std::pair<std::string, Tensor>> params, AdamConfig cfg);

    // grads must be aligned with the parameter list. NaN gradients raise
    // NumericError naming the parameter.
    void step(const std::vector<std::vector<double>>& grads);

    const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
    int64_t steps_taken() const { return t_; }

private:
    std::vector<std::pair<std::string, Tensor>> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    int64_t t_ = 0;
};

// Mean-of-samples gradient accumulation for one batch.
class GradAccumulator {
public:
    explicit GradAccumulator(const std::vector<std::pair<std::string, Tensor>>& params);
    void add(const GradientStore& store);
    void finish_mean(int sample_count);
    const std::vector<std::vector<double>>& buffers() const { return bufs_; }
    void reset();

private:
    const std::vector<std::pair<std::string, Tensor>>* params_;
    std::vector<std::vector<double>> bufs_;
};

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckGroup {
    std::string name;
    double max_rel_err = 0.0;
    int64_t entries = 0;  // entries compared (sampled for large groups)
};

struct GradCheckReport {
    std::string unit;
    double threshold = 0.0;
    double eps = 0.0;
    bool pass = false;
    std::vector<GradCheckGroup> groups;
};

using LossBuilder = std::function<Tensor(Tape&)>;

// Central finite differences against tape gradients. Relative error is
// |g_ad - g_fd| / max(1, |g_fd|). max_entries_per_group == 0 checks every
// entry; larger groups are subsampled deterministically.
GradCheckReport finite_diff_check(const std::string& unit,
                                  const std::vector<std::pair<std::string, Tensor>>& groups,
                                  const LossBuilder& build, double threshold, double eps = 1e-5,
                                  int max_entries_per_group = 0, uint64_t seed = 17);

std::vector<std::string> gradcheck_units();
GradCheckReport gradcheck_unit(const std::string& unit);  // LookupError if unknown
std::vector<GradCheckReport> gradcheck_all();
std::string gradcheck_summary(const std::vector<GradCheckReport>& reports);

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
    double lr = 0.001;
    int batch_size = 16;  // desk-scale runs use 2-4
    int steps = 100;
    uint64_t seed = 1;
    int threads = 1;  // per-sample forward/backward parallelism within a batch
};

struct TrainLogRow {
    int step;
    double loss, coarse_mse, refined_mse;
};

// Minibatch Adam on depth_loss. Deterministic per seed: shuffle order,
// dropout draws and gradient reduction order are all fixed.
Network train(const std::vector<DepthSample>& data, const NetworkConfig& ncfg,
              const TrainConfig& tcfg, const LossConfig& lcfg,
              std::vector<TrainLogRow>* log_out = nullptr);

std::string train_log_csv(const std::vector<TrainLogRow>& rows);

}  // namespace depthc
