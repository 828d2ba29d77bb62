#pragma once

#include <cstdint>
#include <string>

#include "depthc/tensor.hpp"

namespace depthc {

// KITTI-style depth completion metrics. Direct errors are in millimeters
// over gt > 0 pixels; inverse-depth errors use i(d) = 1e6 / d_mm (1/km) over
// pixels where both gt and pred are positive. Predictions of exactly 0
// under a valid label are excluded from the inverse metrics and counted.
struct MetricsReport {
    int64_t samples = 0;
    int64_t valid_pixels = 0;  // gt > 0
    double rmse_mm = 0.0;
    double mae_mm = 0.0;
    double irmse_1perkm = 0.0;
    double imae_1perkm = 0.0;
    int64_t excluded_inverse_pixels = 0;
    bool degenerate = false;  // no valid pixels at all

    bool operator==(const MetricsReport&) const = default;
};

// Pixel-pooled aggregation: squared/absolute errors are summed over all
// valid pixels of all samples before the means are taken.
class MetricsAccumulator {
public:
    void add(const Tensor& pred, const Tensor& gt);  // both [1,H,W]
    MetricsReport finalize() const;

private:
    int64_t samples_ = 0;
    int64_t valid_ = 0;
    int64_t inverse_valid_ = 0;
    int64_t excluded_ = 0;
    double sq_sum_ = 0.0, abs_sum_ = 0.0;
    double isq_sum_ = 0.0, iabs_sum_ = 0.0;
};

MetricsReport evaluate(const Tensor& pred, const Tensor& gt);

// Header: samples,valid_pixels,rmse_mm,mae_mm,irmse_1perkm,imae_1perkm,
// excluded_inverse_pixels. Values round-trip exactly.
std::string metrics_csv(const MetricsReport& report);
MetricsReport metrics_from_csv(const std::string& csv);

}  // namespace depthc
