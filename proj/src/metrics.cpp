#include "depthc/metrics.hpp"

#include <cmath>
#include <sstream>

#include "depthc/config.hpp"

namespace depthc {

void MetricsAccumulator::add(const Tensor& pred, const Tensor& gt) {
    if (pred.shape() != gt.shape()) {
        throw DimensionError("evaluate: shapes differ: " + shape_str(pred.shape()) + " vs " +
                             shape_str(gt.shape()));
    }
    ++samples_;
    const auto& p = pred.data();
    const auto& g = gt.data();
    for (size_t i = 0; i < g.size(); ++i) {
        if (!(g[i] > 0.0)) continue;
        ++valid_;
        const double e = p[i] - g[i];
        sq_sum_ += e * e;
        abs_sum_ += std::abs(e);
        if (p[i] > 0.0) {
            ++inverse_valid_;
            const double ie = 1e6 / p[i] - 1e6 / g[i];
            isq_sum_ += ie * ie;
            iabs_sum_ += std::abs(ie);
        } else {
            ++excluded_;
        }
    }
}

MetricsReport MetricsAccumulator::finalize() const {
    MetricsReport r;
    r.samples = samples_;
    r.valid_pixels = valid_;
    r.excluded_inverse_pixels = excluded_;
    if (valid_ == 0) {
        r.degenerate = true;
        return r;
    }
    r.rmse_mm = std::sqrt(sq_sum_ / static_cast<double>(valid_));
    r.mae_mm = abs_sum_ / static_cast<double>(valid_);
    if (inverse_valid_ > 0) {
        r.irmse_1perkm = std::sqrt(isq_sum_ / static_cast<double>(inverse_valid_));
        r.imae_1perkm = iabs_sum_ / static_cast<double>(inverse_valid_);
    }
    return r;
}

MetricsReport evaluate(const Tensor& pred, const Tensor& gt) {
    MetricsAccumulator acc;
    acc.add(pred, gt);
    return acc.finalize();
}

static const char* kHeader =
    "samples,valid_pixels,rmse_mm,mae_mm,irmse_1perkm,imae_1perkm,excluded_inverse_pixels";

std::string metrics_csv(const MetricsReport& r) {
    std::ostringstream os;
    os << kHeader << "\n";
    os << r.samples << "," << r.valid_pixels << "," << format_double(r.rmse_mm) << ","
       << format_double(r.mae_mm) << "," << format_double(r.irmse_1perkm) << ","
       << format_double(r.imae_1perkm) << "," << r.excluded_inverse_pixels << "\n";
    return os.str();
}

MetricsReport metrics_from_csv(const std::string& csv) {
    std::istringstream is(csv);
    std::string header, row;
    if (!std::getline(is, header) || header != kHeader) {
        throw ParseError("metrics CSV: unexpected header '" + header + "'");
    }
    if (!std::getline(is, row)) throw ParseError("metrics CSV: missing data row");
    std::istringstream rs(row);
    std::string f[7];
    for (int i = 0; i < 7; ++i) {
        if (!std::getline(rs, f[i], ',')) throw ParseError("metrics CSV: expected 7 fields");
    }
    MetricsReport r;
    try {
        r.samples = std::stoll(f[0]);
        r.valid_pixels = std::stoll(f[1]);
        r.rmse_mm = std::stod(f[2]);
        r.mae_mm = std::stod(f[3]);
        r.irmse_1perkm = std::stod(f[4]);
        r.imae_1perkm = std::stod(f[5]);
        r.excluded_inverse_pixels = std::stoll(f[6]);
    } catch (const std::exception&) {
        throw ParseError("metrics CSV: malformed numeric field");
    }
    r.degenerate = r.valid_pixels == 0;
    return r;
}

}  // namespace depthc
