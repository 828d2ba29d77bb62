#include "depthc/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "depthc/pgm.hpp"
#include "depthc/rng.hpp"
#include "depthc/serialize.hpp"

namespace fs = std::filesystem;

namespace depthc {

SparsifyPattern sparsify_pattern_from_string(const std::string& s) {
    if (s == "uniform") return SparsifyPattern::kUniform;
    if (s == "scanline") return SparsifyPattern::kScanline;
    throw ConfigError("unknown sparsify pattern '" + s + "'");
}

std::string to_string(SparsifyPattern p) {
    return p == SparsifyPattern::kUniform ? "uniform" : "scanline";
}

namespace {

void validate_scene_cfg(const SceneConfig& cfg) {
    if (cfg.height < 16 || cfg.width < 16 || cfg.height % 16 != 0 || cfg.width % 16 != 0) {
        throw ConfigError("scene: height and width must be positive multiples of 16, got " +
                          std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
    }
    if (!(cfg.d_min_mm > 0.0) || !(cfg.d_max_mm > cfg.d_min_mm)) {
        throw ConfigError("scene: need 0 < d_min < d_max");
    }
    if (cfg.primitives < 0) throw ConfigError("scene: primitive count must be >= 0");
}

double shade_for_depth(double d, const SceneConfig& cfg) {
    const double t = std::clamp((d - cfg.d_min_mm) / (cfg.d_max_mm - cfg.d_min_mm), 0.0, 1.0);
    return 1.0 - 0.55 * t;
}

}  // namespace

Scene gen_scene(const SceneConfig& cfg) {
    validate_scene_cfg(cfg);
    const int h = cfg.height, w = cfg.width;
    std::mt19937_64 rng(cfg.seed);

    // ground plane: near at the bottom row, far at the top row
    const double ground_color[3] = {rng_range(rng, 0.25, 0.6), rng_range(rng, 0.25, 0.6),
                                    rng_range(rng, 0.25, 0.6)};

    std::vector<RectPrimitive> rects;
    rects.reserve(static_cast<size_t>(cfg.primitives));
    for (int i = 0; i < cfg.primitives; ++i) {
        RectPrimitive r{};
        const int rw = 2 + static_cast<int>(rng_unit(rng) * (w / 2));
        const int rh = 2 + static_cast<int>(rng_unit(rng) * (h / 2));
        r.x0 = static_cast<int>(rng_unit(rng) * (w - rw));
        r.y0 = static_cast<int>(rng_unit(rng) * (h - rh));
        r.x1 = std::min(w - 1, r.x0 + rw);
        r.y1 = std::min(h - 1, r.y0 + rh);
        // log-uniform in the near-to-mid field, like street-scene objects
        const double lo = cfg.d_min_mm * 1.05;
        const double hi = cfg.d_max_mm * 0.5;
        const double base = lo * std::pow(hi / lo, rng_unit(rng));
        if (rng_unit(rng) < 0.5) {
            r.depth_top_mm = r.depth_bottom_mm = base;  // fronto-parallel
        } else {
            const double slope = rng_range(rng, -0.15, 0.15) * base;
            r.depth_top_mm = std::max(cfg.d_min_mm, base + slope);
            r.depth_bottom_mm = std::max(cfg.d_min_mm, base - slope);
        }
        for (double& ch : r.color) ch = rng_range(rng, 0.15, 0.95);
        rects.push_back(r);
    }

    std::vector<double> gt(static_cast<size_t>(h) * w);
    std::vector<double> rgb(3 * static_cast<size_t>(h) * w);
    const double ratio = cfg.d_max_mm / cfg.d_min_mm;
    for (int y = 0; y < h; ++y) {
        const double ty = h > 1 ? static_cast<double>(y) / (h - 1) : 0.0;
        // perspective-style ramp: gentle near the bottom, steep at the horizon
        const double ground_d = cfg.d_min_mm * std::pow(ratio, 1.0 - ty);
        for (int x = 0; x < w; ++x) {
            double d = ground_d;
            const double* color = ground_color;
            for (const auto& r : rects) {
                if (x < r.x0 || x > r.x1 || y < r.y0 || y > r.y1) continue;
                const double tr = r.y1 > r.y0
                                      ? static_cast<double>(y - r.y0) / (r.y1 - r.y0)
                                      : 0.0;
                const double rd = r.depth_top_mm + (r.depth_bottom_mm - r.depth_top_mm) * tr;
                if (rd < d) {  // nearest depth wins
                    d = rd;
                    color = r.color;
                }
            }
            gt[static_cast<size_t>(y) * w + x] = d;
            const double s = shade_for_depth(d, cfg);
            for (int ch = 0; ch < 3; ++ch) {
                rgb[(static_cast<size_t>(ch) * h + y) * w + x] =
                    std::clamp(color[ch] * s, 0.0, 1.0);
            }
        }
    }

    // emulate semi-dense annotations: no labels in the top 12.5% of rows
    const int unlabeled_rows = h / 8;
    for (int y = 0; y < unlabeled_rows; ++y) {
        for (int x = 0; x < w; ++x) gt[static_cast<size_t>(y) * w + x] = 0.0;
    }

    Scene scene;
    scene.rgb = Tensor({3, h, w}, std::move(rgb));
    scene.gt = Tensor({1, h, w}, std::move(gt));
    scene.rects = std::move(rects);
    return scene;
}

Sparsified sparsify(const Tensor& gt, const SparsifyConfig& cfg) {
    if (!(cfg.keep_rate > 0.0) || cfg.keep_rate > 1.0) {
        throw ConfigError("sparsify: keep_rate must lie in (0,1], got " +
                          std::to_string(cfg.keep_rate));
    }
    if (gt.rank() != 3 || gt.dim(0) != 1) {
        throw DimensionError("sparsify: expected [1,H,W] ground truth, got " +
                             shape_str(gt.shape()));
    }
    const int h = gt.dim(1), w = gt.dim(2);
    std::mt19937_64 rng(cfg.seed);
    std::vector<double> sparse(gt.data().size(), 0.0);
    std::vector<double> mask(gt.data().size(), 0.0);
    const int64_t k =
        cfg.pattern == SparsifyPattern::kScanline
            ? std::max<int64_t>(1, std::llround(1.0 / cfg.keep_rate))
            : 1;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const size_t i = static_cast<size_t>(y) * w + x;
            const double d = gt.data()[i];
            if (d <= 0.0) continue;  // unlabeled pixels are never selected
            bool keep = false;
            if (cfg.pattern == SparsifyPattern::kUniform) {
                keep = rng_unit(rng) < cfg.keep_rate;
            } else {
                keep = (y % k) == 0;
            }
            if (keep) {
                sparse[i] = d;
                mask[i] = 1.0;
            }
        }
    }
    return {Tensor({1, h, w}, std::move(sparse)), Tensor({1, h, w}, std::move(mask))};
}

DepthSample make_sample(const SceneConfig& scene_cfg, const SparsifyConfig& sp_cfg) {
    Scene scene = gen_scene(scene_cfg);
    Sparsified sp = sparsify(scene.gt, sp_cfg);
    return {scene.rgb, sp.sparse, sp.mask, scene.gt};
}

std::string make_dataset(int n, const SceneConfig& scene_cfg, const SparsifyConfig& sp_cfg,
                         const std::string& out_dir) {
    if (n < 1) throw ConfigError("make_dataset: need n >= 1");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create directory " + out_dir + ": " + ec.message());

    std::ostringstream manifest;
    for (int i = 0; i < n; ++i) {
        SceneConfig sc = scene_cfg;
        sc.seed = scene_cfg.seed + static_cast<uint64_t>(i);
        SparsifyConfig sp = sp_cfg;
        sp.seed = sp_cfg.seed + static_cast<uint64_t>(i);
        DepthSample sample = make_sample(sc, sp);

        char base[32];
        std::snprintf(base, sizeof(base), "sample_%04d", i);
        const std::string rgb_rel = std::string(base) + ".rgb.dtsr";
        const std::string sparse_rel = std::string(base) + ".sparse.pgm";
        const std::string gt_rel = std::string(base) + ".gt.pgm";
        save_tensor((fs::path(out_dir) / rgb_rel).string(), sample.rgb);
        write_depth_pgm((fs::path(out_dir) / sparse_rel).string(), sample.sparse);
        write_depth_pgm((fs::path(out_dir) / gt_rel).string(), sample.gt);
        manifest << i << "\t" << rgb_rel << "\t" << sparse_rel << "\t" << gt_rel << "\t"
                 << sc.seed << "\n";
    }

    const std::string manifest_path = (fs::path(out_dir) / "manifest.tsv").string();
    std::ofstream f(manifest_path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + manifest_path);
    f << manifest.str();
    if (!f) throw IoError("write failed: " + manifest_path);
    return manifest_path;
}

std::vector<DepthSample> load_dataset(const std::string& manifest_path) {
    std::ifstream f(manifest_path);
    if (!f) throw IoError("cannot open for reading: " + manifest_path);
    const fs::path dir = fs::path(manifest_path).parent_path();

    std::vector<DepthSample> samples;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string idx, rgb_rel, sparse_rel, gt_rel, seed;
        if (!std::getline(ls, idx, '\t') || !std::getline(ls, rgb_rel, '\t') ||
            !std::getline(ls, sparse_rel, '\t') || !std::getline(ls, gt_rel, '\t') ||
            !std::getline(ls, seed, '\t')) {
            throw ParseError(manifest_path + ":" + std::to_string(lineno) +
                             ": expected 5 tab-separated fields");
        }
        DepthSample s;
        s.rgb = load_tensor((dir / rgb_rel).string());
        s.sparse = read_depth_pgm((dir / sparse_rel).string());
        s.gt = read_depth_pgm((dir / gt_rel).string());
        if (s.rgb.rank() != 3 || s.rgb.dim(0) != 3 || s.sparse.shape() != s.gt.shape() ||
            s.rgb.dim(1) != s.sparse.dim(1) || s.rgb.dim(2) != s.sparse.dim(2)) {
            throw ParseError(manifest_path + ":" + std::to_string(lineno) +
                             ": inconsistent tensor shapes");
        }
        std::vector<double> mask(s.sparse.data().size());
        for (size_t i = 0; i < mask.size(); ++i) {
            const double d = s.sparse.data()[i];
            mask[i] = d > 0.0 ? 1.0 : 0.0;
            if (d > 0.0 && d != s.gt.data()[i]) {
                throw ParseError(manifest_path + ":" + std::to_string(lineno) +
                                 ": sparse depth disagrees with ground truth");
            }
        }
        s.mask = Tensor(s.sparse.shape(), std::move(mask));
        samples.push_back(std::move(s));
    }
    if (samples.empty()) throw ParseError(manifest_path + ": empty manifest");
    return samples;
}

}  // namespace depthc
