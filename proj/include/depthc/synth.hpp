#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "depthc/tensor.hpp"

namespace depthc {

// One training/eval example. Depths are millimeters; 0 means missing
// (sparse) or unlabeled (gt). mask[p] = 1 exactly where sparse[p] > 0, and
// every sparse[p] > 0 equals gt[p].
struct DepthSample {
    Tensor rgb;     // [3,H,W] in [0,1]
    Tensor sparse;  // [1,H,W] mm
    Tensor mask;    // [1,H,W] binary
    Tensor gt;      // [1,H,W] mm
};

struct SceneConfig {
    int height = 32;
    int width = 32;
    double d_min_mm = 2000.0;
    double d_max_mm = 80000.0;
    int primitives = 6;
    uint64_t seed = 1;
};

// Axis-aligned box floating in front of the ground plane; depth varies
// linearly from its top row to its bottom row (equal values = fronto-
// parallel).
struct RectPrimitive {
    int x0, x1, y0, y1;  // inclusive bounds
    double depth_top_mm, depth_bottom_mm;
    double color[3];
};

struct Scene {
    Tensor rgb;  // [3,H,W]
    Tensor gt;   // [1,H,W]; top 12.5% of rows left unlabeled (0)
    std::vector<RectPrimitive> rects;
};

// Deterministic per seed: a ground plane whose depth grows toward the top
// rows, plus overlapping rectangles composited by nearest depth. RGB is
// flat per-primitive color with depth-correlated shading so image edges
// carry the depth boundaries.
Scene gen_scene(const SceneConfig& cfg);

enum class SparsifyPattern { kUniform, kScanline };
SparsifyPattern sparsify_pattern_from_string(const std::string& s);
std::string to_string(SparsifyPattern p);

struct SparsifyConfig {
    double keep_rate = 0.05;  // (0, 1]
    SparsifyPattern pattern = SparsifyPattern::kUniform;
    uint64_t seed = 1;
};

// uniform: Bernoulli(keep_rate) per labeled pixel; scanline: every k-th row
// kept entirely, k = round(1/keep_rate). Unlabeled pixels are never kept.
struct Sparsified {
    Tensor sparse;  // [1,H,W]
    Tensor mask;    // [1,H,W]
};
Sparsified sparsify(const Tensor& gt, const SparsifyConfig& cfg);

DepthSample make_sample(const SceneConfig& scene_cfg, const SparsifyConfig& sp_cfg);

// Writes n samples (gt/sparse as depth PGM, rgb as DTSR) plus a manifest of
// tab-separated lines: index, rgb path, sparse path, gt path, seed.
// Per-sample scene seed is scene_cfg.seed + index. Returns the manifest path.
std::string make_dataset(int n, const SceneConfig& scene_cfg, const SparsifyConfig& sp_cfg,
                         const std::string& out_dir);

std::vector<DepthSample> load_dataset(const std::string& manifest_path);

}  // namespace depthc
