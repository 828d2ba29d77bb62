#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "depthc/tensor.hpp"

namespace depthc {

// Raw 16-bit binary PGM (P5, maxval 65535, big-endian samples).
void write_pgm16(const std::string& path, int width, int height,
                 const std::vector<uint16_t>& pixels);
std::vector<uint16_t> read_pgm16(const std::string& path, int& width, int& height);

// Depth convention: pixel = round(depth_mm / 4), so 65535 covers ~262 m and
// 0 stays "missing". Depth must lie in [0, 256000) mm.
void write_depth_pgm(const std::string& path, const Tensor& depth_mm);  // [1,H,W]
Tensor read_depth_pgm(const std::string& path);                         // -> [1,H,W] mm

constexpr double kDepthPgmStepMm = 4.0;

}  // namespace depthc
