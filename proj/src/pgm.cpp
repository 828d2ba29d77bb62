#include "depthc/pgm.hpp"

#include <cctype>
#include <cmath>
#include <fstream>

namespace depthc {

void write_pgm16(const std::string& path, int width, int height,
                 const std::vector<uint16_t>& pixels) {
    if (static_cast<size_t>(width) * static_cast<size_t>(height) != pixels.size()) {
        throw DimensionError("write_pgm16: pixel count does not match " + std::to_string(width) +
                             "x" + std::to_string(height));
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << "P5\n" << width << " " << height << "\n65535\n";
    for (uint16_t p : pixels) {
        f.put(static_cast<char>((p >> 8) & 0xff));  // MSB first
        f.put(static_cast<char>(p & 0xff));
    }
    if (!f) throw IoError("write failed: " + path);
}

namespace {

// Next header token, skipping whitespace and '#' comment lines.
std::string next_token(std::istream& is) {
    std::string tok;
    int c = is.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = is.get();
        } else if (std::isspace(c)) {
            c = is.get();
        } else {
            break;
        }
    }
    while (c != EOF && !std::isspace(c)) {
        tok.push_back(static_cast<char>(c));
        c = is.get();
    }
    return tok;
}

int parse_dim(const std::string& tok, const std::string& path, const char* what) {
    if (tok.empty()) throw ParseError(path + ": missing " + what);
    for (char c : tok) {
        if (!std::isdigit(static_cast<unsigned char>(c))) {
            throw ParseError(path + ": malformed " + what + " '" + tok + "'");
        }
    }
    long v = std::stol(tok);
    if (v < 1) throw ParseError(path + ": " + what + " must be >= 1");
    return static_cast<int>(v);
}

}  // namespace

std::vector<uint16_t> read_pgm16(const std::string& path, int& width, int& height) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    std::string magic = next_token(f);
    if (magic != "P5") throw ParseError(path + ": not a binary PGM (magic '" + magic + "')");
    width = parse_dim(next_token(f), path, "width");
    height = parse_dim(next_token(f), path, "height");
    const std::string maxval = next_token(f);
    if (maxval != "65535") {
        throw ParseError(path + ": expected 16-bit PGM (maxval 65535), got '" + maxval + "'");
    }
    // exactly one whitespace byte separates header and payload; next_token
    // already consumed it
    std::vector<uint16_t> pixels(static_cast<size_t>(width) * static_cast<size_t>(height));
    for (auto& p : pixels) {
        const int hi = f.get();
        const int lo = f.get();
        if (hi == EOF || lo == EOF) throw ParseError(path + ": truncated pixel data");
        p = static_cast<uint16_t>((hi << 8) | lo);
    }
    return pixels;
}

void write_depth_pgm(const std::string& path, const Tensor& depth_mm) {
    if (depth_mm.rank() != 3 || depth_mm.dim(0) != 1) {
        throw DimensionError("write_depth_pgm: expected [1,H,W], got " +
                             shape_str(depth_mm.shape()));
    }
    const int h = depth_mm.dim(1), w = depth_mm.dim(2);
    std::vector<uint16_t> pixels(static_cast<size_t>(h) * w);
    const auto& d = depth_mm.data();
    for (size_t i = 0; i < pixels.size(); ++i) {
        const double v = d[i];
        if (!std::isfinite(v) || v < 0.0 || v >= 256000.0) {
            throw RangeError("write_depth_pgm: depth " + std::to_string(v) +
                             " mm outside [0, 256000)");
        }
        pixels[i] = static_cast<uint16_t>(std::llround(v / kDepthPgmStepMm));
    }
    write_pgm16(path, w, h, pixels);
}

Tensor read_depth_pgm(const std::string& path) {
    int w = 0, h = 0;
    const auto pixels = read_pgm16(path, w, h);
    std::vector<double> d(pixels.size());
    for (size_t i = 0; i < pixels.size(); ++i) d[i] = pixels[i] * kDepthPgmStepMm;
    return Tensor({1, h, w}, std::move(d));
}

}  // namespace depthc
