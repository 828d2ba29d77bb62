#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "depthc/tensor.hpp"

namespace depthc {

// DTSR v1 tensor file:
//   magic "DTSR", u8 version=1, u8 dtype (0=f64, 1=f32), u8 rank,
//   rank x u32 little-endian dims, row-major payload little-endian.
// Round-trips are bit-exact for the stored dtype.
enum class DType : uint8_t { kF64 = 0, kF32 = 1 };

void write_dtsr(std::ostream& os, const Tensor& t, DType dtype = DType::kF64);
Tensor read_dtsr(std::istream& is);

void save_tensor(const std::string& path, const Tensor& t, DType dtype = DType::kF64);
Tensor load_tensor(const std::string& path);

// Flat archive of named entries (DTSR tensor blobs and text records), used
// for enhancer parameter sets and network checkpoints. Entry order is
// preserved, so writes are byte-deterministic.
class ArchiveWriter {
public:
    void add_tensor(const std::string& name, const Tensor& t, DType dtype = DType::kF64);
    void add_text(const std::string& name, const std::string& text);
    void write(const std::string& path) const;

private:
    struct Entry {
        std::string name;
        uint8_t kind;  // 0 = tensor, 1 = text
        std::string payload;
    };
    std::vector<Entry> entries_;
};

class Archive {
public:
    static Archive read(const std::string& path);

    bool has(const std::string& name) const;
    Tensor tensor(const std::string& name) const;      // LookupError if absent
    std::string text(const std::string& name) const;   // LookupError if absent
    std::vector<std::string> names() const;

private:
    struct Entry {
        uint8_t kind;
        std::string payload;
    };
    std::map<std::string, Entry> entries_;
    std::vector<std::string> order_;
};

}  // namespace depthc
