#include "depthc/serialize.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace depthc {

namespace {

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw ParseError("unexpected end of stream");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw ParseError("unexpected end of stream");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

void put_f64_le(std::ostream& os, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(os, bits);
}

double get_f64_le(std::istream& is) {
    uint64_t bits = get_u64(is);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

void put_f32_le(std::ostream& os, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

float get_f32_le(std::istream& is) {
    uint32_t bits = get_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace

void write_dtsr(std::ostream& os, const Tensor& t, DType dtype) {
    os.write("DTSR", 4);
    const unsigned char version = 1;
    const unsigned char dt = static_cast<unsigned char>(dtype);
    const unsigned char rank = static_cast<unsigned char>(t.rank());
    os.put(static_cast<char>(version));
    os.put(static_cast<char>(dt));
    os.put(static_cast<char>(rank));
    for (int d : t.shape()) put_u32(os, static_cast<uint32_t>(d));
    if (dtype == DType::kF64) {
        for (double v : t.data()) put_f64_le(os, v);
    } else {
        for (double v : t.data()) put_f32_le(os, static_cast<float>(v));
    }
}

Tensor read_dtsr(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "DTSR", 4) != 0) {
        throw ParseError("DTSR: bad magic");
    }
    const int version = is.get();
    if (version != 1) throw ParseError("DTSR: unsupported version " + std::to_string(version));
    const int dt = is.get();
    if (dt != 0 && dt != 1) throw ParseError("DTSR: unknown dtype " + std::to_string(dt));
    const int rank = is.get();
    if (rank < 0) throw ParseError("DTSR: truncated header");
    Shape shape(static_cast<size_t>(rank));
    for (auto& d : shape) {
        d = static_cast<int>(get_u32(is));
        if (d < 1) throw ParseError("DTSR: dimension < 1");
    }
    int64_t n = 1;
    for (int d : shape) n *= d;
    std::vector<double> values(static_cast<size_t>(n));
    if (dt == 0) {
        for (auto& v : values) v = get_f64_le(is);
    } else {
        for (auto& v : values) v = static_cast<double>(get_f32_le(is));
    }
    if (!is) throw ParseError("DTSR: truncated payload");
    return Tensor(std::move(shape), std::move(values));
}

void save_tensor(const std::string& path, const Tensor& t, DType dtype) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    write_dtsr(f, t, dtype);
    if (!f) throw IoError("write failed: " + path);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    try {
        return read_dtsr(f);
    } catch (const ParseError& e) {
        throw ParseError(path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Archive ("DTAR"): magic, u8 version, u32 entry count; per entry
// u32 name length, name bytes, u8 kind, u64 payload size, payload.

void ArchiveWriter::add_tensor(const std::string& name, const Tensor& t, DType dtype) {
    std::ostringstream os(std::ios::binary);
    write_dtsr(os, t, dtype);
    entries_.push_back({name, 0, os.str()});
}

void ArchiveWriter::add_text(const std::string& name, const std::string& text) {
    entries_.push_back({name, 1, text});
}

void ArchiveWriter::write(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write("DTAR", 4);
    f.put(1);
    put_u32(f, static_cast<uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
        put_u32(f, static_cast<uint32_t>(e.name.size()));
        f.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        f.put(static_cast<char>(e.kind));
        put_u64(f, e.payload.size());
        f.write(e.payload.data(), static_cast<std::streamsize>(e.payload.size()));
    }
    if (!f) throw IoError("write failed: " + path);
}

Archive Archive::read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    char magic[4];
    if (!f.read(magic, 4) || std::memcmp(magic, "DTAR", 4) != 0) {
        throw ParseError(path + ": bad archive magic");
    }
    const int version = f.get();
    if (version != 1) throw ParseError(path + ": unsupported archive version");
    const uint32_t count = get_u32(f);
    Archive a;
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = get_u32(f);
        std::string name(name_len, '\0');
        if (!f.read(name.data(), name_len)) throw ParseError(path + ": truncated entry name");
        const int kind = f.get();
        if (kind != 0 && kind != 1) throw ParseError(path + ": unknown entry kind");
        const uint64_t size = get_u64(f);
        std::string payload(static_cast<size_t>(size), '\0');
        if (!f.read(payload.data(), static_cast<std::streamsize>(size))) {
            throw ParseError(path + ": truncated entry payload");
        }
        a.order_.push_back(name);
        a.entries_[name] = {static_cast<uint8_t>(kind), std::move(payload)};
    }
    return a;
}

bool Archive::has(const std::string& name) const { return entries_.count(name) > 0; }

Tensor Archive::tensor(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end() || it->second.kind != 0) {
        throw LookupError("archive has no tensor entry named '" + name + "'");
    }
    std::istringstream is(it->second.payload, std::ios::binary);
    return read_dtsr(is);
}

std::string Archive::text(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end() || it->second.kind != 1) {
        throw LookupError("archive has no text entry named '" + name + "'");
    }
    return it->second.payload;
}

std::vector<std::string> Archive::names() const { return order_; }

}  // namespace depthc
