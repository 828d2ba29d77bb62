#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace depthc {

// "key=value" lines; '#' starts a comment, blank lines are skipped.
// Duplicate keys are a ParseError.
std::map<std::string, std::string> parse_kv_text(const std::string& text);
std::map<std::string, std::string> parse_kv_file(const std::string& path);

// Typed lookups; each erases the consumed key so callers can reject
// leftovers. Returns fallback when the key is absent.
class KvReader {
public:
    explicit KvReader(std::map<std::string, std::string> kv) : kv_(std::move(kv)) {}

    bool take_bool(const std::string& key, bool fallback);
    int take_int(const std::string& key, int fallback);
    uint64_t take_u64(const std::string& key, uint64_t fallback);
    double take_double(const std::string& key, double fallback);
    std::string take_string(const std::string& key, const std::string& fallback);
    std::vector<int> take_int_list(const std::string& key, std::vector<int> fallback);

    bool empty() const { return kv_.empty(); }
    std::vector<std::string> remaining_keys() const;

private:
    bool pop(const std::string& key, std::string& out);
    std::map<std::string, std::string> kv_;
};

std::string format_double(double v);  // shortest round-trip formatting

}  // namespace depthc
