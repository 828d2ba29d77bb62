#include "depthc/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "depthc/errors.hpp"

namespace depthc {

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        size_t a = line.find_first_not_of(" \t");
        if (a == std::string::npos) continue;
        size_t b = line.find_last_not_of(" \t");
        line = line.substr(a, b - a + 1);
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ParseError("line " + std::to_string(lineno) + ": expected key=value, got '" +
                             line + "'");
        }
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
        while (!value.empty() && (value.front() == ' ' || value.front() == '\t')) {
            value.erase(value.begin());
        }
        if (kv.count(key)) {
            throw ParseError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
        }
        kv[key] = value;
    }
    return kv;
}

std::map<std::string, std::string> parse_kv_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open for reading: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    try {
        return parse_kv_text(ss.str());
    } catch (const ParseError& e) {
        throw ParseError(path + ": " + e.what());
    }
}

bool KvReader::pop(const std::string& key, std::string& out) {
    auto it = kv_.find(key);
    if (it == kv_.end()) return false;
    out = it->second;
    kv_.erase(it);
    return true;
}

bool KvReader::take_bool(const std::string& key, bool fallback) {
    std::string v;
    if (!pop(key, v)) return fallback;
    if (v == "1" || v == "true" || v == "on") return true;
    if (v == "0" || v == "false" || v == "off") return false;
    throw ParseError("key '" + key + "': expected a boolean, got '" + v + "'");
}

int KvReader::take_int(const std::string& key, int fallback) {
    std::string v;
    if (!pop(key, v)) return fallback;
    try {
        size_t used = 0;
        int r = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ParseError("key '" + key + "': expected an integer, got '" + v + "'");
    }
}

uint64_t KvReader::take_u64(const std::string& key, uint64_t fallback) {
    std::string v;
    if (!pop(key, v)) return fallback;
    try {
        size_t used = 0;
        unsigned long long r = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return static_cast<uint64_t>(r);
    } catch (const std::exception&) {
        throw ParseError("key '" + key + "': expected an unsigned integer, got '" + v + "'");
    }
}

double KvReader::take_double(const std::string& key, double fallback) {
    std::string v;
    if (!pop(key, v)) return fallback;
    try {
        size_t used = 0;
        double r = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ParseError("key '" + key + "': expected a number, got '" + v + "'");
    }
}

std::string KvReader::take_string(const std::string& key, const std::string& fallback) {
    std::string v;
    return pop(key, v) ? v : fallback;
}

std::vector<int> KvReader::take_int_list(const std::string& key, std::vector<int> fallback) {
    std::string v;
    if (!pop(key, v)) return fallback;
    std::vector<int> out;
    std::istringstream is(v);
    std::string item;
    while (std::getline(is, item, ',')) {
        try {
            size_t used = 0;
            out.push_back(std::stoi(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ParseError("key '" + key + "': expected a comma-separated integer list, got '" +
                             v + "'");
        }
    }
    if (out.empty()) {
        throw ParseError("key '" + key + "': empty list");
    }
    return out;
}

std::vector<std::string> KvReader::remaining_keys() const {
    std::vector<std::string> keys;
    for (const auto& [k, v] : kv_) keys.push_back(k);
    return keys;
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    // prefer the short form when it round-trips
    for (int prec = 1; prec <= 16; ++prec) {
        char t[40];
        std::snprintf(t, sizeof(t), "%.*g", prec, v);
        if (std::stod(t) == v) return t;
    }
    return buf;
}

}  // namespace depthc
