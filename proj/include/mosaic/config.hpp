#pragma once

// Flat key = value configuration text. '#' starts a comment; later keys
// override earlier ones.

#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mosaic/msgt.hpp"
#include "mosaic/tensor.hpp"

namespace mosaic {

class KeyValues {
public:
    KeyValues() = default;

    static KeyValues parse(const std::string& text) {
        KeyValues kv;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(lineno) + " is not key = value: " + line);
            const std::string key = trim(line.substr(0, eq));
            if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + " has an empty key");
            kv.set(key, trim(line.substr(eq + 1)));
        }
        return kv;
    }

    static KeyValues load(const std::filesystem::path& path) { return parse(io::read_file(path)); }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    bool has(const std::string& key) const { return values_.count(key) != 0; }
    const std::map<std::string, std::string>& values() const { return values_; }

    // Keys present in `other` replace ours.
    void merge(const KeyValues& other) {
        for (const auto& [k, v] : other.values_) values_[k] = v;
    }

    std::string str(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    std::size_t size_value(const std::string& key, std::size_t fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t pos = 0;
            const long long v = std::stoll(it->second, &pos);
            if (pos != it->second.size() || v < 0) throw std::invalid_argument("");
            return static_cast<std::size_t>(v);
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + it->second + "'");
        }
    }

    double real(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t pos = 0;
            const double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' expects a number, got '" + it->second + "'");
        }
    }

    bool flag(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (it->second == "1" || it->second == "true" || it->second == "yes") return true;
        if (it->second == "0" || it->second == "false" || it->second == "no") return false;
        throw ConfigError("config key '" + key + "' expects true/false, got '" + it->second + "'");
    }

    std::string text() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
        return out;
    }

    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

private:
    std::map<std::string, std::string> values_;
};

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) out.push_back(KeyValues::trim(cur));
    return out;
}

// Stable 64-bit FNV-1a, used to derive per-name and per-member seeds.
inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 1469598103934665603ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace mosaic
