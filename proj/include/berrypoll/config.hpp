#pragma once

// Plain-text key/value configuration: one `key = value` per line, '#' starts
// a comment, blank lines ignored. Keys are case-sensitive.

#include <charconv>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "berrypoll/errors.hpp"

namespace berrypoll {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        const auto pos = s.find(sep, start);
        if (pos == std::string_view::npos) {
            out.emplace_back(s.substr(start));
            return out;
        }
        out.emplace_back(s.substr(start, pos - start));
        start = pos + 1;
    }
}

/// Strict number parsing: the whole string must be consumed.
inline std::optional<double> parse_double(std::string_view s) {
    const std::string t = trim(s);
    if (t.empty()) return std::nullopt;
    double v = 0.0;
    const auto* first = t.data();
    const auto* last = t.data() + t.size();
    if (*first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc{} || ptr != last) return std::nullopt;
    return v;
}

inline std::optional<long long> parse_int(std::string_view s) {
    const std::string t = trim(s);
    if (t.empty()) return std::nullopt;
    long long v = 0;
    const auto* first = t.data();
    const auto* last = t.data() + t.size();
    if (*first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc{} || ptr != last) return std::nullopt;
    return v;
}

class KeyValueConfig {
public:
    KeyValueConfig() = default;

    static KeyValueConfig parse(std::istream& in, const std::string& origin = "<config>") {
        KeyValueConfig cfg;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            const std::string t = trim(line);
            if (t.empty()) continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos)
                throw InvalidSpec(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
            const std::string key = trim(std::string_view(t).substr(0, eq));
            if (key.empty()) throw InvalidSpec(origin + ":" + std::to_string(lineno) + ": empty key");
            cfg.values_[key].push_back(trim(std::string_view(t).substr(eq + 1)));
        }
        return cfg;
    }

    static KeyValueConfig parse_string(const std::string& text) {
        std::istringstream in(text);
        return parse(in);
    }

    static KeyValueConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw InputMissing("cannot open config file '" + path + "'");
        return parse(in, path);
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    void set(const std::string& key, const std::string& value) { values_[key] = {value}; }

    std::optional<std::string> get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) return std::nullopt;
        return it->second.back();
    }

    /// All values for a repeated key, in file order.
    std::vector<std::string> get_all(const std::string& key) const {
        auto it = values_.find(key);
        return it == values_.end() ? std::vector<std::string>{} : it->second;
    }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        return get(key).value_or(fallback);
    }

    double get_double(const std::string& key, double fallback) const {
        auto v = get(key);
        if (!v) return fallback;
        auto d = parse_double(*v);
        if (!d) throw InvalidSpec("config key '" + key + "': not a number: '" + *v + "'");
        return *d;
    }

    long long get_int(const std::string& key, long long fallback) const {
        auto v = get(key);
        if (!v) return fallback;
        auto d = parse_int(*v);
        if (!d) throw InvalidSpec("config key '" + key + "': not an integer: '" + *v + "'");
        return *d;
    }

    /// Comma-separated list of numbers.
    std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) const {
        auto v = get(key);
        if (!v) return fallback;
        std::vector<double> out;
        for (const auto& part : split(*v, ',')) {
            auto d = parse_double(part);
            if (!d) throw InvalidSpec("config key '" + key + "': bad list entry '" + part + "'");
            out.push_back(*d);
        }
        return out;
    }

    std::vector<std::string> get_strings(const std::string& key, std::vector<std::string> fallback) const {
        auto v = get(key);
        if (!v) return fallback;
        std::vector<std::string> out;
        for (const auto& part : split(*v, ',')) out.push_back(trim(part));
        return out;
    }

    const std::map<std::string, std::vector<std::string>>& entries() const { return values_; }

private:
    std::map<std::string, std::vector<std::string>> values_;
};

}  // namespace berrypoll
