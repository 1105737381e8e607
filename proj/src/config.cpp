#include "nsc/config.hpp"

#include <fstream>
#include <stdexcept>

namespace nsc::config {

namespace {
std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r");
    auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}
}  // namespace

KV parse_kv(std::istream& in) {
    KV kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        auto eq = t.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config line " + std::to_string(lineno) + " has no '=': " + t);
        std::string key = trim(t.substr(0, eq));
        if (key.empty())
            throw std::runtime_error("config line " + std::to_string(lineno) + ": empty key");
        kv[key] = trim(t.substr(eq + 1));
    }
    return kv;
}

KV load_kv_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path.string());
    return parse_kv(in);
}

const std::string& require(const KV& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw std::runtime_error("config is missing required key: " + key);
    return it->second;
}

std::string get_str(const KV& kv, const std::string& key, const std::string& fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : it->second;
}

double get_f64(const KV& kv, const std::string& key, double fallback) {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    try {
        std::size_t pos = 0;
        double v = std::stod(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument(it->second);
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error("config key '" + key + "' is not a number: " + it->second);
    }
}

std::size_t get_u64(const KV& kv, const std::string& key, std::size_t fallback) {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    try {
        std::size_t pos = 0;
        unsigned long long v = std::stoull(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument(it->second);
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw std::runtime_error("config key '" + key + "' is not an integer: " + it->second);
    }
}

bool get_bool(const KV& kv, const std::string& key, bool fallback) {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    if (it->second == "true" || it->second == "1" || it->second == "yes") return true;
    if (it->second == "false" || it->second == "0" || it->second == "no") return false;
    throw std::runtime_error("config key '" + key + "' is not a boolean: " + it->second);
}

}  // namespace nsc::config
