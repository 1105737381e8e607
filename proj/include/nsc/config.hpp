#pragma once

#include <filesystem>
#include <istream>
#include <map>
#include <string>

namespace nsc::config {

// plain-text "key = value" documents; '#' starts a comment line
using KV = std::map<std::string, std::string>;

KV parse_kv(std::istream& in);
KV load_kv_file(const std::filesystem::path& path);

const std::string& require(const KV& kv, const std::string& key);
std::string get_str(const KV& kv, const std::string& key, const std::string& fallback);
double get_f64(const KV& kv, const std::string& key, double fallback);
std::size_t get_u64(const KV& kv, const std::string& key, std::size_t fallback);
bool get_bool(const KV& kv, const std::string& key, bool fallback);

}  // namespace nsc::config
