#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "nsc/matrix.hpp"

namespace nsc::store {

// On-disk container: a directory holding `manifest` (UTF-8 key = value
// lines describing each tensor) and `tensors.bin` (raw little-endian f64,
// row-major, concatenated in manifest order). Round trips are bit-exact.
struct NamedTensor {
    std::string name;  // "task/layer/A" style, three '/'-separated parts
    Matrix value;
};

enum class IoErrorKind {
    MissingFile,
    ManifestParse,
    CountMismatch,
    ShapeMismatch,
    TruncatedBlob,
    TrailingData,
    NonFiniteData,
    BadTensorName,
};

class io_error : public std::runtime_error {
public:
    io_error(IoErrorKind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
    IoErrorKind kind;
};

void save_tensors(const std::filesystem::path& dir, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_tensors(const std::filesystem::path& dir);

}  // namespace nsc::store
