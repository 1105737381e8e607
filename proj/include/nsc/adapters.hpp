#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "nsc/matrix.hpp"

namespace nsc::lora {

// One low-rank update, delta = b * a. The up-projection b is d_out x r,
// the down-projection a is r x d_in. Any alpha/r scaling is expected to be
// folded into b before construction.
struct LoraAdapter {
    std::string layer_id;
    Matrix b;
    Matrix a;
    std::size_t rank = 0;
};

LoraAdapter make_adapter(std::string layer_id, Matrix b, Matrix a);

// All adapters of one task, keyed by layer id (deterministic order).
struct AdapterSet {
    std::string task_id;
    std::map<std::string, LoraAdapter> adapters;

    const LoraAdapter& at(const std::string& layer) const;
    std::vector<std::string> layer_ids() const;
};

// Per-task, per-layer merge weights.
struct MergeCoefficients {
    std::map<std::string, std::map<std::string, double>> values;  // task -> layer -> lambda

    double at(const std::string& task, const std::string& layer) const;
    void set(const std::string& task, const std::string& layer, double v);

    static MergeCoefficients constant(const std::vector<std::string>& tasks,
                                      const std::vector<std::string>& layers, double v);
};

Matrix delta(const LoraAdapter& adapter);

// sum_k lambda[k][layer] * delta_k at one layer
Matrix merged_update(const std::vector<AdapterSet>& sets, const MergeCoefficients& coeffs,
                     const std::string& layer);

void save_adapter_set(const AdapterSet& set, const std::filesystem::path& dir);
AdapterSet load_adapter_set(const std::filesystem::path& dir);

}  // namespace nsc::lora
