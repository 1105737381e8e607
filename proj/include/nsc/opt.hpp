#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "nsc/adapters.hpp"
#include "nsc/nullspace.hpp"
#include "nsc/toynet.hpp"

namespace nsc::opt {

struct NscConfig {
    std::size_t steps = 100;
    std::size_t batch_size = 32;
    double learning_rate = 1e-3;
    double lambda_init = 0.4;
    std::set<std::string> target_layers;  // objective evaluation set; empty = model default
    bool train_only_target = false;       // ablation: freeze coefficients outside the target set
    bool recompute_gram_each_step = false;
    std::uint64_t seed = 0;
};

// Default objective placement: output projection on the last quarter of
// blocks. select_target_layers accepts "last-quarter", "last-half", "all"
// or a trailing block count, and a projection subset like "o" or "qkvo".
std::set<std::string> default_target_layers(const toynet::ToyModelConfig& config);
std::set<std::string> select_target_layers(const toynet::ToyModelConfig& config,
                                           const std::string& blocks_spec,
                                           const std::string& proj_spec);

// Unlabeled per-task pools with deterministic per-task sampling streams.
struct UnlabeledSets {
    std::map<std::string, std::vector<std::vector<int>>> pools;
};

// task -> layer -> cached context, immutable for a whole optimization
using GramCaches = std::map<std::string, std::map<std::string, nullspace::NullRatioContext>>;

GramCaches prepare_gram_caches(const std::vector<lora::AdapterSet>& sets,
                               const std::set<std::string>& target_layers);

double nsc_objective(const toynet::BaseModel& model, const std::vector<lora::AdapterSet>& sets,
                     const lora::MergeCoefficients& coeffs, const GramCaches& caches,
                     const toynet::TaskBatches& batches);
double entropy_objective(const toynet::BaseModel& model, const std::vector<lora::AdapterSet>& sets,
                         const lora::MergeCoefficients& coeffs,
                         const toynet::TaskBatches& batches);

struct OptimizeResult {
    lora::MergeCoefficients coefficients;
    std::vector<double> trajectory;                        // objective per step, pre-update
    std::vector<std::map<std::string, double>> lambda_means;  // per step, mean over tasks
    bool aborted = false;
    std::string abort_reason;
};

OptimizeResult optimize(const toynet::BaseModel& model, const std::vector<lora::AdapterSet>& sets,
                        const UnlabeledSets& pools, const NscConfig& config,
                        toynet::ObjectiveKind objective);

void write_trajectory_csv(const OptimizeResult& result, std::ostream& out);
void write_coefficients(const lora::MergeCoefficients& coeffs, std::ostream& out);
lora::MergeCoefficients read_coefficients(std::istream& in);

}  // namespace nsc::opt
