#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "nsc/adapters.hpp"
#include "nsc/config.hpp"
#include "nsc/matrix.hpp"
#include "nsc/mergers.hpp"
#include "nsc/opt.hpp"
#include "nsc/toynet.hpp"

namespace nsc::bench {

struct Split {
    std::vector<std::vector<int>> inputs;
    std::vector<int> labels;  // classification
    Matrix targets;           // regression, n x out_dim
};

struct SyntheticTask {
    std::string task_id;
    toynet::HeadKind kind = toynet::HeadKind::classification;
    std::size_t out_width = 4;  // classes or regression width, equals the model head width
    Split train, val, test;
};

struct TaskGenSpec {
    std::size_t classification = 3;
    std::size_t regression = 1;
    std::size_t train_n = 2048;
    std::size_t val_n = 512;
    std::size_t test_n = 512;
};

// Random teacher functions over task-specific token embeddings; pairwise
// distinct by seed, split-disjoint by construction.
std::vector<SyntheticTask> gen_tasks(const TaskGenSpec& spec, const toynet::ToyModelConfig& model,
                                     std::uint64_t seed);

struct EvalResult {
    std::string task_id;
    std::string metric_name;  // accuracy | rmse
    double score = 0.0;
    bool higher_better = true;
    double reference = 0.0;
    bool normalized_defined = false;
    double normalized_pct = 0.0;  // direction-corrected, percent
};

double task_score(const toynet::BaseModel& model, const std::map<std::string, Matrix>& deltas,
                  const SyntheticTask& task, const Split& split);
EvalResult normalize_score(const SyntheticTask& task, double score, double reference);
std::vector<EvalResult> evaluate(const toynet::BaseModel& model,
                                 const std::map<std::string, Matrix>& deltas,
                                 const std::vector<SyntheticTask>& tasks,
                                 const std::map<std::string, double>& references);

struct ExperimentConfig {
    std::uint64_t seed = 1;
    toynet::ToyModelConfig model;
    TaskGenSpec tasks;
    std::vector<mergers::Method> methods = {
        mergers::Method::ta,     mergers::Method::ties,       mergers::Method::dare_ties,
        mergers::Method::svd,    mergers::Method::linear,     mergers::Method::knots_ties,
        mergers::Method::adamerging, mergers::Method::nsc};
    toynet::TrainOptions train;
    double ties_keep_fraction = 0.20;
    double dare_drop_prob = 0.9;
    std::size_t svd_rank = 0;  // 0 = widest input rank per layer
    std::size_t grid_val_n = 128;
    bool use_fixed_scale = false;  // skip the grid search and use fixed_scale
    double fixed_scale = 1.0;
    opt::NscConfig nsc;
    std::string target_blocks = "last-quarter";
    std::string target_proj = "o";
};

ExperimentConfig parse_experiment_config(const config::KV& kv);

struct MethodOutcome {
    mergers::Method method = mergers::Method::ta;
    bool ran = false;
    std::string status;  // "ok", "excluded (...)" or an error message
    double chosen_scale = 0.0;
    std::map<std::string, EvalResult> per_task;
    double avg_normalized = 0.0;
    std::map<std::string, Matrix> merged_deltas;
    opt::OptimizeResult opt_result;  // gradient-based methods only
    bool has_opt_result = false;
};

struct ExperimentResult {
    toynet::BaseModel model;
    std::vector<SyntheticTask> tasks;
    std::map<std::string, toynet::TrainResult> trainings;  // task -> result
    std::map<std::string, double> references;              // task -> finetuned score
    std::vector<MethodOutcome> outcomes;
};

// All computation, no file IO. run_experiment adds the report directory.
ExperimentResult run_benchmark(const ExperimentConfig& config);
void write_report(const ExperimentResult& result, const ExperimentConfig& config,
                  const std::filesystem::path& out_dir);
void run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir);

// helpers shared with the CLI
toynet::TaskData to_task_data(const SyntheticTask& task);
std::map<std::string, Matrix> materialize_merged(const std::vector<lora::AdapterSet>& sets,
                                                 const lora::MergeCoefficients& coeffs,
                                                 const std::vector<std::string>& layers);
void save_dense_merged(const std::map<std::string, Matrix>& deltas,
                       const std::filesystem::path& dir);

}  // namespace nsc::bench
