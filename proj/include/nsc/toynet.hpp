#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "nsc/adapters.hpp"
#include "nsc/matrix.hpp"
#include "nsc/nullspace.hpp"
#include "nsc/trace.hpp"

namespace nsc::toynet {

enum class Proj { q, k, v, o };
enum class HeadKind { classification, regression };

const char* proj_name(Proj p);

struct ToyModelConfig {
    std::size_t blocks = 4;
    std::size_t model_dim = 32;
    std::size_t heads = 2;
    std::size_t mlp_dim = 64;
    std::size_t seq_len = 8;
    std::vector<Proj> lora_targets = {Proj::q, Proj::k, Proj::v, Proj::o};  // per block
    std::size_t lora_rank = 4;
    HeadKind head = HeadKind::classification;
    std::size_t head_out = 4;  // classes or regression width
    std::size_t vocab = 64;
};

struct BlockWeights {
    Matrix wq, wk, wv, wo;      // model_dim x model_dim, bias-free
    Matrix ln1_g, ln1_b, ln2_g, ln2_b;
    Matrix w1, b1, w2, b2;      // GELU MLP
};

// Frozen pre-norm transformer weights. Immutable after init/load.
struct BaseModel {
    ToyModelConfig config;
    Matrix embedding;  // vocab x d
    Matrix pos;        // seq x d
    std::vector<BlockWeights> blocks;
    Matrix ln_f_g, ln_f_b;
    Matrix w_head, b_head;

    static std::string layer_id(std::size_t block, Proj p);
    std::vector<std::string> lora_layer_ids() const;  // the LoRA-equipped set
};

BaseModel init_base_model(const ToyModelConfig& config, std::uint64_t seed);
void save_base_model(const BaseModel& model, const std::filesystem::path& dir);
BaseModel load_base_model(const std::filesystem::path& dir);

struct Batch {
    std::vector<std::vector<int>> tokens;  // batch x seq_len
};

struct ForwardResult {
    Matrix outputs;         // batch x head_out
    ActivationTrace trace;  // only filled when capture was requested
};

// Forward with merged adapter updates W0 + sum_k lambda_k B_k A_k at every
// LoRA layer. With no sets (or all-zero coefficients) this is the base
// model bit for bit.
ForwardResult forward(const BaseModel& model, const std::vector<lora::AdapterSet>& sets,
                      const lora::MergeCoefficients& coeffs, const Batch& batch,
                      bool capture_trace = false);
ForwardResult forward_base(const BaseModel& model, const Batch& batch, bool capture_trace = false);
// Forward with dense per-layer deltas already materialized (merged outputs
// of the gradient-free baselines).
ForwardResult forward_dense(const BaseModel& model, const std::map<std::string, Matrix>& deltas,
                            const Batch& batch, bool capture_trace = false);

struct TaskBatches {
    std::map<std::string, Batch> per_task;
};

enum class ObjectiveKind { null_ratio, entropy };

// For the null-ratio objective: task k's adapters provide the projections
// whose ratios are read off the merged model's activations.
struct NullRatioObjective {
    std::map<std::string, std::map<std::string, nullspace::NullRatioContext>> contexts;
    std::set<std::string> target_layers;
};

struct Objective {
    ObjectiveKind kind = ObjectiveKind::null_ratio;
    const NullRatioObjective* nsc = nullptr;
    double scale = 1.0;
};

struct CoeffGradResult {
    double value = 0.0;
    std::map<std::string, std::map<std::string, double>> grad;  // task -> layer -> d/d lambda
};

// Reverse-mode d objective / d lambda for every (task, LoRA layer),
// including the dependence of downstream activations on upstream lambdas.
CoeffGradResult grad_wrt_coeffs(const BaseModel& model, const std::vector<lora::AdapterSet>& sets,
                                const lora::MergeCoefficients& coeffs, const TaskBatches& batches,
                                const Objective& objective);
double objective_value(const BaseModel& model, const std::vector<lora::AdapterSet>& sets,
                       const lora::MergeCoefficients& coeffs, const TaskBatches& batches,
                       const Objective& objective);

// ---- LoRA fine-tuning on a synthetic task ----

struct TaskData {
    HeadKind kind = HeadKind::classification;
    std::vector<std::vector<int>> inputs;  // train tokens
    std::vector<int> labels;               // classification targets
    Matrix targets;                        // regression targets (n x out_dim)
    std::vector<std::vector<int>> val_inputs;
    std::vector<int> val_labels;
    Matrix val_targets;
};

struct TrainOptions {
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    double lr = 1e-3;             // paper-scale 2e-5 is infeasible at desk scale
    double weight_decay = 1e-6;
    std::size_t probe_size = 128;  // val subset used for history stats
};

struct EpochStats {
    double loss;        // probe loss
    double metric;      // accuracy or rmse on the probe
    double mean_omega;  // mean null-space ratio over all LoRA layers
};

struct TrainResult {
    lora::AdapterSet adapters;
    std::vector<EpochStats> history;  // entry 0 is the untrained model
    bool diverged = false;
};

TrainResult train_lora(const BaseModel& model, const TaskData& task, const std::string& task_id,
                       const TrainOptions& options, std::uint64_t seed);

}  // namespace nsc::toynet
