#include "nsc/opt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "nsc/linalg.hpp"
#include "nsc/optim.hpp"
#include "nsc/rng.hpp"
#include "nsc/strfmt.hpp"

namespace nsc::opt {

using toynet::BaseModel;
using toynet::ObjectiveKind;

std::set<std::string> default_target_layers(const toynet::ToyModelConfig& config) {
    return select_target_layers(config, "last-quarter", "o");
}

std::set<std::string> select_target_layers(const toynet::ToyModelConfig& config,
                                           const std::string& blocks_spec,
                                           const std::string& proj_spec) {
    std::size_t count = 0;
    if (blocks_spec == "last-quarter") {
        count = std::max<std::size_t>(1, config.blocks / 4);
    } else if (blocks_spec == "last-half") {
        count = std::max<std::size_t>(1, config.blocks / 2);
    } else if (blocks_spec == "all") {
        count = config.blocks;
    } else {
        try {
            count = std::stoull(blocks_spec);
        } catch (const std::exception&) {
            throw std::invalid_argument("target blocks spec must be last-quarter, last-half, all, "
                                        "or a trailing block count: '" + blocks_spec + "'");
        }
        if (count == 0 || count > config.blocks)
            throw std::invalid_argument(strfmt("target block count %zu not in [1, %zu]", count,
                                               config.blocks));
    }

    std::vector<toynet::Proj> projs;
    for (char c : proj_spec) {
        switch (c) {
            case 'q': projs.push_back(toynet::Proj::q); break;
            case 'k': projs.push_back(toynet::Proj::k); break;
            case 'v': projs.push_back(toynet::Proj::v); break;
            case 'o': projs.push_back(toynet::Proj::o); break;
            default:
                throw std::invalid_argument("projection spec may contain only qkvo: '" + proj_spec +
                                            "'");
        }
    }
    if (projs.empty()) throw std::invalid_argument("empty projection spec");

    // restrict to projections that actually carry adapters
    std::set<toynet::Proj> equipped(config.lora_targets.begin(), config.lora_targets.end());
    std::set<std::string> out;
    for (std::size_t b = config.blocks - count; b < config.blocks; ++b)
        for (toynet::Proj p : projs)
            if (equipped.count(p)) out.insert(BaseModel::layer_id(b, p));
    if (out.empty())
        throw std::invalid_argument("target selection matches no LoRA-equipped layer");
    return out;
}

GramCaches prepare_gram_caches(const std::vector<lora::AdapterSet>& sets,
                               const std::set<std::string>& target_layers) {
    if (sets.empty()) throw std::invalid_argument("prepare_gram_caches: no adapter sets");
    if (target_layers.empty()) throw std::invalid_argument("prepare_gram_caches: no target layers");
    GramCaches caches;
    for (const auto& set : sets) {
        for (const auto& layer : target_layers) {
            const auto& adapter = set.at(layer);
            try {
                caches[set.task_id].emplace(layer, nullspace::make_context(adapter, 0.0));
            } catch (const std::runtime_error&) {
                // rank-deficient down-projection: retry with the trace-scaled jitter
                try {
                    caches[set.task_id].emplace(
                        layer, nullspace::make_context(adapter,
                                                       linalg::default_gram_jitter(adapter.a)));
                } catch (const std::runtime_error& e) {
                    throw std::runtime_error(strfmt(
                        "prepare_gram_caches: singular Gram for task '%s' layer '%s' even with "
                        "jitter: %s",
                        set.task_id.c_str(), layer.c_str(), e.what()));
                }
            }
        }
    }
    return caches;
}

namespace {

std::set<std::string> cache_target_layers(const GramCaches& caches) {
    if (caches.empty()) throw std::invalid_argument("empty Gram caches");
    std::set<std::string> layers;
    for (const auto& [layer, ctx] : caches.begin()->second) layers.insert(layer);
    for (const auto& [task, row] : caches)
        if (row.size() != layers.size())
            throw std::invalid_argument("Gram caches cover different layers per task");
    return layers;
}

}  // namespace

double nsc_objective(const BaseModel& model, const std::vector<lora::AdapterSet>& sets,
                     const lora::MergeCoefficients& coeffs, const GramCaches& caches,
                     const toynet::TaskBatches& batches) {
    toynet::NullRatioObjective nsc;
    nsc.contexts = caches;
    nsc.target_layers = cache_target_layers(caches);
    toynet::Objective obj;
    obj.kind = ObjectiveKind::null_ratio;
    obj.nsc = &nsc;
    return toynet::objective_value(model, sets, coeffs, batches, obj);
}

double entropy_objective(const BaseModel& model, const std::vector<lora::AdapterSet>& sets,
                         const lora::MergeCoefficients& coeffs,
                         const toynet::TaskBatches& batches) {
    toynet::Objective obj;
    obj.kind = ObjectiveKind::entropy;
    return toynet::objective_value(model, sets, coeffs, batches, obj);
}

namespace {

// round-robin cursor over a shuffled pool, reshuffled per epoch
class PoolSampler {
public:
    PoolSampler(const std::vector<std::vector<int>>* pool, std::uint64_t seed)
        : pool_(pool), rng_(seed), order_(pool->size()) {
        std::iota(order_.begin(), order_.end(), 0);
        rng_.shuffle(order_);
    }

    toynet::Batch next(std::size_t n) {
        toynet::Batch batch;
        for (std::size_t i = 0; i < n; ++i) {
            batch.tokens.push_back((*pool_)[order_[cursor_++]]);
            if (cursor_ == order_.size()) {
                cursor_ = 0;
                rng_.shuffle(order_);
            }
        }
        return batch;
    }

private:
    const std::vector<std::vector<int>>* pool_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

}  // namespace

OptimizeResult optimize(const BaseModel& model, const std::vector<lora::AdapterSet>& sets,
                        const UnlabeledSets& pools, const NscConfig& config,
                        ObjectiveKind objective) {
    if (config.steps < 1) throw std::invalid_argument("optimize: steps must be >= 1");
    if (config.batch_size < 1) throw std::invalid_argument("optimize: batch size must be >= 1");
    if (config.learning_rate < 0.0) throw std::invalid_argument("optimize: negative learning rate");
    if (sets.empty()) throw std::invalid_argument("optimize: no adapter sets");
    for (const auto& set : sets) {
        auto it = pools.pools.find(set.task_id);
        if (it == pools.pools.end() || it->second.empty())
            throw std::invalid_argument("optimize: empty pool for task " + set.task_id);
    }

    std::set<std::string> targets =
        config.target_layers.empty() ? default_target_layers(model.config) : config.target_layers;
    auto all_layers = model.lora_layer_ids();
    for (const auto& t : targets)
        if (std::find(all_layers.begin(), all_layers.end(), t) == all_layers.end())
            throw std::invalid_argument("optimize: target layer not LoRA-equipped: " + t);

    GramCaches caches;
    if (objective == ObjectiveKind::null_ratio) caches = prepare_gram_caches(sets, targets);

    // flat coefficient vector in (task, layer) sorted order
    std::vector<std::string> task_ids;
    for (const auto& s : sets) task_ids.push_back(s.task_id);
    std::sort(task_ids.begin(), task_ids.end());
    const std::size_t n_params = task_ids.size() * all_layers.size();
    std::vector<double> flat(n_params, config.lambda_init);

    auto to_coeffs = [&]() {
        lora::MergeCoefficients c;
        std::size_t i = 0;
        for (const auto& t : task_ids)
            for (const auto& l : all_layers) c.set(t, l, flat[i++]);
        return c;
    };

    AdamW adam;
    adam.lr = config.learning_rate;
    adam.weight_decay = 0.0;  // decay would bias coefficients toward zero
    adam.init(n_params);

    std::map<std::string, PoolSampler> samplers;
    for (const auto& t : task_ids)
        samplers.emplace(t, PoolSampler(&pools.pools.at(t), derive_seed(config.seed, "pool/" + t)));

    OptimizeResult result;
    for (std::size_t step = 0; step < config.steps; ++step) {
        toynet::TaskBatches batches;
        for (const auto& t : task_ids) batches.per_task[t] = samplers.at(t).next(config.batch_size);

        if (config.recompute_gram_each_step && objective == ObjectiveKind::null_ratio)
            caches = prepare_gram_caches(sets, targets);

        toynet::NullRatioObjective nsc;
        toynet::Objective obj;
        obj.kind = objective;
        if (objective == ObjectiveKind::null_ratio) {
            nsc.contexts = caches;
            nsc.target_layers = targets;
            obj.nsc = &nsc;
        }

        toynet::CoeffGradResult grad;
        try {
            grad = toynet::grad_wrt_coeffs(model, sets, to_coeffs(), batches, obj);
        } catch (const std::runtime_error& e) {
            result.aborted = true;
            result.abort_reason = e.what();
            break;
        }

        result.trajectory.push_back(grad.value);
        std::map<std::string, double> means;
        {
            std::size_t i = 0;
            for (const auto& t : task_ids) {
                (void)t;
                for (const auto& l : all_layers) means[l] += flat[i++];
            }
            for (auto& [l, v] : means) v /= static_cast<double>(task_ids.size());
        }
        result.lambda_means.push_back(std::move(means));

        std::vector<double> g(n_params, 0.0);
        std::size_t i = 0;
        for (const auto& t : task_ids) {
            for (const auto& l : all_layers) {
                double gv = grad.grad.at(t).at(l);
                if (config.train_only_target && !targets.count(l)) gv = 0.0;
                g[i++] = gv;
            }
        }
        adam.step(flat, g);
    }

    result.coefficients = to_coeffs();
    return result;
}

void write_trajectory_csv(const OptimizeResult& result, std::ostream& out) {
    out << "step,objective";
    if (!result.lambda_means.empty())
        for (const auto& [layer, _] : result.lambda_means.front()) out << ",mean_lambda." << layer;
    out << "\n";
    for (std::size_t i = 0; i < result.trajectory.size(); ++i) {
        out << (i + 1) << "," << strfmt("%.12g", result.trajectory[i]);
        for (const auto& [layer, v] : result.lambda_means[i]) out << "," << strfmt("%.12g", v);
        out << "\n";
    }
}

void write_coefficients(const lora::MergeCoefficients& coeffs, std::ostream& out) {
    out << "format = nsc-coefficients-v1\n";
    for (const auto& [task, row] : coeffs.values)
        for (const auto& [layer, v] : row)
            out << "lambda." << task << "." << layer << " = " << strfmt("%.17g", v) << "\n";
}

lora::MergeCoefficients read_coefficients(std::istream& in) {
    lora::MergeCoefficients coeffs;
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind("lambda.", 0) != 0) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw std::runtime_error("bad coefficient line: " + line);
        std::string key = line.substr(7, eq - 7);
        while (!key.empty() && key.back() == ' ') key.pop_back();
        auto dot = key.find('.');
        if (dot == std::string::npos) throw std::runtime_error("bad coefficient key: " + key);
        std::string task = key.substr(0, dot);
        std::string layer = key.substr(dot + 1);
        coeffs.set(task, layer, std::stod(line.substr(eq + 1)));
    }
    if (coeffs.values.empty()) throw std::runtime_error("no coefficients found in document");
    return coeffs;
}

}  // namespace nsc::opt
