#include "nsc/bench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "nsc/linalg.hpp"
#include "nsc/rng.hpp"
#include "nsc/stats.hpp"
#include "nsc/strfmt.hpp"
#include "nsc/tensor_store.hpp"

namespace nsc::bench {

using toynet::HeadKind;

namespace {

// teacher: y = W2 tanh(W1 phi), phi a position-weighted mean of task-local
// token embeddings
struct Teacher {
    Matrix embed;              // vocab x dt
    std::vector<double> posw;  // seq
    Matrix w1;                 // h x dt
    Matrix w2;                 // out x h
};

constexpr std::size_t kTeacherEmbed = 12;
constexpr std::size_t kTeacherHidden = 16;

Teacher make_teacher(const toynet::ToyModelConfig& model, std::size_t out, Rng& rng) {
    Teacher t;
    t.embed = Matrix(model.vocab, kTeacherEmbed);
    for (auto& v : t.embed.data) v = rng.gaussian();
    t.posw.resize(model.seq_len);
    for (auto& v : t.posw) v = 1.0 + 0.3 * rng.gaussian();
    t.w1 = Matrix(kTeacherHidden, kTeacherEmbed);
    for (auto& v : t.w1.data) v = rng.gaussian() / std::sqrt(double(kTeacherEmbed));
    t.w2 = Matrix(out, kTeacherHidden);
    for (auto& v : t.w2.data) v = rng.gaussian() / std::sqrt(double(kTeacherHidden));
    return t;
}

std::vector<double> teacher_logits(const Teacher& t, const std::vector<int>& tokens) {
    std::vector<double> phi(kTeacherEmbed, 0.0);
    for (std::size_t p = 0; p < tokens.size(); ++p) {
        const double w = t.posw[p] / static_cast<double>(tokens.size());
        const double* row = t.embed.data.data() + static_cast<std::size_t>(tokens[p]) * kTeacherEmbed;
        for (std::size_t j = 0; j < kTeacherEmbed; ++j) phi[j] += w * row[j];
    }
    std::vector<double> hidden(kTeacherHidden, 0.0);
    for (std::size_t i = 0; i < kTeacherHidden; ++i)
        hidden[i] = std::tanh(linalg::dot(t.w1.row(i), phi));
    std::vector<double> out(t.w2.rows, 0.0);
    for (std::size_t i = 0; i < t.w2.rows; ++i) out[i] = linalg::dot(t.w2.row(i), hidden);
    return out;
}

Split draw_split(const Teacher& teacher, const toynet::ToyModelConfig& model, HeadKind kind,
                 std::size_t out, std::size_t n, Rng& rng,
                 std::set<std::vector<int>>& seen) {
    Split split;
    if (kind == HeadKind::regression) split.targets = Matrix(n, out);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<int> seq(model.seq_len);
        do {
            for (auto& t : seq) t = static_cast<int>(rng.uniform_index(model.vocab));
        } while (!seen.insert(seq).second);
        auto y = teacher_logits(teacher, seq);
        if (kind == HeadKind::classification) {
            split.labels.push_back(static_cast<int>(stats::argmax_row(y)));
        } else {
            for (std::size_t j = 0; j < out; ++j) split.targets.at(i, j) = std::tanh(y[j]);
        }
        split.inputs.push_back(std::move(seq));
    }
    return split;
}

}  // namespace

std::vector<SyntheticTask> gen_tasks(const TaskGenSpec& spec, const toynet::ToyModelConfig& model,
                                     std::uint64_t seed) {
    if (spec.classification + spec.regression == 0)
        throw std::invalid_argument("gen_tasks: at least one task required");
    std::vector<SyntheticTask> tasks;
    auto build = [&](HeadKind kind, std::size_t index) {
        SyntheticTask task;
        task.kind = kind;
        task.out_width = model.head_out;
        task.task_id = strfmt("%s%zu", kind == HeadKind::classification ? "cls" : "reg", index);
        Rng rng(derive_seed(seed, "task/" + task.task_id));
        Teacher teacher = make_teacher(model, model.head_out, rng);
        std::set<std::vector<int>> seen;  // splits stay pairwise disjoint
        task.train = draw_split(teacher, model, kind, model.head_out, spec.train_n, rng, seen);
        task.val = draw_split(teacher, model, kind, model.head_out, spec.val_n, rng, seen);
        task.test = draw_split(teacher, model, kind, model.head_out, spec.test_n, rng, seen);
        tasks.push_back(std::move(task));
    };
    for (std::size_t i = 0; i < spec.classification; ++i) build(HeadKind::classification, i);
    for (std::size_t i = 0; i < spec.regression; ++i) build(HeadKind::regression, i);
    return tasks;
}

namespace {

Matrix forward_chunked(const toynet::BaseModel& model, const std::map<std::string, Matrix>& deltas,
                       const std::vector<std::vector<int>>& inputs) {
    const std::size_t chunk = 64;
    Matrix out(inputs.size(), model.config.head_out);
    for (std::size_t start = 0; start < inputs.size(); start += chunk) {
        std::size_t end = std::min(inputs.size(), start + chunk);
        toynet::Batch batch;
        for (std::size_t i = start; i < end; ++i) batch.tokens.push_back(inputs[i]);
        Matrix part = toynet::forward_dense(model, deltas, batch).outputs;
        for (std::size_t i = start; i < end; ++i)
            for (std::size_t j = 0; j < out.cols; ++j) out.at(i, j) = part.at(i - start, j);
    }
    return out;
}

double split_loss(const toynet::BaseModel& model, const std::map<std::string, Matrix>& deltas,
                  const SyntheticTask& task, const Split& split, std::size_t limit) {
    std::size_t n = std::min(limit, split.inputs.size());
    std::vector<std::vector<int>> inputs(split.inputs.begin(), split.inputs.begin() + n);
    Matrix outputs = forward_chunked(model, deltas, inputs);
    if (task.kind == HeadKind::classification) {
        std::vector<int> labels(split.labels.begin(), split.labels.begin() + n);
        return stats::cross_entropy_loss(outputs, labels);
    }
    Matrix targets(n, split.targets.cols);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < targets.cols; ++j) targets.at(i, j) = split.targets.at(i, j);
    return stats::mse_loss(outputs, targets);
}

}  // namespace

double task_score(const toynet::BaseModel& model, const std::map<std::string, Matrix>& deltas,
                  const SyntheticTask& task, const Split& split) {
    Matrix outputs = forward_chunked(model, deltas, split.inputs);
    if (task.kind == HeadKind::classification) return stats::accuracy(outputs, split.labels);
    return stats::rmse(outputs, split.targets);
}

EvalResult normalize_score(const SyntheticTask& task, double score, double reference) {
    EvalResult r;
    r.task_id = task.task_id;
    r.higher_better = task.kind == HeadKind::classification;
    r.metric_name = r.higher_better ? "accuracy" : "rmse";
    r.score = score;
    r.reference = reference;
    const double denom = r.higher_better ? reference : score;
    if (denom > 0.0) {
        r.normalized_defined = true;
        r.normalized_pct = 100.0 * (r.higher_better ? score / reference : reference / score);
    }
    return r;
}

std::vector<EvalResult> evaluate(const toynet::BaseModel& model,
                                 const std::map<std::string, Matrix>& deltas,
                                 const std::vector<SyntheticTask>& tasks,
                                 const std::map<std::string, double>& references) {
    std::vector<EvalResult> out;
    for (const auto& task : tasks) {
        auto ref = references.find(task.task_id);
        if (ref == references.end())
            throw std::invalid_argument("evaluate: no reference score for task " + task.task_id);
        out.push_back(normalize_score(task, task_score(model, deltas, task, task.test), ref->second));
    }
    return out;
}

toynet::TaskData to_task_data(const SyntheticTask& task) {
    toynet::TaskData data;
    data.kind = task.kind;
    data.inputs = task.train.inputs;
    data.labels = task.train.labels;
    data.targets = task.train.targets;
    data.val_inputs = task.val.inputs;
    data.val_labels = task.val.labels;
    data.val_targets = task.val.targets;
    return data;
}

std::map<std::string, Matrix> materialize_merged(const std::vector<lora::AdapterSet>& sets,
                                                 const lora::MergeCoefficients& coeffs,
                                                 const std::vector<std::string>& layers) {
    std::map<std::string, Matrix> deltas;
    for (const auto& layer : layers) deltas[layer] = lora::merged_update(sets, coeffs, layer);
    return deltas;
}

void save_dense_merged(const std::map<std::string, Matrix>& deltas,
                       const std::filesystem::path& dir) {
    lora::AdapterSet set;
    set.task_id = "merged";
    for (const auto& [layer, delta] : deltas)
        set.adapters.emplace(layer, lora::make_adapter(layer, delta, Matrix::identity(delta.cols)));
    lora::save_adapter_set(set, dir);
}

ExperimentConfig parse_experiment_config(const config::KV& kv) {
    ExperimentConfig cfg;
    cfg.seed = config::get_u64(kv, "seed", cfg.seed);

    cfg.model.blocks = config::get_u64(kv, "blocks", cfg.model.blocks);
    cfg.model.model_dim = config::get_u64(kv, "model_dim", cfg.model.model_dim);
    cfg.model.heads = config::get_u64(kv, "heads", cfg.model.heads);
    cfg.model.mlp_dim = config::get_u64(kv, "mlp_dim", cfg.model.mlp_dim);
    cfg.model.seq_len = config::get_u64(kv, "seq_len", cfg.model.seq_len);
    cfg.model.vocab = config::get_u64(kv, "vocab", cfg.model.vocab);
    cfg.model.lora_rank = config::get_u64(kv, "lora_rank", cfg.model.lora_rank);
    cfg.model.head_out = config::get_u64(kv, "num_classes", cfg.model.head_out);
    std::string targets = config::get_str(kv, "lora_targets", "qkvo");
    cfg.model.lora_targets.clear();
    for (char c : targets) {
        switch (c) {
            case 'q': cfg.model.lora_targets.push_back(toynet::Proj::q); break;
            case 'k': cfg.model.lora_targets.push_back(toynet::Proj::k); break;
            case 'v': cfg.model.lora_targets.push_back(toynet::Proj::v); break;
            case 'o': cfg.model.lora_targets.push_back(toynet::Proj::o); break;
            default: throw std::runtime_error("lora_targets may contain only qkvo");
        }
    }

    cfg.tasks.classification = config::get_u64(kv, "classification_tasks", cfg.tasks.classification);
    cfg.tasks.regression = config::get_u64(kv, "regression_tasks", cfg.tasks.regression);
    cfg.tasks.train_n = config::get_u64(kv, "train_n", cfg.tasks.train_n);
    cfg.tasks.val_n = config::get_u64(kv, "val_n", cfg.tasks.val_n);
    cfg.tasks.test_n = config::get_u64(kv, "test_n", cfg.tasks.test_n);
    cfg.model.head =
        cfg.tasks.classification > 0 ? HeadKind::classification : HeadKind::regression;

    cfg.train.epochs = config::get_u64(kv, "epochs", cfg.train.epochs);
    cfg.train.batch_size = config::get_u64(kv, "train_batch", cfg.train.batch_size);
    cfg.train.lr = config::get_f64(kv, "train_lr", cfg.train.lr);
    cfg.train.weight_decay = config::get_f64(kv, "train_weight_decay", cfg.train.weight_decay);
    cfg.train.probe_size = config::get_u64(kv, "probe_size", cfg.train.probe_size);

    if (auto it = kv.find("methods"); it != kv.end()) {
        cfg.methods.clear();
        std::istringstream ss(it->second);
        std::string name;
        while (std::getline(ss, name, ',')) {
            auto b = name.find_first_not_of(" \t");
            auto e = name.find_last_not_of(" \t");
            if (b == std::string::npos) continue;
            cfg.methods.push_back(mergers::method_from_name(name.substr(b, e - b + 1)));
        }
        if (cfg.methods.empty()) throw std::runtime_error("config lists no merge methods");
    }

    cfg.ties_keep_fraction = config::get_f64(kv, "ties_keep_fraction", cfg.ties_keep_fraction);
    cfg.dare_drop_prob = config::get_f64(kv, "dare_drop_prob", cfg.dare_drop_prob);
    cfg.svd_rank = config::get_u64(kv, "svd_rank", cfg.svd_rank);
    cfg.grid_val_n = config::get_u64(kv, "grid_val_n", cfg.grid_val_n);
    if (kv.count("fixed_scale")) {
        cfg.use_fixed_scale = true;
        cfg.fixed_scale = config::get_f64(kv, "fixed_scale", 1.0);
    }

    cfg.nsc.steps = config::get_u64(kv, "nsc_steps", cfg.nsc.steps);
    cfg.nsc.batch_size = config::get_u64(kv, "nsc_batch", cfg.nsc.batch_size);
    cfg.nsc.learning_rate = config::get_f64(kv, "nsc_lr", cfg.nsc.learning_rate);
    cfg.nsc.lambda_init = config::get_f64(kv, "lambda_init", cfg.nsc.lambda_init);
    cfg.target_blocks = config::get_str(kv, "target_blocks", cfg.target_blocks);
    cfg.target_proj = config::get_str(kv, "target_proj", cfg.target_proj);

    mergers::MergeSpec sanity;
    sanity.ties_keep_fraction = cfg.ties_keep_fraction;
    sanity.dare_drop_prob = cfg.dare_drop_prob;
    sanity.validate();
    return cfg;
}

namespace {

struct SuiteState {
    const ExperimentConfig* cfg;
    const toynet::BaseModel* model;
    const std::vector<SyntheticTask>* tasks;
    std::vector<lora::AdapterSet> sets;  // sorted by task id
    std::vector<std::string> layers;
    std::map<std::string, std::map<std::string, Matrix>> dare_sparsified;  // task -> layer -> delta
};

std::map<std::string, Matrix> merge_dense_at_scale(const SuiteState& st, mergers::Method method,
                                                   double scale) {
    const auto& cfg = *st.cfg;
    std::map<std::string, Matrix> out;
    for (const auto& layer : st.layers) {
        std::vector<Matrix> deltas;
        for (const auto& set : st.sets) deltas.push_back(lora::delta(set.at(layer)));
        switch (method) {
            case mergers::Method::ta:
                out[layer] = mergers::ta_merge(deltas, scale);
                break;
            case mergers::Method::ties:
                out[layer] = mergers::ties_merge(deltas, scale, cfg.ties_keep_fraction);
                break;
            case mergers::Method::dare_ties: {
                std::vector<Matrix> sparse;
                for (const auto& set : st.sets)
                    sparse.push_back(st.dare_sparsified.at(set.task_id).at(layer));
                out[layer] = mergers::ties_merge(sparse, scale, cfg.ties_keep_fraction);
                break;
            }
            case mergers::Method::svd: {
                std::size_t rank = cfg.svd_rank;
                if (rank == 0)
                    for (const auto& set : st.sets)
                        rank = std::max(rank, set.at(layer).rank);
                auto [b, a] = mergers::svd_merge(deltas, scale, rank);
                out[layer] = linalg::matmul(b, a);
                break;
            }
            case mergers::Method::linear: {
                std::vector<lora::LoraAdapter> ads;
                for (const auto& set : st.sets) ads.push_back(set.at(layer));
                std::vector<double> lam(ads.size(), scale);
                out[layer] = lora::delta(mergers::linear_merge(ads, lam));
                break;
            }
            case mergers::Method::knots_ties:
                out[layer] = mergers::knots_ties_merge(deltas, scale, cfg.ties_keep_fraction);
                break;
            default:
                throw std::logic_error("merge_dense_at_scale: not a scale-family method");
        }
    }
    return out;
}

double suite_val_loss(const SuiteState& st, const std::map<std::string, Matrix>& deltas) {
    double acc = 0.0;
    for (const auto& task : *st.tasks)
        acc += split_loss(*st.model, deltas, task, task.val, st.cfg->grid_val_n);
    return acc / static_cast<double>(st.tasks->size());
}

}  // namespace

ExperimentResult run_benchmark(const ExperimentConfig& config) {
    ExperimentResult result;
    result.model = toynet::init_base_model(config.model, derive_seed(config.seed, "model"));
    result.tasks = gen_tasks(config.tasks, config.model, config.seed);

    SuiteState st;
    st.cfg = &config;
    st.model = &result.model;
    st.tasks = &result.tasks;
    st.layers = result.model.lora_layer_ids();

    bool mixed_kinds = false;
    {
        bool has_cls = false, has_reg = false;
        for (const auto& t : result.tasks) {
            has_cls |= t.kind == HeadKind::classification;
            has_reg |= t.kind == HeadKind::regression;
        }
        mixed_kinds = has_cls && has_reg;
    }

    for (const auto& task : result.tasks) {
        auto trained = toynet::train_lora(result.model, to_task_data(task), task.task_id,
                                          config.train, config.seed);
        if (trained.diverged)
            throw std::runtime_error("training diverged for task " + task.task_id);
        std::map<std::string, Matrix> own;
        for (const auto& [layer, ad] : trained.adapters.adapters) own[layer] = lora::delta(ad);
        result.references[task.task_id] = task_score(result.model, own, task, task.test);
        st.sets.push_back(trained.adapters);
        result.trainings.emplace(task.task_id, std::move(trained));
    }
    std::sort(st.sets.begin(), st.sets.end(),
              [](const lora::AdapterSet& a, const lora::AdapterSet& b) {
                  return a.task_id < b.task_id;
              });

    // DARE masks are scale-independent; sparsify once per task and layer
    for (const auto& set : st.sets)
        for (const auto& layer : st.layers)
            st.dare_sparsified[set.task_id][layer] =
                mergers::dare_sparsify(lora::delta(set.at(layer)), config.dare_drop_prob,
                                       derive_seed(config.seed, "dare/" + set.task_id + "/" + layer));

    opt::UnlabeledSets pools;
    for (const auto& task : result.tasks) pools.pools[task.task_id] = task.val.inputs;

    for (mergers::Method method : config.methods) {
        MethodOutcome outcome;
        outcome.method = method;
        try {
            switch (method) {
                case mergers::Method::ta:
                case mergers::Method::ties:
                case mergers::Method::dare_ties:
                case mergers::Method::svd:
                case mergers::Method::linear:
                case mergers::Method::knots_ties: {
                    outcome.chosen_scale =
                        config.use_fixed_scale
                            ? config.fixed_scale
                            : mergers::grid_search_scale([&](double s) {
                                  return suite_val_loss(st, merge_dense_at_scale(st, method, s));
                              });
                    outcome.merged_deltas = merge_dense_at_scale(st, method, outcome.chosen_scale);
                    break;
                }
                case mergers::Method::adamerging: {
                    if (mixed_kinds) {
                        outcome.status =
                            "excluded (output entropy is undefined for mixed "
                            "classification/regression suites)";
                        result.outcomes.push_back(std::move(outcome));
                        continue;
                    }
                    opt::NscConfig oc = config.nsc;
                    oc.seed = derive_seed(config.seed, "adamerging");
                    oc.target_layers =
                        opt::select_target_layers(config.model, config.target_blocks,
                                                  config.target_proj);
                    outcome.opt_result =
                        opt::optimize(result.model, st.sets, pools, oc,
                                      toynet::ObjectiveKind::entropy);
                    outcome.has_opt_result = true;
                    if (outcome.opt_result.aborted)
                        throw std::runtime_error("optimization aborted: " +
                                                 outcome.opt_result.abort_reason);
                    outcome.merged_deltas = materialize_merged(
                        st.sets, outcome.opt_result.coefficients, st.layers);
                    break;
                }
                case mergers::Method::nsc: {
                    opt::NscConfig oc = config.nsc;
                    oc.seed = derive_seed(config.seed, "nsc");
                    oc.target_layers =
                        opt::select_target_layers(config.model, config.target_blocks,
                                                  config.target_proj);
                    outcome.opt_result = opt::optimize(result.model, st.sets, pools, oc,
                                                       toynet::ObjectiveKind::null_ratio);
                    outcome.has_opt_result = true;
                    if (outcome.opt_result.aborted)
                        throw std::runtime_error("optimization aborted: " +
                                                 outcome.opt_result.abort_reason);
                    outcome.merged_deltas = materialize_merged(
                        st.sets, outcome.opt_result.coefficients, st.layers);
                    break;
                }
            }
            auto evals = evaluate(result.model, outcome.merged_deltas, result.tasks,
                                  result.references);
            double acc = 0.0;
            std::size_t defined = 0;
            for (auto& e : evals) {
                if (e.normalized_defined) {
                    acc += e.normalized_pct;
                    ++defined;
                }
                outcome.per_task.emplace(e.task_id, std::move(e));
            }
            outcome.avg_normalized = defined ? acc / static_cast<double>(defined) : 0.0;
            outcome.ran = true;
            outcome.status = "ok";
        } catch (const std::exception& e) {
            outcome.ran = false;
            outcome.status = std::string("failed: ") + e.what();
        }
        result.outcomes.push_back(std::move(outcome));
    }
    return result;
}

namespace {

void write_file(const std::filesystem::path& p, const std::string& content) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << content;
}

}  // namespace

void write_report(const ExperimentResult& result, const ExperimentConfig& config,
                  const std::filesystem::path& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    toynet::save_base_model(result.model, out_dir / "model");

    for (const auto& [task_id, trained] : result.trainings) {
        lora::save_adapter_set(trained.adapters, out_dir / "adapters" / task_id);
        std::ostringstream hist;
        hist << "epoch,loss,metric,mean_omega\n";
        for (std::size_t e = 0; e < trained.history.size(); ++e) {
            const auto& h = trained.history[e];
            hist << e << "," << strfmt("%.12g", h.loss) << "," << strfmt("%.12g", h.metric) << ","
                 << strfmt("%.12g", h.mean_omega) << "\n";
        }
        write_file(out_dir / ("history_" + task_id + ".csv"), hist.str());
    }

    {
        std::ostringstream refs;
        refs << "task_id,metric,score\n";
        for (const auto& task : result.tasks) {
            refs << task.task_id << ","
                 << (task.kind == HeadKind::classification ? "accuracy" : "rmse") << ","
                 << strfmt("%.12g", result.references.at(task.task_id)) << "\n";
        }
        write_file(out_dir / "references.csv", refs.str());
    }

    // summary: one method per row, normalized per-task columns plus Avg
    {
        std::ostringstream sum;
        sum << "method";
        for (const auto& task : result.tasks) sum << "," << task.task_id;
        sum << ",avg,scale,status\n";
        for (const auto& outcome : result.outcomes) {
            sum << mergers::method_name(outcome.method);
            for (const auto& task : result.tasks) {
                sum << ",";
                auto it = outcome.per_task.find(task.task_id);
                if (it != outcome.per_task.end() && it->second.normalized_defined)
                    sum << strfmt("%.12g", it->second.normalized_pct);
                else
                    sum << (outcome.ran ? "undefined" : "-");
            }
            sum << ",";
            if (outcome.ran) sum << strfmt("%.12g", outcome.avg_normalized);
            else sum << "-";
            sum << ",";
            if (outcome.ran && !outcome.has_opt_result) sum << strfmt("%.12g", outcome.chosen_scale);
            else sum << "-";
            sum << "," << outcome.status << "\n";
        }
        write_file(out_dir / "summary.csv", sum.str());
    }

    for (const auto& outcome : result.outcomes) {
        std::string name = mergers::method_name(outcome.method);
        if (outcome.ran) {
            std::ostringstream scores;
            scores << "task_id,metric,score,reference,normalized_pct\n";
            for (const auto& [task_id, e] : outcome.per_task) {
                scores << task_id << "," << e.metric_name << "," << strfmt("%.12g", e.score) << ","
                       << strfmt("%.12g", e.reference) << ",";
                if (e.normalized_defined) scores << strfmt("%.12g", e.normalized_pct);
                else scores << "undefined";
                scores << "\n";
            }
            write_file(out_dir / ("scores_" + name + ".csv"), scores.str());
            save_dense_merged(outcome.merged_deltas, out_dir / "merged" / name);
        }
        if (outcome.has_opt_result) {
            std::ostringstream traj;
            opt::write_trajectory_csv(outcome.opt_result, traj);
            write_file(out_dir / ("trajectory_" + name + ".csv"), traj.str());
            std::ostringstream co;
            opt::write_coefficients(outcome.opt_result.coefficients, co);
            write_file(out_dir / ("coefficients_" + name + ".txt"), co.str());

            // final merged-model ratio report per task over the target layers
            auto targets = opt::select_target_layers(config.model, config.target_blocks,
                                                     config.target_proj);
            std::vector<lora::AdapterSet> sets;
            for (const auto& [task_id, trained] : result.trainings) sets.push_back(trained.adapters);
            auto caches = opt::prepare_gram_caches(sets, targets);
            for (const auto& task : result.tasks) {
                toynet::Batch probe;
                std::size_t n = std::min<std::size_t>(64, task.val.inputs.size());
                for (std::size_t i = 0; i < n; ++i) probe.tokens.push_back(task.val.inputs[i]);
                auto fw = toynet::forward_dense(result.model, outcome.merged_deltas, probe, true);
                auto report = nullspace::mean_null_ratio(
                    fw.trace, caches.at(task.task_id), targets);
                std::ostringstream csv;
                nullspace::write_ratio_csv(report, csv);
                write_file(out_dir / ("ratios_" + name + "_" + task.task_id + ".csv"), csv.str());
            }
        }
    }
}

void run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir) {
    write_report(run_benchmark(config), config, out_dir);
}

}  // namespace nsc::bench
