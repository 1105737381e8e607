#include "nsc/toynet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "nsc/autodiff.hpp"
#include "nsc/linalg.hpp"
#include "nsc/optim.hpp"
#include "nsc/rng.hpp"
#include "nsc/stats.hpp"
#include "nsc/strfmt.hpp"
#include "nsc/tensor_store.hpp"

namespace nsc::toynet {

using ad::Tape;

const char* proj_name(Proj p) {
    switch (p) {
        case Proj::q: return "q";
        case Proj::k: return "k";
        case Proj::v: return "v";
        case Proj::o: return "o";
    }
    return "?";
}

std::string BaseModel::layer_id(std::size_t block, Proj p) {
    return strfmt("blk%zu.%s", block, proj_name(p));
}

std::vector<std::string> BaseModel::lora_layer_ids() const {
    std::vector<std::string> out;
    for (std::size_t b = 0; b < config.blocks; ++b)
        for (Proj p : config.lora_targets) out.push_back(layer_id(b, p));
    std::sort(out.begin(), out.end());
    return out;
}

namespace {

Matrix gaussian_matrix(std::size_t r, std::size_t c, double stddev, Rng& rng) {
    Matrix m(r, c);
    for (auto& v : m.data) v = stddev * rng.gaussian();
    return m;
}

Matrix ones_row(std::size_t n) {
    Matrix m(1, n);
    std::fill(m.data.begin(), m.data.end(), 1.0);
    return m;
}

void validate_config(const ToyModelConfig& c) {
    if (c.model_dim % c.heads != 0)
        throw std::invalid_argument("toy model: model_dim must be divisible by heads");
    if (c.lora_rank > c.model_dim)
        throw std::invalid_argument("toy model: lora_rank exceeds model_dim");
    if (c.blocks == 0 || c.seq_len == 0 || c.vocab == 0 || c.head_out == 0)
        throw std::invalid_argument("toy model: empty dimension in config");
    if (c.lora_targets.empty())
        throw std::invalid_argument("toy model: no LoRA target projections");
}

}  // namespace

BaseModel init_base_model(const ToyModelConfig& config, std::uint64_t seed) {
    validate_config(config);
    Rng rng(derive_seed(seed, "base-model"));
    const std::size_t d = config.model_dim;
    const double ws = 1.0 / std::sqrt(static_cast<double>(d));
    const double ms = 1.0 / std::sqrt(static_cast<double>(config.mlp_dim));

    BaseModel m;
    m.config = config;
    m.embedding = gaussian_matrix(config.vocab, d, 1.0, rng);
    m.pos = gaussian_matrix(config.seq_len, d, 1.0, rng);
    for (std::size_t b = 0; b < config.blocks; ++b) {
        BlockWeights blk;
        blk.wq = gaussian_matrix(d, d, ws, rng);
        blk.wk = gaussian_matrix(d, d, ws, rng);
        blk.wv = gaussian_matrix(d, d, ws, rng);
        blk.wo = gaussian_matrix(d, d, ws, rng);
        blk.ln1_g = ones_row(d);
        blk.ln1_b = Matrix(1, d);
        blk.ln2_g = ones_row(d);
        blk.ln2_b = Matrix(1, d);
        blk.w1 = gaussian_matrix(config.mlp_dim, d, ws, rng);
        blk.b1 = Matrix(1, config.mlp_dim);
        blk.w2 = gaussian_matrix(d, config.mlp_dim, ms, rng);
        blk.b2 = Matrix(1, d);
        m.blocks.push_back(std::move(blk));
    }
    m.ln_f_g = ones_row(d);
    m.ln_f_b = Matrix(1, d);
    m.w_head = gaussian_matrix(config.head_out, d, ws, rng);
    m.b_head = Matrix(1, config.head_out);
    return m;
}

void save_base_model(const BaseModel& model, const std::filesystem::path& dir) {
    std::vector<store::NamedTensor> tensors;
    auto put = [&](const std::string& name, const Matrix& v) {
        tensors.push_back({"base/" + name + "/W", v});
    };
    put("embedding", model.embedding);
    put("pos", model.pos);
    for (std::size_t b = 0; b < model.blocks.size(); ++b) {
        const auto& blk = model.blocks[b];
        std::string p = strfmt("blk%zu.", b);
        put(p + "wq", blk.wq);
        put(p + "wk", blk.wk);
        put(p + "wv", blk.wv);
        put(p + "wo", blk.wo);
        put(p + "ln1_g", blk.ln1_g);
        put(p + "ln1_b", blk.ln1_b);
        put(p + "ln2_g", blk.ln2_g);
        put(p + "ln2_b", blk.ln2_b);
        put(p + "w1", blk.w1);
        put(p + "b1", blk.b1);
        put(p + "w2", blk.w2);
        put(p + "b2", blk.b2);
    }
    put("ln_f_g", model.ln_f_g);
    put("ln_f_b", model.ln_f_b);
    put("w_head", model.w_head);
    put("b_head", model.b_head);
    store::save_tensors(dir, tensors);

    std::ofstream cfg(dir / "config");
    const auto& c = model.config;
    cfg << "blocks = " << c.blocks << "\n";
    cfg << "model_dim = " << c.model_dim << "\n";
    cfg << "heads = " << c.heads << "\n";
    cfg << "mlp_dim = " << c.mlp_dim << "\n";
    cfg << "seq_len = " << c.seq_len << "\n";
    cfg << "lora_rank = " << c.lora_rank << "\n";
    cfg << "vocab = " << c.vocab << "\n";
    cfg << "head_out = " << c.head_out << "\n";
    cfg << "head = " << (c.head == HeadKind::classification ? "classification" : "regression")
        << "\n";
    std::string targets;
    for (Proj p : c.lora_targets) targets += proj_name(p);
    cfg << "lora_targets = " << targets << "\n";
}

BaseModel load_base_model(const std::filesystem::path& dir) {
    std::ifstream cfg(dir / "config");
    if (!cfg) throw store::io_error(store::IoErrorKind::MissingFile, "missing model config file");
    ToyModelConfig c;
    std::string line;
    std::map<std::string, std::string> kv;
    while (std::getline(cfg, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            auto b = s.find_first_not_of(" \t\r");
            auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    c.blocks = std::stoull(kv.at("blocks"));
    c.model_dim = std::stoull(kv.at("model_dim"));
    c.heads = std::stoull(kv.at("heads"));
    c.mlp_dim = std::stoull(kv.at("mlp_dim"));
    c.seq_len = std::stoull(kv.at("seq_len"));
    c.lora_rank = std::stoull(kv.at("lora_rank"));
    c.vocab = std::stoull(kv.at("vocab"));
    c.head_out = std::stoull(kv.at("head_out"));
    c.head = kv.at("head") == "regression" ? HeadKind::regression : HeadKind::classification;
    c.lora_targets.clear();
    for (char ch : kv.at("lora_targets")) {
        switch (ch) {
            case 'q': c.lora_targets.push_back(Proj::q); break;
            case 'k': c.lora_targets.push_back(Proj::k); break;
            case 'v': c.lora_targets.push_back(Proj::v); break;
            case 'o': c.lora_targets.push_back(Proj::o); break;
            default: throw std::runtime_error("bad lora_targets in model config");
        }
    }
    validate_config(c);

    auto tensors = store::load_tensors(dir);
    std::map<std::string, Matrix> by_name;
    for (auto& t : tensors) {
        auto first = t.name.find('/');
        auto last = t.name.rfind('/');
        if (first == std::string::npos || first == last)
            throw store::io_error(store::IoErrorKind::BadTensorName, "bad tensor name " + t.name);
        by_name.emplace(t.name.substr(first + 1, last - first - 1), std::move(t.value));
    }
    auto take = [&](const std::string& name) -> Matrix {
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw store::io_error(store::IoErrorKind::CountMismatch, "model tensor missing: " + name);
        return std::move(it->second);
    };

    BaseModel m;
    m.config = c;
    m.embedding = take("embedding");
    m.pos = take("pos");
    for (std::size_t b = 0; b < c.blocks; ++b) {
        std::string p = strfmt("blk%zu.", b);
        BlockWeights blk;
        blk.wq = take(p + "wq");
        blk.wk = take(p + "wk");
        blk.wv = take(p + "wv");
        blk.wo = take(p + "wo");
        blk.ln1_g = take(p + "ln1_g");
        blk.ln1_b = take(p + "ln1_b");
        blk.ln2_g = take(p + "ln2_g");
        blk.ln2_b = take(p + "ln2_b");
        blk.w1 = take(p + "w1");
        blk.b1 = take(p + "b1");
        blk.w2 = take(p + "w2");
        blk.b2 = take(p + "b2");
        m.blocks.push_back(std::move(blk));
    }
    m.ln_f_g = take("ln_f_g");
    m.ln_f_b = take("ln_f_b");
    m.w_head = take("w_head");
    m.b_head = take("b_head");
    return m;
}

namespace {

Matrix embed_batch(const BaseModel& model, const Batch& batch) {
    const auto& c = model.config;
    const std::size_t bs = batch.tokens.size();
    if (bs == 0) throw std::invalid_argument("forward: empty batch");
    Matrix x(bs * c.seq_len, c.model_dim);
    for (std::size_t b = 0; b < bs; ++b) {
        if (batch.tokens[b].size() != c.seq_len)
            throw std::invalid_argument(strfmt("forward: sample %zu has %zu tokens, expected %zu", b,
                                               batch.tokens[b].size(), c.seq_len));
        for (std::size_t t = 0; t < c.seq_len; ++t) {
            int tok = batch.tokens[b][t];
            if (tok < 0 || static_cast<std::size_t>(tok) >= c.vocab)
                throw std::invalid_argument(strfmt("forward: token %d out of vocab", tok));
            for (std::size_t j = 0; j < c.model_dim; ++j)
                x.at(b * c.seq_len + t, j) =
                    model.embedding.at(static_cast<std::size_t>(tok), j) + model.pos.at(t, j);
        }
    }
    return x;
}

struct NetGraph {
    Tape::Var output = 0;
    std::map<std::string, Tape::Var> layer_inputs;  // z vars per projection layer id
};

// The shared network body: pre-norm blocks with bias-free q/k/v/o
// projections (supplied as tape vars so callers decide what is learnable),
// GELU MLP, final layer norm, mean pooling, linear head.
NetGraph run_net(Tape& tape, const BaseModel& model,
                 const std::map<std::string, Tape::Var>& weights, const Batch& batch) {
    const auto& c = model.config;
    const std::size_t bs = batch.tokens.size();

    NetGraph g;
    Tape::Var x = tape.leaf(embed_batch(model, batch), false);
    for (std::size_t b = 0; b < c.blocks; ++b) {
        const auto& blk = model.blocks[b];
        Tape::Var ln1 = tape.layer_norm(x, blk.ln1_g, blk.ln1_b);
        g.layer_inputs[BaseModel::layer_id(b, Proj::q)] = ln1;
        g.layer_inputs[BaseModel::layer_id(b, Proj::k)] = ln1;
        g.layer_inputs[BaseModel::layer_id(b, Proj::v)] = ln1;
        Tape::Var q = tape.matmul_nt(ln1, weights.at(BaseModel::layer_id(b, Proj::q)));
        Tape::Var k = tape.matmul_nt(ln1, weights.at(BaseModel::layer_id(b, Proj::k)));
        Tape::Var v = tape.matmul_nt(ln1, weights.at(BaseModel::layer_id(b, Proj::v)));
        Tape::Var attn = tape.attention(q, k, v, bs, c.seq_len, c.heads);
        g.layer_inputs[BaseModel::layer_id(b, Proj::o)] = attn;
        Tape::Var proj = tape.matmul_nt(attn, weights.at(BaseModel::layer_id(b, Proj::o)));
        x = tape.add(x, proj);

        Tape::Var ln2 = tape.layer_norm(x, blk.ln2_g, blk.ln2_b);
        Tape::Var h = tape.add_row_const(tape.matmul_nt(ln2, tape.leaf(blk.w1, false)), blk.b1);
        Tape::Var act = tape.gelu(h);
        Tape::Var mlp = tape.add_row_const(tape.matmul_nt(act, tape.leaf(blk.w2, false)), blk.b2);
        x = tape.add(x, mlp);
    }
    Tape::Var lnf = tape.layer_norm(x, model.ln_f_g, model.ln_f_b);
    Tape::Var pooled = tape.mean_pool(lnf, bs, c.seq_len);
    g.output =
        tape.add_row_const(tape.matmul_nt(pooled, tape.leaf(model.w_head, false)), model.b_head);
    return g;
}

// canonical task order, so results do not depend on how the caller
// happened to arrange the vector
std::vector<const lora::AdapterSet*> sorted_sets(const std::vector<lora::AdapterSet>& sets) {
    std::vector<const lora::AdapterSet*> out;
    out.reserve(sets.size());
    for (const auto& s : sets) out.push_back(&s);
    std::sort(out.begin(), out.end(),
              [](const lora::AdapterSet* a, const lora::AdapterSet* b) {
                  return a->task_id < b->task_id;
              });
    for (std::size_t i = 1; i < out.size(); ++i)
        if (out[i]->task_id == out[i - 1]->task_id)
            throw std::invalid_argument("duplicate task id: " + out[i]->task_id);
    return out;
}

const Matrix& base_weight(const BaseModel& model, std::size_t block, Proj p) {
    const auto& blk = model.blocks[block];
    switch (p) {
        case Proj::q: return blk.wq;
        case Proj::k: return blk.wk;
        case Proj::v: return blk.wv;
        case Proj::o: return blk.wo;
    }
    throw std::logic_error("unreachable");
}

constexpr Proj kAllProjs[] = {Proj::q, Proj::k, Proj::v, Proj::o};

ForwardResult run_value_forward(const BaseModel& model,
                                const std::map<std::string, Matrix>& effective_overrides,
                                const Batch& batch, bool capture_trace) {
    Tape tape;
    std::map<std::string, Tape::Var> weights;
    for (std::size_t b = 0; b < model.config.blocks; ++b) {
        for (Proj p : kAllProjs) {
            std::string id = BaseModel::layer_id(b, p);
            auto it = effective_overrides.find(id);
            weights[id] =
                tape.leaf(it != effective_overrides.end() ? it->second : base_weight(model, b, p),
                          false);
        }
    }
    NetGraph g = run_net(tape, model, weights, batch);
    ForwardResult result;
    result.outputs = tape.value(g.output);
    if (capture_trace) {
        for (const auto& id : model.lora_layer_ids())
            result.trace.samples[id] = tape.value(g.layer_inputs.at(id));
    }
    return result;
}

}  // namespace

ForwardResult forward(const BaseModel& model, const std::vector<lora::AdapterSet>& sets,
                      const lora::MergeCoefficients& coeffs, const Batch& batch,
                      bool capture_trace) {
    std::map<std::string, Matrix> overrides;
    if (!sets.empty()) {
        auto ordered = sorted_sets(sets);
        for (const auto& id : model.lora_layer_ids()) {
            Matrix w = Matrix();
            for (const auto* set_ptr : ordered) {
                const auto& set = *set_ptr;
                double lam = coeffs.at(set.task_id, id);
                if (lam == 0.0) continue;  // keeps the all-zero case bit-exact
                const auto& ad = set.at(id);
                if (w.empty()) {
                    // materialize lazily so untouched layers reuse the base weight
                    std::size_t blk = 0;
                    Proj p{};
                    // layer ids are "blk<i>.<p>"
                    std::sscanf(id.c_str(), "blk%zu", &blk);
                    char pc = id.back();
                    p = pc == 'q' ? Proj::q : pc == 'k' ? Proj::k : pc == 'v' ? Proj::v : Proj::o;
                    w = base_weight(model, blk, p);
                }
                Matrix d = lora::delta(ad);
                if (!w.same_shape(d))
                    throw std::runtime_error(strfmt("forward: delta at %s is %s, weight is %s",
                                                    id.c_str(), shape_str(d).c_str(),
                                                    shape_str(w).c_str()));
                linalg::axpy(w, lam, d);
            }
            if (!w.empty()) overrides[id] = std::move(w);
        }
    }
    return run_value_forward(model, overrides, batch, capture_trace);
}

ForwardResult forward_base(const BaseModel& model, const Batch& batch, bool capture_trace) {
    return run_value_forward(model, {}, batch, capture_trace);
}

ForwardResult forward_dense(const BaseModel& model, const std::map<std::string, Matrix>& deltas,
                            const Batch& batch, bool capture_trace) {
    std::map<std::string, Matrix> overrides;
    for (const auto& [id, delta] : deltas) {
        std::size_t blk = 0;
        if (std::sscanf(id.c_str(), "blk%zu", &blk) != 1 || blk >= model.config.blocks)
            throw std::invalid_argument("forward_dense: unknown layer id " + id);
        char pc = id.back();
        Proj p = pc == 'q' ? Proj::q : pc == 'k' ? Proj::k : pc == 'v' ? Proj::v : Proj::o;
        Matrix w = base_weight(model, blk, p);
        if (!w.same_shape(delta))
            throw std::invalid_argument(strfmt("forward_dense: delta at %s is %s, weight is %s",
                                               id.c_str(), shape_str(delta).c_str(),
                                               shape_str(w).c_str()));
        linalg::axpy(w, 1.0, delta);
        overrides[id] = std::move(w);
    }
    return run_value_forward(model, overrides, batch, capture_trace);
}

namespace {

struct CoeffGraph {
    Tape tape;
    Tape::Var objective = 0;
    std::map<std::string, std::map<std::string, Tape::Var>> lambdas;  // task -> layer -> var
};

CoeffGraph build_coeff_graph(const BaseModel& model, const std::vector<lora::AdapterSet>& sets,
                             const lora::MergeCoefficients& coeffs, const TaskBatches& batches,
                             const Objective& objective) {
    if (sets.empty()) throw std::invalid_argument("coefficient graph: no adapter sets");
    if (objective.kind == ObjectiveKind::null_ratio && objective.nsc == nullptr)
        throw std::invalid_argument("coefficient graph: null-ratio objective needs contexts");
    if (objective.kind == ObjectiveKind::entropy &&
        model.config.head != HeadKind::classification)
        throw std::invalid_argument("entropy objective requires a classification head");
    for (const auto& set : sets)
        if (!batches.per_task.count(set.task_id))
            throw std::invalid_argument("no batch for task " + set.task_id);

    CoeffGraph g;
    auto layer_ids = model.lora_layer_ids();
    auto ordered = sorted_sets(sets);

    for (const auto* set : ordered)
        for (const auto& id : layer_ids)
            g.lambdas[set->task_id][id] = g.tape.scalar_leaf(coeffs.at(set->task_id, id), true);

    // effective weights shared by every task's forward pass
    std::map<std::string, Tape::Var> weights;
    std::set<std::string> lora_set(layer_ids.begin(), layer_ids.end());
    for (std::size_t b = 0; b < model.config.blocks; ++b) {
        for (Proj p : kAllProjs) {
            std::string id = BaseModel::layer_id(b, p);
            Tape::Var w = g.tape.leaf(base_weight(model, b, p), false);
            if (lora_set.count(id)) {
                for (const auto* set : ordered)
                    w = g.tape.add_scaled(w, g.lambdas.at(set->task_id).at(id),
                                          lora::delta(set->at(id)));
            }
            weights[id] = w;
        }
    }

    std::vector<Tape::Var> task_terms;
    const double task_weight = 1.0 / static_cast<double>(sets.size());
    for (const auto* set_ptr : ordered) {
        const auto& set = *set_ptr;
        const Batch& batch = batches.per_task.at(set.task_id);
        NetGraph net = run_net(g.tape, model, weights, batch);
        if (objective.kind == ObjectiveKind::entropy) {
            task_terms.push_back(g.tape.mean_entropy(net.output));
        } else {
            const auto& task_ctx = objective.nsc->contexts.at(set.task_id);
            std::vector<Tape::Var> layer_means;
            std::vector<double> layer_weights;
            for (const auto& layer : objective.nsc->target_layers) {
                const auto& ctx = task_ctx.at(layer);
                Tape::Var omega =
                    g.tape.null_ratio_batch(net.layer_inputs.at(layer), ctx.a, ctx.gram_inv);
                layer_means.push_back(g.tape.mean_vector(omega));
                layer_weights.push_back(1.0 / static_cast<double>(objective.nsc->target_layers.size()));
            }
            task_terms.push_back(g.tape.combine(layer_means, layer_weights));
        }
    }
    std::vector<double> tw(task_terms.size(), task_weight);
    g.objective = g.tape.combine(task_terms, tw);
    if (objective.scale != 1.0) g.objective = g.tape.scale_const(g.objective, objective.scale);
    return g;
}

}  // namespace

CoeffGradResult grad_wrt_coeffs(const BaseModel& model, const std::vector<lora::AdapterSet>& sets,
                                const lora::MergeCoefficients& coeffs, const TaskBatches& batches,
                                const Objective& objective) {
    CoeffGraph g = build_coeff_graph(model, sets, coeffs, batches, objective);
    g.tape.backward(g.objective);
    CoeffGradResult out;
    out.value = g.tape.scalar(g.objective);
    for (const auto& [task, row] : g.lambdas) {
        for (const auto& [layer, var] : row) {
            double gv = g.tape.grad(var).data[0];
            if (!std::isfinite(gv))
                throw std::runtime_error(strfmt("non-finite coefficient gradient at (%s, %s)",
                                                task.c_str(), layer.c_str()));
            out.grad[task][layer] = gv;
        }
    }
    if (!std::isfinite(out.value)) throw std::runtime_error("non-finite objective value");
    return out;
}

double objective_value(const BaseModel& model, const std::vector<lora::AdapterSet>& sets,
                       const lora::MergeCoefficients& coeffs, const TaskBatches& batches,
                       const Objective& objective) {
    CoeffGraph g = build_coeff_graph(model, sets, coeffs, batches, objective);
    return g.tape.scalar(g.objective);
}

namespace {

Matrix slice_rows(const Matrix& m, const std::vector<std::size_t>& idx) {
    Matrix out(idx.size(), m.cols);
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < m.cols; ++j) out.at(i, j) = m.at(idx[i], j);
    return out;
}

}  // namespace

TrainResult train_lora(const BaseModel& model, const TaskData& task, const std::string& task_id,
                       const TrainOptions& options, std::uint64_t seed) {
    const auto& c = model.config;
    if (task.inputs.empty()) throw std::invalid_argument("train_lora: empty training split");
    if (task.kind == HeadKind::regression && task.targets.cols != c.head_out)
        throw std::invalid_argument(strfmt("train_lora: regression targets are %zu wide, head is %zu",
                                           task.targets.cols, c.head_out));

    auto layer_ids = model.lora_layer_ids();
    Rng rng(derive_seed(seed, "train/" + task_id));

    // standard LoRA init: zero up-projection, small Gaussian down-projection
    std::map<std::string, Matrix> b_params, a_params;
    for (const auto& id : layer_ids) {
        b_params[id] = Matrix(c.model_dim, c.lora_rank);
        a_params[id] =
            gaussian_matrix(c.lora_rank, c.model_dim, 1.0 / std::sqrt(double(c.model_dim)), rng);
        linalg::gram_inverse(a_params[id]);  // init must not be singular
    }

    std::size_t param_count = 0;
    for (const auto& id : layer_ids)
        param_count += b_params[id].size() + a_params[id].size();
    AdamW adam;
    adam.lr = options.lr;
    adam.weight_decay = options.weight_decay;
    adam.init(param_count);

    auto current_adapters = [&]() {
        lora::AdapterSet set;
        set.task_id = task_id;
        for (const auto& id : layer_ids)
            set.adapters.emplace(id, lora::make_adapter(id, b_params.at(id), a_params.at(id)));
        return set;
    };

    // fixed validation probe for the history stats
    std::size_t probe_n = std::min(options.probe_size, task.val_inputs.size());
    if (probe_n == 0) probe_n = std::min(options.probe_size, task.inputs.size());
    Batch probe;
    std::vector<int> probe_labels;
    Matrix probe_targets(probe_n, task.kind == HeadKind::regression ? c.head_out : 1);
    const bool probe_from_val = !task.val_inputs.empty();
    for (std::size_t i = 0; i < probe_n; ++i) {
        probe.tokens.push_back(probe_from_val ? task.val_inputs[i] : task.inputs[i]);
        if (task.kind == HeadKind::classification) {
            probe_labels.push_back(probe_from_val ? task.val_labels[i] : task.labels[i]);
        } else {
            const Matrix& src = probe_from_val ? task.val_targets : task.targets;
            for (std::size_t j = 0; j < c.head_out; ++j) probe_targets.at(i, j) = src.at(i, j);
        }
    }

    auto probe_stats = [&]() -> EpochStats {
        auto set = current_adapters();
        lora::MergeCoefficients one = lora::MergeCoefficients::constant({task_id}, layer_ids, 1.0);
        auto fw = forward(model, {set}, one, probe, true);
        EpochStats s{};
        if (task.kind == HeadKind::classification) {
            s.loss = stats::cross_entropy_loss(fw.outputs, probe_labels);
            s.metric = stats::accuracy(fw.outputs, probe_labels);
        } else {
            s.loss = stats::mse_loss(fw.outputs, probe_targets);
            s.metric = stats::rmse(fw.outputs, probe_targets);
        }
        std::map<std::string, nullspace::NullRatioContext> contexts;
        for (const auto& id : layer_ids) {
            contexts.emplace(id, nullspace::NullRatioContext{
                                     id, a_params.at(id), linalg::gram_inverse(a_params.at(id))});
        }
        std::set<std::string> all_layers(layer_ids.begin(), layer_ids.end());
        s.mean_omega = nullspace::mean_null_ratio(fw.trace, contexts, all_layers).overall;
        return s;
    };

    TrainResult result;
    result.history.push_back(probe_stats());

    std::vector<std::size_t> order(task.inputs.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        rng.shuffle(order);
        bool diverged = false;
        for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
            std::size_t end = std::min(order.size(), start + options.batch_size);
            std::vector<std::size_t> idx(order.begin() + start, order.begin() + end);

            Batch batch;
            std::vector<int> labels;
            for (std::size_t i : idx) batch.tokens.push_back(task.inputs[i]);
            if (task.kind == HeadKind::classification)
                for (std::size_t i : idx) labels.push_back(task.labels[i]);

            Tape tape;
            std::map<std::string, Tape::Var> weights;
            std::map<std::string, std::pair<Tape::Var, Tape::Var>> lora_vars;  // (B, A)
            std::set<std::string> lora_set(layer_ids.begin(), layer_ids.end());
            for (std::size_t b = 0; b < c.blocks; ++b) {
                for (Proj p : kAllProjs) {
                    std::string id = BaseModel::layer_id(b, p);
                    Tape::Var w0 = tape.leaf(base_weight(model, b, p), false);
                    if (lora_set.count(id)) {
                        Tape::Var bv = tape.leaf(b_params.at(id), true);
                        Tape::Var av = tape.leaf(a_params.at(id), true);
                        lora_vars[id] = {bv, av};
                        weights[id] = tape.add(w0, tape.matmul(bv, av));
                    } else {
                        weights[id] = w0;
                    }
                }
            }
            NetGraph net = run_net(tape, model, weights, batch);
            Tape::Var loss;
            if (task.kind == HeadKind::classification) {
                loss = tape.cross_entropy(net.output, labels);
            } else {
                loss = tape.mse(net.output, slice_rows(task.targets, idx));
            }
            double loss_val = tape.scalar(loss);
            if (!std::isfinite(loss_val) || loss_val > 1e6) {
                diverged = true;
                break;
            }
            tape.backward(loss);

            std::vector<double> flat_p, flat_g;
            flat_p.reserve(param_count);
            flat_g.reserve(param_count);
            for (const auto& id : layer_ids) {
                const auto& [bv, av] = lora_vars.at(id);
                const Matrix& gb = tape.grad(bv);
                const Matrix& ga = tape.grad(av);
                flat_p.insert(flat_p.end(), b_params[id].data.begin(), b_params[id].data.end());
                flat_p.insert(flat_p.end(), a_params[id].data.begin(), a_params[id].data.end());
                flat_g.insert(flat_g.end(), gb.data.begin(), gb.data.end());
                flat_g.insert(flat_g.end(), ga.data.begin(), ga.data.end());
            }
            adam.step(flat_p, flat_g);
            std::size_t off = 0;
            for (const auto& id : layer_ids) {
                auto& bp = b_params[id];
                std::copy(flat_p.begin() + off, flat_p.begin() + off + bp.size(), bp.data.begin());
                off += bp.size();
                auto& ap = a_params[id];
                std::copy(flat_p.begin() + off, flat_p.begin() + off + ap.size(), ap.data.begin());
                off += ap.size();
            }
        }
        if (diverged) {
            result.diverged = true;
            break;
        }
        result.history.push_back(probe_stats());
    }

    result.adapters = current_adapters();
    return result;
}

}  // namespace nsc::toynet
