#include "nsc/mergers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "nsc/linalg.hpp"
#include "nsc/rng.hpp"
#include "nsc/strfmt.hpp"

namespace nsc::mergers {

const char* method_name(Method m) {
    switch (m) {
        case Method::ta: return "ta";
        case Method::ties: return "ties";
        case Method::dare_ties: return "dare-ties";
        case Method::svd: return "svd";
        case Method::linear: return "linear";
        case Method::knots_ties: return "knots-ties";
        case Method::adamerging: return "adamerging";
        case Method::nsc: return "nsc";
    }
    return "?";
}

Method method_from_name(const std::string& name) {
    for (Method m : {Method::ta, Method::ties, Method::dare_ties, Method::svd, Method::linear,
                     Method::knots_ties, Method::adamerging, Method::nsc})
        if (name == method_name(m)) return m;
    // tolerate underscores from config files
    if (name == "dare_ties") return Method::dare_ties;
    if (name == "knots_ties") return Method::knots_ties;
    throw std::invalid_argument("unknown merge method: '" + name + "'");
}

void MergeSpec::validate() const {
    if (!(ties_keep_fraction > 0.0 && ties_keep_fraction <= 1.0))
        throw std::invalid_argument("MergeSpec: ties_keep_fraction must be in (0, 1]");
    if (!(dare_drop_prob >= 0.0 && dare_drop_prob < 1.0))
        throw std::invalid_argument("MergeSpec: dare_drop_prob must be in [0, 1)");
    if (!std::isfinite(scale)) throw std::invalid_argument("MergeSpec: non-finite scale");
}

MergeSpec parse_merge_spec(const config::KV& kv) {
    MergeSpec spec;
    spec.method = method_from_name(config::get_str(kv, "method", "ta"));
    spec.scale = config::get_f64(kv, "scale", spec.scale);
    spec.ties_keep_fraction = config::get_f64(kv, "ties_keep_fraction", spec.ties_keep_fraction);
    spec.dare_drop_prob = config::get_f64(kv, "dare_drop_prob", spec.dare_drop_prob);
    spec.svd_rank = config::get_u64(kv, "svd_rank", spec.svd_rank);
    spec.seed = config::get_u64(kv, "seed", spec.seed);
    spec.validate();
    return spec;
}

namespace {

void check_equal_shapes(const std::vector<Matrix>& deltas, const char* who) {
    if (deltas.empty()) throw std::invalid_argument(std::string(who) + ": no deltas");
    for (const auto& d : deltas)
        if (!d.same_shape(deltas.front()))
            throw std::invalid_argument(strfmt("%s: delta shapes differ, %s vs %s", who,
                                               shape_str(deltas.front()).c_str(),
                                               shape_str(d).c_str()));
}

// indices of the top-k entries by |value|, magnitude ties broken toward the
// lower index so the selection is deterministic
std::vector<std::size_t> top_k_by_magnitude(const Matrix& m, std::size_t k) {
    std::vector<std::size_t> idx(m.data.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        double ma = std::abs(m.data[a]), mb = std::abs(m.data[b]);
        if (ma != mb) return ma > mb;
        return a < b;
    });
    idx.resize(k);
    return idx;
}

}  // namespace

Matrix ta_merge(const std::vector<Matrix>& deltas, double scale) {
    check_equal_shapes(deltas, "ta_merge");
    Matrix out(deltas.front().rows, deltas.front().cols);
    for (const auto& d : deltas) linalg::axpy(out, 1.0, d);
    return linalg::scale(out, scale);
}

Matrix ties_merge(const std::vector<Matrix>& deltas, double scale, double keep_fraction) {
    check_equal_shapes(deltas, "ties_merge");
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0))
        throw std::invalid_argument("ties_merge: keep_fraction must be in (0, 1]");
    const std::size_t n = deltas.front().data.size();
    const std::size_t k = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(keep_fraction * static_cast<double>(n))), 1, n);

    // trim: keep each task's top-k coordinates (global over the tensor)
    std::vector<Matrix> trimmed;
    trimmed.reserve(deltas.size());
    for (const auto& d : deltas) {
        Matrix t(d.rows, d.cols);
        for (std::size_t i : top_k_by_magnitude(d, k)) t.data[i] = d.data[i];
        trimmed.push_back(std::move(t));
    }

    Matrix out(deltas.front().rows, deltas.front().cols);
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (const auto& t : trimmed) sum += t.data[i];
        if (sum == 0.0) continue;  // no sign consensus (or nothing retained)
        const double elected = sum > 0.0 ? 1.0 : -1.0;
        double acc = 0.0;
        std::size_t count = 0;
        for (const auto& t : trimmed) {
            double v = t.data[i];
            if (v != 0.0 && ((v > 0.0) == (elected > 0.0))) {
                acc += v;
                ++count;
            }
        }
        if (count > 0) out.data[i] = scale * acc / static_cast<double>(count);
    }
    return out;
}

Matrix dare_sparsify(const Matrix& delta, double drop_prob, std::uint64_t seed) {
    if (!(drop_prob >= 0.0 && drop_prob < 1.0))
        throw std::invalid_argument("dare_sparsify: drop_prob must be in [0, 1)");
    const double keep = 1.0 - drop_prob;
    Rng rng(seed);
    Matrix out(delta.rows, delta.cols);
    for (std::size_t i = 0; i < delta.data.size(); ++i) {
        if (rng.uniform() < keep) out.data[i] = delta.data[i] / keep;
    }
    return out;
}

std::pair<Matrix, Matrix> svd_merge(const std::vector<Matrix>& deltas, double scale,
                                    std::size_t target_rank) {
    check_equal_shapes(deltas, "svd_merge");
    const std::size_t max_rank = std::min(deltas.front().rows, deltas.front().cols);
    if (target_rank == 0 || target_rank > max_rank)
        throw std::invalid_argument(strfmt("svd_merge: target rank %zu not in [1, %zu]", target_rank,
                                           max_rank));
    Matrix sum = ta_merge(deltas, scale);
    auto svd = linalg::svd(sum);
    Matrix b(sum.rows, target_rank);
    Matrix a(target_rank, sum.cols);
    for (std::size_t j = 0; j < target_rank; ++j) {
        for (std::size_t i = 0; i < sum.rows; ++i) b.at(i, j) = svd.u.at(i, j) * svd.s[j];
        for (std::size_t i = 0; i < sum.cols; ++i) a.at(j, i) = svd.vt.at(j, i);
    }
    return {std::move(b), std::move(a)};
}

lora::LoraAdapter linear_merge(const std::vector<lora::LoraAdapter>& adapters,
                               const std::vector<double>& coeffs) {
    if (adapters.empty()) throw std::invalid_argument("linear_merge: no adapters");
    if (adapters.size() != coeffs.size())
        throw std::invalid_argument("linear_merge: one coefficient per adapter required");
    const std::size_t d_out = adapters.front().b.rows;
    const std::size_t d_in = adapters.front().a.cols;
    std::size_t total_rank = 0;
    for (const auto& ad : adapters) {
        if (ad.b.rows != d_out || ad.a.cols != d_in)
            throw std::invalid_argument(strfmt("linear_merge: adapter '%s' is %zux%zu, expected %zux%zu",
                                               ad.layer_id.c_str(), ad.b.rows, ad.a.cols, d_out, d_in));
        total_rank += ad.rank;
    }
    if (total_rank > std::min(d_out, d_in))
        throw std::invalid_argument(
            strfmt("linear_merge: concatenated rank %zu exceeds min(%zu, %zu)", total_rank, d_out,
                   d_in));

    Matrix b(d_out, total_rank);
    Matrix a(total_rank, d_in);
    std::size_t col = 0;
    for (std::size_t t = 0; t < adapters.size(); ++t) {
        const auto& ad = adapters[t];
        const double lam = coeffs[t];
        const double root = std::sqrt(std::abs(lam));
        const double b_factor = (lam < 0.0 ? -root : root);  // sign rides on b
        for (std::size_t i = 0; i < d_out; ++i)
            for (std::size_t j = 0; j < ad.rank; ++j) b.at(i, col + j) = b_factor * ad.b.at(i, j);
        for (std::size_t j = 0; j < ad.rank; ++j)
            for (std::size_t i = 0; i < d_in; ++i) a.at(col + j, i) = root * ad.a.at(j, i);
        col += ad.rank;
    }
    return lora::make_adapter(adapters.front().layer_id, std::move(b), std::move(a));
}

Matrix knots_ties_merge(const std::vector<Matrix>& deltas, double scale, double keep_fraction) {
    check_equal_shapes(deltas, "knots_ties_merge");
    const std::size_t k_tasks = deltas.size();
    const std::size_t m = deltas.front().rows, n = deltas.front().cols;

    Matrix stacked(k_tasks * m, n);
    for (std::size_t t = 0; t < k_tasks; ++t)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) stacked.at(t * m + i, j) = deltas[t].at(i, j);

    auto svd = linalg::svd(stacked);
    const std::size_t p = svd.s.size();

    // per-task coefficients in the shared right-singular basis
    std::vector<Matrix> blocks(k_tasks, Matrix(m, p));
    for (std::size_t t = 0; t < k_tasks; ++t)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < p; ++j)
                blocks[t].at(i, j) = svd.u.at(t * m + i, j) * svd.s[j];

    Matrix merged_coeffs = ties_merge(blocks, 1.0, keep_fraction);
    return linalg::scale(linalg::matmul(merged_coeffs, svd.vt), scale);
}

double grid_search_scale(const std::function<double(double)>& val_loss) {
    auto sweep = [&](double lo, double hi, double step) {
        double best_scale = lo, best_loss = val_loss(lo);
        for (double s = lo + step; s <= hi + 1e-12; s += step) {
            double loss = val_loss(s);
            if (loss < best_loss) {  // strict: ties keep the smaller scale
                best_loss = loss;
                best_scale = s;
            }
        }
        return best_scale;
    };
    double coarse = sweep(0.0, 1.5, 0.1);
    double lo = std::max(0.0, coarse - 0.09);
    return sweep(lo, coarse + 0.09, 0.01);
}

}  // namespace nsc::mergers
