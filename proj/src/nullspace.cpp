#include "nsc/nullspace.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "nsc/linalg.hpp"
#include "nsc/strfmt.hpp"

namespace nsc::nullspace {

using linalg::dot;

namespace {

constexpr double kRankTol = 1e-12;  // sigma_min <= tol * sigma_max counts as rank deficient

std::vector<double> matvec(const Matrix& m, std::span<const double> x) {
    std::vector<double> y(m.rows, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) y[i] = dot(m.row(i), x);
    return y;
}

std::vector<double> matvec_t(const Matrix& m, std::span<const double> x) {
    std::vector<double> y(m.cols, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        const double* row = m.data.data() + i * m.cols;
        for (std::size_t j = 0; j < m.cols; ++j) y[j] += xi * row[j];
    }
    return y;
}

}  // namespace

NullRatioContext make_context(const lora::LoraAdapter& adapter, double jitter) {
    return NullRatioContext{adapter.layer_id, adapter.a, linalg::gram_inverse(adapter.a, jitter)};
}

double null_ratio_oracle(const Matrix& a, std::span<const double> z) {
    if (a.empty()) throw std::invalid_argument("null_ratio_oracle: empty factor");
    if (z.size() != a.cols)
        throw std::invalid_argument(strfmt("null_ratio_oracle: z has %zu entries, a is %s", z.size(),
                                           shape_str(a).c_str()));
    double zn = linalg::norm2(z);
    if (zn == 0.0) throw std::invalid_argument("null_ratio_oracle: zero-norm activation");
    if (a.rows > a.cols)
        throw std::invalid_argument("null_ratio_oracle: factor has more rows than columns");

    auto svd = linalg::svd(a);
    if (svd.s.front() == 0.0 || svd.s.back() <= kRankTol * svd.s.front())
        throw std::invalid_argument("null_ratio_oracle: factor is rank deficient");

    if (a.rows == a.cols) return 0.0;  // square full-rank factor has an empty null space

    // rows of vt span the row space; the complement spans the null space
    Matrix row_basis = linalg::transpose(svd.vt);              // d x r
    Matrix null_basis = linalg::orthonormal_complement(row_basis);  // d x (d - r)
    double acc = 0.0;
    for (std::size_t j = 0; j < null_basis.cols; ++j) {
        double c = 0.0;
        for (std::size_t i = 0; i < null_basis.rows; ++i) c += null_basis.at(i, j) * z[i];
        acc += c * c;
    }
    return std::min(1.0, std::sqrt(acc) / zn);
}

double null_ratio_fast(const NullRatioContext& ctx, std::span<const double> z) {
    if (z.size() != ctx.a.cols)
        throw std::invalid_argument(strfmt("null_ratio_fast: z has %zu entries, a is %s", z.size(),
                                           shape_str(ctx.a).c_str()));
    double n2 = dot(z, z);
    if (n2 == 0.0) return 1.0;

    std::vector<double> y = matvec(ctx.a, z);
    std::vector<double> w = matvec(ctx.gram_inv, y);
    std::vector<double> proj = matvec_t(ctx.a, w);
    double r2 = 0.0;
    for (std::size_t i = 0; i < proj.size(); ++i) {
        double d = z[i] - proj[i];
        r2 += d * d;
    }
    return std::clamp(std::sqrt(r2 / n2), 0.0, 1.0);
}

RatioReport mean_null_ratio(const ActivationTrace& traces,
                            const std::map<std::string, NullRatioContext>& contexts,
                            const std::set<std::string>& target_layers) {
    if (target_layers.empty()) throw std::invalid_argument("mean_null_ratio: empty target layer set");

    RatioReport report;
    std::vector<double> layer_means;
    for (const auto& layer : target_layers) {
        auto t = traces.samples.find(layer);
        if (t == traces.samples.end())
            throw std::invalid_argument("mean_null_ratio: no trace for layer '" + layer + "'");
        auto c = contexts.find(layer);
        if (c == contexts.end())
            throw std::invalid_argument("mean_null_ratio: no context for layer '" + layer + "'");
        const Matrix& batch = t->second;
        if (batch.rows == 0)
            throw std::invalid_argument("mean_null_ratio: empty batch at layer '" + layer + "'");

        std::vector<double> omegas(batch.rows);
        for (std::size_t i = 0; i < batch.rows; ++i) {
            auto z = batch.row(i);
            if (dot(z, z) == 0.0) {
                omegas[i] = 1.0;
                ++report.zero_norm_samples;
            } else {
                omegas[i] = null_ratio_fast(c->second, z);
            }
        }
        double mean = linalg::pairwise_sum(omegas) / static_cast<double>(omegas.size());
        report.per_layer[layer] = mean;
        report.batch_sizes[layer] = batch.rows;
        layer_means.push_back(mean);
    }
    report.overall = linalg::pairwise_sum(layer_means) / static_cast<double>(layer_means.size());
    return report;
}

void write_ratio_csv(const RatioReport& report, std::ostream& out) {
    out << "layer_id,mean_omega,batch_size\n";
    std::size_t total = 0;
    for (const auto& [layer, mean] : report.per_layer) {
        std::size_t n = report.batch_sizes.at(layer);
        total += n;
        out << layer << "," << strfmt("%.12g", mean) << "," << n << "\n";
    }
    out << "overall," << strfmt("%.12g", report.overall) << "," << total << "\n";
}

BoundCheck check_adapter_bound(const lora::LoraAdapter& adapter, std::span<const double> z) {
    double zn = linalg::norm2(z);
    if (zn == 0.0) throw std::invalid_argument("check_adapter_bound: zero-norm activation");

    auto svd_b = linalg::svd(adapter.b);
    auto svd_a = linalg::svd(adapter.a);
    double smin_b = svd_b.s.back(), smax_b = svd_b.s.front();
    double smin_a = svd_a.s.back(), smax_a = svd_a.s.front();
    if (smax_b == 0.0 || smin_b <= kRankTol * smax_b)
        throw std::runtime_error("check_adapter_bound: up-projection is rank deficient, bound vacuous");
    if (smax_a == 0.0 || smin_a <= kRankTol * smax_a)
        throw std::runtime_error("check_adapter_bound: down-projection is rank deficient, bound vacuous");

    auto ctx = make_context(adapter, 0.0);
    double omega = null_ratio_fast(ctx, z);

    std::vector<double> az = matvec(adapter.a, z);
    std::vector<double> baz = matvec(adapter.b, az);
    double lhs = linalg::norm2(baz);
    double rhs = smin_b * smin_a * std::sqrt(std::max(0.0, 1.0 - omega * omega)) * zn;
    return BoundCheck{lhs, rhs, lhs >= rhs - 1e-9};
}

}  // namespace nsc::nullspace
