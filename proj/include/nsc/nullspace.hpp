#pragma once

#include <map>
#include <ostream>
#include <set>
#include <span>
#include <string>

#include "nsc/adapters.hpp"
#include "nsc/matrix.hpp"
#include "nsc/trace.hpp"

namespace nsc::nullspace {

// Everything needed to evaluate the null-space ratio of one adapter
// without touching a d x d projector: the down-projection and its cached
// Gram inverse. Immutable once built.
struct NullRatioContext {
    std::string layer_id;
    Matrix a;         // r x d
    Matrix gram_inv;  // r x r, (a a^T + jitter I)^-1
};

NullRatioContext make_context(const lora::LoraAdapter& adapter, double jitter);

// Reference path: orthonormal null-space basis from a full SVD of a, then
// the norm of the projection of z onto it. Deliberately materializes the
// basis; used to cross-check the Gram-inverse path.
double null_ratio_oracle(const Matrix& a, std::span<const double> z);

// Gram-inverse path. Returns 1 for a zero-norm z (a zero feature has no
// row-space mass). The ratio is evaluated as |z - A^T G^-1 A z| / |z|,
// which equals sqrt(1 - z^T A^T G^-1 A z / |z|^2) algebraically but does
// not cancel when z sits in the row space.
double null_ratio_fast(const NullRatioContext& ctx, std::span<const double> z);

struct RatioReport {
    std::map<std::string, double> per_layer;             // mean omega per layer
    std::map<std::string, std::size_t> batch_sizes;
    std::size_t zero_norm_samples = 0;                   // diagnostic only
    double overall = 0.0;                                // unweighted mean over layers
};

RatioReport mean_null_ratio(const ActivationTrace& traces,
                            const std::map<std::string, NullRatioContext>& contexts,
                            const std::set<std::string>& target_layers);

void write_ratio_csv(const RatioReport& report, std::ostream& out);

struct BoundCheck {
    double lhs;    // |B A z|
    double rhs;    // sigma_min(B) sigma_min(A) sqrt(1 - omega^2) |z|
    bool holds;    // lhs >= rhs - 1e-9
};

// Lower bound on the adapter's effect for a given activation; both factors
// must be full rank.
BoundCheck check_adapter_bound(const lora::LoraAdapter& adapter, std::span<const double> z);

}  // namespace nsc::nullspace
