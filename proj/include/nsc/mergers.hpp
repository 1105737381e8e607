#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "nsc/adapters.hpp"
#include "nsc/config.hpp"
#include "nsc/matrix.hpp"

namespace nsc::mergers {

enum class Method { ta, ties, dare_ties, svd, linear, knots_ties, adamerging, nsc };

const char* method_name(Method m);
Method method_from_name(const std::string& name);

struct MergeSpec {
    Method method = Method::ta;
    double scale = 1.0;               // global merge scale lambda
    double ties_keep_fraction = 0.20;  // top fraction kept by magnitude
    double dare_drop_prob = 0.9;
    std::size_t svd_rank = 0;  // 0 = match the largest input rank at each layer
    std::uint64_t seed = 0;    // stochastic masks

    void validate() const;
};

MergeSpec parse_merge_spec(const config::KV& kv);

// scale * sum of task deltas
Matrix ta_merge(const std::vector<Matrix>& deltas, double scale);

// Trim each task's tensor to its top keep_fraction coordinates by
// magnitude, elect per-coordinate signs from the retained sums, and average
// the retained values that agree with the elected sign.
Matrix ties_merge(const std::vector<Matrix>& deltas, double scale, double keep_fraction);

// Bernoulli keep-mask with probability 1-p, kept entries rescaled by
// 1/(1-p). Reproducible per seed.
Matrix dare_sparsify(const Matrix& delta, double drop_prob, std::uint64_t seed);

// Truncated SVD of the scaled delta sum, refactored into LoRA form:
// returns (b, a) with b = U_r diag(s_r), a = Vt_r.
std::pair<Matrix, Matrix> svd_merge(const std::vector<Matrix>& deltas, double scale,
                                    std::size_t target_rank);

// Factor-space merge: concatenated factors scaled by sqrt(|lambda|), the
// sign carried on the b side, so b'a' = sum_k lambda_k b_k a_k exactly.
lora::LoraAdapter linear_merge(const std::vector<lora::LoraAdapter>& adapters,
                               const std::vector<double>& coeffs);

// Stack deltas along the output dimension, SVD to a shared right-singular
// basis, TIES-merge the per-task coefficient blocks, recompose.
Matrix knots_ties_merge(const std::vector<Matrix>& deltas, double scale, double keep_fraction);

// Coarse 0.1-step sweep over [0, 1.5], then a 0.01-step sweep around the
// best point; picks the scale minimizing the supplied validation loss.
double grid_search_scale(const std::function<double(double)>& val_loss);

}  // namespace nsc::mergers
