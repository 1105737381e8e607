#pragma once

#include <span>
#include <vector>

#include "nsc/matrix.hpp"

namespace nsc::linalg {

struct SvdResult {
    Matrix u;               // m x p, orthonormal columns
    std::vector<double> s;  // p = min(m, n) singular values, descending
    Matrix vt;              // p x n, orthonormal rows
};

// Thin SVD by one-sided Jacobi rotations with a fixed sweep order, so the
// result is bit-reproducible for a given input. Sign convention: the
// largest-magnitude entry of each left-singular vector is non-negative,
// ties broken toward the lower row index. Throws on non-convergence.
SvdResult svd(const Matrix& m);

// (g + jitter*I)^-1 for symmetric positive definite g, via Cholesky.
// Throws if g is not square, not symmetric, or not positive definite
// even after the jitter shift.
Matrix cholesky_inverse(const Matrix& g, double jitter);

// (a a^T + jitter*I)^-1 for a row-major r x d factor with r <= d.
// The result is exactly symmetric.
Matrix gram_inverse(const Matrix& a, double jitter);

// Conditioning policy when the caller has no better idea: scales with the
// mean diagonal mass of the Gram matrix.
double default_gram_jitter(const Matrix& a);
Matrix gram_inverse(const Matrix& a);

Matrix matmul(const Matrix& a, const Matrix& b);     // a * b
Matrix matmul_nt(const Matrix& a, const Matrix& b);  // a * b^T
Matrix matmul_tn(const Matrix& a, const Matrix& b);  // a^T * b
Matrix transpose(const Matrix& m);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& m, double c);
void axpy(Matrix& y, double alpha, const Matrix& x);  // y += alpha * x

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);
double frobenius_norm(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);

// Order-independent up to ~1e-12 drift; used for batch means.
double pairwise_sum(std::span<const double> v);

// Given k orthonormal columns q (d x k), returns d x (d-k) orthonormal
// columns spanning the orthogonal complement, built from Householder
// reflectors. Deterministic.
Matrix orthonormal_complement(const Matrix& q);

}  // namespace nsc::linalg
