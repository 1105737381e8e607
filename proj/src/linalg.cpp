#include "nsc/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "nsc/strfmt.hpp"

namespace nsc::linalg {

namespace {

constexpr double kJacobiTol = 1e-15;  // relative off-diagonal mass per column pair
constexpr int kJacobiMaxSweeps = 100;

double max_abs(const Matrix& m) {
    double v = 0.0;
    for (double x : m.data) v = std::max(v, std::abs(x));
    return v;
}

// One-sided Jacobi on a tall matrix w (rows >= cols). Orthogonalizes the
// columns of w in place, accumulating the rotations in v (cols x cols).
// Fixed (p, q) sweep order keeps the result deterministic. Columns that
// have shrunk to rounding noise (relative to the rotation-invariant
// Frobenius norm) are left alone; they belong to zero singular values and
// rotating them against each other never converges.
void jacobi_orthogonalize(Matrix& w, Matrix& v, std::size_t rows, std::size_t cols) {
    double frob2 = 0.0;
    for (double x : w.data) frob2 += x * x;
    const double zero2 = frob2 * 1.1e-29;  // (~16 eps)^2 * |w|_F^2

    for (int sweep = 0; sweep < kJacobiMaxSweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < cols; ++p) {
            for (std::size_t q = p + 1; q < cols; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < rows; ++i) {
                    double wp = w.at(i, p), wq = w.at(i, q);
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if (alpha <= zero2 || beta <= zero2) continue;
                if (std::abs(gamma) <= kJacobiTol * std::sqrt(alpha * beta)) continue;

                double zeta = (beta - alpha) / (2.0 * gamma);
                double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                           (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double s = c * t;

                for (std::size_t i = 0; i < rows; ++i) {
                    double wp = w.at(i, p), wq = w.at(i, q);
                    w.at(i, p) = c * wp - s * wq;
                    w.at(i, q) = s * wp + c * wq;
                }
                for (std::size_t i = 0; i < cols; ++i) {
                    double vp = v.at(i, p), vq = v.at(i, q);
                    v.at(i, p) = c * vp - s * vq;
                    v.at(i, q) = s * vp + c * vq;
                }
                rotated = true;
            }
        }
        if (!rotated) return;
    }
    throw std::runtime_error(strfmt("svd: Jacobi sweeps did not converge for %zux%zu matrix after %d sweeps",
                                    w.rows, w.cols, kJacobiMaxSweeps));
}

struct CoreSvd {
    Matrix u;               // rows x cols
    std::vector<double> s;  // cols, descending
    Matrix v;               // cols x cols
};

// Thin SVD of a tall matrix (rows >= cols). Zero singular directions get
// their u columns rebuilt from the orthogonal complement so u always has
// orthonormal columns.
CoreSvd svd_tall(const Matrix& m) {
    const std::size_t rows = m.rows, cols = m.cols;
    Matrix w = m;
    Matrix v = Matrix::identity(cols);
    jacobi_orthogonalize(w, v, rows, cols);

    std::vector<double> norms(cols);
    for (std::size_t j = 0; j < cols; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < rows; ++i) acc += w.at(i, j) * w.at(i, j);
        norms[j] = std::sqrt(acc);
    }

    std::vector<std::size_t> order(cols);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });

    double smax = cols ? norms[order[0]] : 0.0;
    double rank_tol = static_cast<double>(std::max(rows, cols)) * 2.220446049250313e-16 * smax;

    CoreSvd out;
    out.u = Matrix(rows, cols);
    out.v = Matrix(cols, cols);
    out.s.resize(cols);
    std::size_t rank = 0;
    for (std::size_t j = 0; j < cols; ++j) {
        std::size_t src = order[j];
        double sv = norms[src];
        for (std::size_t i = 0; i < cols; ++i) out.v.at(i, j) = v.at(i, src);
        if (sv > rank_tol) {
            out.s[j] = sv;
            for (std::size_t i = 0; i < rows; ++i) out.u.at(i, j) = w.at(i, src) / sv;
            rank = j + 1;
        } else {
            out.s[j] = 0.0;
        }
    }

    if (rank < cols) {
        // complete the left factor with orthonormal directions
        Matrix base(rows, rank);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < rank; ++j) base.at(i, j) = out.u.at(i, j);
        Matrix comp = orthonormal_complement(base);
        for (std::size_t j = rank; j < cols; ++j)
            for (std::size_t i = 0; i < rows; ++i) out.u.at(i, j) = comp.at(i, j - rank);
    }
    return out;
}

void apply_sign_convention(Matrix& u, Matrix& vt) {
    for (std::size_t j = 0; j < u.cols; ++j) {
        std::size_t best = 0;
        double best_abs = -1.0;
        for (std::size_t i = 0; i < u.rows; ++i) {
            double a = std::abs(u.at(i, j));
            if (a > best_abs) {  // strict: ties keep the lower row index
                best_abs = a;
                best = i;
            }
        }
        if (u.at(best, j) < 0.0) {
            for (std::size_t i = 0; i < u.rows; ++i) u.at(i, j) = -u.at(i, j);
            for (std::size_t i = 0; i < vt.cols; ++i) vt.at(j, i) = -vt.at(j, i);
        }
    }
}

}  // namespace

SvdResult svd(const Matrix& m) {
    if (m.empty()) throw std::invalid_argument("svd: empty matrix");
    if (!m.all_finite()) throw std::invalid_argument("svd: non-finite entries");

    SvdResult res;
    if (m.rows >= m.cols) {
        CoreSvd core = svd_tall(m);
        res.u = std::move(core.u);
        res.s = std::move(core.s);
        res.vt = transpose(core.v);
    } else {
        CoreSvd core = svd_tall(transpose(m));
        res.u = std::move(core.v);  // (n x p) left factor of m
        res.s = std::move(core.s);
        res.vt = transpose(core.u);
    }
    apply_sign_convention(res.u, res.vt);
    return res;
}

Matrix cholesky_inverse(const Matrix& g, double jitter) {
    if (g.rows != g.cols) {
        throw std::invalid_argument("cholesky_inverse: matrix is " + shape_str(g) + ", not square");
    }
    const std::size_t n = g.rows;
    double sym_tol = 1e-10 * std::max(1.0, max_abs(g));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (std::abs(g.at(i, j) - g.at(j, i)) > sym_tol)
                throw std::invalid_argument(strfmt("cholesky_inverse: asymmetry %.3e at (%zu,%zu)",
                                                   std::abs(g.at(i, j) - g.at(j, i)), i, j));

    // lower-triangular factor of g + jitter*I
    Matrix l(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double diag = g.at(j, j) + jitter;
        for (std::size_t k = 0; k < j; ++k) diag -= l.at(j, k) * l.at(j, k);
        if (!(diag > 0.0) || !std::isfinite(diag)) {
            throw std::runtime_error(strfmt(
                "cholesky_inverse: matrix not positive definite (pivot %zu of %zu, jitter %.3e)",
                j, n, jitter));
        }
        double ljj = std::sqrt(diag);
        l.at(j, j) = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double acc = g.at(i, j);
            for (std::size_t k = 0; k < j; ++k) acc -= l.at(i, k) * l.at(j, k);
            l.at(i, j) = acc / ljj;
        }
    }

    // columns of the inverse: solve L y = e_c, then L^T x = y
    Matrix inv(n, n);
    std::vector<double> y(n), x(n);
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            double acc = (i == c) ? 1.0 : 0.0;
            for (std::size_t k = 0; k < i; ++k) acc -= l.at(i, k) * y[k];
            y[i] = acc / l.at(i, i);
        }
        for (std::size_t ii = n; ii-- > 0;) {
            double acc = y[ii];
            for (std::size_t k = ii + 1; k < n; ++k) acc -= l.at(k, ii) * x[k];
            x[ii] = acc / l.at(ii, ii);
        }
        for (std::size_t i = 0; i < n; ++i) inv.at(i, c) = x[i];
    }

    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double v = 0.5 * (inv.at(i, j) + inv.at(j, i));
            inv.at(i, j) = v;
            inv.at(j, i) = v;
        }
    return inv;
}

Matrix gram_inverse(const Matrix& a, double jitter) {
    if (a.empty()) throw std::invalid_argument("gram_inverse: empty factor");
    if (a.rows > a.cols) {
        throw std::invalid_argument("gram_inverse: factor is " + shape_str(a) +
                                    "; expected r x d with r <= d");
    }
    const std::size_t r = a.rows;
    Matrix g(r, r);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = i; j < r; ++j) {
            double acc = dot(a.row(i), a.row(j));
            g.at(i, j) = acc;
            g.at(j, i) = acc;
        }
    }
    return cholesky_inverse(g, jitter);
}

double default_gram_jitter(const Matrix& a) {
    double trace = 0.0;
    for (std::size_t i = 0; i < a.rows; ++i) trace += dot(a.row(i), a.row(i));
    return 1e-10 * trace / static_cast<double>(a.rows);
}

Matrix gram_inverse(const Matrix& a) { return gram_inverse(a, default_gram_jitter(a)); }

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows)
        throw std::invalid_argument("matmul: " + shape_str(a) + " * " + shape_str(b));
    Matrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.data.data() + i * a.cols;
        double* orow = out.data.data() + i * out.cols;
        for (std::size_t k = 0; k < a.cols; ++k) {
            double aik = arow[k];
            if (aik == 0.0) continue;
            const double* brow = b.data.data() + k * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols)
        throw std::invalid_argument("matmul_nt: " + shape_str(a) + " * " + shape_str(b) + "^T");
    Matrix out(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < b.rows; ++j) out.at(i, j) = dot(a.row(i), b.row(j));
    return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows)
        throw std::invalid_argument("matmul_tn: " + shape_str(a) + "^T * " + shape_str(b));
    Matrix out(a.cols, b.cols);
    for (std::size_t k = 0; k < a.rows; ++k) {
        const double* arow = a.data.data() + k * a.cols;
        const double* brow = b.data.data() + k * b.cols;
        for (std::size_t i = 0; i < a.cols; ++i) {
            double aki = arow[i];
            if (aki == 0.0) continue;
            double* orow = out.data.data() + i * out.cols;
            for (std::size_t j = 0; j < b.cols; ++j) orow[j] += aki * brow[j];
        }
    }
    return out;
}

Matrix transpose(const Matrix& m) {
    Matrix out(m.cols, m.rows);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) out.at(j, i) = m.at(i, j);
    return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("add: shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    Matrix out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] + b.data[i];
    return out;
}

Matrix sub(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("sub: shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    Matrix out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] - b.data[i];
    return out;
}

Matrix scale(const Matrix& m, double c) {
    Matrix out(m.rows, m.cols);
    for (std::size_t i = 0; i < m.data.size(); ++i) out.data[i] = c * m.data[i];
    return out;
}

void axpy(Matrix& y, double alpha, const Matrix& x) {
    if (!y.same_shape(x))
        throw std::invalid_argument("axpy: shape mismatch " + shape_str(y) + " vs " + shape_str(x));
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += alpha * x.data[i];
}

double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double frobenius_norm(const Matrix& m) { return norm2(m.data); }

double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("max_abs_diff: shape mismatch " + shape_str(a) + " vs " +
                                    shape_str(b));
    double v = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) v = std::max(v, std::abs(a.data[i] - b.data[i]));
    return v;
}

double pairwise_sum(std::span<const double> v) {
    if (v.size() <= 32) {
        double acc = 0.0;
        for (double x : v) acc += x;
        return acc;
    }
    std::size_t half = v.size() / 2;
    return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

Matrix orthonormal_complement(const Matrix& q) {
    const std::size_t d = q.rows, k = q.cols;
    if (k > d) throw std::invalid_argument("orthonormal_complement: more columns than rows");
    if (k == 0) return Matrix::identity(d);

    // Householder QR of q; reflectors stored column-wise in hv
    Matrix a = q;
    Matrix hv(d, k);
    std::vector<double> hbeta(k, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
        double sigma = 0.0;
        for (std::size_t i = j; i < d; ++i) sigma += a.at(i, j) * a.at(i, j);
        sigma = std::sqrt(sigma);
        if (sigma == 0.0) continue;  // cannot happen for full-column-rank input
        double x0 = a.at(j, j);
        double sign = (x0 >= 0.0) ? 1.0 : -1.0;
        hv.at(j, j) = x0 + sign * sigma;
        for (std::size_t i = j + 1; i < d; ++i) hv.at(i, j) = a.at(i, j);
        double vnorm2 = 0.0;
        for (std::size_t i = j; i < d; ++i) vnorm2 += hv.at(i, j) * hv.at(i, j);
        hbeta[j] = 2.0 / vnorm2;
        // update the remaining columns of a
        for (std::size_t c = j; c < k; ++c) {
            double proj = 0.0;
            for (std::size_t i = j; i < d; ++i) proj += hv.at(i, j) * a.at(i, c);
            proj *= hbeta[j];
            for (std::size_t i = j; i < d; ++i) a.at(i, c) -= proj * hv.at(i, j);
        }
    }

    // full_q = H_0 * H_1 * ... * H_{k-1}; its trailing d-k columns span the complement
    Matrix full_q = Matrix::identity(d);
    for (std::size_t jj = k; jj-- > 0;) {
        if (hbeta[jj] == 0.0) continue;
        for (std::size_t c = 0; c < d; ++c) {
            double proj = 0.0;
            for (std::size_t i = jj; i < d; ++i) proj += hv.at(i, jj) * full_q.at(i, c);
            proj *= hbeta[jj];
            for (std::size_t i = jj; i < d; ++i) full_q.at(i, c) -= proj * hv.at(i, jj);
        }
    }

    Matrix out(d, d - k);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = k; j < d; ++j) out.at(i, j - k) = full_q.at(i, j);
    return out;
}

}  // namespace nsc::linalg
