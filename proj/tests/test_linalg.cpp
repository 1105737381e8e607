#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "nsc/linalg.hpp"
#include "nsc/rng.hpp"

using namespace nsc;
using namespace nsc::linalg;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scl = 1.0) {
    Matrix m(r, c);
    for (auto& v : m.data) v = scl * rng.gaussian();
    return m;
}

// Test-side oracle: cyclic Jacobi eigensolver for symmetric matrices,
// independent of the one-sided SVD path under test.
std::vector<double> symmetric_eigenvalues(Matrix a) {
    const std::size_t n = a.rows;
    for (int sweep = 0; sweep < 200; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
        if (off < 1e-28) break;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double apq = a.at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(1.0 + theta * theta));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double s = c * t;
                for (std::size_t i = 0; i < n; ++i) {
                    double aip = a.at(i, p), aiq = a.at(i, q);
                    a.at(i, p) = c * aip - s * aiq;
                    a.at(i, q) = s * aip + c * aiq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    double api = a.at(p, i), aqi = a.at(q, i);
                    a.at(p, i) = c * api - s * aqi;
                    a.at(q, i) = s * api + c * aqi;
                }
            }
        }
    }
    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = a.at(i, i);
    std::sort(eig.begin(), eig.end(), std::greater<>());
    return eig;
}

double reconstruction_error(const Matrix& m, const SvdResult& r) {
    Matrix us = r.u;
    for (std::size_t i = 0; i < us.rows; ++i)
        for (std::size_t j = 0; j < us.cols; ++j) us.at(i, j) *= r.s[j];
    Matrix rec = matmul(us, r.vt);
    double denom = frobenius_norm(m);
    return frobenius_norm(sub(m, rec)) / (denom > 0 ? denom : 1.0);
}

double orthonormality_residual(const Matrix& u) {
    Matrix g = matmul_tn(u, u);
    return max_abs_diff(g, Matrix::identity(u.cols));
}

}  // namespace

TEST_CASE("svd: identity and diagonal cases") {
    auto r1 = svd(Matrix::identity(2));
    REQUIRE(r1.s.size() == 2);
    CHECK(r1.s[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r1.s[1] == doctest::Approx(1.0).epsilon(1e-12));

    Matrix d(2, 2);
    d.at(0, 0) = 3.0;
    d.at(1, 1) = 2.0;
    auto r2 = svd(d);
    CHECK(r2.s[0] == doctest::Approx(3.0).epsilon(1e-14));
    CHECK(r2.s[1] == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(reconstruction_error(d, r2) < 1e-12);
}

TEST_CASE("svd: fixed-seed 3x2 matches eigen-oracle on M^T M") {
    Rng rng(42);
    Matrix m = random_matrix(3, 2, rng);
    auto r = svd(m);
    auto eig = symmetric_eigenvalues(matmul_tn(m, m));
    REQUIRE(eig.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        double expected = std::sqrt(std::max(0.0, eig[i]));
        CHECK(std::abs(r.s[i] - expected) < 1e-9);
    }
}

TEST_CASE("svd: invariants over random shapes") {
    Rng rng(7);
    const std::size_t shapes[][2] = {{5, 5}, {8, 3}, {3, 8}, {16, 4}, {2, 17}, {1, 9}, {9, 1}};
    for (auto& sh : shapes) {
        Matrix m = random_matrix(sh[0], sh[1], rng);
        auto r = svd(m);
        std::size_t p = std::min(sh[0], sh[1]);
        REQUIRE(r.s.size() == p);
        REQUIRE(r.u.rows == sh[0]);
        REQUIRE(r.u.cols == p);
        REQUIRE(r.vt.rows == p);
        REQUIRE(r.vt.cols == sh[1]);
        for (std::size_t i = 0; i + 1 < p; ++i) CHECK(r.s[i] >= r.s[i + 1]);
        for (double sv : r.s) CHECK(sv >= 0.0);
        CHECK(reconstruction_error(m, r) < 1e-8);
        CHECK(orthonormality_residual(r.u) < 1e-10);
        CHECK(orthonormality_residual(transpose(r.vt)) < 1e-10);
    }
}

TEST_CASE("svd: rank-deficient input still yields orthonormal factors") {
    Rng rng(11);
    Matrix b = random_matrix(6, 2, rng);
    Matrix a = random_matrix(2, 5, rng);
    Matrix m = matmul(b, a);  // rank 2 in a 6x5 frame
    auto r = svd(m);
    CHECK(r.s[2] < 1e-10);
    CHECK(reconstruction_error(m, r) < 1e-8);
    CHECK(orthonormality_residual(r.u) < 1e-10);
    CHECK(orthonormality_residual(transpose(r.vt)) < 1e-10);
}

TEST_CASE("svd: sign convention and determinism") {
    Rng rng(3);
    Matrix m = random_matrix(7, 4, rng);
    auto r1 = svd(m);
    for (std::size_t j = 0; j < r1.u.cols; ++j) {
        double best_abs = -1.0, best_val = 0.0;
        for (std::size_t i = 0; i < r1.u.rows; ++i) {
            if (std::abs(r1.u.at(i, j)) > best_abs) {
                best_abs = std::abs(r1.u.at(i, j));
                best_val = r1.u.at(i, j);
            }
        }
        CHECK(best_val >= 0.0);
    }
    auto r2 = svd(m);
    CHECK(r1.u.data == r2.u.data);
    CHECK(r1.s == r2.s);
    CHECK(r1.vt.data == r2.vt.data);
}

TEST_CASE("svd: zero matrix") {
    Matrix z(3, 2);
    auto r = svd(z);
    CHECK(r.s[0] == 0.0);
    CHECK(r.s[1] == 0.0);
    CHECK(orthonormality_residual(r.u) < 1e-12);
}

TEST_CASE("svd: rejects empty and non-finite input") {
    CHECK_THROWS_AS(svd(Matrix()), std::invalid_argument);
    Matrix bad(1, 2);
    bad.data[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(svd(bad), std::invalid_argument);
}

TEST_CASE("cholesky_inverse: identity and diagonal") {
    auto inv = cholesky_inverse(Matrix::identity(3), 0.0);
    CHECK(max_abs_diff(inv, Matrix::identity(3)) < 1e-14);

    Matrix d(2, 2);
    d.at(0, 0) = 4.0;
    d.at(1, 1) = 9.0;
    auto dinv = cholesky_inverse(d, 0.0);
    CHECK(dinv.at(0, 0) == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(dinv.at(1, 1) == doctest::Approx(1.0 / 9.0).epsilon(1e-14));
    CHECK(std::abs(dinv.at(0, 1)) < 1e-15);
}

TEST_CASE("cholesky_inverse: random SPD residual") {
    Rng rng(123);
    Matrix a = random_matrix(4, 4, rng);
    Matrix g = matmul_nt(a, a);
    for (std::size_t i = 0; i < 4; ++i) g.at(i, i) += 0.5;  // keep well conditioned
    auto inv = cholesky_inverse(g, 0.0);
    CHECK(max_abs_diff(matmul(inv, g), Matrix::identity(4)) < 1e-10);
}

TEST_CASE("cholesky_inverse: rejects bad inputs") {
    Matrix notsq(2, 3);
    CHECK_THROWS_AS(cholesky_inverse(notsq, 0.0), std::invalid_argument);

    Matrix asym = Matrix::identity(2);
    asym.at(0, 1) = 0.5;
    CHECK_THROWS_AS(cholesky_inverse(asym, 0.0), std::invalid_argument);

    Matrix npd(2, 2);
    npd.at(0, 0) = 1.0;
    npd.at(1, 1) = -1.0;
    CHECK_THROWS_AS(cholesky_inverse(npd, 0.0), std::runtime_error);
}

TEST_CASE("gram_inverse: orthonormal and diagonal rows") {
    Matrix a(2, 4);
    a.at(0, 0) = 1.0;
    a.at(1, 1) = 1.0;  // first two rows of I4
    CHECK(max_abs_diff(gram_inverse(a, 0.0), Matrix::identity(2)) < 1e-14);

    Matrix b(2, 3);
    b.at(0, 0) = 2.0;
    b.at(1, 1) = 3.0;
    auto inv = gram_inverse(b, 0.0);
    CHECK(inv.at(0, 0) == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(inv.at(1, 1) == doctest::Approx(1.0 / 9.0).epsilon(1e-14));
}

TEST_CASE("gram_inverse: fixed-seed residual and symmetry") {
    Rng rng(99);
    Matrix a = random_matrix(4, 16, rng);
    auto inv = gram_inverse(a, 0.0);
    Matrix g = matmul_nt(a, a);
    CHECK(max_abs_diff(matmul(g, inv), Matrix::identity(4)) < 1e-10);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) CHECK(inv.at(i, j) == inv.at(j, i));
}

TEST_CASE("gram_inverse: residual sweep over ranks and widths") {
    Rng rng(2024);
    for (std::size_t r = 1; r <= 16; ++r) {
        std::size_t widths[] = {r, r + 3, 4 * r, 256};
        for (std::size_t d : widths) {
            if (d < r) continue;
            Matrix a = random_matrix(r, d, rng);
            auto inv = gram_inverse(a, 0.0);
            Matrix g = matmul_nt(a, a);
            CHECK(max_abs_diff(matmul(g, inv), Matrix::identity(r)) < 1e-8);
        }
    }
}

TEST_CASE("gram_inverse: wrong orientation and rank deficiency") {
    Matrix tall(5, 2);
    CHECK_THROWS_AS(gram_inverse(tall, 0.0), std::invalid_argument);

    Matrix dup(2, 4);
    dup.at(0, 0) = 1.0;
    dup.at(1, 0) = 1.0;  // identical rows -> singular Gram
    CHECK_THROWS_AS(gram_inverse(dup, 0.0), std::runtime_error);
}

TEST_CASE("default_gram_jitter scales with trace") {
    Matrix a(2, 2);
    a.at(0, 0) = 2.0;
    a.at(1, 1) = 2.0;
    CHECK(default_gram_jitter(a) == doctest::Approx(1e-10 * 4.0).epsilon(1e-12));
}

TEST_CASE("orthonormal_complement spans the complement") {
    Rng rng(5);
    Matrix m = random_matrix(8, 3, rng);
    auto r = svd(m);
    Matrix q = r.u;  // 8x3 orthonormal columns
    Matrix comp = orthonormal_complement(q);
    REQUIRE(comp.rows == 8);
    REQUIRE(comp.cols == 5);
    CHECK(orthonormality_residual(comp) < 1e-12);
    Matrix cross = matmul_tn(q, comp);
    for (double v : cross.data) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("pairwise_sum matches sequential on benign data") {
    Rng rng(8);
    std::vector<double> xs(1000);
    double seq = 0.0;
    for (auto& x : xs) {
        x = rng.uniform_range(-1.0, 1.0);
        seq += x;
    }
    CHECK(pairwise_sum(xs) == doctest::Approx(seq).epsilon(1e-12));
}
