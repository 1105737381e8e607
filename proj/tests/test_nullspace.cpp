#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <sstream>

#include "nsc/linalg.hpp"
#include "nsc/nullspace.hpp"
#include "nsc/rng.hpp"

using namespace nsc;
using namespace nsc::nullspace;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
    Matrix m(r, c);
    for (auto& v : m.data) v = rng.gaussian();
    return m;
}

std::vector<double> random_vec(std::size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.gaussian();
    return v;
}

NullRatioContext ctx_of(const Matrix& a, double jitter = 0.0) {
    auto ad = lora::make_adapter("l", Matrix(a.cols, a.rows), a);
    return make_context(ad, jitter);
}

}  // namespace

TEST_CASE("analytic cases: row space, null space, 45-degree split") {
    Matrix a(1, 3, {1.0, 0.0, 0.0});

    std::vector<double> in_row{5.0, 0.0, 0.0};
    std::vector<double> in_null{0.0, 0.0, 2.0};
    std::vector<double> split{1.0, 0.0, 1.0};

    CHECK(null_ratio_oracle(a, in_row) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(null_ratio_oracle(a, in_null) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(null_ratio_oracle(a, split) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));

    auto c = ctx_of(a);
    CHECK(std::abs(null_ratio_fast(c, in_row) - null_ratio_oracle(a, in_row)) < 1e-10);
    CHECK(std::abs(null_ratio_fast(c, in_null) - null_ratio_oracle(a, in_null)) < 1e-10);
    CHECK(std::abs(null_ratio_fast(c, split) - null_ratio_oracle(a, split)) < 1e-10);
}

TEST_CASE("fast path agrees with the SVD-basis oracle on random inputs") {
    Rng rng(2025);
    Matrix a = random_matrix(4, 32, rng);
    auto c = ctx_of(a);
    for (int i = 0; i < 100; ++i) {
        auto z = random_vec(32, rng);
        double fast = null_ratio_fast(c, z);
        double slow = null_ratio_oracle(a, z);
        CHECK(std::abs(fast - slow) < 1e-8);
        CHECK(fast >= 0.0);
        CHECK(fast <= 1.0);
    }
}

TEST_CASE("rank-16 adapter in dimension 768 leaves ~98.95% in the null space") {
    Rng rng(404);
    Matrix a = random_matrix(16, 768, rng);
    auto c = ctx_of(a);
    // a random direction has expected squared row-space mass r/d = 16/768,
    // i.e. the subspace covers about 2.1% of the feature space
    double expected = std::sqrt(1.0 - 16.0 / 768.0);
    std::vector<double> omegas;
    for (int i = 0; i < 200; ++i) omegas.push_back(null_ratio_fast(c, random_vec(768, rng)));
    double mean = linalg::pairwise_sum(omegas) / omegas.size();
    CHECK(std::abs(mean - expected) < 3e-3);
    CHECK(expected == doctest::Approx(0.98952).epsilon(1e-4));
}

TEST_CASE("omega extremes and scale invariance") {
    Rng rng(7);
    Matrix a = random_matrix(6, 24, rng);
    auto c = ctx_of(a);

    // z constructed in the row space
    auto u = random_vec(6, rng);
    std::vector<double> z_row(24, 0.0);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 24; ++j) z_row[j] += a.at(i, j) * u[i];
    CHECK(null_ratio_fast(c, z_row) <= 1e-8);
    CHECK(null_ratio_oracle(a, z_row) <= 1e-8);

    // z constructed in the null space via the oracle's own complement
    auto svd = linalg::svd(a);
    Matrix nb = linalg::orthonormal_complement(linalg::transpose(svd.vt));
    std::vector<double> z_null(24, 0.0);
    auto w = random_vec(nb.cols, rng);
    for (std::size_t j = 0; j < nb.cols; ++j)
        for (std::size_t i = 0; i < 24; ++i) z_null[i] += nb.at(i, j) * w[j];
    CHECK(null_ratio_fast(c, z_null) >= 1.0 - 1e-8);

    // scale invariance
    auto z = random_vec(24, rng);
    double base = null_ratio_fast(c, z);
    for (double scale : {3.0, -1.0, 1e-6, 2048.0}) {
        std::vector<double> scaled(z);
        for (auto& x : scaled) x *= scale;
        CHECK(std::abs(null_ratio_fast(c, scaled) - base) < 1e-10);
    }
}

TEST_CASE("zero-norm activations: oracle refuses, fast returns 1") {
    Matrix a(1, 3, {1.0, 0.0, 0.0});
    std::vector<double> zero{0.0, 0.0, 0.0};
    CHECK_THROWS_AS(null_ratio_oracle(a, zero), std::invalid_argument);
    CHECK(null_ratio_fast(ctx_of(a), zero) == 1.0);
}

TEST_CASE("oracle refuses rank-deficient factors") {
    Matrix a(2, 4);
    a.at(0, 0) = 1.0;
    a.at(1, 0) = 1.0;  // duplicate rows
    std::vector<double> z{1.0, 0.0, 0.0, 0.0};
    CHECK_THROWS_AS(null_ratio_oracle(a, z), std::invalid_argument);
}

TEST_CASE("square full-rank factor has ratio 0") {
    Rng rng(15);
    Matrix a = random_matrix(5, 5, rng);
    auto z = random_vec(5, rng);
    CHECK(null_ratio_oracle(a, z) == 0.0);
    CHECK(null_ratio_fast(ctx_of(a), z) < 1e-7);
}

TEST_CASE("mean_null_ratio: degenerate mean and two-layer average") {
    Rng rng(21);
    Matrix a1 = random_matrix(3, 16, rng);
    Matrix a2 = random_matrix(3, 16, rng);
    std::map<std::string, NullRatioContext> contexts;
    contexts.emplace("l1", ctx_of(a1));
    contexts.emplace("l2", ctx_of(a2));

    ActivationTrace single;
    Matrix one(1, 16);
    auto z = random_vec(16, rng);
    std::copy(z.begin(), z.end(), one.data.begin());
    single.samples["l1"] = one;
    auto rep = mean_null_ratio(single, contexts, {"l1"});
    CHECK(rep.per_layer.at("l1") == null_ratio_fast(contexts.at("l1"), z));
    CHECK(rep.overall == rep.per_layer.at("l1"));

    // overall is the unweighted mean of per-layer means
    ActivationTrace two;
    two.samples["l1"] = random_matrix(8, 16, rng);
    two.samples["l2"] = random_matrix(8, 16, rng);
    auto rep2 = mean_null_ratio(two, contexts, {"l1", "l2"});
    CHECK(rep2.overall ==
          doctest::Approx(0.5 * (rep2.per_layer.at("l1") + rep2.per_layer.at("l2"))).epsilon(1e-15));
}

TEST_CASE("mean_null_ratio: per-sample oracle sweep") {
    Rng rng(33);
    std::map<std::string, NullRatioContext> contexts;
    ActivationTrace traces;
    std::map<std::string, Matrix> factors;
    for (const char* layer : {"a", "b", "c"}) {
        Matrix f = random_matrix(4, 20, rng);
        factors.emplace(layer, f);
        contexts.emplace(layer, ctx_of(f));
        traces.samples[layer] = random_matrix(12, 20, rng);
    }
    auto rep = mean_null_ratio(traces, contexts, {"a", "b", "c"});
    for (const auto& [layer, mean] : rep.per_layer) {
        const Matrix& batch = traces.samples.at(layer);
        double acc = 0.0;
        for (std::size_t i = 0; i < batch.rows; ++i)
            acc += null_ratio_oracle(factors.at(layer), batch.row(i));
        CHECK(std::abs(mean - acc / batch.rows) < 1e-8);
    }
}

TEST_CASE("mean_null_ratio: zero-norm rows counted, not fatal") {
    Rng rng(44);
    Matrix a = random_matrix(2, 8, rng);
    std::map<std::string, NullRatioContext> contexts;
    contexts.emplace("l", ctx_of(a));
    ActivationTrace traces;
    Matrix batch = random_matrix(4, 8, rng);
    for (std::size_t j = 0; j < 8; ++j) batch.at(2, j) = 0.0;
    traces.samples["l"] = batch;
    auto rep = mean_null_ratio(traces, contexts, {"l"});
    CHECK(rep.zero_norm_samples == 1);
    CHECK(rep.per_layer.at("l") <= 1.0);
}

TEST_CASE("mean_null_ratio: empty target set and missing layers fail") {
    std::map<std::string, NullRatioContext> contexts;
    ActivationTrace traces;
    CHECK_THROWS_AS(mean_null_ratio(traces, contexts, {}), std::invalid_argument);
    CHECK_THROWS_AS(mean_null_ratio(traces, contexts, {"nope"}), std::invalid_argument);
}

TEST_CASE("ratio report CSV layout") {
    RatioReport rep;
    rep.per_layer["blk0.q"] = 0.25;
    rep.per_layer["blk1.o"] = 0.75;
    rep.batch_sizes["blk0.q"] = 10;
    rep.batch_sizes["blk1.o"] = 10;
    rep.overall = 0.5;
    std::ostringstream out;
    write_ratio_csv(rep, out);
    CHECK(out.str() ==
          "layer_id,mean_omega,batch_size\nblk0.q,0.25,10\nblk1.o,0.75,10\noverall,0.5,20\n");
}

TEST_CASE("caching soundness: cached context equals per-call recomputation bitwise") {
    Rng rng(55);
    Matrix a = random_matrix(4, 24, rng);
    auto ad = lora::make_adapter("l", Matrix(24, 4), a);
    auto cached = make_context(ad, 0.0);
    for (int i = 0; i < 20; ++i) {
        auto z = random_vec(24, rng);
        double with_cache = null_ratio_fast(cached, z);
        double recomputed = null_ratio_fast(make_context(ad, 0.0), z);
        CHECK(std::memcmp(&with_cache, &recomputed, sizeof(double)) == 0);
    }
}

TEST_CASE("adapter bound: orthonormal equality case") {
    // b = 2x2 identity, a = two orthonormal rows in R^4
    Matrix b = Matrix::identity(2);
    Matrix a(2, 4);
    a.at(0, 0) = 1.0;
    a.at(1, 1) = 1.0;
    auto ad = lora::make_adapter("l", b, a);

    std::vector<double> z{0.6, -0.8, 0.0, 0.0};  // in the row space
    auto chk = check_adapter_bound(ad, z);
    CHECK(chk.lhs == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(chk.rhs == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(chk.holds);

    std::vector<double> zn{0.0, 0.0, 3.0, 0.0};  // in the null space
    auto chk2 = check_adapter_bound(ad, zn);
    CHECK(chk2.lhs == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(chk2.rhs == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(chk2.holds);
}

TEST_CASE("adapter bound: 1000 random full-rank instances all hold") {
    Rng rng(616);
    int violations = 0;
    for (int i = 0; i < 1000; ++i) {
        std::size_t r = 1 + rng.uniform_index(8);
        std::size_t d = 8 + rng.uniform_index(57);  // 8..64
        Matrix b = random_matrix(d, r, rng);
        Matrix a = random_matrix(r, d, rng);
        auto ad = lora::make_adapter("l", b, a);
        auto z = random_vec(d, rng);
        auto chk = check_adapter_bound(ad, z);
        if (!chk.holds) ++violations;
    }
    CHECK(violations == 0);
}

TEST_CASE("adapter bound: rank-deficient factor is refused") {
    Matrix b(3, 2);
    b.at(0, 0) = 1.0;
    b.at(1, 0) = 1.0;  // rank 1
    Rng rng(9);
    Matrix a = random_matrix(2, 6, rng);
    auto ad = lora::make_adapter("l", b, a);
    auto z = random_vec(6, rng);
    CHECK_THROWS_AS(check_adapter_bound(ad, z), std::runtime_error);
}
