#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "nsc/linalg.hpp"
#include "nsc/opt.hpp"
#include "nsc/rng.hpp"

using namespace nsc;
using namespace nsc::opt;
using toynet::ObjectiveKind;

namespace {

toynet::ToyModelConfig small_config(toynet::HeadKind head = toynet::HeadKind::classification) {
    toynet::ToyModelConfig c;
    c.blocks = 2;
    c.model_dim = 8;
    c.heads = 2;
    c.mlp_dim = 16;
    c.seq_len = 4;
    c.lora_rank = 2;
    c.head = head;
    c.head_out = head == toynet::HeadKind::classification ? 3 : 2;
    c.vocab = 16;
    return c;
}

lora::AdapterSet random_adapters(const toynet::BaseModel& model, const std::string& task, Rng& rng,
                                 double scale = 0.3) {
    lora::AdapterSet set;
    set.task_id = task;
    const auto& c = model.config;
    for (const auto& id : model.lora_layer_ids()) {
        Matrix b(c.model_dim, c.lora_rank);
        Matrix a(c.lora_rank, c.model_dim);
        for (auto& v : b.data) v = scale * rng.gaussian();
        for (auto& v : a.data) v = scale * rng.gaussian();
        set.adapters.emplace(id, lora::make_adapter(id, b, a));
    }
    return set;
}

std::vector<std::vector<int>> random_pool(const toynet::ToyModelConfig& c, std::size_t n, Rng& rng) {
    std::vector<std::vector<int>> pool;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<int> seq(c.seq_len);
        for (auto& t : seq) t = static_cast<int>(rng.uniform_index(c.vocab));
        pool.push_back(std::move(seq));
    }
    return pool;
}

toynet::Batch pool_batch(const std::vector<std::vector<int>>& pool, std::size_t n) {
    toynet::Batch b;
    for (std::size_t i = 0; i < n; ++i) b.tokens.push_back(pool[i]);
    return b;
}

}  // namespace

TEST_CASE("target layer selection") {
    toynet::ToyModelConfig c4 = small_config();
    c4.blocks = 4;
    CHECK(default_target_layers(c4) == std::set<std::string>{"blk3.o"});

    toynet::ToyModelConfig c12 = small_config();
    c12.blocks = 12;
    auto t12 = default_target_layers(c12);
    CHECK(t12 == std::set<std::string>{"blk9.o", "blk10.o", "blk11.o"});

    auto wide = select_target_layers(c4, "last-half", "vo");
    CHECK(wide == std::set<std::string>{"blk2.v", "blk2.o", "blk3.v", "blk3.o"});

    auto counted = select_target_layers(c4, "2", "o");
    CHECK(counted == std::set<std::string>{"blk2.o", "blk3.o"});

    CHECK_THROWS_AS(select_target_layers(c4, "5", "o"), std::invalid_argument);
    CHECK_THROWS_AS(select_target_layers(c4, "last-quarter", "x"), std::invalid_argument);

    toynet::ToyModelConfig vo_only = c4;
    vo_only.lora_targets = {toynet::Proj::v};
    CHECK_THROWS_AS(select_target_layers(vo_only, "all", "o"), std::invalid_argument);
}

TEST_CASE("prepare_gram_caches: counts, identity case, residuals") {
    auto model = init_base_model(small_config(), 30);
    Rng rng(1);
    std::vector<lora::AdapterSet> sets{random_adapters(model, "t1", rng),
                                       random_adapters(model, "t2", rng)};
    std::set<std::string> targets{"blk1.o", "blk1.q", "blk0.v"};
    auto caches = prepare_gram_caches(sets, targets);
    CHECK(caches.size() == 2);
    std::size_t total = 0;
    for (const auto& [task, row] : caches) total += row.size();
    CHECK(total == 6);
    for (const auto& [task, row] : caches) {
        for (const auto& [layer, ctx] : row) {
            Matrix g = linalg::matmul_nt(ctx.a, ctx.a);
            CHECK(linalg::max_abs_diff(linalg::matmul(g, ctx.gram_inv), Matrix::identity(g.rows)) <
                  1e-10);
        }
    }

    // orthonormal rows give the identity cache
    lora::AdapterSet ortho;
    ortho.task_id = "t3";
    for (const auto& id : model.lora_layer_ids()) {
        Matrix a(2, 8);
        a.at(0, 0) = 1.0;
        a.at(1, 1) = 1.0;
        ortho.adapters.emplace(id, lora::make_adapter(id, Matrix(8, 2), a));
    }
    auto c3 = prepare_gram_caches({ortho}, {"blk0.q"});
    CHECK(linalg::max_abs_diff(c3.at("t3").at("blk0.q").gram_inv, Matrix::identity(2)) < 1e-12);
}

TEST_CASE("prepare_gram_caches: zero factor fails naming the pair") {
    auto model = init_base_model(small_config(), 31);
    lora::AdapterSet bad;
    bad.task_id = "tz";
    for (const auto& id : model.lora_layer_ids())
        bad.adapters.emplace(id, lora::make_adapter(id, Matrix(8, 2), Matrix(2, 8)));
    try {
        prepare_gram_caches({bad}, {"blk0.q"});
        FAIL("expected failure");
    } catch (const std::runtime_error& e) {
        std::string msg = e.what();
        CHECK(msg.find("tz") != std::string::npos);
        CHECK(msg.find("blk0.q") != std::string::npos);
    }
}

TEST_CASE("nsc_objective: degenerate batch equals the per-sample ratio") {
    auto model = init_base_model(small_config(), 32);
    Rng rng(2);
    std::vector<lora::AdapterSet> sets{random_adapters(model, "t1", rng)};
    auto layers = model.lora_layer_ids();
    auto coeffs = lora::MergeCoefficients::constant({"t1"}, layers, 0.4);
    std::set<std::string> targets{"blk1.o"};
    auto caches = prepare_gram_caches(sets, targets);

    auto pool = random_pool(model.config, 4, rng);
    toynet::TaskBatches batches;
    batches.per_task["t1"] = pool_batch(pool, 1);

    double obj = nsc_objective(model, sets, coeffs, caches, batches);

    auto fw = toynet::forward(model, sets, coeffs, batches.per_task["t1"], true);
    const Matrix& z = fw.trace.samples.at("blk1.o");
    std::vector<double> omegas;
    for (std::size_t i = 0; i < z.rows; ++i)
        omegas.push_back(nullspace::null_ratio_fast(caches.at("t1").at("blk1.o"), z.row(i)));
    double want = linalg::pairwise_sum(omegas) / omegas.size();
    CHECK(obj == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("nsc_objective: task mean and per-sample oracle sweep") {
    auto model = init_base_model(small_config(), 33);
    Rng rng(3);
    std::vector<lora::AdapterSet> sets{random_adapters(model, "t1", rng),
                                       random_adapters(model, "t2", rng)};
    auto layers = model.lora_layer_ids();
    auto coeffs = lora::MergeCoefficients::constant({"t1", "t2"}, layers, 0.4);
    std::set<std::string> targets{"blk1.o", "blk1.v"};
    auto caches = prepare_gram_caches(sets, targets);

    auto pool1 = random_pool(model.config, 6, rng);
    auto pool2 = random_pool(model.config, 6, rng);
    toynet::TaskBatches batches;
    batches.per_task["t1"] = pool_batch(pool1, 6);
    batches.per_task["t2"] = pool_batch(pool2, 6);

    double joint = nsc_objective(model, sets, coeffs, caches, batches);

    // per-task value: same merged model, single task term
    double per_task_sum = 0.0;
    for (const auto& task : {"t1", "t2"}) {
        auto fw = toynet::forward(model, sets, coeffs, batches.per_task.at(task), true);
        double task_acc = 0.0;
        for (const auto& layer : targets) {
            const Matrix& z = fw.trace.samples.at(layer);
            const auto& ctx = caches.at(task).at(layer);
            double acc = 0.0;
            for (std::size_t i = 0; i < z.rows; ++i)
                acc += nullspace::null_ratio_oracle(ctx.a, z.row(i));
            task_acc += acc / static_cast<double>(z.rows);
        }
        per_task_sum += task_acc / static_cast<double>(targets.size());
    }
    CHECK(std::abs(joint - 0.5 * per_task_sum) < 1e-8);
}

TEST_CASE("entropy_objective: uniform and saturated logits, direct summation oracle") {
    auto model = init_base_model(small_config(), 34);
    Rng rng(4);
    std::vector<lora::AdapterSet> sets{random_adapters(model, "t1", rng)};
    auto coeffs = lora::MergeCoefficients::constant({"t1"}, model.lora_layer_ids(), 0.2);
    auto pool = random_pool(model.config, 5, rng);
    toynet::TaskBatches batches;
    batches.per_task["t1"] = pool_batch(pool, 5);

    // zero head makes every logit row identical (all zeros): maximum entropy
    auto uniform_model = model;
    uniform_model.w_head = Matrix(model.config.head_out, model.config.model_dim);
    uniform_model.b_head = Matrix(1, model.config.head_out);
    double h_uniform = entropy_objective(uniform_model, sets, coeffs, batches);
    CHECK(h_uniform == doctest::Approx(std::log(3.0)).epsilon(1e-12));

    // a huge bias on one class saturates the softmax: entropy ~ 0
    auto onehot_model = uniform_model;
    onehot_model.b_head.at(0, 1) = 50000.0;
    CHECK(entropy_objective(onehot_model, sets, coeffs, batches) <= 1e-10);

    // direct -sum p ln p oracle on the actual outputs
    double h = entropy_objective(model, sets, coeffs, batches);
    auto fw = toynet::forward(model, sets, coeffs, batches.per_task["t1"], false);
    double acc = 0.0;
    for (std::size_t i = 0; i < fw.outputs.rows; ++i) {
        auto row = fw.outputs.row(i);
        double mx = row[0];
        for (double v : row) mx = std::max(mx, v);
        double denom = 0.0;
        for (double v : row) denom += std::exp(v - mx);
        double hrow = 0.0;
        for (double v : row) {
            double p = std::exp(v - mx) / denom;
            if (p > 0) hrow -= p * std::log(p);
        }
        acc += hrow;
    }
    CHECK(std::abs(h - acc / fw.outputs.rows) < 1e-10);
}

TEST_CASE("optimize: zero learning rate freezes the coefficients") {
    auto model = init_base_model(small_config(), 35);
    Rng rng(5);
    std::vector<lora::AdapterSet> sets{random_adapters(model, "t1", rng)};
    UnlabeledSets pools;
    pools.pools["t1"] = random_pool(model.config, 16, rng);

    NscConfig cfg;
    cfg.steps = 5;
    cfg.batch_size = 4;
    cfg.learning_rate = 0.0;
    cfg.lambda_init = 0.4;
    cfg.seed = 9;
    auto res = optimize(model, sets, pools, cfg, ObjectiveKind::null_ratio);
    CHECK(!res.aborted);
    CHECK(res.trajectory.size() == 5);
    for (const auto& [task, row] : res.coefficients.values)
        for (const auto& [layer, v] : row) CHECK(v == 0.4);
}

TEST_CASE("optimize: deterministic and bit-identical with cached vs recomputed Gram inverses") {
    auto model = init_base_model(small_config(), 36);
    Rng rng(6);
    std::vector<lora::AdapterSet> sets{random_adapters(model, "t1", rng),
                                       random_adapters(model, "t2", rng)};
    UnlabeledSets pools;
    pools.pools["t1"] = random_pool(model.config, 12, rng);
    pools.pools["t2"] = random_pool(model.config, 12, rng);

    NscConfig cfg;
    cfg.steps = 6;
    cfg.batch_size = 4;
    cfg.seed = 123;

    auto r1 = optimize(model, sets, pools, cfg, ObjectiveKind::null_ratio);
    auto r2 = optimize(model, sets, pools, cfg, ObjectiveKind::null_ratio);
    CHECK(r1.trajectory == r2.trajectory);
    CHECK(r1.coefficients.values == r2.coefficients.values);

    cfg.recompute_gram_each_step = true;
    auto r3 = optimize(model, sets, pools, cfg, ObjectiveKind::null_ratio);
    CHECK(r1.trajectory == r3.trajectory);
    CHECK(r1.coefficients.values == r3.coefficients.values);
}

TEST_CASE("optimize: construction order of the adapter sets does not matter") {
    auto model = init_base_model(small_config(), 37);
    Rng rng(7);
    auto s1 = random_adapters(model, "t1", rng);
    auto s2 = random_adapters(model, "t2", rng);
    UnlabeledSets pools;
    pools.pools["t1"] = random_pool(model.config, 10, rng);
    pools.pools["t2"] = random_pool(model.config, 10, rng);

    NscConfig cfg;
    cfg.steps = 4;
    cfg.batch_size = 4;
    cfg.seed = 55;
    auto fwd = optimize(model, {s1, s2}, pools, cfg, ObjectiveKind::null_ratio);
    auto rev = optimize(model, {s2, s1}, pools, cfg, ObjectiveKind::null_ratio);
    CHECK(fwd.coefficients.values == rev.coefficients.values);
    CHECK(fwd.trajectory == rev.trajectory);
}

TEST_CASE("optimize: permutation equivariance with identical adapters and pools") {
    auto model = init_base_model(small_config(), 38);
    Rng rng(8);
    auto shared_adapters = random_adapters(model, "x", rng);
    auto pool = random_pool(model.config, 10, rng);

    auto as_task = [&](const std::string& id) {
        lora::AdapterSet s = shared_adapters;
        s.task_id = id;
        return s;
    };
    UnlabeledSets pools;
    pools.pools["ta"] = pool;
    pools.pools["tb"] = pool;

    NscConfig cfg;
    cfg.steps = 4;
    cfg.batch_size = 4;
    cfg.seed = 77;
    auto run = optimize(model, {as_task("ta"), as_task("tb")}, pools, cfg,
                        ObjectiveKind::null_ratio);
    // relabeling the tasks swaps the rows exactly
    UnlabeledSets swapped_pools;
    swapped_pools.pools["ta"] = pool;
    swapped_pools.pools["tb"] = pool;
    auto swapped = optimize(model, {as_task("tb"), as_task("ta")}, swapped_pools, cfg,
                            ObjectiveKind::null_ratio);
    CHECK(run.coefficients.values.at("ta") == swapped.coefficients.values.at("ta"));
    CHECK(run.coefficients.values.at("tb") == swapped.coefficients.values.at("tb"));
}

TEST_CASE("optimize: entropy objective refuses a regression head") {
    auto model = init_base_model(small_config(toynet::HeadKind::regression), 39);
    Rng rng(9);
    std::vector<lora::AdapterSet> sets{random_adapters(model, "t1", rng)};
    UnlabeledSets pools;
    pools.pools["t1"] = random_pool(model.config, 8, rng);
    NscConfig cfg;
    cfg.steps = 2;
    cfg.batch_size = 2;
    CHECK_THROWS_AS(optimize(model, sets, pools, cfg, ObjectiveKind::entropy),
                    std::invalid_argument);
}

TEST_CASE("optimize: empty pool is rejected") {
    auto model = init_base_model(small_config(), 40);
    Rng rng(10);
    std::vector<lora::AdapterSet> sets{random_adapters(model, "t1", rng)};
    UnlabeledSets pools;
    pools.pools["t1"] = {};
    NscConfig cfg;
    CHECK_THROWS_AS(optimize(model, sets, pools, cfg, ObjectiveKind::null_ratio),
                    std::invalid_argument);
}

TEST_CASE("coefficient document round trip and trajectory csv") {
    lora::MergeCoefficients c;
    c.set("taskA", "blk0.q", 0.123456789012345);
    c.set("taskA", "blk1.o", -0.5);
    c.set("taskB", "blk0.q", 1.25);
    c.set("taskB", "blk1.o", 0.0);
    std::ostringstream out;
    write_coefficients(c, out);
    std::istringstream in(out.str());
    auto back = read_coefficients(in);
    CHECK(back.values == c.values);

    OptimizeResult res;
    res.trajectory = {0.9, 0.8};
    res.lambda_means = {{{"blk0.q", 0.4}}, {{"blk0.q", 0.41}}};
    std::ostringstream csv;
    write_trajectory_csv(res, csv);
    CHECK(csv.str() == "step,objective,mean_lambda.blk0.q\n1,0.9,0.4\n2,0.8,0.41\n");
}
