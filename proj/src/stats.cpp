#include "nsc/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace nsc::stats {

std::size_t argmax_row(std::span<const double> row) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < row.size(); ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

double accuracy(const Matrix& logits, std::span<const int> labels) {
    if (logits.rows != labels.size())
        throw std::invalid_argument("accuracy: row/label count mismatch");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < logits.rows; ++i)
        if (argmax_row(logits.row(i)) == static_cast<std::size_t>(labels[i])) ++hits;
    return static_cast<double>(hits) / static_cast<double>(logits.rows);
}

double rmse(const Matrix& pred, const Matrix& targets) {
    if (!pred.same_shape(targets)) throw std::invalid_argument("rmse: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        double d = pred.data[i] - targets.data[i];
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(pred.data.size()));
}

double cross_entropy_loss(const Matrix& logits, std::span<const int> labels) {
    if (logits.rows != labels.size())
        throw std::invalid_argument("cross_entropy_loss: row/label count mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < logits.rows; ++i) {
        auto row = logits.row(i);
        double mx = row[0];
        for (double v : row) mx = std::max(mx, v);
        double denom = 0.0;
        for (double v : row) denom += std::exp(v - mx);
        acc += mx + std::log(denom) - row[static_cast<std::size_t>(labels[i])];
    }
    return acc / static_cast<double>(logits.rows);
}

double mse_loss(const Matrix& pred, const Matrix& targets) {
    if (!pred.same_shape(targets)) throw std::invalid_argument("mse_loss: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        double d = pred.data[i] - targets.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(pred.data.size());
}

namespace {

std::vector<double> ranks_with_ties(std::span<const double> xs) {
    const std::size_t n = xs.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
        double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2)
        throw std::invalid_argument("spearman: need two equally sized series");
    auto rx = ranks_with_ties(x);
    auto ry = ranks_with_ties(y);
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double dx = rx[i] - mx, dy = ry[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;  // a constant series carries no order information
    return sxy / std::sqrt(sxx * syy);
}

std::vector<double> moving_average(std::span<const double> xs, std::size_t window) {
    if (window == 0) throw std::invalid_argument("moving_average: window must be positive");
    std::vector<double> out(xs.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        acc += xs[i];
        if (i >= window) acc -= xs[i - window];
        out[i] = acc / static_cast<double>(std::min(i + 1, window));
    }
    return out;
}

}  // namespace nsc::stats
