#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "nsc/matrix.hpp"

namespace nsc::stats {

// argmax with ties resolved toward the lower index
std::size_t argmax_row(std::span<const double> row);

double accuracy(const Matrix& logits, std::span<const int> labels);
double rmse(const Matrix& pred, const Matrix& targets);

double cross_entropy_loss(const Matrix& logits, std::span<const int> labels);
double mse_loss(const Matrix& pred, const Matrix& targets);

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

// trailing moving average over a window (shorter prefix windows allowed)
std::vector<double> moving_average(std::span<const double> xs, std::size_t window);

}  // namespace nsc::stats
