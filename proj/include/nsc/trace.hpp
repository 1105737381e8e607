#pragma once

#include <map>
#include <string>

#include "nsc/matrix.hpp"

namespace nsc {

// Captured incoming activations per LoRA-equipped layer. Each row is one
// sample vector z (token positions are flattened into the batch), so every
// layer holds an (n_samples x d_in) block with equal n_samples.
struct ActivationTrace {
    std::map<std::string, Matrix> samples;
};

}  // namespace nsc
