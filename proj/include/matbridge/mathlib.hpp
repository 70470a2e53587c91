#pragma once

// The built-in linear-algebra plugin: gemm, truncated_svd, transpose,
// condest, random_uniform. Registered under the name "mathlib"; routine
// signatures are documented in mathlib.md.

#include <cstdint>
#include <memory>

#include "matbridge/plugin.hpp"

namespace matbridge::mathlib {

struct MathlibConfig {
    // gemm replicates B via allgather, streamed in row panels that fit this
    // budget. With streaming off, B must fit the budget whole.
    std::uint64_t gemm_panel_budget_bytes = 256ull << 20;
    bool gemm_stream_panels = true;

    // truncated_svd: Lanczos convergence tolerance (relative to σ̂₁) and
    // iteration cap (0 = min(m, n), which guarantees termination with
    // converged results for every reachable k).
    double svd_tol = 1e-10;
    std::uint64_t svd_max_iterations = 0;

    // condest forms the n×n Gram matrix; refuse beyond this width.
    std::uint64_t condest_max_cols = 4096;
};

std::shared_ptr<plugin::LibraryPlugin> make_mathlib(const MathlibConfig& config = {});

// Counter-based uniform generator: the value at (row, col) depends only on
// (seed, row, col), never on the layout — the same seed gives bit-identical
// matrices for every worker count.
std::uint64_t mix64(std::uint64_t x);
double uniform01(std::uint64_t seed, std::uint64_t row, std::uint64_t col);

} // namespace matbridge::mathlib
