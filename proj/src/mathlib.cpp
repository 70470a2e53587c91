#include "matbridge/mathlib.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace matbridge::mathlib {

using plugin::arg_handle;
using plugin::arg_int;
using plugin::expect_arg_count;
using plugin::RoutineContext;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

double uniform01(std::uint64_t seed, std::uint64_t row, std::uint64_t col) {
    const auto h = mix64(mix64(mix64(seed) ^ row) ^ col);
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

namespace {

ConstMap map_block(const dist::LocalBlock& b) {
    return ConstMap(b.data(), static_cast<Index>(b.local_rows()), static_cast<Index>(b.cols()));
}

MutMap map_block(dist::LocalBlock& b) {
    return MutMap(b.data(), static_cast<Index>(b.local_rows()), static_cast<Index>(b.cols()));
}

std::span<const std::uint8_t> as_bytes(const double* p, std::size_t count) {
    return {reinterpret_cast<const std::uint8_t*>(p), count * sizeof(double)};
}

// ---------------------------------------------------------------------------
// gemm: C = A·B with A (m×n) and B (n×k) block-row distributed. B is
// replicated to every rank in row panels; each rank then multiplies its own
// A rows. Panel boundaries depend only on (n, k, budget) and C's rows are
// accumulated one at a time with p-independent operand shapes, so the result
// bits do not depend on the worker count.
// ---------------------------------------------------------------------------

std::vector<Value> run_gemm(const std::vector<Value>& args, RoutineContext& ctx,
                            const MathlibConfig& config) {
    expect_arg_count(args, 2, "gemm");
    const auto& ha = arg_handle(args, 0);
    const auto& hb = arg_handle(args, 1);
    if (ha.cols != hb.rows)
        throw BridgeError(ErrorCode::argument_error,
                          "gemm: inner dimensions disagree (" + std::to_string(ha.cols) +
                              " vs " + std::to_string(hb.rows) + ")");

    const auto& a_block = ctx.matrices.block(ha);
    const auto& b_block = ctx.matrices.block(hb);
    const std::uint64_t n = ha.cols, k = hb.cols;

    std::uint64_t panel_rows = n;
    if (std::uint64_t(n) * k * sizeof(double) > config.gemm_panel_budget_bytes) {
        if (!config.gemm_stream_panels)
            throw BridgeError(ErrorCode::resource_error,
                              "gemm: B (" + std::to_string(n * k * sizeof(double)) +
                                  " bytes) exceeds the replication budget and panel streaming "
                                  "is disabled");
        panel_rows = std::max<std::uint64_t>(1, config.gemm_panel_budget_bytes / (k * sizeof(double)));
    }

    auto [hc, c_block] = ctx.matrices.create(ha.rows, k);
    auto a = map_block(a_block);
    auto c = map_block(*c_block);
    c.setZero();

    RowMat panel;
    for (std::uint64_t s0 = 0; s0 < n; s0 += panel_rows) {
        const auto s1 = std::min(n, s0 + panel_rows);
        // This rank contributes the slice of its B rows that falls in the
        // panel; rank-ordered concatenation is exactly rows s0..s1.
        const auto lo = std::clamp(s0, b_block.row_begin(), b_block.row_end());
        const auto hi = std::clamp(s1, b_block.row_begin(), b_block.row_end());
        auto parts = ctx.group.allgather(
            as_bytes(hi > lo ? b_block.row(lo) : nullptr, (hi - lo) * k));
        panel.resize(static_cast<Index>(s1 - s0), static_cast<Index>(k));
        std::size_t filled = 0;
        for (const auto& part : parts) {
            std::memcpy(reinterpret_cast<std::uint8_t*>(panel.data()) + filled, part.data(),
                        part.size());
            filled += part.size();
        }
        if (filled != (s1 - s0) * k * sizeof(double))
            throw BridgeError(ErrorCode::internal_error, "gemm: panel assembly size mismatch");

        const auto ps = static_cast<Index>(s0), pr = static_cast<Index>(s1 - s0);
        for (Index i = 0; i < a.rows(); ++i)
            c.row(i).noalias() += a.row(i).segment(ps, pr) * panel;
    }
    return {hc};
}

// ---------------------------------------------------------------------------
// transpose: pure data movement. Each rank slices its A rows by the column
// ranges of the output layout and exchanges slices pairwise; offset d pairs
// rank r with r±d (mod p), tagging messages with d.
// ---------------------------------------------------------------------------

std::vector<Value> run_transpose(const std::vector<Value>& args, RoutineContext& ctx) {
    expect_arg_count(args, 1, "transpose");
    const auto& ha = arg_handle(args, 0);
    const auto& a_block = ctx.matrices.block(ha);
    const auto& a_layout = ctx.matrices.layout(ha);

    auto [ht, t_block] = ctx.matrices.create(ha.cols, ha.rows);
    const auto& t_layout = ctx.matrices.layout(ht);
    auto a = map_block(a_block);
    auto t = map_block(*t_block);

    const int p = ctx.group.size(), rank = ctx.group.rank();

    // Slice of my A rows covering output-rank q's rows (= my columns
    // [t_begin(q), t_end(q))), flattened row-major.
    const auto slice_for = [&](int q, RowMat& out) {
        const auto c0 = static_cast<Index>(t_layout.row_begin(q));
        const auto cn = static_cast<Index>(t_layout.owned_rows(q));
        out = a.middleCols(c0, cn);
    };
    // Place a slice received from rank q (its A rows × my T rows) into my
    // T columns [a_begin(q), a_end(q)).
    const auto place = [&](int q, const Eigen::Ref<const RowMat>& slice) {
        const auto c0 = static_cast<Index>(a_layout.row_begin(q));
        const auto cn = static_cast<Index>(a_layout.owned_rows(q));
        t.middleCols(c0, cn) = slice.transpose();
    };

    RowMat mine;
    slice_for(rank, mine);
    place(rank, mine);

    RowMat out_slice;
    for (int d = 1; d < p; ++d) {
        const int to = (rank + d) % p, from = (rank - d + p) % p;
        slice_for(to, out_slice);
        ctx.group.send_to(to, as_bytes(out_slice.data(), out_slice.size()),
                          static_cast<std::uint32_t>(d));
        auto in = ctx.group.recv_from(from, static_cast<std::uint32_t>(d));
        const auto rows = static_cast<Index>(a_layout.owned_rows(from));
        const auto cols = static_cast<Index>(t_block->local_rows());
        if (in.size() != std::size_t(rows) * cols * sizeof(double))
            throw BridgeError(ErrorCode::internal_error, "transpose: slice size mismatch");
        place(from, ConstMap(reinterpret_cast<const double*>(in.data()), rows, cols));
    }
    return {ht};
}

// ---------------------------------------------------------------------------
// condest: κ(A) from the spectrum of the Gram matrix G = ΣᵣAᵣᵀAᵣ.
// Accuracy caveat: squaring limits the result to ≈ κ² · machine-epsilon, so
// this is an estimate for moderately conditioned matrices, not a substitute
// for an SVD.
// ---------------------------------------------------------------------------

std::vector<Value> run_condest(const std::vector<Value>& args, RoutineContext& ctx,
                               const MathlibConfig& config) {
    expect_arg_count(args, 1, "condest");
    const auto& ha = arg_handle(args, 0);
    if (ha.rows < ha.cols)
        throw BridgeError(ErrorCode::argument_error, "condest: matrix must have m >= n");
    if (ha.cols > config.condest_max_cols)
        throw BridgeError(ErrorCode::too_large,
                          "condest: " + std::to_string(ha.cols) + " columns exceed the " +
                              std::to_string(config.condest_max_cols) + "-column Gram guard");

    const auto& block = ctx.matrices.block(ha);
    auto a = map_block(block);
    const auto n = static_cast<Index>(ha.cols);

    MatrixXd gram_local = a.transpose() * a; // n×n, column-major
    auto summed = ctx.group.allreduce_sum(
        std::span<const double>(gram_local.data(), static_cast<std::size_t>(n) * n));
    if (ctx.group.rank() != 0) return {};

    Eigen::Map<const MatrixXd> gram(summed.data(), n, n);
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig((gram + gram.transpose()) / 2.0);
    const double lmin = std::max(eig.eigenvalues().minCoeff(), 0.0);
    const double lmax = std::max(eig.eigenvalues().maxCoeff(), 0.0);
    const double smin = std::sqrt(lmin), smax = std::sqrt(lmax);
    if (smin < 1e-300) return {std::numeric_limits<double>::infinity()};
    return {smax / smin};
}

// ---------------------------------------------------------------------------
// random_uniform: entries drawn from the counter generator keyed by
// (seed, global row, col); layout never enters the stream.
// ---------------------------------------------------------------------------

std::vector<Value> run_random_uniform(const std::vector<Value>& args, RoutineContext& ctx) {
    expect_arg_count(args, 3, "random_uniform");
    const auto m = arg_int(args, 0), n = arg_int(args, 1);
    const auto seed = static_cast<std::uint64_t>(arg_int(args, 2));
    if (m < 1 || n < 1)
        throw BridgeError(ErrorCode::argument_error, "random_uniform: dimensions must be >= 1");

    auto [h, block] = ctx.matrices.create(static_cast<std::uint64_t>(m),
                                          static_cast<std::uint64_t>(n));
    for (std::uint64_t g = block->row_begin(); g < block->row_end(); ++g) {
        double* row = block->row(g);
        for (std::uint64_t c = 0; c < block->cols(); ++c) row[c] = uniform01(seed, g, c);
    }
    return {h};
}

// ---------------------------------------------------------------------------
// truncated_svd: Golub–Kahan–Lanczos bidiagonalization with full (two-pass
// classical Gram–Schmidt) reorthogonalization.
//
// Right vectors v_j (length n) are replicated on every rank; left vectors
// u_j (length m) are distributed by A's row layout. The two matvecs per
// step are y = A v (purely local rows) and z = Aᵀ u (local partial products
// summed with allreduce). Every cross-rank quantity flows through
// allreduce_sum, so all ranks take identical breakdown/convergence branches.
//
// After j steps, A·V_j = U_j·B_j with B_j upper bidiagonal (α on the
// diagonal, β above). For a Ritz pair (s_i, q_i, p_i) of B_j the left
// residual A v_i − s_i u_i is structurally zero and the right residual is
// ‖Aᵀu_i − s_i v_i‖ = β_j·|q_i[last]|, which is the convergence measure.
// ---------------------------------------------------------------------------

std::vector<Value> run_truncated_svd(const std::vector<Value>& args, RoutineContext& ctx,
                                     const MathlibConfig& config) {
    expect_arg_count(args, 2, "truncated_svd");
    const auto& ha = arg_handle(args, 0);
    const auto k64 = arg_int(args, 1);
    const std::uint64_t m = ha.rows, n = ha.cols;
    if (k64 < 1 || static_cast<std::uint64_t>(k64) > std::min(m, n))
        throw BridgeError(ErrorCode::argument_error,
                          "truncated_svd: k must be in [1, min(m,n)], got " +
                              std::to_string(k64));
    const auto k = static_cast<Index>(k64);

    const auto& block = ctx.matrices.block(ha);
    auto a = map_block(block);
    const auto lm = a.rows();
    const auto ni = static_cast<Index>(n);

    std::uint64_t cap64 = config.svd_max_iterations == 0 ? std::min(m, n)
                                                         : config.svd_max_iterations;
    cap64 = std::clamp<std::uint64_t>(cap64, static_cast<std::uint64_t>(k), std::min(m, n));
    const auto cap = static_cast<Index>(cap64);

    constexpr std::uint64_t start_seed = 0x53564431ull;
    constexpr double breakdown_rel = 1e-13;

    MatrixXd basis_v(ni, cap + 1), basis_u(lm, cap);
    VectorXd alpha = VectorXd::Zero(cap), beta = VectorXd::Zero(cap);

    const auto reduce = [&](const VectorXd& partial) {
        auto out = ctx.group.allreduce_sum(
            std::span<const double>(partial.data(), static_cast<std::size_t>(partial.size())));
        return Eigen::Map<const VectorXd>(out.data(), partial.size()).eval();
    };
    const auto global_norm = [&](const VectorXd& local) {
        const double ss = local.squaredNorm();
        return std::sqrt(ctx.group.allreduce_sum(std::span<const double>(&ss, 1))[0]);
    };

    // Deterministic start vector, identical on every rank. Starting from
    // Aᵀu₀ keeps v₀ inside the row space, so the recurrence can exhaust it
    // within min(m, n) steps even when A is wide or rank-deficient; a raw
    // random v₀ carries a null-space component that would cost one extra
    // step the iteration cap does not allow.
    {
        VectorXd u0(lm);
        for (Index i = 0; i < lm; ++i)
            u0(i) = uniform01(start_seed, block.row_begin() + static_cast<std::uint64_t>(i), 0) -
                    0.5;
        VectorXd z0 = reduce(a.transpose() * u0);
        double zn = z0.norm();
        if (zn > 0) {
            basis_v.col(0) = z0 / zn;
        } else {
            // Zero matrix: any unit start vector works.
            VectorXd v0(ni);
            for (Index i = 0; i < ni; ++i)
                v0(i) = uniform01(start_seed, static_cast<std::uint64_t>(i), 0) - 0.5;
            basis_v.col(0) = v0 / v0.norm();
        }
    }

    Eigen::JacobiSVD<MatrixXd> bsvd;
    double scale = 0;
    bool converged = false;
    Index used = 0;

    for (Index j = 0; j < cap && !converged; ++j) {
        // u_j = A v_j − β_{j−1} u_{j−1}, reorthogonalized against U.
        VectorXd u(lm);
        for (Index i = 0; i < lm; ++i) u(i) = a.row(i).dot(basis_v.col(j));
        if (j > 0) u -= beta(j - 1) * basis_u.col(j - 1);
        for (int pass = 0; pass < 2 && j > 0; ++pass) {
            VectorXd coeff = reduce(basis_u.leftCols(j).transpose() * u);
            u -= basis_u.leftCols(j) * coeff;
        }
        double an = global_norm(u);
        scale = std::max({scale, an, std::numeric_limits<double>::min()});
        if (an <= breakdown_rel * scale) {
            // Invariant subspace hit: deflate (α_j = 0) and continue the
            // basis with a fresh orthonormalized direction.
            alpha(j) = 0;
            for (Index i = 0; i < lm; ++i)
                u(i) = uniform01(start_seed + 1 + static_cast<std::uint64_t>(j),
                                 block.row_begin() + static_cast<std::uint64_t>(i), 0) -
                       0.5;
            for (int pass = 0; pass < 2 && j > 0; ++pass) {
                VectorXd coeff = reduce(basis_u.leftCols(j).transpose() * u);
                u -= basis_u.leftCols(j) * coeff;
            }
            u /= global_norm(u);
        } else {
            alpha(j) = an;
            u /= an;
        }
        basis_u.col(j) = u;

        // z = Aᵀ u_j − α_j v_j, replicated after the allreduce; the V-side
        // reorthogonalization therefore needs no communication.
        VectorXd z = reduce(a.transpose() * u);
        z -= alpha(j) * basis_v.col(j);
        for (int pass = 0; pass < 2; ++pass)
            z -= basis_v.leftCols(j + 1) * (basis_v.leftCols(j + 1).transpose() * z);
        double bn = z.norm();
        scale = std::max(scale, bn);
        if (bn <= breakdown_rel * scale) {
            beta(j) = 0;
            for (Index i = 0; i < ni; ++i)
                z(i) = uniform01(start_seed + 0x1000 + static_cast<std::uint64_t>(j),
                                 static_cast<std::uint64_t>(i), 1) -
                       0.5;
            for (int pass = 0; pass < 2; ++pass)
                z -= basis_v.leftCols(j + 1) * (basis_v.leftCols(j + 1).transpose() * z);
            z /= z.norm();
        } else {
            beta(j) = bn;
            z /= bn;
        }
        basis_v.col(j + 1) = z;
        used = j + 1;

        // Ritz residual test (cheap while the projected problem is small,
        // thinned out beyond that; same schedule on every rank).
        if (used >= k && (used <= 128 || used % 8 == 0 || used == cap)) {
            MatrixXd b = MatrixXd::Zero(used, used);
            for (Index i = 0; i < used; ++i) {
                b(i, i) = alpha(i);
                if (i + 1 < used) b(i, i + 1) = beta(i);
            }
            bsvd.compute(b, Eigen::ComputeFullU | Eigen::ComputeFullV);
            const auto& s = bsvd.singularValues();
            const double top = s(0);
            bool all_small = true;
            for (Index i = 0; i < k && all_small; ++i)
                if (beta(used - 1) * std::abs(bsvd.matrixU()(used - 1, i)) >
                    config.svd_tol * top)
                    all_small = false;
            converged = all_small;
        }
    }

    if (bsvd.rows() != used) {
        // Cap hit between residual checks: project once more at final size.
        MatrixXd b = MatrixXd::Zero(used, used);
        for (Index i = 0; i < used; ++i) {
            b(i, i) = alpha(i);
            if (i + 1 < used) b(i, i + 1) = beta(i);
        }
        bsvd.compute(b, Eigen::ComputeFullU | Eigen::ComputeFullV);
    }

    VectorXd sigma = bsvd.singularValues().head(k);
    MatrixXd u_out = basis_u.leftCols(used) * bsvd.matrixU().leftCols(k);  // lm×k
    MatrixXd v_out = basis_v.leftCols(used) * bsvd.matrixV().leftCols(k);  // n×k, replicated

    // Sign convention: first nonzero component of each v_i positive. v_out
    // is replicated, so every rank flips the same columns.
    for (Index i = 0; i < k; ++i) {
        for (Index r = 0; r < ni; ++r) {
            if (v_out(r, i) != 0.0) {
                if (v_out(r, i) < 0.0) {
                    v_out.col(i) = -v_out.col(i);
                    u_out.col(i) = -u_out.col(i);
                }
                break;
            }
        }
    }

    auto [hu, u_block] = ctx.matrices.create(m, static_cast<std::uint64_t>(k));
    auto [hv, v_block] = ctx.matrices.create(n, static_cast<std::uint64_t>(k));
    map_block(*u_block) = u_out; // U shares A's row layout
    auto v_map = map_block(*v_block);
    v_map = v_out.middleRows(static_cast<Index>(v_block->row_begin()),
                             static_cast<Index>(v_block->local_rows()));

    std::vector<Value> out;
    out.reserve(2 + static_cast<std::size_t>(k) + 1);
    out.emplace_back(hu);
    for (Index i = 0; i < k; ++i) out.emplace_back(sigma(i));
    out.emplace_back(hv);
    out.emplace_back(converged);
    return out;
}

} // namespace

std::shared_ptr<plugin::LibraryPlugin> make_mathlib(const MathlibConfig& config) {
    auto lib = std::make_shared<plugin::TablePlugin>("mathlib");
    lib->add("gemm", [config](const std::vector<Value>& args, RoutineContext& ctx) {
        return run_gemm(args, ctx, config);
    });
    lib->add("transpose", [](const std::vector<Value>& args, RoutineContext& ctx) {
        return run_transpose(args, ctx);
    });
    lib->add("condest", [config](const std::vector<Value>& args, RoutineContext& ctx) {
        return run_condest(args, ctx, config);
    });
    lib->add("random_uniform", [](const std::vector<Value>& args, RoutineContext& ctx) {
        return run_random_uniform(args, ctx);
    });
    lib->add("truncated_svd", [config](const std::vector<Value>& args, RoutineContext& ctx) {
        return run_truncated_svd(args, ctx, config);
    });
    return lib;
}

} // namespace matbridge::mathlib
