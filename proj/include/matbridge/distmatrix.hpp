#pragma once

// Block-row distributed dense matrix. Worker rank r owns the contiguous row
// interval [boundaries[r], boundaries[r+1]) with boundaries[r] = floor(r·m/p).
// The layout is a pure function of (m, p), so client and server route row
// batches independently without a directory service.

#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "matbridge/comm.hpp"
#include "matbridge/protocol.hpp"

namespace matbridge::dist {

std::vector<std::uint64_t> partition(std::uint64_t m, int p);

struct LayoutDescriptor {
    std::uint64_t m = 0;
    std::uint64_t n = 0;
    std::vector<std::uint64_t> boundaries; // p+1 entries

    int num_workers() const { return static_cast<int>(boundaries.size()) - 1; }
    std::uint64_t row_begin(int rank) const { return boundaries[rank]; }
    std::uint64_t row_end(int rank) const { return boundaries[rank + 1]; }
    std::uint64_t owned_rows(int rank) const { return row_end(rank) - row_begin(rank); }
};

LayoutDescriptor make_layout(std::uint64_t m, std::uint64_t n, int p);

int owner_of_row(const LayoutDescriptor& layout, std::uint64_t i);

// One worker's slice: owned rows, row-major, with per-row fill tracking.
// Concurrent write_rows calls are safe for disjoint row ranges (multiple
// ingest connections may stream into one block); reads require completeness,
// after which the block is immutable by convention.
class LocalBlock {
public:
    LocalBlock(const LayoutDescriptor& layout, int rank);

    std::uint64_t row_begin() const { return row_begin_; }
    std::uint64_t row_end() const { return row_begin_ + local_rows_; }
    std::uint64_t local_rows() const { return local_rows_; }
    std::uint64_t cols() const { return n_; }
    std::uint64_t byte_size() const { return local_rows_ * n_ * sizeof(double); }

    // Stores batch rows (global indices). Rows outside the owned range are a
    // routing error; a column-count mismatch is an argument error.
    void write_rows(const RowBatchHeader& h, std::span<const double> data);

    // Copies rows [start, start+count) (global indices) into out. Throws
    // not_ready if any requested row was never written.
    void read_rows(std::uint64_t start, std::uint64_t count, double* out) const;

    bool complete() const;
    std::uint64_t filled_rows() const { return filled_count_.load(); }

    // Unwritten row runs as (global start, count); for timeout diagnostics.
    std::vector<std::pair<std::uint64_t, std::uint64_t>> missing_ranges() const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double* row(std::uint64_t global_row) { return data_.data() + (global_row - row_begin_) * n_; }
    const double* row(std::uint64_t global_row) const {
        return data_.data() + (global_row - row_begin_) * n_;
    }

    // Marks every row written; for blocks produced by compute rather than
    // ingest.
    void mark_all_filled();

private:
    std::uint64_t row_begin_ = 0;
    std::uint64_t local_rows_ = 0;
    std::uint64_t n_ = 0;
    std::vector<double> data_;
    std::unique_ptr<std::atomic<std::uint8_t>[]> fill_;
    std::atomic<std::uint64_t> filled_count_{0};
};

constexpr std::uint64_t default_gather_guard_bytes = 2ull << 30;

// Collects all blocks at `root` in rank order. Returns the m×n row-major
// data at root, nullopt elsewhere. Every rank checks the size guard, so all
// throw too_large together.
std::optional<std::vector<double>> gather_to_dense(
    const LocalBlock& block, const LayoutDescriptor& layout, comm::WorkerGroup& group, int root,
    std::uint64_t guard_bytes = default_gather_guard_bytes);

} // namespace matbridge::dist
