#include "matbridge/distmatrix.hpp"

#include <algorithm>
#include <cstring>

namespace matbridge::dist {

std::vector<std::uint64_t> partition(std::uint64_t m, int p) {
    if (p < 1) throw BridgeError(ErrorCode::argument_error, "worker count must be >= 1");
    if (m < 1) throw BridgeError(ErrorCode::argument_error, "row count must be >= 1");
    std::vector<std::uint64_t> boundaries(p + 1);
    for (int r = 0; r <= p; ++r)
        boundaries[r] = (static_cast<unsigned __int128>(r) * m) / p;
    return boundaries;
}

LayoutDescriptor make_layout(std::uint64_t m, std::uint64_t n, int p) {
    if (n < 1) throw BridgeError(ErrorCode::argument_error, "column count must be >= 1");
    LayoutDescriptor layout;
    layout.m = m;
    layout.n = n;
    layout.boundaries = partition(m, p);
    return layout;
}

int owner_of_row(const LayoutDescriptor& layout, std::uint64_t i) {
    if (i >= layout.m)
        throw BridgeError(ErrorCode::argument_error,
                          "row " + std::to_string(i) + " out of range (m=" +
                              std::to_string(layout.m) + ")");
    // First boundary strictly greater than i; its predecessor interval owns i.
    const auto it = std::upper_bound(layout.boundaries.begin(), layout.boundaries.end(), i);
    return static_cast<int>(it - layout.boundaries.begin()) - 1;
}

LocalBlock::LocalBlock(const LayoutDescriptor& layout, int rank)
    : row_begin_(layout.row_begin(rank)),
      local_rows_(layout.owned_rows(rank)),
      n_(layout.n),
      data_(local_rows_ * n_) {
    fill_ = std::make_unique<std::atomic<std::uint8_t>[]>(local_rows_);
    for (std::uint64_t i = 0; i < local_rows_; ++i) fill_[i].store(0, std::memory_order_relaxed);
}

void LocalBlock::write_rows(const RowBatchHeader& h, std::span<const double> data) {
    if (h.num_cols != n_)
        throw BridgeError(ErrorCode::argument_error,
                          "batch has " + std::to_string(h.num_cols) + " columns, matrix has " +
                              std::to_string(n_));
    if (h.num_rows == 0) return;
    if (h.start_row < row_begin_ || h.start_row + h.num_rows > row_end())
        throw BridgeError(ErrorCode::routing_error,
                          "rows [" + std::to_string(h.start_row) + ", " +
                              std::to_string(h.start_row + h.num_rows) + ") not owned here (own [" +
                              std::to_string(row_begin_) + ", " + std::to_string(row_end()) + "))");
    if (data.size() != std::uint64_t(h.num_rows) * n_)
        throw BridgeError(ErrorCode::protocol_error, "batch data size mismatch");
    std::memcpy(row(h.start_row), data.data(), data.size() * sizeof(double));
    const auto local_start = h.start_row - row_begin_;
    for (std::uint64_t i = 0; i < h.num_rows; ++i) {
        if (fill_[local_start + i].exchange(1, std::memory_order_acq_rel) == 0)
            filled_count_.fetch_add(1, std::memory_order_acq_rel);
    }
}

void LocalBlock::read_rows(std::uint64_t start, std::uint64_t count, double* out) const {
    if (count == 0) return;
    if (start < row_begin_ || start + count > row_end())
        throw BridgeError(ErrorCode::routing_error,
                          "rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                              ") not owned here");
    const auto local_start = start - row_begin_;
    for (std::uint64_t i = 0; i < count; ++i)
        if (fill_[local_start + i].load(std::memory_order_acquire) == 0)
            throw BridgeError(ErrorCode::not_ready,
                              "row " + std::to_string(start + i) + " has not been written");
    std::memcpy(out, row(start), count * n_ * sizeof(double));
}

bool LocalBlock::complete() const { return filled_count_.load(std::memory_order_acquire) == local_rows_; }

std::vector<std::pair<std::uint64_t, std::uint64_t>> LocalBlock::missing_ranges() const {
    std::vector<std::pair<std::uint64_t, std::uint64_t>> out;
    std::uint64_t i = 0;
    while (i < local_rows_) {
        if (fill_[i].load(std::memory_order_acquire)) {
            ++i;
            continue;
        }
        std::uint64_t j = i;
        while (j < local_rows_ && !fill_[j].load(std::memory_order_acquire)) ++j;
        out.emplace_back(row_begin_ + i, j - i);
        i = j;
    }
    return out;
}

void LocalBlock::mark_all_filled() {
    for (std::uint64_t i = 0; i < local_rows_; ++i)
        fill_[i].store(1, std::memory_order_release);
    filled_count_.store(local_rows_, std::memory_order_release);
}

std::optional<std::vector<double>> gather_to_dense(const LocalBlock& block,
                                                   const LayoutDescriptor& layout,
                                                   comm::WorkerGroup& group, int root,
                                                   std::uint64_t guard_bytes) {
    const auto total_bytes = layout.m * layout.n * sizeof(double);
    if (total_bytes > guard_bytes)
        throw BridgeError(ErrorCode::too_large,
                          "gather of " + std::to_string(total_bytes) + " bytes exceeds the " +
                              std::to_string(guard_bytes) + "-byte guard");
    if (!block.complete())
        throw BridgeError(ErrorCode::not_ready, "gather on incomplete matrix");

    const std::uint32_t tag = 0x67617468; // "gath"
    const auto local_bytes =
        std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(block.data()),
                                      block.byte_size());
    if (group.rank() != root) {
        group.send_to(root, local_bytes, tag);
        return std::nullopt;
    }
    std::vector<double> full(layout.m * layout.n);
    for (int r = 0; r < group.size(); ++r) {
        const auto offset = layout.row_begin(r) * layout.n;
        const auto bytes_r = layout.owned_rows(r) * layout.n * sizeof(double);
        if (r == root) {
            std::memcpy(full.data() + offset, block.data(), bytes_r);
            continue;
        }
        auto part = group.recv_from(r, tag);
        if (part.size() != bytes_r)
            throw BridgeError(ErrorCode::group_failure, "gathered block size mismatch from rank " +
                                                            std::to_string(r));
        std::memcpy(full.data() + offset, part.data(), part.size());
    }
    return full;
}

} // namespace matbridge::dist
