#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <mutex>
#include <random>
#include <thread>
#include <vector>

#include "matbridge/comm.hpp"
#include "matbridge/distmatrix.hpp"
#include "matbridge/errors.hpp"

using namespace matbridge;
using dist::LocalBlock;

namespace {

// Independent owner oracle: linear scan over the boundary list.
int owner_by_scan(const std::vector<std::uint64_t>& bounds, std::uint64_t row) {
    for (std::size_t r = 0; r + 1 < bounds.size(); ++r)
        if (row >= bounds[r] && row < bounds[r + 1]) return static_cast<int>(r);
    return -1;
}

std::vector<double> random_matrix(std::uint64_t m, std::uint64_t n, unsigned seed) {
    std::vector<double> a(m * n);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-10, 10);
    for (auto& x : a) x = dist(rng);
    return a;
}

template <class Fn>
void with_group(int size, Fn&& fn) {
    auto mesh = comm::make_local_mesh(size);
    std::vector<std::thread> threads;
    std::exception_ptr first;
    std::mutex mu;
    for (int r = 0; r < size; ++r) {
        threads.emplace_back([&, r] {
            try {
                comm::WorkerGroup g(3, r, mesh[static_cast<std::size_t>(r)], {});
                fn(g);
            } catch (...) {
                std::lock_guard<std::mutex> lk(mu);
                if (!first) first = std::current_exception();
            }
        });
    }
    for (auto& t : threads) t.join();
    if (first) std::rethrow_exception(first);
}

} // namespace

TEST_CASE("partition reproduces the worked examples") {
    CHECK(dist::partition(10, 3) == std::vector<std::uint64_t>({0, 3, 6, 10}));
    CHECK(dist::partition(7, 2) == std::vector<std::uint64_t>({0, 3, 7}));
    CHECK(dist::partition(5, 5) == std::vector<std::uint64_t>({0, 1, 2, 3, 4, 5}));
    // More workers than rows: trailing empty blocks.
    CHECK(dist::partition(3, 5) == std::vector<std::uint64_t>({0, 0, 1, 1, 2, 3}));
}

TEST_CASE("partition properties hold for random sizes") {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 400; ++trial) {
        std::uint64_t m = 1 + rng() % 10000;
        int p = 1 + int(rng() % 17);
        auto b = dist::partition(m, p);
        REQUIRE(b.size() == std::size_t(p) + 1);
        CHECK(b.front() == 0);
        CHECK(b.back() == m);
        std::uint64_t lo = m / std::uint64_t(p);
        std::uint64_t hi = (m + std::uint64_t(p) - 1) / std::uint64_t(p);
        for (int r = 0; r < p; ++r) {
            CHECK(b[std::size_t(r)] <= b[std::size_t(r) + 1]);
            std::uint64_t size = b[std::size_t(r) + 1] - b[std::size_t(r)];
            CHECK(size >= lo);
            CHECK(size <= hi);
        }
    }
}

TEST_CASE("partition handles huge row counts without overflow") {
    std::uint64_t m = 3'000'000'000'000ull; // r*m would overflow 64 bits naively
    auto b = dist::partition(m, 7);
    CHECK(b.front() == 0);
    CHECK(b.back() == m);
    for (int r = 0; r < 7; ++r) {
        std::uint64_t size = b[std::size_t(r) + 1] - b[std::size_t(r)];
        CHECK(size >= m / 7);
        CHECK(size <= m / 7 + 1);
    }
}

TEST_CASE("partition rejects degenerate inputs") {
    CHECK_THROWS_AS(dist::partition(0, 3), BridgeError);
    CHECK_THROWS_AS(dist::partition(5, 0), BridgeError);
    CHECK_THROWS_AS(dist::partition(5, -1), BridgeError);
}

TEST_CASE("owner_of_row agrees with a linear scan") {
    std::mt19937_64 rng(55);
    for (int trial = 0; trial < 200; ++trial) {
        std::uint64_t m = 1 + rng() % 500;
        int p = 1 + int(rng() % 11);
        auto layout = dist::make_layout(m, 4, p);
        for (int probe = 0; probe < 30; ++probe) {
            std::uint64_t row = rng() % m;
            CHECK(dist::owner_of_row(layout, row) == owner_by_scan(layout.boundaries, row));
        }
        CHECK_THROWS_AS(dist::owner_of_row(layout, m), BridgeError);
    }
}

TEST_CASE("layout accessors partition all rows exactly once") {
    auto layout = dist::make_layout(11, 3, 4);
    CHECK(layout.num_workers() == 4);
    std::uint64_t total = 0;
    for (int r = 0; r < 4; ++r) total += layout.owned_rows(r);
    CHECK(total == 11);
}

TEST_CASE("block write/read round-trips in shuffled chunks") {
    const std::uint64_t m = 83, n = 7;
    const int p = 3;
    auto layout = dist::make_layout(m, n, p);
    auto a = random_matrix(m, n, 42);

    for (int rank = 0; rank < p; ++rank) {
        LocalBlock block(layout, rank);
        CHECK(block.local_rows() == layout.owned_rows(rank));
        CHECK_FALSE(block.complete());

        // Write the owned range as shuffled chunks of varying size.
        std::vector<std::pair<std::uint64_t, std::uint64_t>> chunks;
        std::uint64_t row = block.row_begin();
        std::mt19937_64 rng(7 + unsigned(rank));
        while (row < block.row_end()) {
            std::uint64_t len = std::min<std::uint64_t>(1 + rng() % 9, block.row_end() - row);
            chunks.push_back({row, len});
            row += len;
        }
        std::shuffle(chunks.begin(), chunks.end(), rng);
        for (auto [start, len] : chunks) {
            RowBatchHeader h{1, start, static_cast<std::uint32_t>(len), n};
            block.write_rows(h, std::span<const double>(a.data() + start * n, len * n));
        }
        CHECK(block.complete());
        CHECK(block.missing_ranges().empty());

        std::vector<double> out(block.local_rows() * n);
        block.read_rows(block.row_begin(), block.local_rows(), out.data());
        CHECK(std::memcmp(out.data(), a.data() + block.row_begin() * n,
                          out.size() * sizeof(double)) == 0);
    }
}

TEST_CASE("block rejects foreign rows, wrong widths and short payloads") {
    auto layout = dist::make_layout(10, 4, 2); // rank 0 owns rows [0,5)
    LocalBlock block(layout, 0);
    std::vector<double> rowdata(2 * 4, 1.0);

    RowBatchHeader outside{1, 5, 2, 4}; // starts in rank 1's range
    CHECK_THROWS_AS(block.write_rows(outside, std::span<const double>(rowdata.data(), 8)),
                    BridgeError);
    try {
        block.write_rows(outside, std::span<const double>(rowdata.data(), 8));
    } catch (const BridgeError& e) {
        CHECK(e.code() == ErrorCode::routing_error);
    }

    RowBatchHeader straddle{1, 4, 2, 4}; // row 4 owned, row 5 not
    CHECK_THROWS_AS(block.write_rows(straddle, std::span<const double>(rowdata.data(), 8)),
                    BridgeError);

    RowBatchHeader badwidth{1, 0, 2, 3};
    try {
        block.write_rows(badwidth, std::span<const double>(rowdata.data(), 6));
        FAIL("expected throw");
    } catch (const BridgeError& e) {
        CHECK(e.code() == ErrorCode::argument_error);
    }

    RowBatchHeader shortdata{1, 0, 2, 4};
    CHECK_THROWS_AS(block.write_rows(shortdata, std::span<const double>(rowdata.data(), 7)),
                    BridgeError);
}

TEST_CASE("reading unwritten rows reports not_ready; missing ranges are exact") {
    auto layout = dist::make_layout(12, 2, 1);
    LocalBlock block(layout, 0);
    std::vector<double> two_rows(2 * 2, 3.0);

    block.write_rows({1, 2, 2, 2}, std::span<const double>(two_rows.data(), 4)); // rows 2,3
    block.write_rows({1, 7, 2, 2}, std::span<const double>(two_rows.data(), 4)); // rows 7,8

    auto missing = block.missing_ranges();
    REQUIRE(missing.size() == 3);
    CHECK(missing[0] == std::pair<std::uint64_t, std::uint64_t>{0, 2});
    CHECK(missing[1] == std::pair<std::uint64_t, std::uint64_t>{4, 3});
    CHECK(missing[2] == std::pair<std::uint64_t, std::uint64_t>{9, 3});

    double out[4];
    CHECK_NOTHROW(block.read_rows(2, 2, out));
    try {
        block.read_rows(3, 2, out); // row 4 missing
        FAIL("expected throw");
    } catch (const BridgeError& e) {
        CHECK(e.code() == ErrorCode::not_ready);
    }
    // Rows outside the block's range are a routing error.
    CHECK_THROWS_AS(block.read_rows(11, 2, out), BridgeError);
}

TEST_CASE("rewriting a row keeps the fill count consistent") {
    auto layout = dist::make_layout(4, 2, 1);
    LocalBlock block(layout, 0);
    std::vector<double> row(2, 1.0);
    for (int i = 0; i < 3; ++i)
        block.write_rows({1, 1, 1, 2}, std::span<const double>(row.data(), 2));
    CHECK(block.filled_rows() == 1);
    CHECK_FALSE(block.complete());
}

TEST_CASE("concurrent disjoint writers fill a block without losing rows") {
    const std::uint64_t m = 4000, n = 3;
    auto layout = dist::make_layout(m, n, 1);
    auto a = random_matrix(m, n, 9);
    LocalBlock block(layout, 0);

    const int writers = 4;
    std::vector<std::thread> threads;
    auto spans = dist::partition(m, writers);
    for (int w = 0; w < writers; ++w) {
        threads.emplace_back([&, w] {
            // Each writer streams its span one row at a time.
            for (std::uint64_t r = spans[std::size_t(w)]; r < spans[std::size_t(w) + 1]; ++r) {
                RowBatchHeader h{1, r, 1, n};
                block.write_rows(h, std::span<const double>(a.data() + r * n, n));
            }
        });
    }
    for (auto& t : threads) t.join();
    CHECK(block.complete());
    CHECK(block.filled_rows() == m);
    std::vector<double> out(m * n);
    block.read_rows(0, m, out.data());
    CHECK(std::memcmp(out.data(), a.data(), out.size() * sizeof(double)) == 0);
}

TEST_CASE("gather_to_dense reassembles the global matrix at the root") {
    const std::uint64_t m = 37, n = 5;
    auto a = random_matrix(m, n, 1001);
    for (int p : {1, 2, 3, 5}) {
        auto layout = dist::make_layout(m, n, p);
        with_group(p, [&](comm::WorkerGroup& g) {
            LocalBlock block(layout, g.rank());
            if (block.local_rows()) {
                RowBatchHeader h{1, block.row_begin(),
                                 static_cast<std::uint32_t>(block.local_rows()), n};
                block.write_rows(h, std::span<const double>(a.data() + block.row_begin() * n,
                                                            block.local_rows() * n));
            }
            auto gathered = dist::gather_to_dense(block, layout, g, 0);
            if (g.rank() == 0) {
                REQUIRE(gathered.has_value());
                REQUIRE(gathered->size() == m * n);
                CHECK(std::memcmp(gathered->data(), a.data(), m * n * sizeof(double)) == 0);
            } else {
                CHECK(!gathered.has_value());
            }
        });
    }
}

TEST_CASE("gather_to_dense guards size and completeness on every rank") {
    const std::uint64_t m = 16, n = 4;
    auto a = random_matrix(m, n, 5);
    auto layout = dist::make_layout(m, n, 2);

    // Guard smaller than the matrix: everyone throws too_large.
    std::atomic<int> too_large{0};
    with_group(2, [&](comm::WorkerGroup& g) {
        LocalBlock block(layout, g.rank());
        RowBatchHeader h{1, block.row_begin(), static_cast<std::uint32_t>(block.local_rows()), n};
        block.write_rows(h, std::span<const double>(a.data() + block.row_begin() * n,
                                                    block.local_rows() * n));
        try {
            dist::gather_to_dense(block, layout, g, 0, 64);
        } catch (const BridgeError& e) {
            CHECK(e.code() == ErrorCode::too_large);
            too_large.fetch_add(1);
        }
    });
    CHECK(too_large.load() == 2);

    // An incomplete block fails with not_ready before any traffic.
    std::atomic<int> not_ready{0};
    with_group(2, [&](comm::WorkerGroup& g) {
        LocalBlock block(layout, g.rank()); // nothing written
        try {
            dist::gather_to_dense(block, layout, g, 0);
        } catch (const BridgeError& e) {
            CHECK(e.code() == ErrorCode::not_ready);
            not_ready.fetch_add(1);
        }
    });
    CHECK(not_ready.load() == 2);
}

TEST_CASE("mark_all_filled makes a computed block readable") {
    auto layout = dist::make_layout(6, 2, 2);
    LocalBlock block(layout, 1);
    for (std::uint64_t r = block.row_begin(); r < block.row_end(); ++r) {
        block.row(r)[0] = double(r);
        block.row(r)[1] = -double(r);
    }
    block.mark_all_filled();
    CHECK(block.complete());
    std::vector<double> out(block.local_rows() * 2);
    block.read_rows(block.row_begin(), block.local_rows(), out.data());
    CHECK(out[0] == double(block.row_begin()));
}

TEST_CASE("zero-row blocks when workers outnumber rows") {
    auto layout = dist::make_layout(2, 3, 5);
    int empty = 0;
    for (int r = 0; r < 5; ++r) {
        LocalBlock block(layout, r);
        if (block.local_rows() == 0) {
            ++empty;
            CHECK(block.complete()); // vacuously complete
        }
    }
    CHECK(empty == 3);
}
