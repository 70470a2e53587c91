#include <doctest.h>

#include <atomic>
#include <chrono>
#include <cstring>
#include <random>
#include <thread>
#include <vector>

#include "matbridge/comm.hpp"
#include "matbridge/errors.hpp"
#include "matbridge/net.hpp"
#include "matbridge/protocol.hpp"

using namespace matbridge;
using comm::WorkerGroup;

namespace {

// Builds one WorkerGroup per rank over an in-process mesh and runs fn(group)
// on size threads. Rethrows the first failure.
template <class Fn>
void with_group(int size, Fn&& fn, comm::GroupConfig config = {}) {
    auto mesh = comm::make_local_mesh(size);
    std::vector<std::thread> threads;
    std::exception_ptr first;
    std::mutex mu;
    for (int r = 0; r < size; ++r) {
        threads.emplace_back([&, r] {
            try {
                WorkerGroup g(1, r, mesh[static_cast<std::size_t>(r)], config);
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

std::vector<std::uint8_t> blob_for(int rank, std::size_t len) {
    std::vector<std::uint8_t> b(len);
    for (std::size_t i = 0; i < len; ++i)
        b[i] = static_cast<std::uint8_t>((rank * 131 + int(i)) & 0xFF);
    return b;
}

} // namespace

TEST_CASE("local channel pair carries frames both ways and counts bytes") {
    auto [a, b] = comm::make_local_pair();
    Frame f;
    f.command = static_cast<std::uint8_t>(Command::group_p2p);
    f.session_id = 42;
    f.payload = {1, 2, 3};
    a->send(f);
    auto got = b->recv(1000);
    REQUIRE(got.has_value());
    CHECK(got->session_id == 42);
    CHECK(got->payload == std::vector<std::uint8_t>({1, 2, 3}));
    CHECK(a->bytes_sent() == frame_header_size + 3);
    CHECK(b->bytes_received() == frame_header_size + 3);

    b->send(f);
    CHECK(a->recv(1000).has_value());

    b->close();
    CHECK_THROWS_AS(a->recv(50), BridgeError); // peer gone
}

TEST_CASE("local channel recv times out politely") {
    auto [a, b] = comm::make_local_pair();
    auto t0 = std::chrono::steady_clock::now();
    auto got = a->recv(80);
    auto dt = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0);
    CHECK(!got.has_value());
    CHECK(dt.count() >= 70.0);
    (void)b;
}

TEST_CASE("broadcast delivers the root's bytes to every rank") {
    for (int size : {1, 2, 3, 5}) {
        for (int root = 0; root < size; root += 2) {
            with_group(size, [&](WorkerGroup& g) {
                auto data = g.rank() == root ? blob_for(root, 97) : std::vector<std::uint8_t>{};
                auto out = g.broadcast(root, data);
                CHECK(out == blob_for(root, 97));
            });
        }
    }
}

TEST_CASE("allgather returns every contribution in rank order") {
    for (int size : {1, 2, 4, 6}) {
        with_group(size, [&](WorkerGroup& g) {
            auto local = blob_for(g.rank(), 16 + std::size_t(g.rank()));
            auto all = g.allgather(local);
            REQUIRE(int(all.size()) == size);
            for (int r = 0; r < size; ++r)
                CHECK(all[static_cast<std::size_t>(r)] == blob_for(r, 16 + std::size_t(r)));
        });
    }
}

TEST_CASE("allreduce_sum matches a serial rank-ordered sum bit for bit") {
    // Oracle: accumulate contributions serially in rank order, the exact
    // order the implementation promises, so equality must be bitwise.
    for (int size : {1, 2, 3, 5}) {
        const std::size_t n = 64;
        std::vector<std::vector<double>> contribs(static_cast<std::size_t>(size));
        std::mt19937_64 rng(7 + static_cast<unsigned>(size));
        std::uniform_real_distribution<double> dist(-1e3, 1e3);
        for (auto& c : contribs) {
            c.resize(n);
            for (auto& x : c) x = dist(rng);
        }
        std::vector<double> expected(contribs[0]);
        for (int r = 1; r < size; ++r)
            for (std::size_t i = 0; i < n; ++i) expected[i] += contribs[static_cast<std::size_t>(r)][i];

        with_group(size, [&](WorkerGroup& g) {
            auto out = g.allreduce_sum(contribs[static_cast<std::size_t>(g.rank())]);
            REQUIRE(out.size() == n);
            CHECK(std::memcmp(out.data(), expected.data(), n * sizeof(double)) == 0);
        });
    }
}

TEST_CASE("allreduce_sum length mismatch fails the whole group") {
    std::atomic<int> failures{0};
    with_group(3, [&](WorkerGroup& g) {
        std::vector<double> local(g.rank() == 2 ? 5 : 4, 1.0);
        try {
            g.allreduce_sum(local);
        } catch (const BridgeError& e) {
            CHECK(e.code() == ErrorCode::group_failure);
            failures.fetch_add(1);
        }
    });
    CHECK(failures.load() == 3);
}

TEST_CASE("point-to-point messages respect peer and tag") {
    with_group(4, [&](WorkerGroup& g) {
        int next = (g.rank() + 1) % g.size();
        int prev = (g.rank() + g.size() - 1) % g.size();
        g.send_to(next, blob_for(g.rank(), 33), 7);
        auto got = g.recv_from(prev, 7);
        CHECK(got == blob_for(prev, 33));
    });
}

TEST_CASE("barrier releases everyone only after the last arrival") {
    using Clock = std::chrono::steady_clock;
    with_group(3, [&](WorkerGroup& g) {
        auto t0 = Clock::now();
        if (g.rank() == 2) std::this_thread::sleep_for(std::chrono::milliseconds(120));
        g.barrier();
        auto dt = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
        CHECK(dt >= 100.0); // nobody exits before the sleeper arrives
    });
}

TEST_CASE("barrier timeout raises group_failure") {
    comm::GroupConfig cfg;
    cfg.barrier_timeout_ms = 150;
    std::atomic<int> failures{0};
    with_group(
        3,
        [&](WorkerGroup& g) {
            if (g.rank() == 2) return; // never shows up
            try {
                g.barrier();
            } catch (const BridgeError& e) {
                CHECK(e.code() == ErrorCode::group_failure);
                failures.fetch_add(1);
            }
        },
        cfg);
    CHECK(failures.load() == 2);
}

TEST_CASE("mismatched collectives are detected, not wedged") {
    // Rank 0 broadcasts while rank 1 starts an allgather: rank 1 receives a
    // frame of the wrong kind and must fail loudly.
    auto mesh = comm::make_local_mesh(2);
    std::thread t0([&] {
        WorkerGroup g(1, 0, mesh[0], {});
        try {
            g.broadcast(0, blob_for(0, 8));
        } catch (const BridgeError&) {
            // acceptable: the peer may close first
        }
    });
    bool threw = false;
    {
        WorkerGroup g(1, 1, mesh[1], {});
        try {
            g.allgather(blob_for(1, 8));
        } catch (const BridgeError&) {
            threw = true;
        }
    }
    t0.join();
    CHECK(threw);
}

TEST_CASE("closed peer turns collectives into group_failure") {
    auto mesh = comm::make_local_mesh(2);
    std::thread closer([&] {
        // Rank 1 disappears: close its end of every link.
        for (auto& ch : mesh[1])
            if (ch) ch->close();
    });
    closer.join();
    WorkerGroup g(1, 0, mesh[0], {});
    try {
        g.allgather(blob_for(0, 4));
        FAIL("expected group_failure");
    } catch (const BridgeError& e) {
        CHECK(e.code() == ErrorCode::group_failure);
    }
}

TEST_CASE("groups work identically over sockets") {
    // Two ranks linked by a real TCP connection.
    auto listener = net::Listener::bind({"127.0.0.1", 0});
    std::uint16_t port = listener.port();

    std::shared_ptr<comm::Channel> ch0, ch1;
    std::thread acceptor([&] {
        auto s = listener.accept(2000);
        REQUIRE(s.has_value());
        ch0 = comm::make_socket_channel(std::move(*s));
    });
    net::Socket client = net::Socket::connect({"127.0.0.1", port});
    ch1 = comm::make_socket_channel(std::move(client));
    acceptor.join();

    std::vector<double> contrib0 = {1.5, 2.5};
    std::vector<double> contrib1 = {0.25, -0.75};
    std::vector<double> expected = {1.75, 1.75};

    std::thread t0([&] {
        std::vector<std::shared_ptr<comm::Channel>> links = {nullptr, ch0};
        WorkerGroup g(9, 0, links, {});
        auto out = g.allreduce_sum(contrib0);
        CHECK(std::memcmp(out.data(), expected.data(), 2 * sizeof(double)) == 0);
        auto all = g.allgather(blob_for(0, 5));
        CHECK(all[1] == blob_for(1, 5));
        g.barrier();
    });
    {
        std::vector<std::shared_ptr<comm::Channel>> links = {ch1, nullptr};
        WorkerGroup g(9, 1, links, {});
        auto out = g.allreduce_sum(contrib1);
        CHECK(std::memcmp(out.data(), expected.data(), 2 * sizeof(double)) == 0);
        auto all = g.allgather(blob_for(1, 5));
        CHECK(all[0] == blob_for(0, 5));
        g.barrier();
    }
    t0.join();

    CHECK(ch0->bytes_sent() > 0);
    CHECK(ch1->bytes_received() > 0);
}

TEST_CASE("bytes_exchanged grows with traffic") {
    with_group(2, [&](WorkerGroup& g) {
        auto before = g.bytes_exchanged();
        g.allgather(blob_for(g.rank(), 100));
        CHECK(g.bytes_exchanged() > before);
    });
}

TEST_CASE("single-rank group short-circuits every collective") {
    with_group(1, [&](WorkerGroup& g) {
        CHECK(g.broadcast(0, blob_for(0, 9)) == blob_for(0, 9));
        auto all = g.allgather(blob_for(0, 3));
        REQUIRE(all.size() == 1);
        std::vector<double> x = {4.0};
        CHECK(g.allreduce_sum(x)[0] == 4.0);
        g.barrier();
    });
}
