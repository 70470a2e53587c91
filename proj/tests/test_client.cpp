#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <random>
#include <thread>
#include <vector>

#include "matbridge/client.hpp"
#include "matbridge/errors.hpp"
#include "matbridge/server.hpp"

using namespace matbridge;
using client::BridgeContext;
using client::ClientConfig;

namespace {

std::unique_ptr<server::Server> make_server(int workers) {
    server::ServerConfig sc;
    sc.workers = workers;
    return server::start_local_server(sc);
}

std::vector<double> random_matrix(std::uint64_t m, std::uint64_t n, unsigned seed) {
    std::vector<double> a(m * n);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-100, 100);
    for (auto& x : a) x = dist(rng);
    return a;
}

ErrorCode code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const BridgeError& e) {
        return e.code();
    }
    return ErrorCode::internal_error;
}

} // namespace

TEST_CASE("matrices round-trip bit for bit across worker counts and batch sizes") {
    std::mt19937_64 rng(31337);
    for (int p : {1, 2, 3, 5}) {
        auto srv = make_server(p);
        for (std::uint64_t batch : {std::uint64_t(1), std::uint64_t(4096)}) {
            ClientConfig cfg;
            cfg.batch_bytes = batch;
            auto ctx = BridgeContext::connect(srv->control_endpoint(), cfg);
            ctx.request_workers(p);
            for (int i = 0; i < 4; ++i) {
                std::uint64_t m = 1 + rng() % 200, n = 1 + rng() % 40;
                auto a = random_matrix(m, n, unsigned(1000 * p + i));
                auto h = ctx.send_matrix(a.data(), m, n);
                auto back = ctx.fetch_matrix(h);
                REQUIRE(back.size() == a.size());
                CHECK(std::memcmp(back.data(), a.data(), a.size() * sizeof(double)) == 0);
            }
            ctx.stop();
        }
        srv->stop();
    }
}

TEST_CASE("partial fetches return exactly the requested window") {
    auto srv = make_server(3);
    auto ctx = BridgeContext::connect(srv->control_endpoint());
    ctx.request_workers(3);
    const std::uint64_t m = 97, n = 11;
    auto a = random_matrix(m, n, 7);
    auto h = ctx.send_matrix(a.data(), m, n);

    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 40; ++trial) {
        std::uint64_t start = rng() % m;
        std::uint64_t count = 1 + rng() % (m - start);
        std::vector<double> out(count * n);
        ctx.fetch_rows(h, start, count, out.data());
        CHECK(std::memcmp(out.data(), a.data() + start * n, out.size() * sizeof(double)) == 0);
    }
    ctx.stop();
    srv->stop();
}

TEST_CASE("rows can arrive as shuffled fragments from the client") {
    auto srv = make_server(2);
    auto ctx = BridgeContext::connect(srv->control_endpoint());
    ctx.request_workers(2);
    const std::uint64_t m = 64, n = 5;
    auto a = random_matrix(m, n, 21);
    auto h = ctx.create_matrix(m, n);

    std::vector<std::pair<std::uint64_t, std::uint64_t>> pieces;
    std::uint64_t row = 0;
    std::mt19937_64 rng(3);
    while (row < m) {
        std::uint64_t len = std::min<std::uint64_t>(1 + rng() % 7, m - row);
        pieces.push_back({row, len});
        row += len;
    }
    std::shuffle(pieces.begin(), pieces.end(), rng);
    for (auto [start, len] : pieces) ctx.send_rows(h, start, len, a.data() + start * n);
    ctx.flush_rows();
    ctx.await_complete(h);

    CHECK(ctx.fetch_matrix(h) == a);
    ctx.stop();
    srv->stop();
}

TEST_CASE("sibling contexts share a session but not control rights") {
    auto srv = make_server(3);
    auto primary = BridgeContext::connect(srv->control_endpoint());
    primary.request_workers(3);

    const std::uint64_t m = 50, n = 6;
    auto a = random_matrix(m, n, 5);
    auto h = primary.create_matrix(m, n);

    auto sibling = BridgeContext::attach(primary.ticket());
    CHECK(sibling.session_id() == primary.session_id());

    // Each context ships half the rows.
    std::thread t([&] {
        sibling.send_rows(h, m / 2, m - m / 2, a.data() + (m / 2) * n);
        sibling.flush_rows();
    });
    primary.send_rows(h, 0, m / 2, a.data());
    primary.flush_rows();
    t.join();
    primary.await_complete(h);

    // Either context can read the whole matrix back.
    CHECK(sibling.fetch_matrix(h) == a);
    CHECK(primary.fetch_matrix(h) == a);

    // Data-only contexts cannot steer the session.
    CHECK(code_of([&] { sibling.request_workers(1); }) == ErrorCode::state_error);
    CHECK(code_of([&] { sibling.create_matrix(2, 2); }) == ErrorCode::state_error);
    CHECK(code_of([&] { sibling.close_session(); }) == ErrorCode::state_error);

    sibling.stop();
    primary.stop();
    srv->stop();
}

TEST_CASE("results stay remote until fetched, then move in full") {
    auto srv = make_server(2);
    auto ctx = BridgeContext::connect(srv->control_endpoint());
    ctx.request_workers(2);
    ctx.register_library("mathlib");

    const std::uint64_t m = 96, n = 64, k = 48;
    auto a = random_matrix(m, n, 1);
    auto b = random_matrix(n, k, 2);
    auto ha = ctx.send_matrix(a.data(), m, n);
    auto hb = ctx.send_matrix(b.data(), n, k);

    auto before = ctx.counters();
    auto hc = client::wrappers::gemm(ctx, ha, hb);
    auto after_run = ctx.counters();

    // The run reply is a handle, not data: only a sliver of control traffic,
    // and not a single row message.
    CHECK(after_run.row_messages_received == before.row_messages_received);
    CHECK(after_run.row_payload_bytes_received == before.row_payload_bytes_received);
    CHECK(after_run.control_bytes_received - before.control_bytes_received < 4096);

    auto c = ctx.fetch_matrix(hc);
    auto after_fetch = ctx.counters();
    CHECK(c.size() == m * k);
    // The fetch moves exactly the matrix payload.
    CHECK(after_fetch.row_payload_bytes_received - after_run.row_payload_bytes_received ==
          m * k * sizeof(double));

    ctx.stop();
    srv->stop();
}

TEST_CASE("batch budget dictates the row-message count") {
    const std::uint64_t m = 640, n = 10; // 80-byte rows
    auto a = random_matrix(m, n, 77);

    struct Case {
        std::uint64_t batch;
        std::uint64_t per_msg;
    };
    for (auto [batch, per_msg] : {Case{1, 1}, Case{800, 10}, Case{1 << 20, m}}) {
        auto srv = make_server(2);
        ClientConfig cfg;
        cfg.batch_bytes = batch;
        auto ctx = BridgeContext::connect(srv->control_endpoint(), cfg);
        ctx.request_workers(2);
        auto before = ctx.counters();
        auto h = ctx.send_matrix(a.data(), m, n);
        auto after = ctx.counters();

        // Expected: each worker's 320-row span split into ceil(320/per_msg)
        // messages.
        std::uint64_t per_worker = (320 + per_msg - 1) / per_msg;
        CHECK(after.row_messages_sent - before.row_messages_sent == 2 * per_worker);

        // Per-worker counters add up to the total.
        std::uint64_t sum = 0;
        for (auto v : after.row_messages_per_worker) sum += v;
        CHECK(sum == after.row_messages_sent);

        (void)h;
        ctx.stop();
        srv->stop();
    }
}

TEST_CASE("fetches larger than the batch budget arrive chunked but complete") {
    auto srv = make_server(2);
    ClientConfig cfg;
    cfg.batch_bytes = 256; // tiny: forces many reply frames
    auto ctx = BridgeContext::connect(srv->control_endpoint(), cfg);
    ctx.request_workers(2);
    const std::uint64_t m = 100, n = 16; // rows are 128 bytes; 2 rows per reply
    auto a = random_matrix(m, n, 3);
    auto h = ctx.send_matrix(a.data(), m, n);

    auto before = ctx.counters();
    auto back = ctx.fetch_matrix(h);
    auto after = ctx.counters();
    CHECK(back == a);
    CHECK(after.row_messages_received - before.row_messages_received == 50);
    ctx.stop();
    srv->stop();
}

TEST_CASE("client validates fetch and send ranges against the handle") {
    auto srv = make_server(2);
    auto ctx = BridgeContext::connect(srv->control_endpoint());
    ctx.request_workers(2);
    auto a = random_matrix(10, 4, 9);
    auto h = ctx.send_matrix(a.data(), 10, 4);

    std::vector<double> out(10 * 4);
    CHECK(code_of([&] { ctx.fetch_rows(h, 8, 3, out.data()); }) == ErrorCode::argument_error);
    CHECK(code_of([&] { ctx.send_rows(h, 10, 1, a.data()); }) == ErrorCode::argument_error);
    ctx.stop();
    srv->stop();
}

TEST_CASE("connecting to a dead endpoint raises connect_error") {
    // Bind-then-close to obtain a port that is very likely unused.
    std::uint16_t dead_port;
    {
        auto l = net::Listener::bind({"127.0.0.1", 0});
        dead_port = l.port();
    }
    CHECK(code_of([&] {
              BridgeContext::connect({"127.0.0.1", dead_port});
          }) == ErrorCode::connect_error);
}

TEST_CASE("missing info files are reported as connect errors") {
    CHECK(code_of([&] {
              BridgeContext::connect_info_file("/tmp/matbridge_no_such_info_file");
          }) == ErrorCode::connect_error);
}

TEST_CASE("layout_of agrees with the worker boundaries used by the server") {
    auto srv = make_server(3);
    auto ctx = BridgeContext::connect(srv->control_endpoint());
    ctx.request_workers(3);
    auto a = random_matrix(10, 2, 1);
    auto h = ctx.send_matrix(a.data(), 10, 2);
    auto layout = ctx.layout_of(h);
    CHECK(layout.boundaries == std::vector<std::uint64_t>({0, 3, 6, 10}));
    ctx.stop();
    srv->stop();
}

TEST_CASE("stop is safe to call repeatedly and after close") {
    auto srv = make_server(1);
    auto ctx = BridgeContext::connect(srv->control_endpoint());
    ctx.request_workers(1);
    ctx.close_session();
    ctx.stop();
    CHECK_NOTHROW(ctx.stop());
    srv->stop();
}

TEST_CASE("run round-trips scalar values") {
    auto srv = make_server(2);
    auto ctx = BridgeContext::connect(srv->control_endpoint());
    ctx.request_workers(2);
    ctx.register_library("mathlib");
    auto outs = ctx.run("mathlib", "random_uniform",
                        {Value(std::int64_t(6)), Value(std::int64_t(4)),
                         Value(std::int64_t(99))});
    REQUIRE(outs.size() == 1);
    auto h = std::get<MatrixHandle>(outs[0]);
    CHECK(h.rows == 6);
    CHECK(h.cols == 4);
    ctx.stop();
    srv->stop();
}
