#include <doctest.h>

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "matbridge/bench.hpp"
#include "matbridge/distmatrix.hpp"
#include "matbridge/errors.hpp"
#include "matbridge/server.hpp"

using namespace matbridge;
using bench::ReportFormat;
using bench::Scenario;

namespace {

std::unique_ptr<server::Server> make_server(int workers) {
    server::ServerConfig sc;
    sc.workers = workers;
    return server::start_local_server(sc);
}

ErrorCode code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const BridgeError& e) {
        return e.code();
    }
    return ErrorCode::internal_error;
}

// Brute-force oracle: simulate one client walking rows 0..m-1, cutting a
// message whenever the owner changes or the batch fills up.
std::uint64_t simulate_messages(std::uint64_t m, std::uint64_t n, int workers,
                                std::uint64_t batch_bytes) {
    auto layout = dist::make_layout(m, n, workers);
    std::uint64_t row_bytes = n * sizeof(double);
    std::uint64_t per_msg = std::max<std::uint64_t>(1, batch_bytes / row_bytes);
    std::uint64_t messages = 0, row = 0;
    while (row < m) {
        int owner = dist::owner_of_row(layout, row);
        std::uint64_t run_end = layout.row_end(owner);
        std::uint64_t take = std::min(per_msg, run_end - row);
        ++messages;
        row += take;
    }
    return messages;
}

} // namespace

TEST_CASE("scenario files parse keys, comments and defaults") {
    auto s = bench::parse_scenario_text("# benchmark\n"
                                        "routine = gemm\n"
                                        "m=100\n"
                                        "  n = 20\n"
                                        "k=30\n"
                                        "\n"
                                        "clients=2\n"
                                        "workers=3\n"
                                        "batch_bytes=4096\n"
                                        "seed=9\n"
                                        "reps=4\n");
    CHECK(s.routine == "gemm");
    CHECK(s.m == 100);
    CHECK(s.n == 20);
    CHECK(s.k == 30);
    CHECK(s.clients == 2);
    CHECK(s.workers == 3);
    CHECK(s.batch_bytes == 4096);
    CHECK(s.seed == 9);
    CHECK(s.reps == 4);

    // Omitted keys keep their defaults.
    auto d = bench::parse_scenario_text("routine=svd\nm=50\nn=10\nk=3\n");
    CHECK(d.clients == 1);
    CHECK(d.batch_bytes == 1 << 20);
    CHECK(d.reps == 1);
}

TEST_CASE("scenario parsing rejects bad input") {
    CHECK(code_of([] { bench::parse_scenario_text("routine=gemm\nm=10\nn=10\nk=10\nwat=1\n"); }) ==
          ErrorCode::argument_error);
    CHECK(code_of([] { bench::parse_scenario_text("m=ten\n"); }) == ErrorCode::argument_error);
    CHECK(code_of([] { bench::parse_scenario_text("m=-4\n"); }) == ErrorCode::argument_error);
    CHECK(code_of([] { bench::parse_scenario_text("routine gemm\n"); }) ==
          ErrorCode::argument_error);
    // Validation failures.
    CHECK(code_of([] { bench::parse_scenario_text("routine=qr\nm=2\nn=2\nk=1\n"); }) ==
          ErrorCode::argument_error);
    CHECK(code_of([] { bench::parse_scenario_text("routine=gemm\nm=2\nn=2\nk=1\nreps=0\n"); }) ==
          ErrorCode::argument_error);
    CHECK(code_of([] { bench::parse_scenario_text("routine=svd\nm=5\nn=3\nk=4\n"); }) ==
          ErrorCode::argument_error);
    CHECK(code_of([] { bench::parse_scenario_file("/tmp/no_such_scenario_file"); }) ==
          ErrorCode::argument_error);
}

TEST_CASE("expected_row_messages matches a step-by-step simulation") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 300; ++trial) {
        std::uint64_t m = 1 + rng() % 3000;
        std::uint64_t n = 1 + rng() % 50;
        int workers = 1 + int(rng() % 8);
        std::uint64_t batch = 1 + rng() % 8192;
        CHECK(bench::expected_row_messages(m, n, workers, batch) ==
              simulate_messages(m, n, workers, batch));
    }
}

TEST_CASE("run_scenario reports phases, messages and totals that add up") {
    auto srv = make_server(3);
    Scenario s;
    s.routine = "gemm";
    s.m = 60;
    s.n = 20;
    s.k = 12;
    s.clients = 1;
    s.workers = 2;
    s.batch_bytes = 512;
    s.seed = 4;
    s.reps = 3;

    auto report = bench::run_scenario(srv->control_endpoint(), s);
    REQUIRE(report.reps.size() == 3);
    CHECK(report.successes() == 3);
    CHECK(report.result_rows == 60);
    CHECK(report.result_cols == 12);

    for (const auto& r : report.reps) {
        CHECK_FALSE(r.failed);
        CHECK(r.send_s > 0);
        CHECK(r.compute_s > 0);
        CHECK(r.receive_s > 0);
        // The phases are disjoint intervals inside the repetition.
        CHECK(r.send_s + r.compute_s + r.receive_s <= r.total_s * 1.05);

        // Message law: A's rows plus B's rows, split by owner and batch.
        std::uint64_t want = bench::expected_row_messages(60, 20, 2, 512) +
                             bench::expected_row_messages(20, 12, 2, 512);
        CHECK(r.row_messages_sent == want);

        // The per-pair matrix accounts for every message.
        REQUIRE(r.messages_per_pair.size() == 2);
        CHECK(r.messages_per_pair[0] + r.messages_per_pair[1] == r.row_messages_sent);

        // Payload accounting: inputs out, result back.
        CHECK(r.payload_bytes_sent == (60 * 20 + 20 * 12) * sizeof(double));
        CHECK(r.payload_bytes_received == 60 * 12 * sizeof(double));
    }

    auto mean = report.send();
    CHECK(mean.mean > 0);
    CHECK(mean.trimmed_mean > 0);
    srv->stop();
}

TEST_CASE("run_scenario with several clients splits the shipping work") {
    auto srv = make_server(2);
    Scenario s;
    s.routine = "gemm";
    s.m = 90;
    s.n = 8;
    s.k = 6;
    s.clients = 3;
    s.workers = 2;
    s.batch_bytes = 1 << 20;
    s.reps = 1;

    auto report = bench::run_scenario(srv->control_endpoint(), s);
    REQUIRE(report.successes() == 1);
    const auto& r = report.reps[0];
    REQUIRE(r.messages_per_pair.size() == 6); // 3 clients x 2 workers

    // Every client ships its contiguous slice of A (30 rows) and of B: with a
    // huge batch budget each (client, owner-run) pair is one message.
    std::uint64_t total = 0;
    for (auto v : r.messages_per_pair) total += v;
    CHECK(total == r.row_messages_sent);
    CHECK(r.payload_bytes_sent == (90 * 8 + 8 * 6) * sizeof(double));
    srv->stop();
}

TEST_CASE("svd scenarios fetch both factor matrices") {
    auto srv = make_server(2);
    Scenario s;
    s.routine = "svd";
    s.m = 80;
    s.n = 24;
    s.k = 6;
    s.workers = 2;
    s.reps = 1;
    s.seed = 11;

    auto report = bench::run_scenario(srv->control_endpoint(), s);
    REQUIRE(report.successes() == 1);
    CHECK(report.result_rows == 80);
    CHECK(report.result_cols == 6);
    // Receive = U (80x6) plus V (24x6).
    CHECK(report.reps[0].payload_bytes_received == (80 * 6 + 24 * 6) * sizeof(double));
    srv->stop();
}

TEST_CASE("a scenario that cannot run yields a failure report, not numbers") {
    auto srv = make_server(1);
    Scenario s;
    s.routine = "gemm";
    s.m = 8;
    s.n = 8;
    s.k = 8;
    s.workers = 5; // pool only has 1
    s.reps = 2;

    auto report = bench::run_scenario(srv->control_endpoint(), s);
    REQUIRE(report.reps.size() == 2);
    CHECK(report.all_failed());
    for (const auto& r : report.reps) {
        CHECK(r.failed);
        CHECK(r.error.find("insufficient_workers") != std::string::npos);
    }

    auto table = bench::format_report(report, ReportFormat::table);
    CHECK(table.find("FAILED: all 2 repetitions failed") != std::string::npos);
    CHECK(table.find("insufficient_workers") != std::string::npos);

    auto csv = bench::format_report(report, ReportFormat::csv);
    auto rows = bench::parse_timing_csv(csv);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].data.failed);
    CHECK(rows[0].data.error == report.reps[0].error);
    srv->stop();
}

TEST_CASE("csv reports round-trip exactly") {
    bench::TimingReport report;
    report.scenario.routine = "gemm";
    report.scenario.m = 10000;
    report.scenario.n = 50;
    report.scenario.k = 10000;
    report.scenario.workers = 4;
    report.scenario.reps = 2;
    report.result_rows = 10000;
    report.result_cols = 10000;

    bench::Repetition ok;
    ok.send_s = 0.1234567890123456;
    ok.compute_s = 2.5;
    ok.receive_s = 1.0 / 3.0;
    ok.total_s = ok.send_s + ok.compute_s + ok.receive_s;
    ok.row_messages_sent = 12345;
    ok.row_messages_received = 678;
    ok.payload_bytes_sent = 4000000;
    ok.payload_bytes_received = 800000000;
    report.reps.push_back(ok);

    bench::Repetition bad;
    bad.failed = true;
    bad.error = "TIMEOUT: rows [5, 10) missing, \"half\" delivered";
    report.reps.push_back(bad);

    auto csv = bench::format_report(report, ReportFormat::csv);
    CHECK(csv.rfind(bench::timing_csv_header, 0) == 0);

    auto rows = bench::parse_timing_csv(csv);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].scenario.routine == "gemm");
    CHECK(rows[0].scenario.m == 10000);
    CHECK(rows[0].rep == 1);
    CHECK(rows[0].result_rows == 10000);
    CHECK(rows[0].result_cols == 10000);
    CHECK(rows[0].data.send_s == ok.send_s); // %.17g representation is exact
    CHECK(rows[0].data.receive_s == ok.receive_s);
    CHECK(rows[0].data.row_messages_sent == 12345);
    CHECK_FALSE(rows[0].data.failed);
    CHECK(rows[1].data.failed);
    CHECK(rows[1].data.error == bad.error); // commas and quotes escaped

    // An empty report is just the stable header.
    bench::TimingReport empty;
    auto empty_csv = bench::format_report(empty, ReportFormat::csv);
    CHECK(empty_csv == std::string(bench::timing_csv_header) + "\n");
    CHECK(bench::parse_timing_csv(empty_csv).empty());
}

TEST_CASE("table reports carry the summary columns and the result size in GB") {
    bench::TimingReport report;
    report.scenario.routine = "gemm";
    report.scenario.m = 10000;
    report.scenario.n = 50;
    report.scenario.k = 10000;
    report.scenario.workers = 4;
    report.result_rows = 10000;
    report.result_cols = 10000;
    bench::Repetition r;
    r.send_s = 1.0;
    r.compute_s = 2.0;
    r.receive_s = 3.0;
    r.total_s = 6.1;
    report.reps.push_back(r);

    CHECK(report.result_gb() == doctest::Approx(0.8).epsilon(1e-12));
    auto table = bench::format_report(report, ReportFormat::table);
    CHECK(table.find("0.8 GB") != std::string::npos);
    for (const char* column :
         {"result dims", "size", "workers", "send (s)", "compute (s)", "receive (s)",
          "total (s)"})
        CHECK(table.find(column) != std::string::npos);
    CHECK(table.find("10000 x 10000") != std::string::npos);
}

TEST_CASE("phase statistics use the trimmed mean alongside the mean") {
    bench::TimingReport report;
    for (double v : {1.0, 2.0, 3.0, 10.0}) {
        bench::Repetition r;
        r.send_s = v;
        report.reps.push_back(r);
    }
    auto s = report.send();
    CHECK(s.mean == doctest::Approx(4.0));
    CHECK(s.trimmed_mean == doctest::Approx(2.5)); // drops 1 and 10
}

TEST_CASE("transfer experiment obeys the message-count law") {
    auto srv = make_server(2);
    // Scaled-down version of the tall/wide pair: equal volume, 128x row ratio.
    bench::TransferShape tall{5120, 10};
    bench::TransferShape wide{40, 1280};
    std::vector<std::uint64_t> batches = {1, 81920};

    auto report = bench::transfer_experiment(srv->control_endpoint(), tall, wide, batches, 2);
    REQUIRE(report.rows.size() == 4);
    for (const auto& row : report.rows) {
        CHECK(row.messages == row.expected_messages);
        CHECK(row.send_s > 0);
    }

    // With one row per message the counts mirror the row counts exactly.
    CHECK(report.rows[0].messages == 5120); // tall, batch=1
    CHECK(report.rows[2].messages == 40);   // wide, batch=1
    CHECK(report.rows[0].messages / report.rows[2].messages == 128);

    // Batched transfers collapse the gap far below the row ratio.
    double ratio = double(report.rows[1].messages) / double(report.rows[3].messages);
    CHECK(ratio < 2.0);

    auto table = bench::format_report(report, ReportFormat::table);
    CHECK(table.find("5120 x 10") != std::string::npos);
    auto csv = bench::format_report(report, ReportFormat::csv);
    CHECK(csv.find("shape_m,shape_n,") == 0);
    srv->stop();
}

TEST_CASE("transfer experiment rejects mismatched volumes and bad formats") {
    auto srv = make_server(1);
    CHECK(code_of([&] {
              bench::transfer_experiment(srv->control_endpoint(), {100, 10}, {10, 99}, {1}, 1);
          }) == ErrorCode::argument_error);
    CHECK(code_of([&] {
              bench::transfer_experiment(srv->control_endpoint(), {100, 10}, {10, 100}, {}, 1);
          }) == ErrorCode::argument_error);
    CHECK(code_of([] { bench::parse_report_format("yaml"); }) == ErrorCode::argument_error);
    CHECK(bench::parse_report_format("table") == ReportFormat::table);
    CHECK(bench::parse_report_format("csv") == ReportFormat::csv);
    srv->stop();
}
