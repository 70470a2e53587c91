#include "matbridge/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "matbridge/distmatrix.hpp"
#include "matbridge/errors.hpp"
#include "matbridge/mathlib.hpp"

namespace matbridge::bench {

using client::BridgeContext;
using client::ClientConfig;
using client::TransferCounters;
using Clock = std::chrono::steady_clock;

namespace {

template <class... Args>
std::string strf(const char* f, Args... args) {
    int n = std::snprintf(nullptr, 0, f, args...);
    if (n < 0) return {};
    std::string s(static_cast<std::size_t>(n), '\0');
    std::snprintf(s.data(), s.size() + 1, f, args...);
    return s;
}

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string trim(std::string_view sv) {
    const char* ws = " \t\r\n";
    auto b = sv.find_first_not_of(ws);
    if (b == std::string_view::npos) return {};
    auto e = sv.find_last_not_of(ws);
    return std::string(sv.substr(b, e - b + 1));
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    if (v.empty() || v[0] == '-')
        throw BridgeError(ErrorCode::argument_error,
                          "scenario key '" + key + "': expected unsigned integer, got '" + v + "'");
    try {
        std::size_t pos = 0;
        std::uint64_t out = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw BridgeError(ErrorCode::argument_error,
                          "scenario key '" + key + "': expected unsigned integer, got '" + v + "'");
    }
}

int parse_int_field(const std::string& key, const std::string& v) {
    std::uint64_t out = parse_u64(key, v);
    if (out > 1'000'000)
        throw BridgeError(ErrorCode::argument_error, "scenario key '" + key + "': value too large");
    return static_cast<int>(out);
}

// Runs fn(0..clients-1) on one thread each and rethrows the first failure.
template <class Fn>
void run_on_clients(int clients, Fn&& fn) {
    if (clients <= 1) {
        fn(0);
        return;
    }
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(clients));
    std::exception_ptr first;
    std::mutex mu;
    for (int c = 0; c < clients; ++c) {
        threads.emplace_back([&, c] {
            try {
                fn(c);
            } catch (...) {
                std::lock_guard<std::mutex> lk(mu);
                if (!first) first = std::current_exception();
            }
        });
    }
    for (auto& t : threads) t.join();
    if (first) std::rethrow_exception(first);
}

TransferCounters counters_diff(const TransferCounters& after, const TransferCounters& before) {
    TransferCounters d;
    d.row_messages_sent = after.row_messages_sent - before.row_messages_sent;
    d.row_messages_received = after.row_messages_received - before.row_messages_received;
    d.row_payload_bytes_sent = after.row_payload_bytes_sent - before.row_payload_bytes_sent;
    d.row_payload_bytes_received =
        after.row_payload_bytes_received - before.row_payload_bytes_received;
    d.control_bytes_received = after.control_bytes_received - before.control_bytes_received;
    d.data_bytes_received = after.data_bytes_received - before.data_bytes_received;
    d.data_bytes_sent = after.data_bytes_sent - before.data_bytes_sent;
    d.row_messages_per_worker.resize(after.row_messages_per_worker.size(), 0);
    for (std::size_t i = 0; i < d.row_messages_per_worker.size(); ++i) {
        std::uint64_t prev =
            i < before.row_messages_per_worker.size() ? before.row_messages_per_worker[i] : 0;
        d.row_messages_per_worker[i] = after.row_messages_per_worker[i] - prev;
    }
    return d;
}

std::string describe_error(const std::exception& e) {
    if (const auto* be = dynamic_cast<const BridgeError*>(&e))
        return std::string(error_code_name(be->code())) + ": " + be->what();
    return e.what();
}

PhaseStats stats_over(const TimingReport& report, double Repetition::*field) {
    std::vector<double> vals;
    for (const auto& r : report.reps)
        if (!r.failed) vals.push_back(r.*field);
    PhaseStats s;
    if (vals.empty()) return s;
    double sum = 0;
    for (double v : vals) sum += v;
    s.mean = sum / static_cast<double>(vals.size());
    if (vals.size() >= 3) {
        std::sort(vals.begin(), vals.end());
        double tsum = 0;
        for (std::size_t i = 1; i + 1 < vals.size(); ++i) tsum += vals[i];
        s.trimmed_mean = tsum / static_cast<double>(vals.size() - 2);
    } else {
        s.trimmed_mean = s.mean;
    }
    return s;
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += "\"";
    return out;
}

// Splits one csv line honoring double-quoted fields with "" escapes.
std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    fields.push_back(std::move(cur));
    return fields;
}

double parse_f64_field(const std::string& v) {
    try {
        return v.empty() ? 0.0 : std::stod(v);
    } catch (const std::exception&) {
        throw BridgeError(ErrorCode::argument_error, "bad csv number '" + v + "'");
    }
}

std::uint64_t rows_per_message_for(std::uint64_t n, std::uint64_t batch_bytes) {
    std::uint64_t row_bytes = n * sizeof(double);
    if (row_bytes == 0) return 1;
    return std::max<std::uint64_t>(1, batch_bytes / row_bytes);
}

} // namespace

void Scenario::validate() const {
    if (routine != "gemm" && routine != "svd")
        throw BridgeError(ErrorCode::argument_error,
                          "scenario routine must be 'gemm' or 'svd', got '" + routine + "'");
    if (m < 1 || n < 1 || k < 1)
        throw BridgeError(ErrorCode::argument_error, "scenario m, n, k must be >= 1");
    if (routine == "svd" && k > std::min(m, n))
        throw BridgeError(ErrorCode::argument_error, "svd rank k must be <= min(m, n)");
    if (clients < 1) throw BridgeError(ErrorCode::argument_error, "scenario clients must be >= 1");
    if (workers < 1) throw BridgeError(ErrorCode::argument_error, "scenario workers must be >= 1");
    if (batch_bytes < 1)
        throw BridgeError(ErrorCode::argument_error, "scenario batch_bytes must be >= 1");
    if (reps < 1) throw BridgeError(ErrorCode::argument_error, "scenario reps must be >= 1");
}

Scenario parse_scenario_text(const std::string& text) {
    Scenario s;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        auto eq = t.find('=');
        if (eq == std::string::npos)
            throw BridgeError(ErrorCode::argument_error,
                              "scenario line is not key=value: '" + t + "'");
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (key == "routine") s.routine = value;
        else if (key == "m") s.m = parse_u64(key, value);
        else if (key == "n") s.n = parse_u64(key, value);
        else if (key == "k") s.k = parse_u64(key, value);
        else if (key == "clients") s.clients = parse_int_field(key, value);
        else if (key == "workers") s.workers = parse_int_field(key, value);
        else if (key == "batch_bytes") s.batch_bytes = parse_u64(key, value);
        else if (key == "seed") s.seed = parse_u64(key, value);
        else if (key == "reps") s.reps = parse_int_field(key, value);
        else
            throw BridgeError(ErrorCode::argument_error, "unknown scenario key '" + key + "'");
    }
    s.validate();
    return s;
}

Scenario parse_scenario_file(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw BridgeError(ErrorCode::argument_error, "cannot open scenario file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_scenario_text(buf.str());
}

int TimingReport::successes() const {
    int n = 0;
    for (const auto& r : reps)
        if (!r.failed) ++n;
    return n;
}

bool TimingReport::all_failed() const { return !reps.empty() && successes() == 0; }

PhaseStats TimingReport::send() const { return stats_over(*this, &Repetition::send_s); }
PhaseStats TimingReport::compute() const { return stats_over(*this, &Repetition::compute_s); }
PhaseStats TimingReport::receive() const { return stats_over(*this, &Repetition::receive_s); }
PhaseStats TimingReport::total() const { return stats_over(*this, &Repetition::total_s); }

std::uint64_t expected_row_messages(std::uint64_t m, std::uint64_t n, int workers,
                                    std::uint64_t batch_bytes) {
    auto bounds = dist::partition(m, workers);
    std::uint64_t per_msg = rows_per_message_for(n, batch_bytes);
    std::uint64_t total = 0;
    for (int r = 0; r < workers; ++r) {
        std::uint64_t owned = bounds[static_cast<std::size_t>(r) + 1] -
                              bounds[static_cast<std::size_t>(r)];
        if (owned) total += (owned + per_msg - 1) / per_msg;
    }
    return total;
}

TimingReport run_scenario(const net::Endpoint& driver, const Scenario& scenario,
                          const ClientConfig& base_config) {
    scenario.validate();
    const bool is_gemm = scenario.routine == "gemm";
    const int clients = scenario.clients;

    TimingReport report;
    report.scenario = scenario;
    report.result_rows = scenario.m;
    report.result_cols = scenario.k;

    // Client c ships the block-row slice of each input held between these
    // boundaries; for svd it also fetches the matching slice of V (n rows).
    auto m_bounds = dist::partition(scenario.m, clients);
    auto n_bounds = dist::partition(scenario.n, clients);

    // Pre-generate each client's input slice once; generation is local prep,
    // not transfer, so it stays outside the timed phases.
    std::vector<std::vector<double>> a_parts(static_cast<std::size_t>(clients));
    std::vector<std::vector<double>> b_parts(static_cast<std::size_t>(clients));
    for (int c = 0; c < clients; ++c) {
        std::uint64_t r0 = m_bounds[static_cast<std::size_t>(c)];
        std::uint64_t r1 = m_bounds[static_cast<std::size_t>(c) + 1];
        auto& a = a_parts[static_cast<std::size_t>(c)];
        a.resize((r1 - r0) * scenario.n);
        for (std::uint64_t i = r0; i < r1; ++i)
            for (std::uint64_t j = 0; j < scenario.n; ++j)
                a[(i - r0) * scenario.n + j] = mathlib::uniform01(scenario.seed, i, j);
        if (is_gemm) {
            std::uint64_t s0 = n_bounds[static_cast<std::size_t>(c)];
            std::uint64_t s1 = n_bounds[static_cast<std::size_t>(c) + 1];
            auto& b = b_parts[static_cast<std::size_t>(c)];
            b.resize((s1 - s0) * scenario.k);
            for (std::uint64_t i = s0; i < s1; ++i)
                for (std::uint64_t j = 0; j < scenario.k; ++j)
                    b[(i - s0) * scenario.k + j] = mathlib::uniform01(scenario.seed + 1, i, j);
        }
    }

    for (int rep = 0; rep < scenario.reps; ++rep) {
        Repetition r;
        std::optional<Clock::time_point> rep_start;
        try {
            ClientConfig cfg = base_config;
            cfg.batch_bytes = scenario.batch_bytes;
            if (cfg.client_name.empty() || cfg.client_name == "client") cfg.client_name = "bench";

            // Fresh session per repetition so server-side matrices from the
            // previous repetition are released.
            std::vector<BridgeContext> ctxs;
            ctxs.reserve(static_cast<std::size_t>(clients));
            ctxs.push_back(BridgeContext::connect(driver, cfg));
            ctxs[0].request_workers(scenario.workers);
            ctxs[0].register_library("mathlib");
            for (int c = 1; c < clients; ++c)
                ctxs.push_back(BridgeContext::attach(ctxs[0].ticket(), cfg));
            const int granted = ctxs[0].workers();

            std::vector<TransferCounters> pre(static_cast<std::size_t>(clients));
            for (int c = 0; c < clients; ++c) pre[static_cast<std::size_t>(c)] = ctxs[static_cast<std::size_t>(c)].counters();

            // --- send phase ---
            auto t_send = Clock::now();
            rep_start = t_send;
            MatrixHandle ha = ctxs[0].create_matrix(scenario.m, scenario.n);
            MatrixHandle hb;
            if (is_gemm) hb = ctxs[0].create_matrix(scenario.n, scenario.k);
            run_on_clients(clients, [&](int c) {
                auto& ctx = ctxs[static_cast<std::size_t>(c)];
                std::uint64_t r0 = m_bounds[static_cast<std::size_t>(c)];
                std::uint64_t r1 = m_bounds[static_cast<std::size_t>(c) + 1];
                if (r1 > r0) ctx.send_rows(ha, r0, r1 - r0, a_parts[static_cast<std::size_t>(c)].data());
                if (is_gemm) {
                    std::uint64_t s0 = n_bounds[static_cast<std::size_t>(c)];
                    std::uint64_t s1 = n_bounds[static_cast<std::size_t>(c) + 1];
                    if (s1 > s0) ctx.send_rows(hb, s0, s1 - s0, b_parts[static_cast<std::size_t>(c)].data());
                }
                ctx.flush_rows();
            });
            ctxs[0].await_complete(ha);
            if (is_gemm) ctxs[0].await_complete(hb);
            r.send_s = seconds_since(t_send);

            // --- compute phase ---
            auto t_compute = Clock::now();
            MatrixHandle hu, hv;
            if (is_gemm) {
                hu = client::wrappers::gemm(ctxs[0], ha, hb);
            } else {
                auto svd = client::wrappers::truncated_svd(ctxs[0], ha,
                                                           static_cast<int>(scenario.k));
                hu = svd.u;
                hv = svd.v;
            }
            r.compute_s = seconds_since(t_compute);
            report.result_rows = hu.rows;
            report.result_cols = hu.cols;

            // Allocate fetch buffers outside the timed receive phase.
            std::vector<std::vector<double>> u_out(static_cast<std::size_t>(clients));
            std::vector<std::vector<double>> v_out(static_cast<std::size_t>(clients));
            for (int c = 0; c < clients; ++c) {
                std::uint64_t r0 = m_bounds[static_cast<std::size_t>(c)];
                std::uint64_t r1 = m_bounds[static_cast<std::size_t>(c) + 1];
                u_out[static_cast<std::size_t>(c)].resize((r1 - r0) * hu.cols);
                if (!is_gemm) {
                    std::uint64_t s0 = n_bounds[static_cast<std::size_t>(c)];
                    std::uint64_t s1 = n_bounds[static_cast<std::size_t>(c) + 1];
                    v_out[static_cast<std::size_t>(c)].resize((s1 - s0) * hv.cols);
                }
            }

            // --- receive phase ---
            auto t_recv = Clock::now();
            run_on_clients(clients, [&](int c) {
                auto& ctx = ctxs[static_cast<std::size_t>(c)];
                std::uint64_t r0 = m_bounds[static_cast<std::size_t>(c)];
                std::uint64_t r1 = m_bounds[static_cast<std::size_t>(c) + 1];
                if (r1 > r0) ctx.fetch_rows(hu, r0, r1 - r0, u_out[static_cast<std::size_t>(c)].data());
                if (!is_gemm) {
                    std::uint64_t s0 = n_bounds[static_cast<std::size_t>(c)];
                    std::uint64_t s1 = n_bounds[static_cast<std::size_t>(c) + 1];
                    if (s1 > s0) ctx.fetch_rows(hv, s0, s1 - s0, v_out[static_cast<std::size_t>(c)].data());
                }
            });
            r.receive_s = seconds_since(t_recv);
            r.total_s = seconds_since(t_send);

            r.messages_per_pair.assign(
                static_cast<std::size_t>(clients) * static_cast<std::size_t>(granted), 0);
            for (int c = 0; c < clients; ++c) {
                auto d = counters_diff(ctxs[static_cast<std::size_t>(c)].counters(),
                                       pre[static_cast<std::size_t>(c)]);
                r.row_messages_sent += d.row_messages_sent;
                r.row_messages_received += d.row_messages_received;
                r.payload_bytes_sent += d.row_payload_bytes_sent;
                r.payload_bytes_received += d.row_payload_bytes_received;
                for (int w = 0; w < granted &&
                                static_cast<std::size_t>(w) < d.row_messages_per_worker.size();
                     ++w)
                    r.messages_per_pair[static_cast<std::size_t>(c) *
                                            static_cast<std::size_t>(granted) +
                                        static_cast<std::size_t>(w)] =
                        d.row_messages_per_worker[static_cast<std::size_t>(w)];
            }

            ctxs[0].close_session();
            for (auto& ctx : ctxs) ctx.stop();
        } catch (const std::exception& e) {
            r.failed = true;
            r.error = describe_error(e);
            if (rep_start) r.total_s = seconds_since(*rep_start);
        }
        report.reps.push_back(std::move(r));
    }
    return report;
}

TransferReport transfer_experiment(const net::Endpoint& driver, TransferShape tall,
                                   TransferShape wide,
                                   const std::vector<std::uint64_t>& batches, int workers,
                                   std::uint64_t seed) {
    if (tall.m < 1 || tall.n < 1 || wide.m < 1 || wide.n < 1)
        throw BridgeError(ErrorCode::argument_error, "transfer shapes must be at least 1 x 1");
    if (static_cast<unsigned __int128>(tall.m) * tall.n !=
        static_cast<unsigned __int128>(wide.m) * wide.n)
        throw BridgeError(ErrorCode::argument_error,
                          "transfer shapes must hold the same number of elements");
    if (batches.empty())
        throw BridgeError(ErrorCode::argument_error, "transfer experiment needs batch sizes");
    for (auto b : batches)
        if (b < 1)
            throw BridgeError(ErrorCode::argument_error, "batch sizes must be >= 1");
    if (workers < 1)
        throw BridgeError(ErrorCode::argument_error, "transfer experiment needs >= 1 worker");

    TransferReport report;
    report.tall = tall;
    report.wide = wide;
    report.workers = workers;

    for (const TransferShape& shape : {tall, wide}) {
        std::vector<double> data(shape.m * shape.n);
        for (std::uint64_t i = 0; i < shape.m; ++i)
            for (std::uint64_t j = 0; j < shape.n; ++j)
                data[i * shape.n + j] = mathlib::uniform01(seed, i, j);

        for (std::uint64_t batch : batches) {
            // A fresh session per pass releases the previous copy server-side.
            ClientConfig cfg;
            cfg.client_name = "transfer";
            cfg.batch_bytes = batch;
            auto ctx = BridgeContext::connect(driver, cfg);
            ctx.request_workers(workers);
            auto pre = ctx.counters();

            auto t0 = Clock::now();
            auto h = ctx.create_matrix(shape.m, shape.n);
            ctx.send_rows(h, 0, shape.m, data.data());
            ctx.flush_rows();
            ctx.await_complete(h);
            double dt = seconds_since(t0);

            auto d = counters_diff(ctx.counters(), pre);
            TransferRow row;
            row.shape = shape;
            row.batch_bytes = batch;
            row.rows_per_message = rows_per_message_for(shape.n, batch);
            row.messages = d.row_messages_sent;
            row.expected_messages = expected_row_messages(shape.m, shape.n, workers, batch);
            row.send_s = dt;
            double mb = static_cast<double>(shape.m) * static_cast<double>(shape.n) * 8.0 / 1e6;
            row.send_mb_per_s = dt > 0 ? mb / dt : 0.0;
            report.rows.push_back(row);

            ctx.close_session();
            ctx.stop();
        }
    }
    return report;
}

ReportFormat parse_report_format(const std::string& name) {
    if (name == "table") return ReportFormat::table;
    if (name == "csv") return ReportFormat::csv;
    throw BridgeError(ErrorCode::argument_error,
                      "unknown report format '" + name + "' (expected table or csv)");
}

const char* const timing_csv_header =
    "routine,m,n,k,clients,workers,batch_bytes,seed,rep,status,send_s,compute_s,receive_s,"
    "total_s,row_messages_sent,row_messages_received,payload_bytes_sent,payload_bytes_received,"
    "result_rows,result_cols,error";

namespace {

std::string scenario_line(const Scenario& s) {
    return strf("routine=%s m=%llu n=%llu k=%llu clients=%d workers=%d batch_bytes=%llu "
                "seed=%llu reps=%d",
                s.routine.c_str(), static_cast<unsigned long long>(s.m),
                static_cast<unsigned long long>(s.n), static_cast<unsigned long long>(s.k),
                s.clients, s.workers, static_cast<unsigned long long>(s.batch_bytes),
                static_cast<unsigned long long>(s.seed), s.reps);
}

std::string timing_table(const TimingReport& report) {
    std::string out;
    out += "scenario: " + scenario_line(report.scenario) + "\n\n";
    if (report.all_failed()) {
        out += strf("FAILED: all %zu repetitions failed\n", report.reps.size());
        for (std::size_t i = 0; i < report.reps.size(); ++i)
            out += strf("  rep %zu: %s\n", i + 1, report.reps[i].error.c_str());
        return out;
    }
    auto send = report.send();
    auto compute = report.compute();
    auto receive = report.receive();
    auto total = report.total();
    std::string dims = strf("%llu x %llu", static_cast<unsigned long long>(report.result_rows),
                            static_cast<unsigned long long>(report.result_cols));
    out += strf("%-16s  %-10s  %-7s  %-10s  %-11s  %-11s  %-10s\n", "result dims", "size",
                "workers", "send (s)", "compute (s)", "receive (s)", "total (s)");
    out += strf("%-16s  %-10s  %-7d  %-10.3f  %-11.3f  %-11.3f  %-10.3f\n", dims.c_str(),
                strf("%.1f GB", report.result_gb()).c_str(), report.scenario.workers, send.mean,
                compute.mean, receive.mean, total.mean);
    out += "\n";
    out += strf("%-5s  %-10s  %-11s  %-11s  %-10s  %-11s  %s\n", "rep", "send (s)", "compute (s)",
                "receive (s)", "total (s)", "msgs sent", "status");
    for (std::size_t i = 0; i < report.reps.size(); ++i) {
        const auto& r = report.reps[i];
        std::string status = r.failed ? ("failed: " + r.error) : "ok";
        out += strf("%-5zu  %-10.3f  %-11.3f  %-11.3f  %-10.3f  %-11llu  %s\n", i + 1, r.send_s,
                    r.compute_s, r.receive_s, r.total_s,
                    static_cast<unsigned long long>(r.row_messages_sent), status.c_str());
    }
    out += strf("%-5s  %-10.3f  %-11.3f  %-11.3f  %-10.3f\n", "mean", send.mean, compute.mean,
                receive.mean, total.mean);
    out += strf("%-5s  %-10.3f  %-11.3f  %-11.3f  %-10.3f\n", "trim", send.trimmed_mean,
                compute.trimmed_mean, receive.trimmed_mean, total.trimmed_mean);
    return out;
}

std::string timing_csv(const TimingReport& report) {
    std::string out = timing_csv_header;
    out += "\n";
    const auto& s = report.scenario;
    for (std::size_t i = 0; i < report.reps.size(); ++i) {
        const auto& r = report.reps[i];
        out += strf("%s,%llu,%llu,%llu,%d,%d,%llu,%llu,%zu,%s,", csv_escape(s.routine).c_str(),
                    static_cast<unsigned long long>(s.m), static_cast<unsigned long long>(s.n),
                    static_cast<unsigned long long>(s.k), s.clients, s.workers,
                    static_cast<unsigned long long>(s.batch_bytes),
                    static_cast<unsigned long long>(s.seed), i + 1, r.failed ? "failed" : "ok");
        out += strf("%.17g,%.17g,%.17g,%.17g,", r.send_s, r.compute_s, r.receive_s, r.total_s);
        out += strf("%llu,%llu,%llu,%llu,%llu,%llu,",
                    static_cast<unsigned long long>(r.row_messages_sent),
                    static_cast<unsigned long long>(r.row_messages_received),
                    static_cast<unsigned long long>(r.payload_bytes_sent),
                    static_cast<unsigned long long>(r.payload_bytes_received),
                    static_cast<unsigned long long>(report.result_rows),
                    static_cast<unsigned long long>(report.result_cols));
        out += csv_escape(r.error);
        out += "\n";
    }
    return out;
}

} // namespace

std::string format_report(const TimingReport& report, ReportFormat format) {
    return format == ReportFormat::table ? timing_table(report) : timing_csv(report);
}

std::string format_report(const TransferReport& report, ReportFormat format) {
    std::string out;
    if (format == ReportFormat::table) {
        out += strf("transfer: tall %llu x %llu, wide %llu x %llu, workers %d\n\n",
                    static_cast<unsigned long long>(report.tall.m),
                    static_cast<unsigned long long>(report.tall.n),
                    static_cast<unsigned long long>(report.wide.m),
                    static_cast<unsigned long long>(report.wide.n), report.workers);
        out += strf("%-16s  %-11s  %-9s  %-10s  %-10s  %-9s  %s\n", "shape", "batch (B)",
                    "rows/msg", "messages", "expected", "send (s)", "MB/s");
        for (const auto& r : report.rows) {
            std::string shape = strf("%llu x %llu", static_cast<unsigned long long>(r.shape.m),
                                     static_cast<unsigned long long>(r.shape.n));
            out += strf("%-16s  %-11llu  %-9llu  %-10llu  %-10llu  %-9.3f  %.1f\n", shape.c_str(),
                        static_cast<unsigned long long>(r.batch_bytes),
                        static_cast<unsigned long long>(r.rows_per_message),
                        static_cast<unsigned long long>(r.messages),
                        static_cast<unsigned long long>(r.expected_messages), r.send_s,
                        r.send_mb_per_s);
        }
    } else {
        out += "shape_m,shape_n,batch_bytes,rows_per_message,messages,expected_messages,"
               "send_s,send_mb_per_s\n";
        for (const auto& r : report.rows)
            out += strf("%llu,%llu,%llu,%llu,%llu,%llu,%.17g,%.17g\n",
                        static_cast<unsigned long long>(r.shape.m),
                        static_cast<unsigned long long>(r.shape.n),
                        static_cast<unsigned long long>(r.batch_bytes),
                        static_cast<unsigned long long>(r.rows_per_message),
                        static_cast<unsigned long long>(r.messages),
                        static_cast<unsigned long long>(r.expected_messages), r.send_s,
                        r.send_mb_per_s);
    }
    return out;
}

std::vector<TimingCsvRow> parse_timing_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line))
        throw BridgeError(ErrorCode::argument_error, "empty csv input");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != timing_csv_header)
        throw BridgeError(ErrorCode::argument_error, "unexpected csv header: '" + line + "'");
    std::vector<TimingCsvRow> rows;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        auto f = split_csv_line(line);
        if (f.size() != 21)
            throw BridgeError(ErrorCode::argument_error,
                              strf("csv row has %zu fields, expected 21", f.size()));
        TimingCsvRow row;
        row.scenario.routine = f[0];
        row.scenario.m = parse_u64("m", f[1]);
        row.scenario.n = parse_u64("n", f[2]);
        row.scenario.k = parse_u64("k", f[3]);
        row.scenario.clients = parse_int_field("clients", f[4]);
        row.scenario.workers = parse_int_field("workers", f[5]);
        row.scenario.batch_bytes = parse_u64("batch_bytes", f[6]);
        row.scenario.seed = parse_u64("seed", f[7]);
        row.rep = parse_int_field("rep", f[8]);
        row.data.failed = f[9] == "failed";
        row.data.send_s = parse_f64_field(f[10]);
        row.data.compute_s = parse_f64_field(f[11]);
        row.data.receive_s = parse_f64_field(f[12]);
        row.data.total_s = parse_f64_field(f[13]);
        row.data.row_messages_sent = parse_u64("row_messages_sent", f[14]);
        row.data.row_messages_received = parse_u64("row_messages_received", f[15]);
        row.data.payload_bytes_sent = parse_u64("payload_bytes_sent", f[16]);
        row.data.payload_bytes_received = parse_u64("payload_bytes_received", f[17]);
        row.result_rows = parse_u64("result_rows", f[18]);
        row.result_cols = parse_u64("result_cols", f[19]);
        row.data.error = f[20];
        rows.push_back(std::move(row));
    }
    return rows;
}

} // namespace matbridge::bench
