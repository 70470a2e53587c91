#pragma once

// Benchmark harness: timed end-to-end scenarios (send -> compute -> receive)
// against a running server, plus a transfer experiment that measures how the
// row-message count depends on matrix shape and batching.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "matbridge/client.hpp"
#include "matbridge/net.hpp"

namespace matbridge::bench {

// One benchmark configuration.  Parsed from flat key=value text files.
struct Scenario {
    std::string routine = "gemm"; // "gemm" or "svd"
    std::uint64_t m = 0;          // input rows
    std::uint64_t n = 0;          // input cols
    std::uint64_t k = 0;          // gemm: result cols; svd: rank
    int clients = 1;              // concurrent client contexts sharing the session
    int workers = 1;              // workers requested from the pool
    std::uint64_t batch_bytes = 1 << 20; // row-message budget; 1 forces one row/message
    std::uint64_t seed = 0;       // input generator seed
    int reps = 1;                 // repetitions (>= 1)

    void validate() const; // throws BridgeError(argument_error) on bad fields
};

// Parse a scenario from "key=value" lines ('#' comments and blank lines
// allowed).  Unknown keys are an error; missing keys keep defaults.
Scenario parse_scenario_text(const std::string& text);
Scenario parse_scenario_file(const std::string& path);

// Timing and traffic for one repetition.  A failed repetition records the
// error and keeps whatever phase timings completed; it is reported, never
// silently dropped.
struct Repetition {
    double send_s = 0.0;    // all clients ship their input partitions
    double compute_s = 0.0; // routine call on the server
    double receive_s = 0.0; // all clients fetch their result partitions
    double total_s = 0.0;   // whole repetition, wall clock
    std::uint64_t row_messages_sent = 0;
    std::uint64_t row_messages_received = 0;
    std::uint64_t payload_bytes_sent = 0;
    std::uint64_t payload_bytes_received = 0;
    // SEND_ROWS frames by (client, worker), flattened client-major:
    // index = client * workers + worker.
    std::vector<std::uint64_t> messages_per_pair;
    bool failed = false;
    std::string error; // empty on success
};

struct PhaseStats {
    double mean = 0.0;         // arithmetic mean over successful repetitions
    double trimmed_mean = 0.0; // drop one min and one max when >= 3 samples
};

struct TimingReport {
    Scenario scenario;
    std::uint64_t result_rows = 0;
    std::uint64_t result_cols = 0;
    std::vector<Repetition> reps;

    int successes() const;
    bool all_failed() const; // true when no repetition succeeded
    double result_gb() const { return static_cast<double>(result_rows) *
                                      static_cast<double>(result_cols) * 8.0 / 1e9; }
    PhaseStats send() const;
    PhaseStats compute() const;
    PhaseStats receive() const;
    PhaseStats total() const;
};

// Run a scenario against the server listening at `driver`.  The session is
// opened, timed for `reps` repetitions, and closed.  Errors inside a
// repetition mark that repetition failed; errors establishing the session
// propagate as exceptions.
TimingReport run_scenario(const net::Endpoint& driver, const Scenario& scenario,
                          const client::ClientConfig& base_config = {});

// Transfer experiment: ship two equal-volume matrices of different shapes
// under each batch budget and record message counts and send times.
struct TransferShape {
    std::uint64_t m = 0;
    std::uint64_t n = 0;
};

struct TransferRow {
    TransferShape shape;
    std::uint64_t batch_bytes = 0;
    std::uint64_t rows_per_message = 0; // max(1, batch_bytes / (n*8))
    std::uint64_t messages = 0;         // observed SEND_ROWS frames
    std::uint64_t expected_messages = 0; // from the partition/batch law
    double send_s = 0.0;
    double send_mb_per_s = 0.0;
};

struct TransferReport {
    TransferShape tall;
    TransferShape wide;
    int workers = 1;
    std::vector<TransferRow> rows;
};

// Throws BridgeError(argument_error) when the two shapes do not hold the same
// number of elements.  Each (shape, batch) pass uses a fresh session so the
// server's memory stays bounded.
TransferReport transfer_experiment(const net::Endpoint& driver, TransferShape tall,
                                   TransferShape wide,
                                   const std::vector<std::uint64_t>& batches,
                                   int workers, std::uint64_t seed = 1);

// Expected SEND_ROWS frames for one client shipping rows [0, m) of an m x n
// matrix split over `workers` block-row parts with the given budget: the sum
// over owners of ceil(owned_rows / rows_per_message).
std::uint64_t expected_row_messages(std::uint64_t m, std::uint64_t n, int workers,
                                    std::uint64_t batch_bytes);

enum class ReportFormat { table, csv };
ReportFormat parse_report_format(const std::string& name); // "table" | "csv"

// Render a report.  The table layout mirrors the summary columns
// (dims, result size, workers, send, compute, receive, total); csv emits one
// line per repetition under a stable header and stays reparsable.
std::string format_report(const TimingReport& report, ReportFormat format);
std::string format_report(const TransferReport& report, ReportFormat format);

// Stable csv header emitted by format_report(TimingReport, csv).
extern const char* const timing_csv_header;

// Reparse csv produced by format_report(TimingReport, csv).
struct TimingCsvRow {
    Scenario scenario;
    int rep = 0;
    std::uint64_t result_rows = 0;
    std::uint64_t result_cols = 0;
    Repetition data; // messages_per_pair is not carried through csv
};
std::vector<TimingCsvRow> parse_timing_csv(const std::string& text);

} // namespace matbridge::bench
