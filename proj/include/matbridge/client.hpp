#pragma once

// Client SDK: connection management, matrix-handle API, row-partitioned
// send/fetch with client-side routing, and variadic routine invocation.
//
// A context created with connect() owns the session (control channel plus
// one data connection per worker). Sibling contexts created with attach()
// share the session but hold their own data connections, which is how a
// multi-process client streams its row partitions in parallel; handles are
// plain values and may be passed between processes freely.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "matbridge/distmatrix.hpp"
#include "matbridge/net.hpp"
#include "matbridge/protocol.hpp"

namespace matbridge::client {

struct ClientConfig {
    std::string client_name = "client";
    // Row-batch budget for send/fetch streaming. Messages always carry at
    // least one row, so 1 forces one-row-per-message.
    std::uint32_t batch_bytes = 1 << 20;
    int completeness_timeout_ms = 0; // 0 = server default (120 s)
};

struct WorkerEndpoint {
    int rank = 0;
    std::string host;
    std::uint16_t port = 0;
};

// Everything a sibling client process needs to join a session.
struct SessionTicket {
    std::uint32_t session_id = 0;
    std::vector<WorkerEndpoint> workers;
};

// Transfer instrumentation, aggregated over this context's connections.
struct TransferCounters {
    std::uint64_t row_messages_sent = 0;      // SEND_ROWS frames issued
    std::uint64_t row_messages_received = 0;  // row-batch frames received
    std::uint64_t row_payload_bytes_sent = 0; // matrix data only, no framing
    std::uint64_t row_payload_bytes_received = 0;
    std::uint64_t control_bytes_received = 0; // raw bytes on the control socket
    std::uint64_t data_bytes_received = 0;    // raw bytes on data sockets
    std::uint64_t data_bytes_sent = 0;
    std::vector<std::uint64_t> row_messages_per_worker; // SEND_ROWS frames by rank
};

class BridgeContext {
public:
    // Establishes a session with the driver. The endpoint form takes
    // "host:port"; the info-file form reads the three-line file written by
    // the server launcher (hostname, address, port).
    static BridgeContext connect(const net::Endpoint& driver, ClientConfig config = {});
    static BridgeContext connect_info_file(const std::string& path, ClientConfig config = {});

    // Joins an existing session with data connections only. Attached
    // contexts can send_rows / flush_rows / fetch_rows; control operations
    // throw state_error.
    static BridgeContext attach(const SessionTicket& ticket, ClientConfig config = {});

    BridgeContext(BridgeContext&&) noexcept;
    BridgeContext& operator=(BridgeContext&&) noexcept;
    ~BridgeContext();

    std::uint32_t session_id() const;
    int workers() const; // granted worker count (0 before request_workers)
    SessionTicket ticket() const;

    // --- control-plane ------------------------------------------------------
    int request_workers(int n);
    void register_library(const std::string& name, const std::string& locator = "");
    MatrixHandle create_matrix(std::uint64_t m, std::uint64_t n);
    std::vector<Value> run(const std::string& library, const std::string& routine,
                           const std::vector<Value>& args);
    // Blocks until every worker reports the matrix fully ingested
    // (timeout_ms 0 = config/server default).
    void await_complete(const MatrixHandle& h, int timeout_ms = 0);
    void close_session(); // idempotent CLOSE; connection stays usable
    void stop();          // close_session + drop all connections

    // --- data-plane -----------------------------------------------------------
    // Streams rows [start_row, start_row+num_rows) (row-major in data) to
    // their owning workers. Fire-and-forget: errors surface at flush_rows()
    // or await_complete().
    void send_rows(const MatrixHandle& h, std::uint64_t start_row, std::uint64_t num_rows,
                   const double* data);
    // Drains every data connection (zero-row FETCH_ROWS sync) and rethrows
    // the first ingest error the workers recorded.
    void flush_rows();
    void fetch_rows(const MatrixHandle& h, std::uint64_t start_row, std::uint64_t num_rows,
                    double* out);
    std::vector<double> fetch_matrix(const MatrixHandle& h);

    // create + send all rows + flush + await: the single-process path.
    MatrixHandle send_matrix(const double* data, std::uint64_t m, std::uint64_t n);

    // Row layout of a handle under this session's worker count.
    dist::LayoutDescriptor layout_of(const MatrixHandle& h) const;

    TransferCounters counters() const;

    ClientConfig& config();

private:
    BridgeContext();
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// Result bundle for the truncated-SVD wrapper.
struct SvdResult {
    MatrixHandle u;
    std::vector<double> sigma;
    MatrixHandle v;
    bool converged = false;
};

// Thin convenience wrappers over run("mathlib", ...): purely syntactic,
// no added semantics.
namespace wrappers {
MatrixHandle gemm(BridgeContext& ctx, const MatrixHandle& a, const MatrixHandle& b);
SvdResult truncated_svd(BridgeContext& ctx, const MatrixHandle& a, int k);
MatrixHandle transpose(BridgeContext& ctx, const MatrixHandle& a);
double condest(BridgeContext& ctx, const MatrixHandle& a);
MatrixHandle random_uniform(BridgeContext& ctx, std::uint64_t m, std::uint64_t n,
                            std::uint64_t seed);
} // namespace wrappers

} // namespace matbridge::client
