#include "matbridge/client.hpp"

#include <algorithm>
#include <fstream>

namespace matbridge::client {

struct BridgeContext::Impl {
    ClientConfig config;
    std::uint32_t session_id = 0;
    std::optional<net::FramedConn> control;
    std::vector<WorkerEndpoint> endpoints;            // rank order
    std::vector<std::unique_ptr<net::FramedConn>> data; // rank order, lazy
    std::vector<bool> dirty;                           // data conn has unflushed sends
    bool stopped = false;

    // SDK-level tallies (frame counts alone can't separate row payload from
    // framing).
    TransferCounters tally;

    net::FramedConn& data_conn(int rank) {
        if (rank < 0 || rank >= static_cast<int>(endpoints.size()))
            throw BridgeError(ErrorCode::internal_error, "rank out of range");
        if (!data[rank]) {
            data[rank] = std::make_unique<net::FramedConn>(
                net::Socket::connect({endpoints[rank].host, endpoints[rank].port}));
            dirty[rank] = false;
        }
        return *data[rank];
    }

    Frame control_call(Command c, std::vector<std::uint8_t> payload) {
        if (!control)
            throw BridgeError(ErrorCode::state_error,
                              "attached context has no control channel");
        if (stopped) throw BridgeError(ErrorCode::session_closed, "context stopped");
        Frame req;
        req.command = static_cast<std::uint8_t>(c);
        req.session_id = session_id;
        req.payload = std::move(payload);
        auto reply = control->call(req);
        expect_response(reply, c);
        return reply;
    }

    void require_group() const {
        if (endpoints.empty())
            throw BridgeError(ErrorCode::state_error,
                              "no worker group: call request_workers first");
    }

    std::uint64_t rows_per_message(std::uint64_t n) const {
        const auto row_bytes = n * sizeof(double);
        return std::max<std::uint64_t>(1, config.batch_bytes / std::max<std::uint64_t>(row_bytes, 1));
    }

    void sync_data_conn(int rank) {
        auto& conn = data_conn(rank);
        ByteWriter w;
        w.u32(0);               // matrix_id (ignored for pure sync)
        w.u64(0);               // start_row
        w.u32(0);               // num_rows = 0 → sync
        w.u32(0);               // batch_bytes
        w.u32(0);               // timeout
        conn.send_frame(encode_frame(Command::fetch_rows, session_id, w.data()));
        conn.flush();
        auto reply = conn.recv_frame();
        if (!reply)
            throw BridgeError(ErrorCode::connect_error, "worker closed during sync");
        expect_response(*reply, Command::fetch_rows);
        dirty[rank] = false;
    }
};

BridgeContext::BridgeContext() : impl_(std::make_unique<Impl>()) {}
BridgeContext::BridgeContext(BridgeContext&&) noexcept = default;
BridgeContext& BridgeContext::operator=(BridgeContext&&) noexcept = default;

BridgeContext::~BridgeContext() {
    if (!impl_) return;
    try {
        stop();
    } catch (...) {
        // Destructor cleanup is best-effort; the session also dies with the
        // control connection server-side.
    }
}

BridgeContext BridgeContext::connect(const net::Endpoint& driver, ClientConfig config) {
    BridgeContext ctx;
    auto& impl = *ctx.impl_;
    impl.config = std::move(config);
    impl.control.emplace(net::Socket::connect(driver));

    ByteWriter w;
    encode_value_list(w, {std::int32_t{1}, impl.config.client_name});
    Frame req;
    req.command = static_cast<std::uint8_t>(Command::handshake);
    req.session_id = 0;
    req.payload = w.take();
    auto reply = impl.control->call(req);
    expect_response(reply, Command::handshake);
    impl.session_id = reply.session_id;
    return ctx;
}

BridgeContext BridgeContext::connect_info_file(const std::string& path, ClientConfig config) {
    std::ifstream in(path);
    if (!in)
        throw BridgeError(ErrorCode::connect_error, "cannot read info file '" + path + "'");
    std::string hostname, address, port;
    std::getline(in, hostname);
    std::getline(in, address);
    std::getline(in, port);
    if (address.empty() || port.empty())
        throw BridgeError(ErrorCode::connect_error,
                          "info file '" + path + "' must hold hostname, address, port lines");
    return connect(net::parse_endpoint(address + ":" + port), std::move(config));
}

BridgeContext BridgeContext::attach(const SessionTicket& ticket, ClientConfig config) {
    BridgeContext ctx;
    auto& impl = *ctx.impl_;
    impl.config = std::move(config);
    impl.session_id = ticket.session_id;
    impl.endpoints = ticket.workers;
    impl.data.resize(impl.endpoints.size());
    impl.dirty.assign(impl.endpoints.size(), false);
    return ctx;
}

std::uint32_t BridgeContext::session_id() const { return impl_->session_id; }
int BridgeContext::workers() const { return static_cast<int>(impl_->endpoints.size()); }

SessionTicket BridgeContext::ticket() const {
    impl_->require_group();
    return {impl_->session_id, impl_->endpoints};
}

ClientConfig& BridgeContext::config() { return impl_->config; }

int BridgeContext::request_workers(int n) {
    if (n < 1) throw BridgeError(ErrorCode::argument_error, "worker count must be >= 1");
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(n));
    auto reply = impl_->control_call(Command::request_workers, w.take());
    ByteReader r(reply.payload);
    const auto granted = r.u32();
    impl_->endpoints.clear();
    for (std::uint32_t i = 0; i < granted; ++i) {
        WorkerEndpoint ep;
        ep.rank = static_cast<int>(r.u32());
        ep.host = r.str();
        ep.port = r.u16();
        impl_->endpoints.push_back(std::move(ep));
    }
    r.expect_end();
    impl_->data.resize(impl_->endpoints.size());
    impl_->dirty.assign(impl_->endpoints.size(), false);
    return static_cast<int>(granted);
}

void BridgeContext::register_library(const std::string& name, const std::string& locator) {
    ByteWriter w;
    w.str(name);
    w.str(locator);
    impl_->control_call(Command::register_library, w.take());
}

MatrixHandle BridgeContext::create_matrix(std::uint64_t m, std::uint64_t n) {
    ByteWriter w;
    w.u64(m);
    w.u64(n);
    auto reply = impl_->control_call(Command::create_matrix, w.take());
    ByteReader r(reply.payload);
    MatrixHandle h{r.u32(), m, n};
    r.expect_end();
    return h;
}

std::vector<Value> BridgeContext::run(const std::string& library, const std::string& routine,
                                      const std::vector<Value>& args) {
    ByteWriter w;
    w.str(library);
    w.str(routine);
    encode_value_list(w, args);
    auto reply = impl_->control_call(Command::run, w.take());
    ByteReader r(reply.payload);
    auto outputs = decode_value_list(r);
    r.expect_end();
    return outputs;
}

void BridgeContext::await_complete(const MatrixHandle& h, int timeout_ms) {
    if (timeout_ms == 0) timeout_ms = impl_->config.completeness_timeout_ms;
    ByteWriter w;
    w.u32(h.id);
    w.u64(0);
    w.u32(0); // zero rows → completeness wait
    w.u32(0);
    w.u32(timeout_ms < 0 ? 0 : static_cast<std::uint32_t>(timeout_ms));
    impl_->control_call(Command::fetch_rows, w.take());
}

void BridgeContext::close_session() {
    impl_->control_call(Command::close, {});
}

void BridgeContext::stop() {
    if (impl_->stopped) return;
    if (impl_->control) {
        try {
            flush_rows();
        } catch (...) {
            // Undelivered ingest errors don't matter past this point.
        }
        try {
            close_session();
        } catch (const BridgeError&) {
        }
    }
    impl_->stopped = true;
    for (auto& conn : impl_->data)
        if (conn) conn->shutdown();
    impl_->data.clear();
    if (impl_->control) {
        impl_->control->shutdown();
        impl_->control.reset();
    }
}

dist::LayoutDescriptor BridgeContext::layout_of(const MatrixHandle& h) const {
    impl_->require_group();
    return dist::make_layout(h.rows, h.cols, static_cast<int>(impl_->endpoints.size()));
}

void BridgeContext::send_rows(const MatrixHandle& h, std::uint64_t start_row,
                              std::uint64_t num_rows, const double* data) {
    if (num_rows == 0) return;
    const auto layout = layout_of(h);
    if (start_row + num_rows > h.rows)
        throw BridgeError(ErrorCode::argument_error, "rows out of range");
    const auto per_msg = impl_->rows_per_message(h.cols);

    std::uint64_t row = start_row;
    while (row < start_row + num_rows) {
        const int owner = dist::owner_of_row(layout, row);
        // Stay within both the owner's block and the batch budget.
        const auto owner_end = std::min(layout.row_end(owner), start_row + num_rows);
        const auto count = std::min(per_msg, owner_end - row);
        ByteWriter w;
        encode_row_batch(w,
                         {h.id, row, static_cast<std::uint32_t>(count), h.cols},
                         data + (row - start_row) * h.cols);
        auto& conn = impl_->data_conn(owner);
        conn.send_frame(encode_frame(Command::send_rows, impl_->session_id, w.data()));
        impl_->dirty[owner] = true;
        impl_->tally.row_messages_sent += 1;
        if (impl_->tally.row_messages_per_worker.size() < impl_->endpoints.size())
            impl_->tally.row_messages_per_worker.resize(impl_->endpoints.size(), 0);
        impl_->tally.row_messages_per_worker[static_cast<std::size_t>(owner)] += 1;
        impl_->tally.row_payload_bytes_sent += count * h.cols * sizeof(double);
        row += count;
    }
}

void BridgeContext::flush_rows() {
    for (std::size_t rank = 0; rank < impl_->data.size(); ++rank)
        if (impl_->data[rank] && impl_->dirty[rank]) impl_->sync_data_conn(static_cast<int>(rank));
}

void BridgeContext::fetch_rows(const MatrixHandle& h, std::uint64_t start_row,
                               std::uint64_t num_rows, double* out) {
    if (num_rows == 0) return;
    const auto layout = layout_of(h);
    if (start_row + num_rows > h.rows)
        throw BridgeError(ErrorCode::argument_error, "rows out of range");

    std::vector<double> scratch;
    std::uint64_t row = start_row;
    while (row < start_row + num_rows) {
        const int owner = dist::owner_of_row(layout, row);
        const auto owner_end = std::min(layout.row_end(owner), start_row + num_rows);
        const auto count = owner_end - row;

        ByteWriter w;
        w.u32(h.id);
        w.u64(row);
        w.u32(static_cast<std::uint32_t>(count));
        w.u32(impl_->config.batch_bytes);
        w.u32(0);
        auto& conn = impl_->data_conn(owner);
        conn.send_frame(encode_frame(Command::fetch_rows, impl_->session_id, w.data()));
        conn.flush();

        std::uint64_t received = 0;
        while (received < count) {
            auto reply = conn.recv_frame();
            if (!reply)
                throw BridgeError(ErrorCode::connect_error, "worker closed during fetch");
            expect_response(*reply, Command::fetch_rows);
            ByteReader r(reply->payload);
            auto batch = decode_row_batch(r, scratch);
            if (batch.header.matrix_id != h.id || batch.header.num_cols != h.cols ||
                batch.header.start_row != row + received)
                throw BridgeError(ErrorCode::protocol_error, "fetch stream out of order");
            std::copy(batch.data.begin(), batch.data.end(),
                      out + (row + received - start_row) * h.cols);
            received += batch.header.num_rows;
            impl_->tally.row_messages_received += 1;
            impl_->tally.row_payload_bytes_received += batch.data.size() * sizeof(double);
        }
        row += count;
    }
}

std::vector<double> BridgeContext::fetch_matrix(const MatrixHandle& h) {
    std::vector<double> out(h.rows * h.cols);
    fetch_rows(h, 0, h.rows, out.data());
    return out;
}

MatrixHandle BridgeContext::send_matrix(const double* data, std::uint64_t m, std::uint64_t n) {
    auto h = create_matrix(m, n);
    send_rows(h, 0, m, data);
    flush_rows();
    await_complete(h);
    return h;
}

TransferCounters BridgeContext::counters() const {
    TransferCounters t = impl_->tally;
    t.row_messages_per_worker.resize(impl_->endpoints.size(), 0);
    if (impl_->control) t.control_bytes_received = impl_->control->stats().bytes_received.load();
    for (const auto& conn : impl_->data) {
        if (!conn) continue;
        t.data_bytes_received += conn->stats().bytes_received.load();
        t.data_bytes_sent += conn->stats().bytes_sent.load();
    }
    return t;
}

// ---------------------------------------------------------------------------
// Wrappers
// ---------------------------------------------------------------------------

namespace wrappers {

MatrixHandle gemm(BridgeContext& ctx, const MatrixHandle& a, const MatrixHandle& b) {
    auto out = ctx.run("mathlib", "gemm", {a, b});
    if (out.size() != 1 || !std::holds_alternative<MatrixHandle>(out[0]))
        throw BridgeError(ErrorCode::protocol_error, "gemm returned unexpected outputs");
    return std::get<MatrixHandle>(out[0]);
}

SvdResult truncated_svd(BridgeContext& ctx, const MatrixHandle& a, int k) {
    auto out = ctx.run("mathlib", "truncated_svd", {a, std::int64_t{k}});
    if (out.size() != static_cast<std::size_t>(k) + 3)
        throw BridgeError(ErrorCode::protocol_error, "truncated_svd returned unexpected outputs");
    SvdResult res;
    res.u = std::get<MatrixHandle>(out.front());
    for (int i = 0; i < k; ++i) res.sigma.push_back(std::get<double>(out[1 + i]));
    res.v = std::get<MatrixHandle>(out[static_cast<std::size_t>(k) + 1]);
    res.converged = std::get<bool>(out.back());
    return res;
}

MatrixHandle transpose(BridgeContext& ctx, const MatrixHandle& a) {
    auto out = ctx.run("mathlib", "transpose", {a});
    return std::get<MatrixHandle>(out.at(0));
}

double condest(BridgeContext& ctx, const MatrixHandle& a) {
    auto out = ctx.run("mathlib", "condest", {a});
    return std::get<double>(out.at(0));
}

MatrixHandle random_uniform(BridgeContext& ctx, std::uint64_t m, std::uint64_t n,
                            std::uint64_t seed) {
    auto out = ctx.run("mathlib", "random_uniform",
                       {static_cast<std::int64_t>(m), static_cast<std::int64_t>(n),
                        static_cast<std::int64_t>(seed)});
    return std::get<MatrixHandle>(out.at(0));
}

} // namespace wrappers

} // namespace matbridge::client
