#include "matbridge/server.hpp"

#include <spdlog/spdlog.h>

#include <atomic>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include "matbridge/comm.hpp"
#include "matbridge/distmatrix.hpp"

namespace matbridge::server {

namespace {

constexpr int poll_interval_ms = 200;     // shutdown responsiveness of blocking loops
constexpr int completeness_poll_ms = 1;   // barrier re-check interval

spdlog::level::level_enum parse_level(const std::string& name) {
    const auto level = spdlog::level::from_str(name);
    // from_str returns "off" for unknown names; treat a typo as a warning level
    if (level == spdlog::level::off && name != "off") return spdlog::level::warn;
    return level;
}

struct FetchRequest {
    std::uint32_t matrix_id = 0;
    std::uint64_t start_row = 0;
    std::uint32_t num_rows = 0;
    std::uint32_t batch_bytes = 0;
    std::uint32_t timeout_ms = 0;
};

FetchRequest parse_fetch(const Frame& f) {
    ByteReader r(f.payload);
    FetchRequest q;
    q.matrix_id = r.u32();
    q.start_row = r.u64();
    q.num_rows = r.u32();
    q.batch_bytes = r.u32();
    q.timeout_ms = r.u32();
    r.expect_end();
    return q;
}

} // namespace

// ---------------------------------------------------------------------------
// Worker: one pool member. Owns its data listener, the data-connection
// threads, a single task thread that executes collective work for whatever
// session currently holds this worker, and the per-session matrix blocks.
// ---------------------------------------------------------------------------

namespace {

struct MatrixEntry {
    MatrixHandle handle;
    dist::LayoutDescriptor layout;
    dist::LocalBlock block;

    MatrixEntry(const MatrixHandle& h, dist::LayoutDescriptor lay, int rank)
        : handle(h), layout(std::move(lay)), block(layout, rank) {}
};

struct WorkerSession {
    int rank = -1;
    std::unique_ptr<comm::WorkerGroup> group;
    std::mutex matrices_mutex;
    std::map<std::uint32_t, std::shared_ptr<MatrixEntry>> matrices;
};

struct RunOutcome {
    std::vector<Value> outputs;               // rank 0 only
    std::vector<MatrixHandle> created;        // rank 0 only
};

class Accessor final : public plugin::MatrixAccessor {
public:
    Accessor(WorkerSession& ws, std::uint32_t base_id) : ws_(ws), next_id_(base_id) {}

    dist::LocalBlock& block(const MatrixHandle& h) override { return entry(h)->block; }

    const dist::LayoutDescriptor& layout(const MatrixHandle& h) override {
        return entry(h)->layout;
    }

    std::pair<MatrixHandle, dist::LocalBlock*> create(std::uint64_t m, std::uint64_t n) override {
        MatrixHandle h{next_id_++, m, n};
        auto e = std::make_shared<MatrixEntry>(
            h, dist::make_layout(m, n, ws_.group->size()), ws_.rank);
        {
            std::lock_guard lock(ws_.matrices_mutex);
            ws_.matrices[h.id] = e;
        }
        created_.push_back(h);
        return {h, &e->block};
    }

    const std::vector<MatrixHandle>& created() const { return created_; }

    void finalize(bool success) {
        std::lock_guard lock(ws_.matrices_mutex);
        for (const auto& h : created_) {
            if (success)
                ws_.matrices[h.id]->block.mark_all_filled();
            else
                ws_.matrices.erase(h.id);
        }
    }

private:
    std::shared_ptr<MatrixEntry> entry(const MatrixHandle& h) {
        std::lock_guard lock(ws_.matrices_mutex);
        auto it = ws_.matrices.find(h.id);
        if (it == ws_.matrices.end())
            throw BridgeError(ErrorCode::handle_error,
                              "matrix " + std::to_string(h.id) + " not found on this worker");
        return it->second;
    }

    WorkerSession& ws_;
    std::uint32_t next_id_;
    std::vector<MatrixHandle> created_;
};

class Worker {
public:
    Worker(int index, std::string host, std::uint16_t port, std::atomic<bool>& stop_flag)
        : index_(index), host_(std::move(host)), port_(port), stop_(stop_flag) {}

    void start() {
        listener_ = net::Listener::bind({host_ == "0.0.0.0" ? "0.0.0.0" : host_, port_});
        accept_thread_ = std::thread([this] { accept_loop(); });
        task_thread_ = std::thread([this] { task_loop(); });
    }

    void shutdown_connections() {
        listener_.close();
        std::lock_guard lock(conns_mutex_);
        for (auto& c : conns_)
            if (auto conn = c.lock()) conn->shutdown();
    }

    void join() {
        {
            std::lock_guard lock(tasks_mutex_);
            tasks_cv_.notify_all();
        }
        if (accept_thread_.joinable()) accept_thread_.join();
        if (task_thread_.joinable()) task_thread_.join();
        for (auto& t : conn_threads_)
            if (t.joinable()) t.join();
    }

    std::uint16_t data_port() const { return listener_.port(); }
    int index() const { return index_; }

    // --- driver-facing, thread-safe ---------------------------------------

    void add_session(std::uint32_t sid, int rank,
                     std::vector<std::shared_ptr<comm::Channel>> links,
                     comm::GroupConfig group_config) {
        auto ws = std::make_shared<WorkerSession>();
        ws->rank = rank;
        ws->group = std::make_unique<comm::WorkerGroup>(sid, rank, std::move(links), group_config);
        std::lock_guard lock(sessions_mutex_);
        sessions_[sid] = std::move(ws);
    }

    void drop_session(std::uint32_t sid) {
        std::shared_ptr<WorkerSession> ws;
        {
            std::lock_guard lock(sessions_mutex_);
            auto it = sessions_.find(sid);
            if (it == sessions_.end()) return;
            ws = std::move(it->second);
            sessions_.erase(it);
        }
        // Matrices (and group channels) die with the last reference.
    }

    void create_block(std::uint32_t sid, const MatrixHandle& h) {
        auto ws = session(sid);
        auto e = std::make_shared<MatrixEntry>(
            h, dist::make_layout(h.rows, h.cols, ws->group->size()), ws->rank);
        std::lock_guard lock(ws->matrices_mutex);
        ws->matrices[h.id] = std::move(e);
    }

    // (exists, complete, missing global row ranges) — cheap peek for the
    // driver's completeness barrier.
    std::tuple<bool, bool, std::vector<std::pair<std::uint64_t, std::uint64_t>>> matrix_status(
        std::uint32_t sid, std::uint32_t matrix_id) {
        std::shared_ptr<MatrixEntry> e;
        {
            std::lock_guard slock(sessions_mutex_);
            auto it = sessions_.find(sid);
            if (it == sessions_.end()) return {false, false, {}};
            std::lock_guard mlock(it->second->matrices_mutex);
            auto mit = it->second->matrices.find(matrix_id);
            if (mit == it->second->matrices.end()) return {false, false, {}};
            e = mit->second;
        }
        if (e->block.complete()) return {true, true, {}};
        return {true, false, e->block.missing_ranges()};
    }

    // Queues a routine execution on the task thread.
    std::future<RunOutcome> submit_run(std::uint32_t sid, std::shared_ptr<plugin::LibraryPlugin> lib,
                                       std::string routine, std::vector<Value> args,
                                       std::uint32_t base_id) {
        auto task = std::make_shared<std::packaged_task<RunOutcome()>>(
            [this, sid, lib = std::move(lib), routine = std::move(routine),
             args = std::move(args), base_id] { return execute(sid, *lib, routine, args, base_id); });
        auto fut = task->get_future();
        {
            std::lock_guard lock(tasks_mutex_);
            tasks_.push_back([task] { (*task)(); });
        }
        tasks_cv_.notify_one();
        return fut;
    }

private:
    std::shared_ptr<WorkerSession> session(std::uint32_t sid) {
        std::lock_guard lock(sessions_mutex_);
        auto it = sessions_.find(sid);
        if (it == sessions_.end())
            throw BridgeError(ErrorCode::session_closed,
                              "session " + std::to_string(sid) + " not on worker " +
                                  std::to_string(index_));
        return it->second;
    }

    // --- routine execution (task thread) -----------------------------------

    RunOutcome execute(std::uint32_t sid, plugin::LibraryPlugin& lib, const std::string& routine,
                       const std::vector<Value>& args, std::uint32_t base_id) {
        auto ws = session(sid);

        // Pre-vote: check local preconditions without communicating, then
        // agree group-wide, so every rank either runs the routine or throws
        // the same error — a rank bailing out alone would wedge the others
        // inside a collective.
        ByteWriter vote;
        try {
            check_local(*ws, args);
            vote.u8(1);
        } catch (const BridgeError& e) {
            vote.u8(0);
            vote.u16(static_cast<std::uint16_t>(e.code()));
            vote.str(e.what());
        }
        auto votes = ws->group->allgather(vote.data());
        for (int r = 0; r < static_cast<int>(votes.size()); ++r) {
            ByteReader vr(votes[r]);
            if (vr.u8() == 0) {
                const auto code = static_cast<ErrorCode>(vr.u16());
                throw BridgeError(code, vr.str());
            }
        }

        const auto* fn = lib.find(routine);
        if (!fn)
            throw BridgeError(ErrorCode::unknown_routine,
                              "library '" + lib.name() + "' has no routine '" + routine + "'");

        Accessor accessor(*ws, base_id);
        plugin::RoutineContext ctx{accessor, *ws->group};
        try {
            auto outputs = (*fn)(args, ctx);
            accessor.finalize(true);
            RunOutcome out;
            if (ws->rank == 0) {
                out.outputs = std::move(outputs);
                out.created = accessor.created();
            }
            return out;
        } catch (...) {
            accessor.finalize(false);
            throw;
        }
    }

    void check_local(WorkerSession& ws, const std::vector<Value>& args) {
        std::lock_guard lock(ws.matrices_mutex);
        for (const auto& v : args) {
            if (!std::holds_alternative<MatrixHandle>(v)) continue;
            const auto& h = std::get<MatrixHandle>(v);
            auto it = ws.matrices.find(h.id);
            if (it == ws.matrices.end())
                throw BridgeError(ErrorCode::handle_error,
                                  "matrix " + std::to_string(h.id) + " unknown to this session");
            if (it->second->handle.rows != h.rows || it->second->handle.cols != h.cols)
                throw BridgeError(ErrorCode::handle_error,
                                  "matrix " + std::to_string(h.id) + " dimensions disagree");
            if (!it->second->block.complete())
                throw BridgeError(ErrorCode::not_ready,
                                  "matrix " + std::to_string(h.id) + " is incomplete");
        }
    }

    void task_loop() {
        while (true) {
            std::function<void()> task;
            {
                std::unique_lock lock(tasks_mutex_);
                tasks_cv_.wait_for(lock, std::chrono::milliseconds(poll_interval_ms),
                                   [&] { return !tasks_.empty() || stop_.load(); });
                if (!tasks_.empty()) {
                    task = std::move(tasks_.front());
                    tasks_.pop_front();
                } else if (stop_.load()) {
                    return;
                } else {
                    continue;
                }
            }
            task();
        }
    }

    // --- data plane ---------------------------------------------------------

    void accept_loop() {
        while (!stop_.load()) {
            std::optional<net::Socket> sock;
            try {
                sock = listener_.accept(poll_interval_ms);
            } catch (const BridgeError&) {
                return; // listener closed
            }
            if (!sock) continue;
            auto conn = std::make_shared<net::FramedConn>(std::move(*sock));
            {
                std::lock_guard lock(conns_mutex_);
                conns_.push_back(conn);
            }
            conn_threads_.emplace_back([this, conn] { serve_data(*conn); });
        }
    }

    void serve_data(net::FramedConn& conn) {
        // First ingest error sticks to the connection and is delivered at
        // the next zero-row FETCH_ROWS sync; SEND_ROWS itself is never
        // acknowledged (fire-and-forget keeps the stream one-directional).
        std::optional<std::pair<ErrorCode, std::string>> sticky;
        std::vector<double> scratch;
        try {
            while (!stop_.load()) {
                Frame f;
                const auto poll = conn.recv_frame_for(poll_interval_ms, f);
                if (poll == net::FramedConn::Poll::timeout) continue;
                if (poll == net::FramedConn::Poll::eof) return;

                if (f.command == static_cast<std::uint8_t>(Command::send_rows)) {
                    if (sticky) continue; // poisoned stream: skip until sync
                    try {
                        ByteReader r(f.payload);
                        auto batch = decode_row_batch(r, scratch);
                        auto ws = session(f.session_id);
                        std::shared_ptr<MatrixEntry> e;
                        {
                            std::lock_guard lock(ws->matrices_mutex);
                            auto it = ws->matrices.find(batch.header.matrix_id);
                            if (it == ws->matrices.end())
                                throw BridgeError(ErrorCode::handle_error,
                                                  "matrix " +
                                                      std::to_string(batch.header.matrix_id) +
                                                      " unknown");
                            e = it->second;
                        }
                        e->block.write_rows(batch.header, batch.data);
                    } catch (const BridgeError& e) {
                        sticky = {e.code(), e.what()};
                    }
                } else if (f.command == static_cast<std::uint8_t>(Command::fetch_rows)) {
                    handle_fetch(conn, f, sticky);
                } else {
                    conn.send_frame(encode_error_frame(
                        f.session_id, ErrorCode::protocol_error,
                        std::string(command_name(f.command)) + " is not a data-plane command"));
                    conn.flush();
                }
            }
        } catch (const BridgeError& e) {
            spdlog::debug("worker {}: data connection ended: {}", index_, e.what());
        }
    }

    void handle_fetch(net::FramedConn& conn, const Frame& f,
                      std::optional<std::pair<ErrorCode, std::string>>& sticky) {
        try {
            const auto q = parse_fetch(f);
            if (q.num_rows == 0) {
                // Sync point: report and clear any sticky ingest error.
                if (sticky) {
                    auto [code, message] = *sticky;
                    sticky.reset();
                    throw BridgeError(code, message);
                }
                ByteWriter w;
                encode_row_batch(w, {q.matrix_id, 0, 0, 0}, nullptr);
                conn.send_frame(encode_frame(response_to(Command::fetch_rows), f.session_id,
                                             w.data()));
                conn.flush();
                return;
            }
            auto ws = session(f.session_id);
            std::shared_ptr<MatrixEntry> e;
            {
                std::lock_guard lock(ws->matrices_mutex);
                auto it = ws->matrices.find(q.matrix_id);
                if (it == ws->matrices.end())
                    throw BridgeError(ErrorCode::handle_error,
                                      "matrix " + std::to_string(q.matrix_id) + " unknown");
                e = it->second;
            }
            const auto n = e->layout.n;
            const auto row_bytes = n * sizeof(double);
            const auto rows_per =
                std::max<std::uint64_t>(1, q.batch_bytes / std::max<std::uint64_t>(row_bytes, 1));
            std::vector<double> buf;
            std::uint64_t sent = 0;
            while (sent < q.num_rows) {
                const auto count = std::min<std::uint64_t>(rows_per, q.num_rows - sent);
                buf.resize(count * n);
                e->block.read_rows(q.start_row + sent, count, buf.data());
                ByteWriter w;
                encode_row_batch(w,
                                 {q.matrix_id, q.start_row + sent,
                                  static_cast<std::uint32_t>(count), n},
                                 buf.data());
                conn.send_frame(
                    encode_frame(response_to(Command::fetch_rows), f.session_id, w.data()));
                sent += count;
            }
            conn.flush();
        } catch (const BridgeError& e) {
            conn.send_frame(encode_error_frame(f.session_id, e.code(), e.what()));
            conn.flush();
        }
    }

    int index_;
    std::string host_;
    std::uint16_t port_;
    std::atomic<bool>& stop_;

    net::Listener listener_;
    std::thread accept_thread_;
    std::vector<std::thread> conn_threads_;
    std::mutex conns_mutex_;
    std::vector<std::weak_ptr<net::FramedConn>> conns_;

    std::thread task_thread_;
    std::mutex tasks_mutex_;
    std::condition_variable tasks_cv_;
    std::deque<std::function<void()>> tasks_;

    std::mutex sessions_mutex_;
    std::map<std::uint32_t, std::shared_ptr<WorkerSession>> sessions_;
};

struct Session {
    std::uint32_t id = 0;
    std::string client_name;
    enum class State { negotiating, active, closed } state = State::negotiating;
    std::vector<int> worker_indices; // global indices, rank order
    std::map<std::string, std::shared_ptr<plugin::LibraryPlugin>> libraries;
    std::map<std::uint32_t, MatrixHandle> handles;
    std::uint32_t next_matrix_id = 1;
};

} // namespace

// ---------------------------------------------------------------------------
// Server implementation
// ---------------------------------------------------------------------------

struct Server::Impl {
    explicit Impl(ServerConfig cfg) : config(std::move(cfg)) {}

    ServerConfig config;
    std::atomic<bool> stop_flag{false};
    bool started = false;

    net::Listener control_listener;
    std::thread control_accept_thread;
    std::vector<std::thread> session_threads;
    std::mutex control_conns_mutex;
    std::vector<std::weak_ptr<net::FramedConn>> control_conns;

    std::vector<std::unique_ptr<Worker>> workers;

    mutable std::mutex driver_mutex;
    std::vector<bool> assigned;  // per worker index
    int free_count = 0;
    std::uint32_t next_session_id = 1;
    std::map<std::string, std::shared_ptr<plugin::LibraryPlugin>> registry;
    std::map<std::uint32_t, std::shared_ptr<Session>> sessions;

    struct CensusEntry {
        std::uint32_t session_id;
        int worker_a, worker_b;
        std::shared_ptr<comm::Channel> side_a; // counters stay readable after close
    };
    std::vector<CensusEntry> census;

    // --- session command handlers (called from session threads) ------------

    void serve_control(std::shared_ptr<net::FramedConn> conn) {
        std::shared_ptr<Session> bound;
        try {
            while (!stop_flag.load()) {
                Frame f;
                const auto poll = conn->recv_frame_for(poll_interval_ms, f);
                if (poll == net::FramedConn::Poll::timeout) continue;
                if (poll == net::FramedConn::Poll::eof) break;
                Frame reply = dispatch(bound, f);
                conn->send_frame(reply);
                conn->flush();
            }
        } catch (const BridgeError& e) {
            spdlog::debug("control connection ended: {}", e.what());
        }
        // Client gone: release its resources.
        if (bound && bound->state != Session::State::closed) close_session(*bound);
    }

    Frame dispatch(std::shared_ptr<Session>& bound, const Frame& f) {
        const auto sid = bound ? bound->id : 0;
        try {
            switch (static_cast<Command>(f.command)) {
            case Command::handshake: return on_handshake(bound, f);
            case Command::request_workers: return on_request_workers(require(bound, f), f);
            case Command::register_library: return on_register_library(require(bound, f), f);
            case Command::create_matrix: return on_create_matrix(require(bound, f), f);
            case Command::fetch_rows: return on_fetch_sync(require(bound, f), f);
            case Command::run: return on_run(require(bound, f), f);
            case Command::close: return on_close(bound, f);
            case Command::send_rows:
                throw BridgeError(ErrorCode::state_error,
                                  "SEND_ROWS is data-plane only; open a worker data connection");
            default:
                throw BridgeError(ErrorCode::protocol_error,
                                  std::string("unexpected command ") + command_name(f.command));
            }
        } catch (const BridgeError& e) {
            Frame err;
            err.command = static_cast<std::uint8_t>(Command::error);
            err.session_id = sid;
            err.payload = encode_error_payload(e.code(), e.what());
            return err;
        }
    }

    Session& require(const std::shared_ptr<Session>& bound, const Frame& f) {
        if (!bound)
            throw BridgeError(ErrorCode::state_error, "handshake required first");
        if (bound->state == Session::State::closed)
            throw BridgeError(ErrorCode::session_closed,
                              "session " + std::to_string(bound->id) + " is closed");
        if (f.session_id != bound->id)
            throw BridgeError(ErrorCode::protocol_error,
                              "frame session " + std::to_string(f.session_id) +
                                  " does not match connection session " +
                                  std::to_string(bound->id));
        return *bound;
    }

    Frame ok_reply(Command c, std::uint32_t sid, std::vector<std::uint8_t> payload = {}) {
        Frame f;
        f.command = response_to(c);
        f.session_id = sid;
        f.payload = std::move(payload);
        return f;
    }

    Frame on_handshake(std::shared_ptr<Session>& bound, const Frame& f) {
        if (bound)
            throw BridgeError(ErrorCode::state_error, "connection already has a session");
        ByteReader r(f.payload);
        auto hello = decode_value_list(r);
        r.expect_end();
        if (hello.size() < 2 || !std::holds_alternative<std::int32_t>(hello[0]) ||
            !std::holds_alternative<std::string>(hello[1]))
            throw BridgeError(ErrorCode::protocol_error,
                              "hello must be [i32 version, string client name]");
        const auto version = std::get<std::int32_t>(hello[0]);
        if (version != 1)
            throw BridgeError(ErrorCode::version_error,
                              "unsupported client protocol version " + std::to_string(version));

        auto session = std::make_shared<Session>();
        session->client_name = std::get<std::string>(hello[1]);
        {
            std::lock_guard lock(driver_mutex);
            session->id = next_session_id++;
            sessions[session->id] = session;
        }
        bound = session;
        spdlog::info("session {} opened by '{}'", session->id, session->client_name);

        ByteWriter w;
        encode_value_list(w, {std::string("matbridge"),
                              static_cast<std::int64_t>(workers.size())});
        return ok_reply(Command::handshake, session->id, w.take());
    }

    Frame on_request_workers(Session& s, const Frame& f) {
        ByteReader r(f.payload);
        const auto n = r.u32();
        r.expect_end();
        if (s.state == Session::State::active)
            throw BridgeError(ErrorCode::state_error,
                              "session already holds a worker group; resizing is not supported");
        if (n < 1) throw BridgeError(ErrorCode::argument_error, "worker count must be >= 1");

        std::vector<int> picked;
        {
            std::lock_guard lock(driver_mutex);
            if (static_cast<int>(n) > free_count)
                throw BridgeError(ErrorCode::insufficient_workers,
                                  "requested " + std::to_string(n) + " workers, only " +
                                      std::to_string(free_count) + " free");
            for (int i = 0; i < static_cast<int>(workers.size()) &&
                            picked.size() < static_cast<std::size_t>(n);
                 ++i)
                if (!assigned[i]) picked.push_back(i);
            for (int idx : picked) assigned[idx] = true;
            free_count -= static_cast<int>(n);
        }

        auto mesh = comm::make_local_mesh(static_cast<int>(n));
        {
            std::lock_guard lock(driver_mutex);
            for (std::size_t a = 0; a < picked.size(); ++a)
                for (std::size_t b = a + 1; b < picked.size(); ++b)
                    census.push_back({s.id, picked[a], picked[b], mesh[a][b]});
        }
        comm::GroupConfig gc{config.barrier_timeout_ms};
        for (std::size_t rank = 0; rank < picked.size(); ++rank)
            workers[picked[rank]]->add_session(s.id, static_cast<int>(rank),
                                               std::move(mesh[rank]), gc);

        s.worker_indices = picked;
        s.state = Session::State::active;
        spdlog::info("session {} allocated {} workers", s.id, n);

        ByteWriter w;
        w.u32(n);
        for (std::size_t rank = 0; rank < picked.size(); ++rank) {
            w.u32(static_cast<std::uint32_t>(rank));
            w.str(config.worker_host);
            w.u16(workers[picked[rank]]->data_port());
        }
        return ok_reply(Command::request_workers, s.id, w.take());
    }

    Frame on_register_library(Session& s, const Frame& f) {
        ByteReader r(f.payload);
        const auto name = r.str();
        const auto locator = r.str();
        r.expect_end();
        const auto& key = locator.empty() ? name : locator;
        std::shared_ptr<plugin::LibraryPlugin> lib;
        {
            std::lock_guard lock(driver_mutex);
            auto it = registry.find(key);
            if (it == registry.end())
                throw BridgeError(ErrorCode::unknown_library,
                                  "no library registered under '" + key + "'");
            lib = it->second;
        }
        s.libraries[name] = std::move(lib); // re-registration is a no-op
        return ok_reply(Command::register_library, s.id);
    }

    Frame on_create_matrix(Session& s, const Frame& f) {
        ByteReader r(f.payload);
        const auto m = r.u64();
        const auto n = r.u64();
        r.expect_end();
        if (s.state != Session::State::active)
            throw BridgeError(ErrorCode::state_error, "no worker group allocated");
        if (m < 1 || n < 1)
            throw BridgeError(ErrorCode::argument_error, "matrix dimensions must be >= 1");

        MatrixHandle h{s.next_matrix_id++, m, n};
        for (int idx : s.worker_indices) workers[idx]->create_block(s.id, h);
        s.handles[h.id] = h;
        ByteWriter w;
        w.u32(h.id);
        return ok_reply(Command::create_matrix, s.id, w.take());
    }

    Frame on_fetch_sync(Session& s, const Frame& f) {
        const auto q = parse_fetch(f);
        if (q.num_rows != 0)
            throw BridgeError(ErrorCode::argument_error,
                              "bulk fetch happens on worker data connections; the control "
                              "channel accepts only zero-row completeness waits");
        if (s.state != Session::State::active)
            throw BridgeError(ErrorCode::state_error, "no worker group allocated");
        if (!s.handles.count(q.matrix_id))
            throw BridgeError(ErrorCode::handle_error,
                              "matrix " + std::to_string(q.matrix_id) + " unknown");

        const auto timeout = q.timeout_ms == 0 ? config.completeness_timeout_ms
                                               : static_cast<int>(q.timeout_ms);
        const auto deadline =
            std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout);
        while (true) {
            bool all = true;
            for (int idx : s.worker_indices) {
                auto [exists, complete, missing] = workers[idx]->matrix_status(s.id, q.matrix_id);
                if (!exists)
                    throw BridgeError(ErrorCode::internal_error, "matrix block vanished");
                if (!complete) {
                    all = false;
                    break;
                }
            }
            if (all) break;
            if (stop_flag.load())
                throw BridgeError(ErrorCode::session_closed, "server shutting down");
            if (std::chrono::steady_clock::now() >= deadline) {
                std::string detail = "matrix " + std::to_string(q.matrix_id) +
                                     " incomplete after " + std::to_string(timeout) +
                                     " ms; missing rows:";
                for (int idx : s.worker_indices) {
                    auto [exists, complete, missing] =
                        workers[idx]->matrix_status(s.id, q.matrix_id);
                    for (const auto& [start, count] : missing)
                        detail += " [" + std::to_string(start) + "," +
                                  std::to_string(start + count) + ")";
                }
                throw BridgeError(ErrorCode::timeout, detail);
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(completeness_poll_ms));
        }
        ByteWriter w;
        encode_row_batch(w, {q.matrix_id, 0, 0, 0}, nullptr);
        return ok_reply(Command::fetch_rows, s.id, w.take());
    }

    Frame on_run(Session& s, const Frame& f) {
        ByteReader r(f.payload);
        const auto library = r.str();
        const auto routine = r.str();
        auto args = decode_value_list(r);
        r.expect_end();
        if (s.state != Session::State::active)
            throw BridgeError(ErrorCode::state_error, "no worker group allocated");

        auto lib_it = s.libraries.find(library);
        if (lib_it == s.libraries.end())
            throw BridgeError(ErrorCode::unknown_library,
                              "library '" + library + "' is not registered in this session");
        auto lib = lib_it->second;
        if (!lib->find(routine))
            throw BridgeError(ErrorCode::unknown_routine,
                              "library '" + library + "' has no routine '" + routine + "'");
        for (const auto& v : args) {
            if (!std::holds_alternative<MatrixHandle>(v)) continue;
            const auto& h = std::get<MatrixHandle>(v);
            auto it = s.handles.find(h.id);
            if (it == s.handles.end() || it->second.rows != h.rows || it->second.cols != h.cols)
                throw BridgeError(ErrorCode::handle_error,
                                  "matrix handle " + std::to_string(h.id) +
                                      " does not belong to this session");
        }

        const auto base_id = s.next_matrix_id;
        spdlog::debug("session {}: run {}.{} ({} args)", s.id, library, routine, args.size());
        std::vector<std::future<RunOutcome>> futures;
        futures.reserve(s.worker_indices.size());
        for (int idx : s.worker_indices)
            futures.push_back(workers[idx]->submit_run(s.id, lib, routine, args, base_id));

        RunOutcome outcome;
        std::exception_ptr first_error;
        bool have_outcome = false;
        for (std::size_t rank = 0; rank < futures.size(); ++rank) {
            try {
                auto res = futures[rank].get();
                if (rank == 0) {
                    outcome = std::move(res);
                    have_outcome = true;
                }
            } catch (const BridgeError&) {
                if (!first_error) first_error = std::current_exception();
            }
        }
        if (first_error) std::rethrow_exception(first_error);
        if (!have_outcome)
            throw BridgeError(ErrorCode::internal_error, "routine returned no outputs");

        for (const auto& h : outcome.created) {
            s.handles[h.id] = h;
            s.next_matrix_id = std::max(s.next_matrix_id, h.id + 1);
        }

        ByteWriter w;
        encode_value_list(w, outcome.outputs);
        return ok_reply(Command::run, s.id, w.take());
    }

    Frame on_close(std::shared_ptr<Session>& bound, const Frame&) {
        if (!bound)
            throw BridgeError(ErrorCode::state_error, "handshake required first");
        if (bound->state != Session::State::closed) close_session(*bound);
        return ok_reply(Command::close, bound->id);
    }

    void close_session(Session& s) {
        for (int idx : s.worker_indices) workers[idx]->drop_session(s.id);
        {
            std::lock_guard lock(driver_mutex);
            for (int idx : s.worker_indices) {
                if (assigned[idx]) {
                    assigned[idx] = false;
                    ++free_count;
                }
            }
        }
        s.worker_indices.clear();
        s.handles.clear();
        s.state = Session::State::closed;
        spdlog::info("session {} closed", s.id);
    }

    void control_accept_loop() {
        while (!stop_flag.load()) {
            std::optional<net::Socket> sock;
            try {
                sock = control_listener.accept(poll_interval_ms);
            } catch (const BridgeError&) {
                return;
            }
            if (!sock) continue;
            auto conn = std::make_shared<net::FramedConn>(std::move(*sock));
            {
                std::lock_guard lock(control_conns_mutex);
                control_conns.push_back(conn);
            }
            session_threads.emplace_back([this, conn] { serve_control(conn); });
        }
    }
};

Server::Server(ServerConfig config) : impl_(std::make_unique<Impl>(std::move(config))) {}

Server::~Server() { stop(); }

void Server::register_plugin(std::shared_ptr<plugin::LibraryPlugin> plugin,
                             const std::string& locator) {
    std::lock_guard lock(impl_->driver_mutex);
    impl_->registry[plugin->name()] = plugin;
    if (!locator.empty()) impl_->registry[locator] = plugin;
}

void Server::start() {
    auto& impl = *impl_;
    if (impl.started) return;
    spdlog::set_level(parse_level(impl.config.log_level));
    if (impl.config.workers < 1)
        throw BridgeError(ErrorCode::argument_error, "server needs at least one worker");

    impl.control_listener = net::Listener::bind(impl.config.listen);
    impl.assigned.assign(impl.config.workers, false);
    impl.free_count = impl.config.workers;
    for (int i = 0; i < impl.config.workers; ++i) {
        const std::uint16_t port =
            impl.config.worker_port_base == 0
                ? 0
                : static_cast<std::uint16_t>(impl.config.worker_port_base + i);
        impl.workers.push_back(
            std::make_unique<Worker>(i, impl.config.worker_host, port, impl.stop_flag));
        impl.workers.back()->start();
    }
    impl.control_accept_thread = std::thread([&impl] { impl.control_accept_loop(); });
    impl.started = true;

    if (!impl.config.info_file.empty()) {
        std::ofstream out(impl.config.info_file, std::ios::trunc);
        const auto address =
            impl.config.listen.host == "0.0.0.0" ? "127.0.0.1" : impl.config.listen.host;
        out << net::local_hostname() << "\n"
            << address << "\n"
            << impl.control_listener.port() << "\n";
    }
    spdlog::info("server listening on {}:{} with {} workers", impl.config.listen.host,
                 impl.control_listener.port(), impl.config.workers);
}

void Server::stop() {
    auto& impl = *impl_;
    if (!impl.started || impl.stop_flag.exchange(true)) return;
    impl.control_listener.close();
    {
        std::lock_guard lock(impl.control_conns_mutex);
        for (auto& weak : impl.control_conns)
            if (auto conn = weak.lock()) conn->shutdown();
    }
    if (impl.control_accept_thread.joinable()) impl.control_accept_thread.join();
    for (auto& t : impl.session_threads)
        if (t.joinable()) t.join();
    for (auto& w : impl.workers) w->shutdown_connections();
    for (auto& w : impl.workers) w->join();
    spdlog::info("server stopped");
}

net::Endpoint Server::control_endpoint() const {
    auto ep = impl_->config.listen;
    if (ep.host == "0.0.0.0") ep.host = "127.0.0.1";
    ep.port = impl_->control_listener.port();
    return ep;
}

int Server::total_workers() const { return static_cast<int>(impl_->workers.size()); }

int Server::free_workers() const {
    std::lock_guard lock(impl_->driver_mutex);
    return impl_->free_count;
}

std::vector<ChannelRecord> Server::transport_census() const {
    std::lock_guard lock(impl_->driver_mutex);
    std::vector<ChannelRecord> out;
    out.reserve(impl_->census.size());
    for (const auto& e : impl_->census)
        out.push_back({e.session_id, e.worker_a, e.worker_b,
                       e.side_a->bytes_sent() + e.side_a->bytes_received()});
    return out;
}

std::unique_ptr<Server> start_local_server(ServerConfig config,
                                           const mathlib::MathlibConfig& mathlib_config) {
    auto server = std::make_unique<Server>(std::move(config));
    server->register_plugin(mathlib::make_mathlib(mathlib_config));
    server->start();
    return server;
}

} // namespace matbridge::server
