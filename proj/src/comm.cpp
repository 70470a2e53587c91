#include "matbridge/comm.hpp"

#include <chrono>
#include <condition_variable>
#include <deque>
#include <mutex>

namespace matbridge::comm {

namespace {

std::uint64_t encoded_size(const Frame& f) { return frame_header_size + f.payload.size(); }

// ---------------------------------------------------------------------------
// In-process channel: two endpoints over a shared pair of frame queues.
// ---------------------------------------------------------------------------

struct PipeCore {
    std::mutex m;
    std::condition_variable cv;
    std::deque<Frame> q[2]; // q[i]: frames waiting for endpoint i
    bool closed = false;
};

class LocalChannel final : public Channel {
public:
    LocalChannel(std::shared_ptr<PipeCore> core, int side) : core_(std::move(core)), side_(side) {}

    ~LocalChannel() override { close(); }

    void send(const Frame& f) override {
        std::lock_guard lock(core_->m);
        if (core_->closed)
            throw BridgeError(ErrorCode::group_failure, "channel closed by peer");
        sent_ += encoded_size(f);
        core_->q[1 - side_].push_back(f);
        core_->cv.notify_all();
    }

    std::optional<Frame> recv(int timeout_ms) override {
        std::unique_lock lock(core_->m);
        auto& q = core_->q[side_];
        const auto ready = [&] { return !q.empty() || core_->closed; };
        if (timeout_ms < 0) {
            core_->cv.wait(lock, ready);
        } else if (!core_->cv.wait_for(lock, std::chrono::milliseconds(timeout_ms), ready)) {
            return std::nullopt;
        }
        if (!q.empty()) {
            Frame f = std::move(q.front());
            q.pop_front();
            received_ += encoded_size(f);
            return f;
        }
        throw BridgeError(ErrorCode::group_failure, "channel closed by peer");
    }

    void close() override {
        std::lock_guard lock(core_->m);
        core_->closed = true;
        core_->cv.notify_all();
    }

    std::uint64_t bytes_sent() const override { return sent_; }
    std::uint64_t bytes_received() const override { return received_; }

private:
    std::shared_ptr<PipeCore> core_;
    int side_;
    std::atomic<std::uint64_t> sent_{0}, received_{0};
};

// ---------------------------------------------------------------------------
// Socket-backed channel.
// ---------------------------------------------------------------------------

class SocketChannel final : public Channel {
public:
    explicit SocketChannel(net::Socket sock) : conn_(std::move(sock)) {}

    void send(const Frame& f) override {
        std::lock_guard lock(send_mutex_);
        conn_.send_frame(f);
        conn_.flush();
    }

    std::optional<Frame> recv(int timeout_ms) override {
        Frame f;
        switch (conn_.recv_frame_for(timeout_ms, f)) {
        case net::FramedConn::Poll::frame: return f;
        case net::FramedConn::Poll::timeout: return std::nullopt;
        case net::FramedConn::Poll::eof: break;
        }
        throw BridgeError(ErrorCode::group_failure, "peer closed connection mid-group");
    }

    void close() override { conn_.shutdown(); }

    std::uint64_t bytes_sent() const override {
        return const_cast<net::FramedConn&>(conn_).stats().bytes_sent.load();
    }
    std::uint64_t bytes_received() const override {
        return const_cast<net::FramedConn&>(conn_).stats().bytes_received.load();
    }

private:
    net::FramedConn conn_;
    std::mutex send_mutex_;
};

} // namespace

std::pair<std::shared_ptr<Channel>, std::shared_ptr<Channel>> make_local_pair() {
    auto core = std::make_shared<PipeCore>();
    return {std::make_shared<LocalChannel>(core, 0), std::make_shared<LocalChannel>(core, 1)};
}

std::vector<std::vector<std::shared_ptr<Channel>>> make_local_mesh(int size) {
    std::vector<std::vector<std::shared_ptr<Channel>>> mesh(size);
    for (auto& row : mesh) row.resize(size);
    for (int a = 0; a < size; ++a)
        for (int b = a + 1; b < size; ++b) {
            auto [ea, eb] = make_local_pair();
            mesh[a][b] = std::move(ea);
            mesh[b][a] = std::move(eb);
        }
    return mesh;
}

std::shared_ptr<Channel> make_socket_channel(net::Socket sock) {
    return std::make_shared<SocketChannel>(std::move(sock));
}

// ---------------------------------------------------------------------------
// WorkerGroup collectives
// ---------------------------------------------------------------------------

WorkerGroup::WorkerGroup(std::uint32_t group_id, int rank,
                         std::vector<std::shared_ptr<Channel>> links, GroupConfig config)
    : group_id_(group_id), rank_(rank), links_(std::move(links)), config_(config) {
    if (rank_ < 0 || rank_ >= size() || links_[rank_] != nullptr)
        throw BridgeError(ErrorCode::argument_error, "inconsistent group link table");
}

Frame WorkerGroup::make(Command c, std::span<const std::uint8_t> body, bool response) const {
    Frame f;
    f.command = response ? response_to(c) : static_cast<std::uint8_t>(c);
    f.session_id = group_id_;
    ByteWriter w;
    w.u32(seq_);
    w.bytes(body.data(), body.size());
    f.payload = w.take();
    return f;
}

Frame WorkerGroup::recv_checked(int peer, Command expect, bool response, int timeout_ms) {
    auto f = links_[peer]->recv(timeout_ms);
    if (!f)
        throw BridgeError(ErrorCode::group_failure,
                          "collective timed out waiting for rank " + std::to_string(peer));
    if (f->is_error()) {
        auto [code, message] = decode_error_payload(f->payload);
        throw BridgeError(code, message);
    }
    const auto want = response ? response_to(expect) : static_cast<std::uint8_t>(expect);
    if (f->command != want || f->session_id != group_id_)
        throw BridgeError(ErrorCode::group_failure,
                          std::string("collective desync: got ") + command_name(f->command) +
                              " from rank " + std::to_string(peer));
    ByteReader r(f->payload);
    const auto seq = r.u32();
    if (seq != seq_)
        throw BridgeError(ErrorCode::group_failure,
                          "collective desync: sequence " + std::to_string(seq) + " != " +
                              std::to_string(seq_));
    // Strip the sequence prefix so callers see only the body.
    Frame out = std::move(*f);
    out.payload.erase(out.payload.begin(), out.payload.begin() + 4);
    return out;
}

void WorkerGroup::root_scatter(Command c, std::span<const std::uint8_t> body) {
    auto f = make(c, body, /*response=*/true);
    for (int q = 0; q < size(); ++q)
        if (q != rank_) links_[q]->send(f);
}

std::vector<std::uint8_t> WorkerGroup::broadcast(int root, std::vector<std::uint8_t> data) {
    if (root < 0 || root >= size())
        throw BridgeError(ErrorCode::argument_error, "broadcast root out of range");
    ++seq_;
    if (size() == 1) return data;
    if (rank_ == root) {
        auto f = make(Command::group_bcast, data);
        for (int q = 0; q < size(); ++q)
            if (q != rank_) links_[q]->send(f);
        return data;
    }
    auto f = recv_checked(root, Command::group_bcast, false);
    return std::move(f.payload);
}

std::vector<std::vector<std::uint8_t>> WorkerGroup::allgather(
    std::span<const std::uint8_t> local) {
    ++seq_;
    std::vector<std::vector<std::uint8_t>> parts(size());
    if (size() == 1) {
        parts[0].assign(local.begin(), local.end());
        return parts;
    }
    if (rank_ == 0) {
        parts[0].assign(local.begin(), local.end());
        for (int q = 1; q < size(); ++q) {
            auto f = recv_checked(q, Command::group_gather, false);
            parts[q] = std::move(f.payload);
        }
        ByteWriter w;
        w.u32(static_cast<std::uint32_t>(size()));
        for (const auto& p : parts) {
            w.u32(static_cast<std::uint32_t>(p.size()));
            w.bytes(p.data(), p.size());
        }
        root_scatter(Command::group_gather, w.data());
        return parts;
    }
    links_[0]->send(make(Command::group_gather, local));
    auto f = recv_checked(0, Command::group_gather, true);
    ByteReader r(f.payload);
    const auto count = r.u32();
    if (count != static_cast<std::uint32_t>(size()))
        throw BridgeError(ErrorCode::group_failure, "allgather result count mismatch");
    for (auto& p : parts) {
        const auto len = r.u32();
        auto b = r.bytes(len);
        p.assign(b.begin(), b.end());
    }
    r.expect_end();
    return parts;
}

std::vector<double> WorkerGroup::allreduce_sum(std::span<const double> local) {
    ++seq_;
    std::vector<double> result(local.begin(), local.end());
    if (size() == 1) return result;

    const auto as_bytes = [](std::span<const double> v) {
        return std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(v.data()),
                                             v.size() * sizeof(double));
    };

    if (rank_ == 0) {
        // Serial rank-ordered accumulation: the summation order is fixed, so
        // every run and every member sees bit-identical doubles.
        for (int q = 1; q < size(); ++q) {
            auto f = recv_checked(q, Command::group_reduce, false);
            if (f.payload.size() != result.size() * sizeof(double)) {
                const auto err = encode_error_payload(
                    ErrorCode::group_failure,
                    "allreduce length mismatch: rank " + std::to_string(q) + " sent " +
                        std::to_string(f.payload.size() / sizeof(double)) + " values, rank 0 has " +
                        std::to_string(result.size()));
                Frame ef;
                ef.command = static_cast<std::uint8_t>(Command::error);
                ef.session_id = group_id_;
                ef.payload = err;
                for (int peer = 0; peer < size(); ++peer)
                    if (peer != rank_) links_[peer]->send(ef);
                auto [code, message] = decode_error_payload(err);
                throw BridgeError(code, message);
            }
            ByteReader r(f.payload);
            for (std::size_t i = 0; i < result.size(); ++i) result[i] += r.f64();
        }
        root_scatter(Command::group_reduce, as_bytes(result));
        return result;
    }

    links_[0]->send(make(Command::group_reduce, as_bytes(local)));
    auto f = recv_checked(0, Command::group_reduce, true);
    if (f.payload.size() != local.size() * sizeof(double))
        throw BridgeError(ErrorCode::group_failure, "allreduce result length mismatch");
    ByteReader r(f.payload);
    for (auto& x : result) x = r.f64();
    return result;
}

void WorkerGroup::barrier() {
    ++seq_;
    if (size() == 1) return;
    const auto deadline =
        std::chrono::steady_clock::now() + std::chrono::milliseconds(config_.barrier_timeout_ms);
    const auto remaining = [&] {
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
                              deadline - std::chrono::steady_clock::now())
                              .count();
        return static_cast<int>(std::max<long long>(left, 0));
    };
    try {
        if (rank_ == 0) {
            for (int q = 1; q < size(); ++q)
                recv_checked(q, Command::group_barrier, false, remaining());
            root_scatter(Command::group_barrier, {});
        } else {
            links_[0]->send(make(Command::group_barrier, {}));
            recv_checked(0, Command::group_barrier, true, remaining());
        }
    } catch (const BridgeError& e) {
        if (e.code() == ErrorCode::group_failure)
            throw BridgeError(ErrorCode::group_failure,
                              "barrier timed out after " +
                                  std::to_string(config_.barrier_timeout_ms) + " ms (" +
                                  e.what() + ")");
        throw;
    }
}

void WorkerGroup::send_to(int peer, std::span<const std::uint8_t> data, std::uint32_t tag) {
    if (peer < 0 || peer >= size() || peer == rank_)
        throw BridgeError(ErrorCode::argument_error, "bad p2p peer rank");
    Frame f;
    f.command = static_cast<std::uint8_t>(Command::group_p2p);
    f.session_id = group_id_;
    ByteWriter w;
    w.u32(tag);
    w.bytes(data.data(), data.size());
    f.payload = w.take();
    links_[peer]->send(f);
}

std::vector<std::uint8_t> WorkerGroup::recv_from(int peer, std::uint32_t tag) {
    if (peer < 0 || peer >= size() || peer == rank_)
        throw BridgeError(ErrorCode::argument_error, "bad p2p peer rank");
    auto f = links_[peer]->recv(-1);
    if (!f) throw BridgeError(ErrorCode::group_failure, "p2p recv interrupted");
    if (f->is_error()) {
        auto [code, message] = decode_error_payload(f->payload);
        throw BridgeError(code, message);
    }
    if (f->command != static_cast<std::uint8_t>(Command::group_p2p))
        throw BridgeError(ErrorCode::group_failure,
                          std::string("p2p desync: got ") + command_name(f->command));
    ByteReader r(f->payload);
    const auto got_tag = r.u32();
    if (got_tag != tag)
        throw BridgeError(ErrorCode::group_failure, "p2p tag mismatch: got " +
                                                        std::to_string(got_tag) + ", want " +
                                                        std::to_string(tag));
    auto body = r.bytes(r.remaining());
    return std::vector<std::uint8_t>(body.begin(), body.end());
}

std::uint64_t WorkerGroup::bytes_exchanged() const {
    std::uint64_t total = 0;
    for (const auto& link : links_)
        if (link) total += link->bytes_sent() + link->bytes_received();
    return total;
}

} // namespace matbridge::comm
