#pragma once

// Worker-group communicator: broadcast / allgather / allreduce-sum / barrier
// over reliable frame channels. Groups are small (desk scale), so every
// collective is a simple root-relay algorithm — correctness and determinism
// over peak bandwidth.
//
// A Channel is one bidirectional frame pipe between two fixed peers. Two
// implementations exist: an in-process queue pair (workers as threads) and a
// TCP adapter. A WorkerGroup owns one channel per peer and never exchanges
// a byte with anything outside that set, which is what keeps concurrent
// sessions isolated.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "matbridge/net.hpp"
#include "matbridge/protocol.hpp"

namespace matbridge::comm {

class Channel {
public:
    virtual ~Channel() = default;

    virtual void send(const Frame& f) = 0;

    // Blocks up to timeout_ms for the next frame (< 0 = no limit).
    // nullopt = timeout. A closed/vanished peer throws group_failure.
    virtual std::optional<Frame> recv(int timeout_ms) = 0;

    virtual void close() = 0;

    // Encoded bytes that crossed this channel, both directions.
    virtual std::uint64_t bytes_sent() const = 0;
    virtual std::uint64_t bytes_received() const = 0;
};

// Two connected in-process endpoints (thread-safe queue pair).
std::pair<std::shared_ptr<Channel>, std::shared_ptr<Channel>> make_local_pair();

// Full mesh of local channels for `size` ranks: result[r][q] is rank r's
// channel to rank q, result[r][r] is null.
std::vector<std::vector<std::shared_ptr<Channel>>> make_local_mesh(int size);

// Adapts a connected socket into a Channel (used when group members live in
// different processes). Frames are flushed on every send.
std::shared_ptr<Channel> make_socket_channel(net::Socket sock);

struct GroupConfig {
    int barrier_timeout_ms = 60 * 1000;
};

class WorkerGroup {
public:
    // links[q] connects to rank q; links[rank] must be null.
    WorkerGroup(std::uint32_t group_id, int rank,
                std::vector<std::shared_ptr<Channel>> links, GroupConfig config = {});

    std::uint32_t group_id() const { return group_id_; }
    int rank() const { return rank_; }
    int size() const { return static_cast<int>(links_.size()); }

    // Every member returns a copy of root's data.
    std::vector<std::uint8_t> broadcast(int root, std::vector<std::uint8_t> data);

    // Every member returns [data_0, ..., data_{size-1}]; lengths may differ.
    std::vector<std::vector<std::uint8_t>> allgather(std::span<const std::uint8_t> local);

    // Element-wise sum, accumulated serially in rank order at rank 0 and
    // broadcast back, so every member sees bit-identical doubles.
    std::vector<double> allreduce_sum(std::span<const double> local);

    // No member returns until all have entered. Times out per GroupConfig.
    void barrier();

    // Point-to-point, used by pairwise exchanges (e.g. transpose). The tag
    // must match on both ends of each exchange.
    void send_to(int peer, std::span<const std::uint8_t> data, std::uint32_t tag);
    std::vector<std::uint8_t> recv_from(int peer, std::uint32_t tag);

    // Instrumentation: encoded bytes this member exchanged inside the group.
    std::uint64_t bytes_exchanged() const;

private:
    Frame make(Command c, std::span<const std::uint8_t> body, bool response = false) const;
    Frame recv_checked(int peer, Command expect, bool response, int timeout_ms = -1);
    void root_scatter(Command c, std::span<const std::uint8_t> body);

    std::uint32_t group_id_;
    int rank_;
    std::vector<std::shared_ptr<Channel>> links_;
    GroupConfig config_;
    std::uint32_t seq_ = 0; // collective call counter, embedded to catch desyncs
};

} // namespace matbridge::comm
