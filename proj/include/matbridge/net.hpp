#pragma once

// Thin RAII layer over TCP sockets plus a framed, buffered connection type.
// Everything above this header speaks Frames, not file descriptors.

#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>

#include "matbridge/protocol.hpp"

namespace matbridge::net {

struct Endpoint {
    std::string host;
    std::uint16_t port = 0;

    std::string to_string() const { return host + ":" + std::to_string(port); }
};

// Parses "host:port". IPv6 literals are accepted in brackets: "[::1]:24960".
Endpoint parse_endpoint(const std::string& text);

class Socket {
public:
    Socket() = default;
    explicit Socket(int fd) : fd_(fd) {}
    ~Socket();

    Socket(Socket&& other) noexcept : fd_(std::exchange(other.fd_, -1)) {}
    Socket& operator=(Socket&& other) noexcept;
    Socket(const Socket&) = delete;
    Socket& operator=(const Socket&) = delete;

    static Socket connect(const Endpoint& ep); // throws connect_error

    bool valid() const { return fd_ >= 0; }
    int fd() const { return fd_; }

    // Sends the whole buffer; throws connect_error on failure.
    void send_all(const void* data, std::size_t len);

    // Receives up to len bytes. Returns 0 on orderly shutdown by the peer.
    std::size_t recv_some(void* data, std::size_t len);

    // Waits for readability. Returns false on timeout. timeout_ms < 0 blocks.
    bool wait_readable(int timeout_ms);

    void shutdown_both();
    void close();

private:
    int fd_ = -1;
};

class Listener {
public:
    // host may be "0.0.0.0" (all interfaces); port 0 picks an ephemeral port.
    static Listener bind(const Endpoint& ep);

    Listener() = default;
    Listener(Listener&&) = default;
    Listener& operator=(Listener&&) = default;

    std::uint16_t port() const { return port_; }

    // Accepts one connection; nullopt on timeout. timeout_ms < 0 blocks.
    std::optional<Socket> accept(int timeout_ms);

    void close() { sock_.close(); }

private:
    Socket sock_;
    std::uint16_t port_ = 0;
};

// Transfer counters, shared so both ends of an in-process pair or an
// instrumentation harness can watch them while the connection is live.
struct ConnStats {
    std::atomic<std::uint64_t> bytes_sent{0};
    std::atomic<std::uint64_t> bytes_received{0};
    std::atomic<std::uint64_t> frames_sent{0};
    std::atomic<std::uint64_t> frames_received{0};
};

// A socket carrying a frame stream, with a write buffer (so that a burst of
// small frames becomes a few large send() calls) and an incremental reader.
class FramedConn {
public:
    enum class Poll { frame, timeout, eof };

    explicit FramedConn(Socket sock);

    // Appends one frame to the write buffer; transmits when the buffer
    // exceeds its high-water mark. Call flush() before awaiting a reply.
    void send_frame(std::span<const std::uint8_t> encoded);
    void send_frame(const Frame& f);
    void flush();

    // Blocks until a full frame arrives. nullopt = orderly EOF between
    // frames; EOF mid-frame throws (the peer died mid-message).
    std::optional<Frame> recv_frame();

    // Timed variant; fills `out` only when returning Poll::frame.
    Poll recv_frame_for(int timeout_ms, Frame& out);

    // send_frame + flush + recv_frame, throwing on EOF. The basic RPC step.
    Frame call(const Frame& request);

    ConnStats& stats() { return *stats_; }
    std::shared_ptr<ConnStats> stats_handle() { return stats_; }

    void shutdown() { sock_.shutdown_both(); }

private:
    void fill_some(int timeout_ms, bool& timed_out, bool& eof);

    Socket sock_;
    std::vector<std::uint8_t> wbuf_;
    FrameAssembler assembler_;
    std::shared_ptr<ConnStats> stats_;
    static constexpr std::size_t write_high_water = 256 * 1024;
};

// Hostname of this machine (for server info files).
std::string local_hostname();

} // namespace matbridge::net
