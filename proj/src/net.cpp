#include "matbridge/net.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>

namespace matbridge::net {

namespace {

[[noreturn]] void throw_errno(ErrorCode code, const std::string& what) {
    throw BridgeError(code, what + ": " + std::strerror(errno));
}

void set_nodelay(int fd) {
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

} // namespace

Endpoint parse_endpoint(const std::string& text) {
    Endpoint ep;
    std::size_t colon;
    if (!text.empty() && text.front() == '[') {
        auto close = text.find(']');
        if (close == std::string::npos || close + 1 >= text.size() || text[close + 1] != ':')
            throw BridgeError(ErrorCode::argument_error, "bad endpoint '" + text + "'");
        ep.host = text.substr(1, close - 1);
        colon = close + 1;
    } else {
        colon = text.rfind(':');
        if (colon == std::string::npos)
            throw BridgeError(ErrorCode::argument_error,
                              "endpoint '" + text + "' missing ':port'");
        ep.host = text.substr(0, colon);
    }
    const auto port_text = text.substr(colon + 1);
    char* end = nullptr;
    const long port = std::strtol(port_text.c_str(), &end, 10);
    if (end == port_text.c_str() || *end != '\0' || port < 0 || port > 65535)
        throw BridgeError(ErrorCode::argument_error, "bad port in '" + text + "'");
    ep.port = static_cast<std::uint16_t>(port);
    return ep;
}

Socket::~Socket() { close(); }

Socket& Socket::operator=(Socket&& other) noexcept {
    if (this != &other) {
        close();
        fd_ = std::exchange(other.fd_, -1);
    }
    return *this;
}

Socket Socket::connect(const Endpoint& ep) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const auto port_str = std::to_string(ep.port);
    if (int rc = ::getaddrinfo(ep.host.c_str(), port_str.c_str(), &hints, &res); rc != 0)
        throw BridgeError(ErrorCode::connect_error,
                          "resolve " + ep.to_string() + ": " + gai_strerror(rc));
    int fd = -1;
    int saved_errno = 0;
    for (addrinfo* ai = res; ai; ai = ai->ai_next) {
        fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
        if (fd < 0) {
            saved_errno = errno;
            continue;
        }
        if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
        saved_errno = errno;
        ::close(fd);
        fd = -1;
    }
    ::freeaddrinfo(res);
    if (fd < 0) {
        errno = saved_errno;
        throw_errno(ErrorCode::connect_error, "connect " + ep.to_string());
    }
    set_nodelay(fd);
    return Socket(fd);
}

void Socket::send_all(const void* data, std::size_t len) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    while (len > 0) {
        const auto n = ::send(fd_, p, len, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw_errno(ErrorCode::connect_error, "send");
        }
        p += n;
        len -= static_cast<std::size_t>(n);
    }
}

std::size_t Socket::recv_some(void* data, std::size_t len) {
    while (true) {
        const auto n = ::recv(fd_, data, len, 0);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw_errno(ErrorCode::connect_error, "recv");
        }
        return static_cast<std::size_t>(n);
    }
}

bool Socket::wait_readable(int timeout_ms) {
    pollfd pfd{fd_, POLLIN, 0};
    while (true) {
        const int rc = ::poll(&pfd, 1, timeout_ms);
        if (rc < 0) {
            if (errno == EINTR) continue;
            throw_errno(ErrorCode::connect_error, "poll");
        }
        return rc > 0;
    }
}

void Socket::shutdown_both() {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

void Socket::close() {
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
}

Listener Listener::bind(const Endpoint& ep) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    hints.ai_flags = AI_PASSIVE;
    addrinfo* res = nullptr;
    const auto port_str = std::to_string(ep.port);
    if (int rc = ::getaddrinfo(ep.host.empty() ? nullptr : ep.host.c_str(), port_str.c_str(),
                               &hints, &res);
        rc != 0)
        throw BridgeError(ErrorCode::connect_error,
                          "resolve " + ep.to_string() + ": " + gai_strerror(rc));
    int fd = -1;
    for (addrinfo* ai = res; ai; ai = ai->ai_next) {
        fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
        if (fd < 0) continue;
        int one = 1;
        ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
        if (::bind(fd, ai->ai_addr, ai->ai_addrlen) == 0 && ::listen(fd, 64) == 0) break;
        ::close(fd);
        fd = -1;
    }
    ::freeaddrinfo(res);
    if (fd < 0) throw_errno(ErrorCode::connect_error, "bind " + ep.to_string());

    sockaddr_storage addr{};
    socklen_t alen = sizeof(addr);
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &alen);
    Listener l;
    l.sock_ = Socket(fd);
    l.port_ = addr.ss_family == AF_INET6
                  ? ntohs(reinterpret_cast<sockaddr_in6*>(&addr)->sin6_port)
                  : ntohs(reinterpret_cast<sockaddr_in*>(&addr)->sin_port);
    return l;
}

std::optional<Socket> Listener::accept(int timeout_ms) {
    if (!sock_.wait_readable(timeout_ms)) return std::nullopt;
    const int fd = ::accept(sock_.fd(), nullptr, nullptr);
    if (fd < 0) {
        if (errno == EINTR || errno == EAGAIN || errno == ECONNABORTED) return std::nullopt;
        throw_errno(ErrorCode::connect_error, "accept");
    }
    set_nodelay(fd);
    return Socket(fd);
}

// ---------------------------------------------------------------------------
// FramedConn
// ---------------------------------------------------------------------------

FramedConn::FramedConn(Socket sock)
    : sock_(std::move(sock)), stats_(std::make_shared<ConnStats>()) {}

void FramedConn::send_frame(std::span<const std::uint8_t> encoded) {
    wbuf_.insert(wbuf_.end(), encoded.begin(), encoded.end());
    stats_->frames_sent.fetch_add(1, std::memory_order_relaxed);
    if (wbuf_.size() >= write_high_water) flush();
}

void FramedConn::send_frame(const Frame& f) {
    send_frame(encode_frame(f.command, f.session_id, f.payload));
}

void FramedConn::flush() {
    if (wbuf_.empty()) return;
    sock_.send_all(wbuf_.data(), wbuf_.size());
    stats_->bytes_sent.fetch_add(wbuf_.size(), std::memory_order_relaxed);
    wbuf_.clear();
}

void FramedConn::fill_some(int timeout_ms, bool& timed_out, bool& eof) {
    timed_out = eof = false;
    if (!sock_.wait_readable(timeout_ms)) {
        timed_out = true;
        return;
    }
    std::uint8_t chunk[64 * 1024];
    const auto n = sock_.recv_some(chunk, sizeof(chunk));
    if (n == 0) {
        eof = true;
        return;
    }
    stats_->bytes_received.fetch_add(n, std::memory_order_relaxed);
    assembler_.feed(std::span<const std::uint8_t>(chunk, n));
}

std::optional<Frame> FramedConn::recv_frame() {
    Frame f;
    switch (recv_frame_for(-1, f)) {
    case Poll::frame: return f;
    case Poll::eof: return std::nullopt;
    case Poll::timeout: break; // unreachable with infinite timeout
    }
    throw BridgeError(ErrorCode::internal_error, "recv_frame: unexpected poll state");
}

FramedConn::Poll FramedConn::recv_frame_for(int timeout_ms, Frame& out) {
    const auto deadline = timeout_ms < 0
                              ? std::chrono::steady_clock::time_point::max()
                              : std::chrono::steady_clock::now() +
                                    std::chrono::milliseconds(timeout_ms);
    while (true) {
        if (auto f = assembler_.poll()) {
            stats_->frames_received.fetch_add(1, std::memory_order_relaxed);
            out = std::move(*f);
            return Poll::frame;
        }
        int wait_ms = -1;
        if (timeout_ms >= 0) {
            const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
                                  deadline - std::chrono::steady_clock::now())
                                  .count();
            if (left <= 0) return Poll::timeout;
            wait_ms = static_cast<int>(left);
        }
        bool timed_out = false, eof = false;
        fill_some(wait_ms, timed_out, eof);
        if (timed_out) return Poll::timeout;
        if (eof) {
            if (assembler_.buffered() > 0)
                throw BridgeError(ErrorCode::connect_error, "peer closed mid-frame");
            return Poll::eof;
        }
    }
}

Frame FramedConn::call(const Frame& request) {
    send_frame(request);
    flush();
    auto reply = recv_frame();
    if (!reply)
        throw BridgeError(ErrorCode::connect_error, "connection closed while awaiting reply");
    return std::move(*reply);
}

std::string local_hostname() {
    char buf[256] = {0};
    if (::gethostname(buf, sizeof(buf) - 1) != 0) return "localhost";
    return buf;
}

} // namespace matbridge::net
