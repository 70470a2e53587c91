#pragma once

// The bridge core: a driver coordinating a pool of workers (threads of this
// process), session management with exclusive worker-group allocation,
// plugin registration, and routine dispatch.
//
// Wire interfaces:
//   - control endpoint (driver): HANDSHAKE, REQUEST_WORKERS,
//     REGISTER_LIBRARY, CREATE_MATRIX, RUN, CLOSE, and zero-row FETCH_ROWS
//     as a completeness barrier;
//   - one data endpoint per worker: SEND_ROWS streams (fire-and-forget),
//     FETCH_ROWS streams, and zero-row FETCH_ROWS as a flush/sync point that
//     surfaces any error recorded while ingesting earlier SEND_ROWS frames.
//
// Payload layouts are documented in protocol.md.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "matbridge/mathlib.hpp"
#include "matbridge/net.hpp"
#include "matbridge/plugin.hpp"

namespace matbridge::server {

struct ServerConfig {
    int workers = 4;
    net::Endpoint listen{"127.0.0.1", 0}; // port 0 = ephemeral
    std::uint16_t worker_port_base = 0;   // 0 = ephemeral per worker
    std::string worker_host = "127.0.0.1"; // data-endpoint host advertised to clients
    std::string info_file;                 // if set: write hostname / address / port lines
    int completeness_timeout_ms = 120 * 1000;
    int barrier_timeout_ms = 60 * 1000;
    std::string log_level = "warn";
};

// One worker↔worker channel as seen by the isolation instrumentation.
struct ChannelRecord {
    std::uint32_t session_id = 0;
    int worker_a = -1; // global worker indices
    int worker_b = -1;
    std::uint64_t bytes = 0; // both directions
};

class Server {
public:
    explicit Server(ServerConfig config);
    ~Server();

    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    // Locator is an additional registry key (e.g. a path-like string clients
    // pass to register_library); the plugin's own name is always a key.
    void register_plugin(std::shared_ptr<plugin::LibraryPlugin> plugin,
                         const std::string& locator = "");

    void start();
    void stop();

    net::Endpoint control_endpoint() const;
    int total_workers() const;
    int free_workers() const;

    // Every group channel ever created, with byte counts; used to verify
    // session isolation (no record ever spans two sessions, and the
    // cross-session byte total is zero by construction).
    std::vector<ChannelRecord> transport_census() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// Convenience: a server with the built-in mathlib plugin registered, started.
std::unique_ptr<Server> start_local_server(ServerConfig config,
                                           const mathlib::MathlibConfig& mathlib_config = {});

} // namespace matbridge::server
