// Standalone server launcher: a driver endpoint plus an in-process worker
// pool. Clients connect to the printed control endpoint (or read the
// --info-file) and allocate workers per session.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <exception>
#include <string>
#include <thread>

#include <CLI11.hpp>

#include "matbridge/errors.hpp"
#include "matbridge/net.hpp"
#include "matbridge/server.hpp"

namespace {
std::atomic<bool> g_stop{false};
void on_signal(int) { g_stop.store(true); }
} // namespace

int main(int argc, char** argv) {
    CLI::App app{"matbridge server: drives a worker pool for remote matrix routines"};

    matbridge::server::ServerConfig config;
    std::string listen = "127.0.0.1:0";
    app.add_option("--workers", config.workers, "worker pool size")->capture_default_str();
    app.add_option("--listen", listen, "control endpoint, host:port (port 0 = ephemeral)")
        ->capture_default_str();
    app.add_option("--worker-host", config.worker_host,
                   "host advertised to clients for worker data endpoints")
        ->capture_default_str();
    app.add_option("--worker-port-base", config.worker_port_base,
                   "first worker data port; 0 picks ephemeral ports")
        ->capture_default_str();
    app.add_option("--info-file", config.info_file,
                   "write hostname, address and port lines for client discovery");
    app.add_option("--log-level", config.log_level, "trace|debug|info|warn|error|off")
        ->capture_default_str();
    app.add_option("--completeness-timeout-ms", config.completeness_timeout_ms,
                   "how long a completeness wait may block")
        ->capture_default_str();
    app.add_option("--barrier-timeout-ms", config.barrier_timeout_ms,
                   "worker-group barrier timeout")
        ->capture_default_str();
    CLI11_PARSE(app, argc, argv);

    try {
        config.listen = matbridge::net::parse_endpoint(listen);
        auto server = matbridge::server::start_local_server(config);
        std::printf("listening on %s\n", server->control_endpoint().to_string().c_str());
        std::printf("workers: %d\n", server->total_workers());
        std::fflush(stdout);

        std::signal(SIGINT, on_signal);
        std::signal(SIGTERM, on_signal);
        while (!g_stop.load())
            std::this_thread::sleep_for(std::chrono::milliseconds(100));
        std::printf("shutting down\n");
        server->stop();
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
