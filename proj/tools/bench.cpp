// Benchmark CLI: runs timed scenarios (send -> compute -> receive) or the
// shape/batching transfer experiment against a server, printing a table or
// csv report.

#include <cstdio>
#include <exception>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "matbridge/bench.hpp"
#include "matbridge/errors.hpp"
#include "matbridge/net.hpp"
#include "matbridge/server.hpp"

namespace {

using namespace matbridge;

// Reads the three-line discovery file written by the server launcher:
// hostname, address, port.
net::Endpoint read_info_file(const std::string& path) {
    std::ifstream in(path);
    std::string hostname, address, port;
    if (!in || !std::getline(in, hostname) || !std::getline(in, address) ||
        !std::getline(in, port))
        throw BridgeError(ErrorCode::argument_error, "cannot read info file '" + path + "'");
    return net::parse_endpoint(address + ":" + port);
}

bench::TransferShape parse_shape(const std::string& text) {
    auto x = text.find('x');
    if (x == std::string::npos) x = text.find('X');
    if (x == std::string::npos)
        throw BridgeError(ErrorCode::argument_error, "shape must look like MxN, got '" + text + "'");
    try {
        bench::TransferShape s;
        s.m = std::stoull(text.substr(0, x));
        s.n = std::stoull(text.substr(x + 1));
        return s;
    } catch (const std::exception&) {
        throw BridgeError(ErrorCode::argument_error, "shape must look like MxN, got '" + text + "'");
    }
}

std::vector<std::uint64_t> parse_batches(const std::string& text) {
    std::vector<std::uint64_t> out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto comma = text.find(',', pos);
        std::string item = text.substr(pos, comma == std::string::npos ? std::string::npos
                                                                       : comma - pos);
        if (!item.empty()) {
            try {
                out.push_back(std::stoull(item));
            } catch (const std::exception&) {
                throw BridgeError(ErrorCode::argument_error, "bad batch size '" + item + "'");
            }
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    if (out.empty())
        throw BridgeError(ErrorCode::argument_error, "no batch sizes given");
    return out;
}

void emit(const std::string& text, const std::string& out_path) {
    if (out_path.empty()) {
        std::fputs(text.c_str(), stdout);
        return;
    }
    std::ofstream out(out_path);
    if (!out) throw BridgeError(ErrorCode::argument_error, "cannot write '" + out_path + "'");
    out << text;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"matbridge benchmark harness"};
    app.require_subcommand(1);

    std::string server_addr, info_file, format_name = "table", out_path;
    int local_workers = 0;
    app.add_option("--server", server_addr, "driver endpoint, host:port");
    app.add_option("--info-file", info_file, "read the server launcher's discovery file");
    app.add_option("--local-workers", local_workers,
                   "start an in-process server with this many workers");
    app.add_option("--format", format_name, "table|csv")->capture_default_str();
    app.add_option("--out", out_path, "write the report here instead of stdout");

    auto* run = app.add_subcommand("run", "run a timed scenario");
    std::string scenario_path;
    run->add_option("--scenario", scenario_path, "key=value scenario file")->required();

    auto* transfer = app.add_subcommand("transfer", "shape/batching transfer experiment");
    std::string tall_text, wide_text, batches_text = "1048576";
    int transfer_workers = 1;
    std::uint64_t transfer_seed = 1;
    transfer->add_option("--tall", tall_text, "tall shape MxN")->required();
    transfer->add_option("--wide", wide_text, "wide shape MxN")->required();
    transfer->add_option("--batches", batches_text, "comma-separated batch budgets in bytes")
        ->capture_default_str();
    transfer->add_option("--workers", transfer_workers, "workers per pass")
        ->capture_default_str();
    transfer->add_option("--seed", transfer_seed, "input generator seed")->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        auto format = bench::parse_report_format(format_name);

        std::unique_ptr<server::Server> local;
        net::Endpoint driver;
        if (!server_addr.empty()) {
            driver = net::parse_endpoint(server_addr);
        } else if (!info_file.empty()) {
            driver = read_info_file(info_file);
        } else if (local_workers > 0) {
            server::ServerConfig sc;
            sc.workers = local_workers;
            local = server::start_local_server(sc);
            driver = local->control_endpoint();
        } else {
            std::fprintf(stderr, "error: need --server, --info-file or --local-workers\n");
            return 2;
        }

        int exit_code = 0;
        if (run->parsed()) {
            auto scenario = bench::parse_scenario_file(scenario_path);
            auto report = bench::run_scenario(driver, scenario);
            emit(bench::format_report(report, format), out_path);
            if (report.all_failed()) exit_code = 1;
        } else {
            auto report = bench::transfer_experiment(driver, parse_shape(tall_text),
                                                     parse_shape(wide_text),
                                                     parse_batches(batches_text),
                                                     transfer_workers, transfer_seed);
            emit(bench::format_report(report, format), out_path);
        }
        if (local) local->stop();
        return exit_code;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
