#include "matbridge/plugin.hpp"

namespace matbridge::plugin {

namespace {
[[noreturn]] void bad_arg(std::size_t i, const char* want, const Value& got) {
    throw BridgeError(ErrorCode::argument_error,
                      "argument " + std::to_string(i) + ": expected " + want + ", got " +
                          value_to_string(got));
}
} // namespace

const MatrixHandle& arg_handle(const std::vector<Value>& args, std::size_t i) {
    if (i >= args.size() || !std::holds_alternative<MatrixHandle>(args[i]))
        bad_arg(i, "matrix handle", i < args.size() ? args[i] : Value(std::string("<missing>")));
    return std::get<MatrixHandle>(args[i]);
}

std::int64_t arg_int(const std::vector<Value>& args, std::size_t i) {
    if (i < args.size()) {
        if (std::holds_alternative<std::int64_t>(args[i])) return std::get<std::int64_t>(args[i]);
        if (std::holds_alternative<std::int32_t>(args[i])) return std::get<std::int32_t>(args[i]);
    }
    bad_arg(i, "integer", i < args.size() ? args[i] : Value(std::string("<missing>")));
}

double arg_float(const std::vector<Value>& args, std::size_t i) {
    if (i < args.size()) {
        if (std::holds_alternative<double>(args[i])) return std::get<double>(args[i]);
        if (std::holds_alternative<std::int64_t>(args[i]))
            return static_cast<double>(std::get<std::int64_t>(args[i]));
        if (std::holds_alternative<std::int32_t>(args[i]))
            return static_cast<double>(std::get<std::int32_t>(args[i]));
    }
    bad_arg(i, "number", i < args.size() ? args[i] : Value(std::string("<missing>")));
}

void expect_arg_count(const std::vector<Value>& args, std::size_t n, const char* routine) {
    if (args.size() != n)
        throw BridgeError(ErrorCode::argument_error,
                          std::string(routine) + " takes " + std::to_string(n) +
                              " arguments, got " + std::to_string(args.size()));
}

} // namespace matbridge::plugin
