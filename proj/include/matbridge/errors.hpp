#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace matbridge {

// Stable numeric error codes carried in ERROR frames (u16 on the wire).
// Codes are part of the protocol; message strings are not.
enum class ErrorCode : std::uint16_t {
    protocol_error = 1,       // malformed bytes, bad magic, bad payload
    version_error = 2,        // unsupported frame or handshake version
    argument_error = 3,       // bad dimensions, bad parameter values
    state_error = 4,          // command not valid in current session state
    insufficient_workers = 5, // allocation request exceeds free pool
    unknown_library = 6,      // no plugin under that name/locator
    unknown_routine = 7,      // library has no such routine
    handle_error = 8,         // unknown or foreign matrix handle
    not_ready = 9,            // operand matrix incomplete
    routing_error = 10,       // rows addressed to a non-owning worker
    too_large = 11,           // size guard exceeded (gather, condest)
    resource_error = 12,      // memory budget exceeded with streaming off
    timeout = 13,             // completeness or barrier deadline passed
    session_closed = 14,      // context/session already stopped
    group_failure = 15,       // peer vanished mid-collective
    connect_error = 16,       // endpoint unreachable
    internal_error = 17,
};

const char* error_code_name(ErrorCode code);

class BridgeError : public std::runtime_error {
public:
    BridgeError(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const { return code_; }

private:
    ErrorCode code_;
};

} // namespace matbridge
