#include "matbridge/protocol.hpp"

#include <bit>
#include <cstring>

namespace matbridge {

const char* error_code_name(ErrorCode code) {
    switch (code) {
    case ErrorCode::protocol_error: return "protocol_error";
    case ErrorCode::version_error: return "version_error";
    case ErrorCode::argument_error: return "argument_error";
    case ErrorCode::state_error: return "state_error";
    case ErrorCode::insufficient_workers: return "insufficient_workers";
    case ErrorCode::unknown_library: return "unknown_library";
    case ErrorCode::unknown_routine: return "unknown_routine";
    case ErrorCode::handle_error: return "handle_error";
    case ErrorCode::not_ready: return "not_ready";
    case ErrorCode::routing_error: return "routing_error";
    case ErrorCode::too_large: return "too_large";
    case ErrorCode::resource_error: return "resource_error";
    case ErrorCode::timeout: return "timeout";
    case ErrorCode::session_closed: return "session_closed";
    case ErrorCode::group_failure: return "group_failure";
    case ErrorCode::connect_error: return "connect_error";
    case ErrorCode::internal_error: return "internal_error";
    }
    return "unknown_error";
}

const char* command_name(std::uint8_t code) {
    const bool response = (code & response_bit) && code != 0xFF;
    switch (static_cast<Command>(code & ~response_bit)) {
    case Command::handshake: return response ? "HANDSHAKE.reply" : "HANDSHAKE";
    case Command::request_workers: return response ? "REQUEST_WORKERS.reply" : "REQUEST_WORKERS";
    case Command::register_library: return response ? "REGISTER_LIBRARY.reply" : "REGISTER_LIBRARY";
    case Command::create_matrix: return response ? "CREATE_MATRIX.reply" : "CREATE_MATRIX";
    case Command::send_rows: return response ? "SEND_ROWS.reply" : "SEND_ROWS";
    case Command::fetch_rows: return response ? "FETCH_ROWS.reply" : "FETCH_ROWS";
    case Command::run: return response ? "RUN.reply" : "RUN";
    case Command::close: return response ? "CLOSE.reply" : "CLOSE";
    case Command::group_bcast: return response ? "GROUP_BCAST.reply" : "GROUP_BCAST";
    case Command::group_gather: return response ? "GROUP_GATHER.reply" : "GROUP_GATHER";
    case Command::group_reduce: return response ? "GROUP_REDUCE.reply" : "GROUP_REDUCE";
    case Command::group_barrier: return response ? "GROUP_BARRIER.reply" : "GROUP_BARRIER";
    case Command::group_p2p: return response ? "GROUP_P2P.reply" : "GROUP_P2P";
    default: break;
    }
    if (code == 0xFF) return "ERROR";
    return "UNKNOWN";
}

// ---------------------------------------------------------------------------
// ByteWriter / ByteReader
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void append_le(std::vector<std::uint8_t>& buf, T v) {
    static_assert(std::is_unsigned_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i)
        buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename T>
T read_le(const std::uint8_t* p) {
    static_assert(std::is_unsigned_v<T>);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
        v |= static_cast<T>(p[i]) << (8 * i);
    return v;
}

} // namespace

void ByteWriter::u8(std::uint8_t v) { buf_.push_back(v); }
void ByteWriter::u16(std::uint16_t v) { append_le(buf_, v); }
void ByteWriter::u32(std::uint32_t v) { append_le(buf_, v); }
void ByteWriter::u64(std::uint64_t v) { append_le(buf_, v); }
void ByteWriter::i32(std::int32_t v) { append_le(buf_, static_cast<std::uint32_t>(v)); }
void ByteWriter::i64(std::int64_t v) { append_le(buf_, static_cast<std::uint64_t>(v)); }
void ByteWriter::f64(double v) { append_le(buf_, std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::bytes(const void* data, std::size_t len) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf_.insert(buf_.end(), p, p + len);
}

void ByteWriter::str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
}

void ByteReader::need(std::size_t n) const {
    if (remaining() < n)
        throw BridgeError(ErrorCode::protocol_error, "truncated payload: need " +
                                                         std::to_string(n) + " bytes, have " +
                                                         std::to_string(remaining()));
}

std::uint8_t ByteReader::u8() {
    need(1);
    return data_[pos_++];
}
std::uint16_t ByteReader::u16() {
    need(2);
    auto v = read_le<std::uint16_t>(data_.data() + pos_);
    pos_ += 2;
    return v;
}
std::uint32_t ByteReader::u32() {
    need(4);
    auto v = read_le<std::uint32_t>(data_.data() + pos_);
    pos_ += 4;
    return v;
}
std::uint64_t ByteReader::u64() {
    need(8);
    auto v = read_le<std::uint64_t>(data_.data() + pos_);
    pos_ += 8;
    return v;
}
std::int32_t ByteReader::i32() { return static_cast<std::int32_t>(u32()); }
std::int64_t ByteReader::i64() { return static_cast<std::int64_t>(u64()); }
double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::span<const std::uint8_t> ByteReader::bytes(std::size_t len) {
    need(len);
    auto s = data_.subspan(pos_, len);
    pos_ += len;
    return s;
}

std::string ByteReader::str() {
    auto len = u32();
    auto b = bytes(len);
    return std::string(reinterpret_cast<const char*>(b.data()), b.size());
}

void ByteReader::expect_end() const {
    if (remaining() != 0)
        throw BridgeError(ErrorCode::protocol_error,
                          std::to_string(remaining()) + " trailing bytes in payload");
}

// ---------------------------------------------------------------------------
// Frame codec
// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_frame(std::uint8_t command, std::uint32_t session_id,
                                       std::span<const std::uint8_t> payload) {
    if (payload.size() > max_payload_len)
        throw BridgeError(ErrorCode::too_large,
                          "frame payload of " + std::to_string(payload.size()) +
                              " bytes exceeds the " + std::to_string(max_payload_len) + " limit");
    std::vector<std::uint8_t> out;
    out.reserve(frame_header_size + payload.size());
    append_le(out, wire_magic);
    out.push_back(wire_version);
    out.push_back(command);
    append_le(out, session_id);
    append_le(out, static_cast<std::uint32_t>(payload.size()));
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

std::vector<std::uint8_t> encode_frame(Command command, std::uint32_t session_id,
                                       std::span<const std::uint8_t> payload) {
    return encode_frame(static_cast<std::uint8_t>(command), session_id, payload);
}

namespace {

// Parses a header at `p` (must have frame_header_size bytes). Throws on bad
// magic/version/length; returns the declared payload length.
std::uint32_t parse_header(const std::uint8_t* p, std::uint8_t& command, std::uint32_t& session) {
    const auto magic = read_le<std::uint32_t>(p);
    if (magic != wire_magic)
        throw BridgeError(ErrorCode::protocol_error, "bad frame magic");
    const auto version = p[4];
    if (version != wire_version)
        throw BridgeError(ErrorCode::version_error,
                          "unsupported frame version " + std::to_string(version));
    command = p[5];
    session = read_le<std::uint32_t>(p + 6);
    const auto len = read_le<std::uint32_t>(p + 10);
    if (len > max_payload_len)
        throw BridgeError(ErrorCode::protocol_error,
                          "declared payload length " + std::to_string(len) + " exceeds limit");
    return len;
}

} // namespace

std::optional<std::pair<Frame, std::size_t>> decode_frame(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < frame_header_size) return std::nullopt;
    Frame f;
    const auto len = parse_header(bytes.data(), f.command, f.session_id);
    if (bytes.size() < frame_header_size + len) return std::nullopt;
    f.payload.assign(bytes.begin() + frame_header_size, bytes.begin() + frame_header_size + len);
    return std::make_pair(std::move(f), frame_header_size + len);
}

void FrameAssembler::feed(std::span<const std::uint8_t> data) {
    buf_.insert(buf_.end(), data.begin(), data.end());
}

std::optional<Frame> FrameAssembler::poll() {
    auto view = std::span<const std::uint8_t>(buf_).subspan(scan_);
    auto decoded = decode_frame(view);
    if (!decoded) {
        // Compact: drop the consumed prefix so the buffer doesn't grow without
        // bound across a long stream.
        if (scan_ > 0) {
            buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(scan_));
            scan_ = 0;
        }
        return std::nullopt;
    }
    scan_ += decoded->second;
    return std::move(decoded->first);
}

// ---------------------------------------------------------------------------
// Values
// ---------------------------------------------------------------------------

void encode_value(ByteWriter& w, const Value& v) {
    std::visit(
        [&](const auto& x) {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, bool>) {
                w.u8(static_cast<std::uint8_t>(ValueTag::boolean));
                w.u8(x ? 1 : 0);
            } else if constexpr (std::is_same_v<T, std::int32_t>) {
                w.u8(static_cast<std::uint8_t>(ValueTag::int32));
                w.i32(x);
            } else if constexpr (std::is_same_v<T, std::int64_t>) {
                w.u8(static_cast<std::uint8_t>(ValueTag::int64));
                w.i64(x);
            } else if constexpr (std::is_same_v<T, double>) {
                w.u8(static_cast<std::uint8_t>(ValueTag::float64));
                w.f64(x);
            } else if constexpr (std::is_same_v<T, std::string>) {
                w.u8(static_cast<std::uint8_t>(ValueTag::string));
                w.str(x);
            } else {
                static_assert(std::is_same_v<T, MatrixHandle>);
                w.u8(static_cast<std::uint8_t>(ValueTag::handle));
                w.u32(x.id);
                w.u64(x.rows);
                w.u64(x.cols);
            }
        },
        v);
}

Value decode_value(ByteReader& r) {
    const auto tag = r.u8();
    switch (static_cast<ValueTag>(tag)) {
    case ValueTag::boolean: {
        const auto b = r.u8();
        if (b > 1)
            throw BridgeError(ErrorCode::protocol_error,
                              "bool value byte " + std::to_string(b));
        return b == 1;
    }
    case ValueTag::int32: return r.i32();
    case ValueTag::int64: return r.i64();
    case ValueTag::float64: return r.f64();
    case ValueTag::string: return r.str();
    case ValueTag::handle: {
        MatrixHandle h;
        h.id = r.u32();
        h.rows = r.u64();
        h.cols = r.u64();
        return h;
    }
    }
    throw BridgeError(ErrorCode::protocol_error, "unknown value tag " + std::to_string(tag));
}

void encode_value_list(ByteWriter& w, const std::vector<Value>& values) {
    w.u32(static_cast<std::uint32_t>(values.size()));
    for (const auto& v : values) encode_value(w, v);
}

std::vector<Value> decode_value_list(ByteReader& r) {
    const auto count = r.u32();
    // A value occupies at least 2 bytes, so `count` can't exceed remaining/2.
    if (count > r.remaining())
        throw BridgeError(ErrorCode::protocol_error, "value list count exceeds payload");
    std::vector<Value> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) out.push_back(decode_value(r));
    return out;
}

std::string value_to_string(const Value& v) {
    return std::visit(
        [](const auto& x) -> std::string {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, bool>) {
                return x ? "true" : "false";
            } else if constexpr (std::is_same_v<T, std::string>) {
                return "\"" + x + "\"";
            } else if constexpr (std::is_same_v<T, MatrixHandle>) {
                return "handle(" + std::to_string(x.id) + ", " + std::to_string(x.rows) + "x" +
                       std::to_string(x.cols) + ")";
            } else {
                return std::to_string(x);
            }
        },
        v);
}

// ---------------------------------------------------------------------------
// Row batches
// ---------------------------------------------------------------------------

void encode_row_batch(ByteWriter& w, const RowBatchHeader& h, const double* data) {
    w.u32(h.matrix_id);
    w.u64(h.start_row);
    w.u32(h.num_rows);
    w.u64(h.num_cols);
    w.bytes(data, sizeof(double) * h.num_rows * h.num_cols);
}

RowBatchView decode_row_batch(ByteReader& r, std::vector<double>& storage) {
    RowBatchView v;
    v.header.matrix_id = r.u32();
    v.header.start_row = r.u64();
    v.header.num_rows = r.u32();
    v.header.num_cols = r.u64();
    const std::uint64_t count = std::uint64_t(v.header.num_rows) * v.header.num_cols;
    if (count * sizeof(double) != r.remaining())
        throw BridgeError(ErrorCode::protocol_error,
                          "row batch data length mismatch: header promises " +
                              std::to_string(count * sizeof(double)) + " bytes, payload has " +
                              std::to_string(r.remaining()));
    auto raw = r.bytes(count * sizeof(double));
    if (reinterpret_cast<std::uintptr_t>(raw.data()) % alignof(double) == 0) {
        v.data = std::span<const double>(reinterpret_cast<const double*>(raw.data()), count);
    } else {
        storage.resize(count);
        std::memcpy(storage.data(), raw.data(), raw.size());
        v.data = storage;
    }
    return v;
}

// ---------------------------------------------------------------------------
// Error payloads
// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_error_payload(ErrorCode code, const std::string& message) {
    ByteWriter w;
    w.u16(static_cast<std::uint16_t>(code));
    w.str(message);
    return w.take();
}

std::pair<ErrorCode, std::string> decode_error_payload(std::span<const std::uint8_t> payload) {
    ByteReader r(payload);
    const auto code = static_cast<ErrorCode>(r.u16());
    auto message = r.str();
    r.expect_end();
    return {code, std::move(message)};
}

std::vector<std::uint8_t> encode_error_frame(std::uint32_t session_id, ErrorCode code,
                                             const std::string& message) {
    return encode_frame(Command::error, session_id, encode_error_payload(code, message));
}

void expect_response(const Frame& f, Command expected) {
    if (f.is_error()) {
        auto [code, message] = decode_error_payload(f.payload);
        throw BridgeError(code, message);
    }
    if (f.command != response_to(expected))
        throw BridgeError(ErrorCode::protocol_error,
                          std::string("expected ") + command_name(response_to(expected)) +
                              ", got " + command_name(f.command));
}

} // namespace matbridge
