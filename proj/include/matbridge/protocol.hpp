#pragma once

// Wire format for the bridge.
//
// Every message is a frame:
//
//   offset  size  field
//   0       4     magic      0x414C4348, little-endian (bytes 48 43 4C 41)
//   4       1     version    always 1
//   5       1     command    request code, response (code | 0x80), or 0xFF
//   6       4     session_id little-endian u32 (0 before handshake)
//   10      4     payload_len little-endian u32
//   14      ...   payload    exactly payload_len bytes
//
// All multi-byte integers anywhere in a payload are little-endian; all
// floating point values are IEEE-754 binary64 transmitted as their bit
// pattern (NaN payloads survive a round trip).
//
// An error response (command 0xFF) carries: u16 error code, u32 message
// length, UTF-8 message bytes.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "matbridge/errors.hpp"

namespace matbridge {

constexpr std::uint32_t wire_magic = 0x414C4348u; // "ALCH"
constexpr std::uint8_t wire_version = 1;
constexpr std::size_t frame_header_size = 14;

// Frames larger than this are rejected before allocation; keeps a corrupt
// length field from requesting a 4 GiB buffer.
constexpr std::uint32_t max_payload_len = 1u << 30;

enum class Command : std::uint8_t {
    handshake = 0x01,
    request_workers = 0x02,
    register_library = 0x03,
    create_matrix = 0x04,
    send_rows = 0x05,
    fetch_rows = 0x06,
    run = 0x07,
    close = 0x08,

    // Worker-to-worker traffic inside a group. Never sent by clients.
    group_bcast = 0x41,
    group_gather = 0x42,
    group_reduce = 0x43,
    group_barrier = 0x44,
    group_p2p = 0x46,

    error = 0xFF,
};

constexpr std::uint8_t response_bit = 0x80;

constexpr std::uint8_t response_to(Command c) {
    return static_cast<std::uint8_t>(c) | response_bit;
}

const char* command_name(std::uint8_t code);

struct Frame {
    std::uint8_t command = 0;
    std::uint32_t session_id = 0;
    std::vector<std::uint8_t> payload;

    bool is_response() const { return command & response_bit; }
    bool is_error() const { return command == static_cast<std::uint8_t>(Command::error); }
};

// ---------------------------------------------------------------------------
// Byte-level helpers. Writer appends; reader consumes with bounds checks.
// Reader underrun or overrun throws BridgeError(protocol_error): payloads are
// always complete frames by the time they are parsed, so truncation there is
// corruption, not backpressure.
// ---------------------------------------------------------------------------

class ByteWriter {
public:
    void u8(std::uint8_t v);
    void u16(std::uint16_t v);
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void i32(std::int32_t v);
    void i64(std::int64_t v);
    void f64(double v);
    void bytes(const void* data, std::size_t len);
    void str(const std::string& s); // u32 length + bytes

    std::vector<std::uint8_t> take() { return std::move(buf_); }
    const std::vector<std::uint8_t>& data() const { return buf_; }
    std::size_t size() const { return buf_.size(); }

private:
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

    std::uint8_t u8();
    std::uint16_t u16();
    std::uint32_t u32();
    std::uint64_t u64();
    std::int32_t i32();
    std::int64_t i64();
    double f64();
    std::span<const std::uint8_t> bytes(std::size_t len);
    std::string str();

    std::size_t remaining() const { return data_.size() - pos_; }
    std::size_t consumed() const { return pos_; }
    void expect_end() const; // throws if trailing bytes remain

private:
    void need(std::size_t n) const;
    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Frame codec
// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_frame(std::uint8_t command, std::uint32_t session_id,
                                       std::span<const std::uint8_t> payload);
std::vector<std::uint8_t> encode_frame(Command command, std::uint32_t session_id,
                                       std::span<const std::uint8_t> payload);

// Incremental decoder: feed arbitrary byte slices (as small as one byte),
// poll complete frames out. Bad magic / version / oversized length throw;
// an incomplete frame is not an error, poll() just returns nullopt.
class FrameAssembler {
public:
    void feed(std::span<const std::uint8_t> data);
    std::optional<Frame> poll();

    std::size_t buffered() const { return buf_.size() - scan_; }

private:
    std::vector<std::uint8_t> buf_;
    std::size_t scan_ = 0; // consumed prefix, compacted lazily
};

// One-shot decode of a complete buffer holding at least one frame.
// Returns the frame and the number of bytes consumed; nullopt if the buffer
// holds only a prefix. Consumes nothing on error.
std::optional<std::pair<Frame, std::size_t>> decode_frame(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Values: the tagged arguments/results of routine calls.
// ---------------------------------------------------------------------------

struct MatrixHandle {
    std::uint32_t id = 0;
    std::uint64_t rows = 0;
    std::uint64_t cols = 0;

    bool operator==(const MatrixHandle&) const = default;
};

using Value = std::variant<bool, std::int32_t, std::int64_t, double, std::string, MatrixHandle>;

enum class ValueTag : std::uint8_t {
    boolean = 0x01,
    int32 = 0x02,
    int64 = 0x03,
    float64 = 0x04,
    string = 0x05,
    handle = 0x06,
};

void encode_value(ByteWriter& w, const Value& v);
Value decode_value(ByteReader& r);

// Value lists are transmitted as u32 count + values; used by HANDSHAKE and RUN.
void encode_value_list(ByteWriter& w, const std::vector<Value>& values);
std::vector<Value> decode_value_list(ByteReader& r);

std::string value_to_string(const Value& v); // for logs and error messages

// ---------------------------------------------------------------------------
// Row batches: the unit of matrix transfer.
//
//   u32 matrix_id | u64 start_row | u32 num_rows | u64 num_cols | f64 data...
//
// data is row-major, num_rows × num_cols values.
// ---------------------------------------------------------------------------

struct RowBatchHeader {
    std::uint32_t matrix_id = 0;
    std::uint64_t start_row = 0;
    std::uint32_t num_rows = 0;
    std::uint64_t num_cols = 0;
};

constexpr std::size_t row_batch_header_size = 24;

void encode_row_batch(ByteWriter& w, const RowBatchHeader& h, const double* data);

struct RowBatchView {
    RowBatchHeader header;
    std::span<const double> data; // aliases the decoded buffer if aligned, else copied
};

// Decodes header + data. The returned view aliases `storage` ­— which is
// filled only when the payload bytes are misaligned for double access.
RowBatchView decode_row_batch(ByteReader& r, std::vector<double>& storage);

// ---------------------------------------------------------------------------
// Error payloads
// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_error_payload(ErrorCode code, const std::string& message);
std::pair<ErrorCode, std::string> decode_error_payload(std::span<const std::uint8_t> payload);

// Convenience: build a full error frame.
std::vector<std::uint8_t> encode_error_frame(std::uint32_t session_id, ErrorCode code,
                                             const std::string& message);

// Throws BridgeError if `f` is an error frame; otherwise checks the command
// byte equals response_to(expected).
void expect_response(const Frame& f, Command expected);

} // namespace matbridge
