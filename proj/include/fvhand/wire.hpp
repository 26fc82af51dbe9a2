#pragma once

// Binary protocol between `fvhand serve` and its clients. Every message is
//
//   u32 length   (bytes that follow: type + payload)
//   u8  type
//   payload
//
// with all integers and floats little-endian. Over a WebSocket each binary
// frame carries exactly one such message. docs/wire-protocol.md has the
// byte layout of every payload.

#include "fvhand/hand_model.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace fvhand::wire {

inline constexpr std::uint16_t kProtocolVersion = 1;
inline constexpr std::uint32_t kMaxMessageBytes = 1u << 20;

enum class Type : std::uint8_t {
  Hello = 0x01,
  ButtonCommand = 0x02,
  InjectFault = 0x05,
  Welcome = 0x81,
  ButtonAck = 0x82,
  StatePacket = 0x83,
  FramePacket = 0x84,
  FaultAck = 0x85,
  Error = 0x8F,
};

struct Hello {
  std::uint16_t version = kProtocolVersion;
};

struct Welcome {
  std::uint16_t version = kProtocolVersion;
  std::uint16_t image_width = 0;
  std::uint16_t image_height = 0;
  std::uint8_t cameras = 0;
  float state_hz = 0.0f;
  float frame_hz = 0.0f;
  float speed = 0.0f;  // simulated seconds per wall-clock second, 0 = unpaced
};

struct ButtonCommand {
  std::uint8_t button = 0;  // 1..3
  std::uint8_t action = 0;  // 0 press, 1 release
};

struct ButtonAck {
  std::uint8_t button = 0;
  std::uint8_t drive_state = 0;  // 0 idle, 1 close, 2 stop, 3 open
  std::uint64_t tick = 0;        // tick at which the command took effect
};

struct MotorTelemetry {
  std::int32_t encoder_count = 0;
  std::int16_t pwm_duty = 0;
  float velocity = 0.0f;  // steps/s
  std::uint8_t drive_state = 0;
  std::uint8_t faulted = 0;
  friend bool operator==(const MotorTelemetry&, const MotorTelemetry&) = default;
};

struct FingerTelemetry {
  float mcp = 0.0f;  // rad
  float pip = 0.0f;
  friend bool operator==(const FingerTelemetry&, const FingerTelemetry&) = default;
};

struct StatePacket {
  std::uint64_t tick = 0;
  std::array<MotorTelemetry, hand::kMotorCount> motors{};
  std::array<FingerTelemetry, hand::kFingerCount> fingers{};
  float progress = 0.0f;  // grasp progress of the scripted scene, [0, 1]
};

enum class TileStatus : std::uint8_t { Ok = 0, Corrupt = 1, Missing = 2 };

struct FramePacket {
  static constexpr std::uint8_t kHasTruth = 0x01;
  static constexpr std::uint8_t kHasPrediction = 0x02;

  std::uint64_t tick = 0;
  std::uint32_t frame_counter = 0;
  std::uint16_t width = 0;
  std::uint16_t height = 0;
  std::uint8_t flags = 0;
  std::array<TileStatus, hand::kFingerCount> status{};
  std::vector<std::uint8_t> images;      // cameras x height x width x 3
  std::vector<std::uint8_t> prediction;  // cameras x packed mask
  std::vector<std::uint8_t> truth;       // cameras x packed mask, if kHasTruth
  std::array<float, hand::kFingerCount> accuracy{};  // NaN where unknown
  std::uint64_t total_macs = 0;
  std::uint32_t weight_bytes = 0;
  std::uint32_t peak_activation_bytes = 0;

  std::size_t pixels() const { return static_cast<std::size_t>(width) * height; }
  std::size_t packed_mask_bytes() const { return (pixels() + 7) / 8; }
};

struct InjectFault {
  std::uint8_t camera = 0;  // 0..4
};

struct FaultAck {
  std::uint8_t camera = 0;
};

enum class ErrorCode : std::uint8_t {
  Malformed = 1,
  UnknownType = 2,
  BadArgument = 3,
  TooLarge = 4,
};

struct ErrorMessage {
  ErrorCode code = ErrorCode::Malformed;
  std::string text;
};

using Message = std::variant<Hello, Welcome, ButtonCommand, ButtonAck, StatePacket, FramePacket,
                             InjectFault, FaultAck, ErrorMessage>;

Type type_of(const Message& m);

// Full message including the length prefix.
std::vector<std::uint8_t> encode(const Message& m);

struct DecodeError {
  ErrorCode code;
  std::string text;
};

// Decodes one type byte plus payload (no length prefix).
std::variant<Message, DecodeError> decode_body(std::span<const std::uint8_t> body);

// Reassembles messages from a byte stream.
class StreamReader {
 public:
  void feed(std::span<const std::uint8_t> bytes);
  // Next complete message body (type + payload), or nullopt if incomplete.
  // Returns a TooLarge error body once the declared length exceeds the limit;
  // the stream cannot be resynchronized after that.
  std::optional<std::variant<std::vector<std::uint8_t>, DecodeError>> next();

 private:
  std::vector<std::uint8_t> buffer_;
  std::size_t start_ = 0;
  bool broken_ = false;
};

// LSB-first bit packing of 0/1 masks.
std::vector<std::uint8_t> pack_mask(std::span<const std::uint8_t> mask);
std::vector<std::uint8_t> unpack_mask(std::span<const std::uint8_t> packed, std::size_t pixels);

// --- WebSocket (RFC 6455) ---

namespace ws {

std::string accept_key(std::string_view client_key);

enum class Opcode : std::uint8_t {
  Continuation = 0x0,
  Text = 0x1,
  Binary = 0x2,
  Close = 0x8,
  Ping = 0x9,
  Pong = 0xA,
};

struct Frame {
  bool fin = true;
  Opcode opcode = Opcode::Binary;
  std::vector<std::uint8_t> payload;
};

std::vector<std::uint8_t> encode_frame(Opcode op, std::span<const std::uint8_t> payload,
                                       std::optional<std::uint32_t> mask_key = std::nullopt);

class FrameParser {
 public:
  explicit FrameParser(std::size_t max_payload = kMaxMessageBytes + 16) : max_(max_payload) {}
  void feed(std::span<const std::uint8_t> bytes);
  // Throws std::runtime_error on protocol violations.
  std::optional<Frame> next();

 private:
  std::vector<std::uint8_t> buffer_;
  std::size_t max_;
};

// Parsed request line and headers of an HTTP upgrade request.
struct Handshake {
  std::string path;
  std::string key;
  bool upgrade = false;
};

// Returns nullopt until the header block is complete; throws on garbage.
std::optional<Handshake> parse_handshake(std::string_view request, std::size_t* consumed);
std::string handshake_response(const Handshake& h);

}  // namespace ws

}  // namespace fvhand::wire
