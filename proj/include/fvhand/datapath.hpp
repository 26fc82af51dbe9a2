#pragma once

// Camera datapath: DCMI-style framing of camera images, the bounded
// buffer/serializer that multiplexes five feeds onto one 100 Mbit/s link,
// 2x2 downsampling, and fault injection on the serialized stream.
//
// Packet layout (all multi-byte fields little-endian, see docs/formats.md):
//
//   FF 01                         frame start
//   header  (stuffed)             camera_id u8, frame_counter u32,
//                                 width u16, height u16, format u8
//   height x { FF 02, line }      line start + stuffed row bytes
//   crc     (stuffed)             CRC-32 of header and payload, u32
//   FF 03                         frame end
//
// Inside stuffed regions every 0xFF data byte is written as FF 00, so the
// marker pairs FF 01/02/03 never occur in data.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace fvhand::datapath {

inline constexpr std::uint16_t kQcifWidth = 176;
inline constexpr std::uint16_t kQcifHeight = 144;
inline constexpr std::uint16_t kReducedWidth = 88;
inline constexpr std::uint16_t kReducedHeight = 72;
inline constexpr std::uint8_t kCameraCount = 5;
inline constexpr double kCameraFps = 20.0;
inline constexpr std::size_t kDefaultBufferBytes = 330 * 1024;
inline constexpr double kLinkBitsPerSecond = 100e6;

inline constexpr std::uint8_t kMarkerPrefix = 0xFF;
inline constexpr std::uint8_t kStuffByte = 0x00;
inline constexpr std::uint8_t kFrameStart = 0x01;
inline constexpr std::uint8_t kLineStart = 0x02;
inline constexpr std::uint8_t kFrameEnd = 0x03;
inline constexpr std::size_t kHeaderBytes = 10;

enum class PixelFormat : std::uint8_t { Rgb565 = 1, Rgb888 = 2 };

constexpr std::size_t bytes_per_pixel(PixelFormat f) { return f == PixelFormat::Rgb565 ? 2 : 3; }

struct Frame {
  std::uint8_t camera_id = 0;
  std::uint32_t frame_counter = 0;
  std::uint16_t width = 0;
  std::uint16_t height = 0;
  PixelFormat format = PixelFormat::Rgb888;
  std::vector<std::uint8_t> pixels;  // row-major; RGB565 is big-endian per pixel

  std::size_t expected_bytes() const {
    return static_cast<std::size_t>(width) * height * bytes_per_pixel(format);
  }
  bool well_formed() const;
  friend bool operator==(const Frame&, const Frame&) = default;
};

Frame make_frame(std::uint8_t camera_id, std::uint32_t counter, std::uint16_t width,
                 std::uint16_t height, PixelFormat format);

// RGB888 <-> RGB565. Expansion replicates the high bits into the low bits.
Frame to_rgb888(const Frame& frame);
Frame to_rgb565(const Frame& frame);

std::uint32_t crc32(std::span<const std::uint8_t> bytes, std::uint32_t crc = 0);

std::vector<std::uint8_t> dcmi_encode(const Frame& frame);
void dcmi_encode_into(const Frame& frame, std::vector<std::uint8_t>& out);

enum class SyncLossReason : std::uint8_t {
  EndOfStream,  // stream ended inside a packet
  Crc,          // checksum mismatch, frame discarded
  Framing,      // unexpected marker or bad stuffing
  Header,       // header fields out of range
};

const char* sync_loss_name(SyncLossReason r);

struct SyncLoss {
  std::size_t offset = 0;  // byte offset of the failure
  SyncLossReason reason = SyncLossReason::Framing;
  // Set when the header of the failed packet was parsed.
  std::optional<std::uint8_t> camera_id;
  std::optional<std::uint32_t> frame_counter;
};

using DecodeEvent = std::variant<Frame, SyncLoss>;

// Streaming decoder. Tolerates arbitrary bytes: after any failure it
// resynchronizes at the next frame-start marker.
class DcmiDecoder {
 public:
  explicit DcmiDecoder(std::span<const std::uint8_t> stream) : stream_(stream) {}

  // Next frame or sync loss; nullopt once the stream is exhausted.
  std::optional<DecodeEvent> next();
  std::size_t position() const { return pos_; }
  std::size_t bytes_skipped() const { return skipped_; }

 private:
  std::span<const std::uint8_t> stream_;
  std::size_t pos_ = 0;
  std::size_t skipped_ = 0;
};

struct DecodeSummary {
  std::vector<DecodeEvent> events;
  std::size_t frames = 0;
  std::size_t sync_losses = 0;
  std::size_t bytes_skipped = 0;
};

DecodeSummary dcmi_decode(std::span<const std::uint8_t> stream);

// Splits a stream at frame-start markers; returns [begin, end) byte ranges.
std::vector<std::pair<std::size_t, std::size_t>> packet_bounds(std::span<const std::uint8_t> stream);

Frame downsample_2x2(const Frame& frame);

// --- buffering and serialization ---

enum class OverflowPolicy : std::uint8_t { DropNewest, DropOldest };

struct BufferBudget {
  std::size_t capacity = kDefaultBufferBytes;
  std::size_t occupancy = 0;
  std::size_t drop_count = 0;

  bool fits(std::size_t bytes) const { return occupancy + bytes <= capacity; }
};

struct Arrival {
  std::int64_t time_ns = 0;
  std::uint8_t camera_id = 0;
};

// Cameras capturing at `fps` for `periods` frame periods. With `stagger`
// camera k is offset by k/5 of a period, otherwise all arrive together.
std::vector<Arrival> camera_schedule(std::size_t periods, std::uint8_t cameras = kCameraCount,
                                     double fps = kCameraFps, bool stagger = false);

using FrameSource = std::function<Frame(std::uint8_t camera_id, std::uint32_t counter)>;

struct MuxConfig {
  BufferBudget budget;
  OverflowPolicy policy = OverflowPolicy::DropNewest;
  double link_bits_per_second = kLinkBitsPerSecond;
};

struct EmittedFrame {
  std::uint8_t camera_id = 0;
  std::uint32_t frame_counter = 0;
  std::int64_t start_ns = 0;
  std::int64_t end_ns = 0;
  std::size_t payload_bytes = 0;
};

struct MuxStats {
  std::size_t frames_in = 0;
  std::size_t frames_emitted = 0;
  std::size_t drops = 0;
  std::vector<std::size_t> drops_per_arrival_tick;  // aligned with distinct arrival times
  std::size_t payload_bytes = 0;  // pixel bytes carried on the link
  std::size_t wire_bytes = 0;     // encoded packet bytes
  std::size_t max_occupancy = 0;
  std::int64_t duration_ns = 0;
  double payload_bit_rate = 0.0;  // payload_bytes * 8 / duration
};

struct MuxResult {
  std::vector<std::uint8_t> stream;
  std::vector<EmittedFrame> emitted;
  MuxStats stats;
  BufferBudget budget;  // final state, drop_count filled
};

// Frame-granular serializer: whole frames are queued in arrival order (ties
// broken by camera id) and sent back to back at the link rate. A frame holds
// its payload bytes in the buffer from admission until its last byte is sent.
// `duration_ns` is the observation window used for the rate; it is extended
// if the link is still busy at its end.
MuxResult mux_serialize(std::span<const Arrival> schedule, const FrameSource& source,
                        MuxConfig config, std::int64_t duration_ns);

// --- fault injection ---

struct BitErrorRate {
  double rate = 0.0;  // per bit
};

struct PartialFrame {
  std::size_t packet_index = 0;
  double keep_fraction = 0.5;  // of the packet's bytes, counted from its start
};

// Wear-out of the camera link: packets whose frame counter (actuation cycle)
// is below `first_corrupt` pass unchanged; the packet at `first_corrupt` is
// corrupted and later ones are corrupted with probability `intermittent_rate`;
// from `signal_loss` on nothing is transmitted.
struct DeadAfterCycles {
  std::uint32_t first_corrupt = 4968;
  std::uint32_t signal_loss = 5665;
  double intermittent_rate = 0.5;
};

using FaultPolicy = std::variant<BitErrorRate, PartialFrame, DeadAfterCycles>;

std::vector<std::uint8_t> inject_fault(std::span<const std::uint8_t> stream,
                                       const FaultPolicy& policy, std::uint64_t seed);

}  // namespace fvhand::datapath
