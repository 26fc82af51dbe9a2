#include "fvhand/datapath.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <limits>
#include <random>
#include <stdexcept>

namespace fvhand::datapath {

namespace {

constexpr std::uint16_t kMaxDimension = 4096;

constexpr std::array<std::uint32_t, 256> make_crc_table() {
  std::array<std::uint32_t, 256> table{};
  for (std::uint32_t i = 0; i < 256; ++i) {
    std::uint32_t c = i;
    for (int k = 0; k < 8; ++k) {
      c = (c & 1U) ? 0xEDB88320U ^ (c >> 1) : c >> 1;
    }
    table[i] = c;
  }
  return table;
}

constexpr auto kCrcTable = make_crc_table();

void put_stuffed(std::vector<std::uint8_t>& out, std::uint8_t b) {
  out.push_back(b);
  if (b == kMarkerPrefix) out.push_back(kStuffByte);
}

void put_marker(std::vector<std::uint8_t>& out, std::uint8_t code) {
  out.push_back(kMarkerPrefix);
  out.push_back(code);
}

std::array<std::uint8_t, kHeaderBytes> header_bytes(const Frame& f) {
  return {f.camera_id,
          static_cast<std::uint8_t>(f.frame_counter),
          static_cast<std::uint8_t>(f.frame_counter >> 8),
          static_cast<std::uint8_t>(f.frame_counter >> 16),
          static_cast<std::uint8_t>(f.frame_counter >> 24),
          static_cast<std::uint8_t>(f.width),
          static_cast<std::uint8_t>(f.width >> 8),
          static_cast<std::uint8_t>(f.height),
          static_cast<std::uint8_t>(f.height >> 8),
          static_cast<std::uint8_t>(f.format)};
}

enum class ReadStatus { Ok, End, Marker };

// Cursor over a stuffed byte region.
struct StuffedReader {
  std::span<const std::uint8_t> s;
  std::size_t pos;

  ReadStatus read(std::uint8_t& out) {
    if (pos >= s.size()) return ReadStatus::End;
    const auto b = s[pos];
    if (b != kMarkerPrefix) {
      out = b;
      ++pos;
      return ReadStatus::Ok;
    }
    if (pos + 1 >= s.size()) return ReadStatus::End;
    if (s[pos + 1] == kStuffByte) {
      out = kMarkerPrefix;
      pos += 2;
      return ReadStatus::Ok;
    }
    return ReadStatus::Marker;
  }

  ReadStatus read_n(std::uint8_t* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto st = read(out[i]);
      if (st != ReadStatus::Ok) return st;
    }
    return ReadStatus::Ok;
  }

  // Consumes the given marker; reports End or Marker (wrong marker / data) otherwise.
  ReadStatus expect_marker(std::uint8_t code) {
    if (pos + 1 >= s.size()) return ReadStatus::End;
    if (s[pos] == kMarkerPrefix && s[pos + 1] == code) {
      pos += 2;
      return ReadStatus::Ok;
    }
    return ReadStatus::Marker;
  }
};

std::size_t find_frame_start(std::span<const std::uint8_t> s, std::size_t from) {
  for (std::size_t i = from; i + 1 < s.size(); ++i) {
    if (s[i] == kMarkerPrefix && s[i + 1] == kFrameStart) return i;
  }
  return s.size();
}

std::uint8_t expand5(unsigned v) { return static_cast<std::uint8_t>((v << 3) | (v >> 2)); }
std::uint8_t expand6(unsigned v) { return static_cast<std::uint8_t>((v << 2) | (v >> 4)); }

}  // namespace

bool Frame::well_formed() const {
  return width > 0 && height > 0 && width <= kMaxDimension && height <= kMaxDimension &&
         (format == PixelFormat::Rgb565 || format == PixelFormat::Rgb888) &&
         pixels.size() == expected_bytes();
}

Frame make_frame(std::uint8_t camera_id, std::uint32_t counter, std::uint16_t width,
                 std::uint16_t height, PixelFormat format) {
  Frame f{camera_id, counter, width, height, format, {}};
  f.pixels.assign(f.expected_bytes(), 0);
  return f;
}

Frame to_rgb888(const Frame& frame) {
  if (frame.format == PixelFormat::Rgb888) return frame;
  if (!frame.well_formed()) throw std::invalid_argument("malformed frame");
  Frame out = make_frame(frame.camera_id, frame.frame_counter, frame.width, frame.height,
                         PixelFormat::Rgb888);
  const std::size_t n = static_cast<std::size_t>(frame.width) * frame.height;
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned v = (static_cast<unsigned>(frame.pixels[2 * i]) << 8) | frame.pixels[2 * i + 1];
    out.pixels[3 * i] = expand5((v >> 11) & 0x1F);
    out.pixels[3 * i + 1] = expand6((v >> 5) & 0x3F);
    out.pixels[3 * i + 2] = expand5(v & 0x1F);
  }
  return out;
}

Frame to_rgb565(const Frame& frame) {
  if (frame.format == PixelFormat::Rgb565) return frame;
  if (!frame.well_formed()) throw std::invalid_argument("malformed frame");
  Frame out = make_frame(frame.camera_id, frame.frame_counter, frame.width, frame.height,
                         PixelFormat::Rgb565);
  const std::size_t n = static_cast<std::size_t>(frame.width) * frame.height;
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned r = frame.pixels[3 * i] >> 3;
    const unsigned g = frame.pixels[3 * i + 1] >> 2;
    const unsigned b = frame.pixels[3 * i + 2] >> 3;
    const unsigned v = (r << 11) | (g << 5) | b;
    out.pixels[2 * i] = static_cast<std::uint8_t>(v >> 8);
    out.pixels[2 * i + 1] = static_cast<std::uint8_t>(v);
  }
  return out;
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes, std::uint32_t crc) {
  std::uint32_t c = crc ^ 0xFFFFFFFFU;
  for (const auto b : bytes) {
    c = kCrcTable[(c ^ b) & 0xFFU] ^ (c >> 8);
  }
  return c ^ 0xFFFFFFFFU;
}

void dcmi_encode_into(const Frame& frame, std::vector<std::uint8_t>& out) {
  if (!frame.well_formed()) {
    throw std::invalid_argument("frame dimensions, format and pixel count disagree");
  }
  const auto header = header_bytes(frame);
  const std::size_t row = static_cast<std::size_t>(frame.width) * bytes_per_pixel(frame.format);
  out.reserve(out.size() + frame.pixels.size() + frame.pixels.size() / 64 + 2 * frame.height + 32);

  put_marker(out, kFrameStart);
  for (const auto b : header) put_stuffed(out, b);
  for (std::size_t y = 0; y < frame.height; ++y) {
    put_marker(out, kLineStart);
    for (std::size_t x = 0; x < row; ++x) put_stuffed(out, frame.pixels[y * row + x]);
  }
  std::uint32_t crc = crc32(header);
  crc = crc32(frame.pixels, crc);
  for (int k = 0; k < 4; ++k) put_stuffed(out, static_cast<std::uint8_t>(crc >> (8 * k)));
  put_marker(out, kFrameEnd);
}

std::vector<std::uint8_t> dcmi_encode(const Frame& frame) {
  std::vector<std::uint8_t> out;
  dcmi_encode_into(frame, out);
  return out;
}

const char* sync_loss_name(SyncLossReason r) {
  switch (r) {
    case SyncLossReason::EndOfStream: return "end-of-stream";
    case SyncLossReason::Crc: return "crc";
    case SyncLossReason::Framing: return "framing";
    case SyncLossReason::Header: return "header";
  }
  return "?";
}

std::optional<DecodeEvent> DcmiDecoder::next() {
  const std::size_t start = find_frame_start(stream_, pos_);
  // A frame end before the next start means a packet lost its start marker.
  for (std::size_t i = pos_; i + 1 < start; ++i) {
    if (stream_[i] == kMarkerPrefix && stream_[i + 1] == kFrameEnd) {
      skipped_ += i + 2 - pos_;
      pos_ = i + 2;
      SyncLoss orphan;
      orphan.offset = i;
      orphan.reason = SyncLossReason::Framing;
      return orphan;
    }
  }
  skipped_ += start - std::min(start, pos_);
  if (start >= stream_.size()) {
    pos_ = stream_.size();
    return std::nullopt;
  }

  StuffedReader r{stream_, start + 2};
  SyncLoss loss;
  auto fail = [&](ReadStatus st) -> DecodeEvent {
    loss.offset = r.pos;
    if (st == ReadStatus::End) {
      loss.reason = SyncLossReason::EndOfStream;
      pos_ = stream_.size();
    } else {
      loss.reason = SyncLossReason::Framing;
      // Resume at the offending marker; it may start the next frame.
      pos_ = std::max(r.pos, start + 2);
    }
    return loss;
  };

  std::array<std::uint8_t, kHeaderBytes> header{};
  if (auto st = r.read_n(header.data(), header.size()); st != ReadStatus::Ok) return fail(st);

  Frame f;
  f.camera_id = header[0];
  f.frame_counter = static_cast<std::uint32_t>(header[1]) | (static_cast<std::uint32_t>(header[2]) << 8) |
                    (static_cast<std::uint32_t>(header[3]) << 16) |
                    (static_cast<std::uint32_t>(header[4]) << 24);
  f.width = static_cast<std::uint16_t>(header[5] | (header[6] << 8));
  f.height = static_cast<std::uint16_t>(header[7] | (header[8] << 8));
  f.format = static_cast<PixelFormat>(header[9]);
  if (f.width == 0 || f.height == 0 || f.width > kMaxDimension || f.height > kMaxDimension ||
      (f.format != PixelFormat::Rgb565 && f.format != PixelFormat::Rgb888)) {
    loss.offset = start;
    loss.reason = SyncLossReason::Header;
    pos_ = start + 2;
    return loss;
  }
  loss.camera_id = f.camera_id;
  loss.frame_counter = f.frame_counter;

  const std::size_t row = static_cast<std::size_t>(f.width) * bytes_per_pixel(f.format);
  f.pixels.resize(row * f.height);
  for (std::size_t y = 0; y < f.height; ++y) {
    if (auto st = r.expect_marker(kLineStart); st != ReadStatus::Ok) return fail(st);
    if (auto st = r.read_n(f.pixels.data() + y * row, row); st != ReadStatus::Ok) return fail(st);
  }
  std::array<std::uint8_t, 4> crc_bytes{};
  if (auto st = r.read_n(crc_bytes.data(), crc_bytes.size()); st != ReadStatus::Ok) return fail(st);
  if (auto st = r.expect_marker(kFrameEnd); st != ReadStatus::Ok) return fail(st);

  const std::uint32_t stored = crc_bytes[0] | (crc_bytes[1] << 8) | (crc_bytes[2] << 16) |
                               (static_cast<std::uint32_t>(crc_bytes[3]) << 24);
  const std::uint32_t actual = crc32(f.pixels, crc32(header));
  pos_ = r.pos;
  if (stored != actual) {
    loss.offset = start;
    loss.reason = SyncLossReason::Crc;
    return loss;
  }
  return f;
}

DecodeSummary dcmi_decode(std::span<const std::uint8_t> stream) {
  DecodeSummary summary;
  DcmiDecoder decoder(stream);
  while (auto ev = decoder.next()) {
    if (std::holds_alternative<Frame>(*ev)) {
      ++summary.frames;
    } else {
      ++summary.sync_losses;
    }
    summary.events.push_back(std::move(*ev));
  }
  summary.bytes_skipped = decoder.bytes_skipped();
  return summary;
}

std::vector<std::pair<std::size_t, std::size_t>> packet_bounds(std::span<const std::uint8_t> stream) {
  std::vector<std::pair<std::size_t, std::size_t>> bounds;
  std::size_t at = find_frame_start(stream, 0);
  while (at < stream.size()) {
    const std::size_t next = find_frame_start(stream, at + 2);
    bounds.emplace_back(at, next);
    at = next;
  }
  return bounds;
}

Frame downsample_2x2(const Frame& frame) {
  if (!frame.well_formed()) throw std::invalid_argument("malformed frame");
  if (frame.width % 2 != 0 || frame.height % 2 != 0) {
    throw std::invalid_argument("downsampling needs even frame dimensions");
  }
  const Frame src = to_rgb888(frame);
  Frame out = make_frame(frame.camera_id, frame.frame_counter, frame.width / 2, frame.height / 2,
                         PixelFormat::Rgb888);
  const std::size_t sw = src.width;
  for (std::size_t y = 0; y < out.height; ++y) {
    for (std::size_t x = 0; x < out.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const auto at = [&](std::size_t yy, std::size_t xx) -> unsigned {
          return src.pixels[(yy * sw + xx) * 3 + c];
        };
        const unsigned sum = at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) +
                             at(2 * y + 1, 2 * x + 1);
        out.pixels[(y * out.width + x) * 3 + c] = static_cast<std::uint8_t>((sum + 2) / 4);
      }
    }
  }
  return out;
}

std::vector<Arrival> camera_schedule(std::size_t periods, std::uint8_t cameras, double fps,
                                     bool stagger) {
  if (!(fps > 0.0) || cameras == 0) throw std::invalid_argument("invalid camera schedule");
  const auto period = static_cast<std::int64_t>(std::llround(1e9 / fps));
  std::vector<Arrival> out;
  out.reserve(periods * cameras);
  for (std::size_t i = 0; i < periods; ++i) {
    for (std::uint8_t c = 0; c < cameras; ++c) {
      const std::int64_t offset = stagger ? period * c / cameras : 0;
      out.push_back({static_cast<std::int64_t>(i) * period + offset, c});
    }
  }
  return out;
}

MuxResult mux_serialize(std::span<const Arrival> schedule, const FrameSource& source,
                        MuxConfig config, std::int64_t duration_ns) {
  if (!(config.link_bits_per_second > 0.0)) throw std::invalid_argument("link rate must be positive");
  std::vector<Arrival> arrivals(schedule.begin(), schedule.end());
  std::stable_sort(arrivals.begin(), arrivals.end(), [](const Arrival& a, const Arrival& b) {
    return a.time_ns != b.time_ns ? a.time_ns < b.time_ns : a.camera_id < b.camera_id;
  });

  struct Pending {
    Frame frame;
    std::size_t bytes;
    std::int64_t admitted_ns;
  };
  struct InFlight {
    std::size_t bytes;
    std::int64_t end_ns;
  };

  MuxResult result;
  auto& budget = config.budget;
  budget.occupancy = 0;
  budget.drop_count = 0;
  auto& stats = result.stats;
  std::deque<Pending> queue;
  std::optional<InFlight> in_flight;
  std::int64_t link_free_ns = std::numeric_limits<std::int64_t>::min();
  std::vector<std::uint32_t> counters(256, 0);

  const auto transmit_ns = [&](std::size_t bytes) {
    const double ns = static_cast<double>(bytes) * 8.0 * 1e9 / config.link_bits_per_second;
    return static_cast<std::int64_t>(std::ceil(ns - 1e-6));
  };

  // Runs the link until time t: completes transmissions ending at or before
  // t (freeing their buffer space) and starts queued frames on an idle link.
  const auto advance = [&](std::int64_t t) {
    for (;;) {
      if (in_flight) {
        if (in_flight->end_ns > t) return;
        budget.occupancy -= in_flight->bytes;
        link_free_ns = in_flight->end_ns;
        in_flight.reset();
        continue;
      }
      if (queue.empty()) return;
      auto next = std::move(queue.front());
      queue.pop_front();
      const std::int64_t start = std::max(link_free_ns, next.admitted_ns);
      const std::int64_t end = start + transmit_ns(next.bytes);
      const std::size_t before = result.stream.size();
      dcmi_encode_into(next.frame, result.stream);
      stats.wire_bytes += result.stream.size() - before;
      stats.payload_bytes += next.bytes;
      ++stats.frames_emitted;
      result.emitted.push_back({next.frame.camera_id, next.frame.frame_counter, start, end, next.bytes});
      in_flight = InFlight{next.bytes, end};
    }
  };

  std::size_t i = 0;
  while (i < arrivals.size()) {
    const std::int64_t t = arrivals[i].time_ns;
    advance(t);
    std::size_t drops_now = 0;
    for (; i < arrivals.size() && arrivals[i].time_ns == t; ++i) {
      const auto cam = arrivals[i].camera_id;
      Frame frame = source(cam, counters[cam]++);
      frame.camera_id = cam;
      const std::size_t bytes = frame.pixels.size();
      ++stats.frames_in;
      if (!budget.fits(bytes) && config.policy == OverflowPolicy::DropOldest) {
        while (!budget.fits(bytes) && !queue.empty()) {
          budget.occupancy -= queue.front().bytes;
          queue.pop_front();
          ++budget.drop_count;
          ++drops_now;
        }
      }
      if (!budget.fits(bytes)) {
        ++budget.drop_count;
        ++drops_now;
        continue;
      }
      budget.occupancy += bytes;
      stats.max_occupancy = std::max(stats.max_occupancy, budget.occupancy);
      queue.push_back({std::move(frame), bytes, t});
    }
    stats.drops_per_arrival_tick.push_back(drops_now);
    advance(t);
  }
  advance(std::numeric_limits<std::int64_t>::max());

  stats.drops = budget.drop_count;
  const std::int64_t last_end = result.emitted.empty() ? 0 : result.emitted.back().end_ns;
  stats.duration_ns = std::max(duration_ns, last_end);
  if (stats.duration_ns > 0) {
    // Exact integer numerator, so integral rates come out exact.
    const long double bits_ns = static_cast<long double>(stats.payload_bytes) * 8.0L * 1e9L;
    stats.payload_bit_rate = static_cast<double>(bits_ns / static_cast<long double>(stats.duration_ns));
  }
  result.budget = budget;
  return result;
}

std::vector<std::uint8_t> inject_fault(std::span<const std::uint8_t> stream,
                                       const FaultPolicy& policy, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::uint8_t> out;

  if (const auto* ber = std::get_if<BitErrorRate>(&policy)) {
    out.assign(stream.begin(), stream.end());
    if (!(ber->rate > 0.0)) return out;
    std::bernoulli_distribution flip(std::min(1.0, ber->rate));
    for (auto& b : out) {
      for (int k = 0; k < 8; ++k) {
        if (flip(rng)) b ^= static_cast<std::uint8_t>(1U << k);
      }
    }
    return out;
  }

  const auto bounds = packet_bounds(stream);
  const std::size_t lead = bounds.empty() ? stream.size() : bounds.front().first;
  out.insert(out.end(), stream.begin(), stream.begin() + static_cast<std::ptrdiff_t>(lead));

  if (const auto* partial = std::get_if<PartialFrame>(&policy)) {
    for (std::size_t k = 0; k < bounds.size(); ++k) {
      auto [b, e] = bounds[k];
      if (k == partial->packet_index) {
        const std::size_t len = e - b;
        const auto keep = static_cast<std::size_t>(static_cast<double>(len) * partial->keep_fraction);
        e = b + std::clamp<std::size_t>(keep, std::min<std::size_t>(3, len), len > 1 ? len - 1 : len);
      }
      out.insert(out.end(), stream.begin() + static_cast<std::ptrdiff_t>(b),
                 stream.begin() + static_cast<std::ptrdiff_t>(e));
    }
    return out;
  }

  const auto& dead = std::get<DeadAfterCycles>(policy);
  std::bernoulli_distribution intermittent(std::clamp(dead.intermittent_rate, 0.0, 1.0));
  for (const auto& [b, e] : bounds) {
    const auto packet = stream.subspan(b, e - b);
    StuffedReader r{packet, 2};
    std::array<std::uint8_t, kHeaderBytes> header{};
    const bool parsed = r.read_n(header.data(), header.size()) == ReadStatus::Ok;
    const std::uint32_t cycle = parsed ? (static_cast<std::uint32_t>(header[1]) |
                                          (static_cast<std::uint32_t>(header[2]) << 8) |
                                          (static_cast<std::uint32_t>(header[3]) << 16) |
                                          (static_cast<std::uint32_t>(header[4]) << 24))
                                       : 0;
    if (parsed && cycle >= dead.signal_loss) continue;
    std::vector<std::uint8_t> copy(packet.begin(), packet.end());
    const bool corrupt = parsed && cycle >= dead.first_corrupt &&
                         (cycle == dead.first_corrupt || intermittent(rng));
    if (corrupt && copy.size() > r.pos + 4) {
      // Flip one bit of a plain data byte after the header.
      std::uniform_int_distribution<std::size_t> where(r.pos, copy.size() - 3);
      for (int attempt = 0; attempt < 1000; ++attempt) {
        const std::size_t p = where(rng);
        if (copy[p] == kMarkerPrefix || copy[p - 1] == kMarkerPrefix) continue;
        copy[p] ^= static_cast<std::uint8_t>(1U << std::uniform_int_distribution<int>(0, 7)(rng));
        break;
      }
    }
    out.insert(out.end(), copy.begin(), copy.end());
  }
  return out;
}

}  // namespace fvhand::datapath
