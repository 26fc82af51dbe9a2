#include "fvhand/datapath.hpp"

#include "doctest.h"

#include <zlib.h>

#include <random>
#include <stdexcept>

using namespace fvhand::datapath;

namespace {

Frame random_frame(std::mt19937_64& rng, PixelFormat fmt, std::uint16_t w, std::uint16_t h) {
  std::uniform_int_distribution<int> cam(0, 4);
  auto f = make_frame(static_cast<std::uint8_t>(cam(rng)), static_cast<std::uint32_t>(rng()), w, h, fmt);
  for (auto& b : f.pixels) b = static_cast<std::uint8_t>(rng());
  return f;
}

}  // namespace

TEST_CASE("CRC-32 agrees with zlib") {
  std::mt19937_64 rng(1);
  for (std::size_t n : {0u, 1u, 7u, 64u, 1000u, 50688u}) {
    std::vector<std::uint8_t> v(n);
    for (auto& b : v) b = static_cast<std::uint8_t>(rng());
    const auto z = ::crc32(0L, v.data(), static_cast<uInt>(v.size()));
    CHECK(crc32(v) == z);
    if (n > 2) {
      const auto half = std::span(v).first(n / 2);
      CHECK(crc32(std::span(v).subspan(n / 2), crc32(half)) == z);
    }
  }
  const std::string check = "123456789";
  CHECK(crc32({reinterpret_cast<const std::uint8_t*>(check.data()), check.size()}) == 0xCBF43926u);
}

TEST_CASE("RGB565 packing follows the bit layout") {
  auto f = make_frame(0, 0, 2, 1, PixelFormat::Rgb888);
  f.pixels = {0xFF, 0x80, 0x07, 0x12, 0x34, 0x56};
  const auto p = to_rgb565(f);
  for (int i = 0; i < 2; ++i) {
    const unsigned r = f.pixels[3 * i], g = f.pixels[3 * i + 1], b = f.pixels[3 * i + 2];
    const unsigned v = ((r >> 3) << 11) | ((g >> 2) << 5) | (b >> 3);
    CHECK(p.pixels[2 * i] == (v >> 8));
    CHECK(p.pixels[2 * i + 1] == (v & 0xFF));
  }
  // Expansion then packing is lossless on RGB565 values.
  std::mt19937_64 rng(2);
  const auto q = random_frame(rng, PixelFormat::Rgb565, 16, 8);
  CHECK(to_rgb565(to_rgb888(q)) == q);
  const auto full = to_rgb888(to_rgb565(make_frame(0, 0, 1, 1, PixelFormat::Rgb888)));
  CHECK(full.pixels == std::vector<std::uint8_t>{0, 0, 0});
}

TEST_CASE("2x2 downsampling averages with rounding") {
  auto f = make_frame(3, 9, 4, 2, PixelFormat::Rgb888);
  for (std::size_t i = 0; i < f.pixels.size(); ++i) f.pixels[i] = static_cast<std::uint8_t>(i * 7);
  const auto d = downsample_2x2(f);
  CHECK(d.width == 2);
  CHECK(d.height == 1);
  CHECK(d.camera_id == 3);
  for (int x = 0; x < 2; ++x) {
    for (int c = 0; c < 3; ++c) {
      auto px = [&](int yy, int xx) { return static_cast<unsigned>(f.pixels[(yy * 4 + xx) * 3 + c]); };
      const unsigned sum = px(0, 2 * x) + px(0, 2 * x + 1) + px(1, 2 * x) + px(1, 2 * x + 1);
      CHECK(d.pixels[x * 3 + c] == (sum + 2) / 4);
    }
  }
  CHECK_THROWS_AS(downsample_2x2(make_frame(0, 0, 3, 2, PixelFormat::Rgb888)), std::invalid_argument);
}

TEST_CASE("encode and decode round trip") {
  std::mt19937_64 rng(3);
  std::vector<std::uint8_t> stream;
  std::vector<Frame> sent;
  for (int i = 0; i < 200; ++i) {
    const auto fmt = i % 2 ? PixelFormat::Rgb565 : PixelFormat::Rgb888;
    std::uniform_int_distribution<int> dim(1, 40);
    sent.push_back(random_frame(rng, fmt, static_cast<std::uint16_t>(dim(rng)), static_cast<std::uint16_t>(dim(rng))));
    dcmi_encode_into(sent.back(), stream);
  }
  const auto s = dcmi_decode(stream);
  CHECK(s.sync_losses == 0);
  REQUIRE(s.frames == sent.size());
  for (std::size_t i = 0; i < sent.size(); ++i) CHECK(std::get<Frame>(s.events[i]) == sent[i]);
  CHECK(packet_bounds(stream).size() == sent.size());
}

TEST_CASE("marker bytes in data are stuffed") {
  auto f = make_frame(1, 0xFFFFFFFFu, 8, 4, PixelFormat::Rgb565);
  std::fill(f.pixels.begin(), f.pixels.end(), 0xFF);
  const auto bytes = dcmi_encode(f);
  CHECK(packet_bounds(bytes).size() == 1);
  const auto s = dcmi_decode(bytes);
  REQUIRE(s.frames == 1);
  CHECK(std::get<Frame>(s.events[0]) == f);
}

TEST_CASE("every single bit flip is detected") {
  std::mt19937_64 rng(4);
  const auto f = random_frame(rng, PixelFormat::Rgb565, 12, 6);
  const auto clean = dcmi_encode(f);
  for (std::size_t bit = 0; bit < clean.size() * 8; ++bit) {
    auto bad = clean;
    bad[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
    const auto s = dcmi_decode(bad);
    bool intact = false;
    for (const auto& ev : s.events) {
      if (const auto* g = std::get_if<Frame>(&ev)) intact |= *g == f;
    }
    CHECK_FALSE(intact);
    CHECK(s.sync_losses >= 1);
  }
}

TEST_CASE("decoder survives garbage and resynchronizes") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::uint8_t> junk(rng() % 4000);
    for (auto& b : junk) b = static_cast<std::uint8_t>(rng() % 4 == 0 ? 0xFF : rng());
    const auto f = random_frame(rng, PixelFormat::Rgb888, 5, 5);
    auto stream = junk;
    dcmi_encode_into(f, stream);
    const auto s = dcmi_decode(stream);
    REQUIRE_FALSE(s.events.empty());
    CHECK(std::get<Frame>(s.events.back()) == f);
  }
}

TEST_CASE("header fields out of range are rejected") {
  auto f = make_frame(4, 1, 2, 2, PixelFormat::Rgb888);
  CHECK(f.well_formed());
  f.pixels.pop_back();
  CHECK_FALSE(f.well_formed());
  CHECK_THROWS_AS(dcmi_encode(f), std::invalid_argument);
}

TEST_CASE("five QCIF feeds at 20 fps fit the link and the buffer") {
  const auto schedule = camera_schedule(40);
  const FrameSource src = [](std::uint8_t cam, std::uint32_t n) {
    return make_frame(cam, n, kQcifWidth, kQcifHeight, PixelFormat::Rgb565);
  };
  const auto r = mux_serialize(schedule, src, {}, 2'000'000'000);
  CHECK(r.stats.drops == 0);
  CHECK(r.stats.frames_emitted == 200);
  CHECK(r.stats.payload_bit_rate == doctest::Approx(40550400.0));
  CHECK(r.stats.payload_bit_rate < 100e6);
  CHECK(r.stats.max_occupancy <= kDefaultBufferBytes);
  CHECK(dcmi_decode(r.stream).frames == 200);
}

TEST_CASE("small buffer drops per policy and never overflows") {
  const auto schedule = camera_schedule(10);
  const FrameSource src = [](std::uint8_t cam, std::uint32_t n) {
    return make_frame(cam, n, kQcifWidth, kQcifHeight, PixelFormat::Rgb565);
  };
  for (auto policy : {OverflowPolicy::DropNewest, OverflowPolicy::DropOldest}) {
    MuxConfig c;
    c.budget.capacity = 120000;
    c.policy = policy;
    c.link_bits_per_second = 10e6;
    const auto r = mux_serialize(schedule, src, c, 500'000'000);
    CHECK(r.stats.drops > 0);
    CHECK(r.stats.max_occupancy <= c.budget.capacity);
    CHECK(r.stats.frames_emitted + r.stats.drops == r.stats.frames_in);
  }
}

TEST_CASE("dead-after fault signature") {
  std::vector<std::uint8_t> stream;
  for (std::uint32_t n = 0; n < 40; ++n) dcmi_encode_into(make_frame(0, n, 8, 8, PixelFormat::Rgb565), stream);
  const auto faulty = inject_fault(stream, DeadAfterCycles{20, 30, 0.5}, 1);
  const auto s = dcmi_decode(faulty);
  std::optional<std::uint32_t> first_loss;
  std::uint32_t max_counter = 0;
  for (const auto& ev : s.events) {
    if (const auto* f = std::get_if<Frame>(&ev)) {
      max_counter = std::max(max_counter, f->frame_counter);
    } else if (!first_loss) {
      first_loss = std::get<SyncLoss>(ev).frame_counter;
    }
  }
  CHECK(first_loss == 20u);
  CHECK(max_counter < 30);
  CHECK(s.frames >= 20);
}

TEST_CASE("fault injection is seeded") {
  std::vector<std::uint8_t> stream;
  for (std::uint32_t n = 0; n < 10; ++n) dcmi_encode_into(make_frame(1, n, 16, 16, PixelFormat::Rgb888), stream);
  const auto a = inject_fault(stream, BitErrorRate{1e-3}, 7);
  CHECK(a == inject_fault(stream, BitErrorRate{1e-3}, 7));
  CHECK(inject_fault(stream, BitErrorRate{0.0}, 7) == stream);
  const auto cut = inject_fault(stream, PartialFrame{3, 0.5}, 1);
  CHECK(cut.size() < stream.size());
  CHECK(dcmi_decode(cut).frames == 9);
}
