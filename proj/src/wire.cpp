#include "fvhand/wire.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cctype>
#include <stdexcept>

namespace fvhand::wire {

namespace {

class Out {
 public:
  void u8(std::uint8_t v) { b.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void i16(std::int16_t v) { u16(static_cast<std::uint16_t>(v)); }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::span<const std::uint8_t> s) { b.insert(b.end(), s.begin(), s.end()); }

  std::vector<std::uint8_t> b;

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
};

struct Truncated {};

class In {
 public:
  explicit In(std::span<const std::uint8_t> s) : s_(s) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  std::int16_t i16() { return static_cast<std::int16_t>(u16()); }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::vector<std::uint8_t> bytes(std::size_t n) {
    need(n);
    std::vector<std::uint8_t> v(s_.begin() + static_cast<std::ptrdiff_t>(p_),
                                s_.begin() + static_cast<std::ptrdiff_t>(p_ + n));
    p_ += n;
    return v;
  }
  bool done() const { return p_ == s_.size(); }

 private:
  void need(std::size_t n) const {
    if (s_.size() - p_ < n) throw Truncated{};
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(s_[p_ + i]) << (8 * i);
    p_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> s_;
  std::size_t p_ = 0;
};

void put(Out& o, const Hello& m) { o.u16(m.version); }
void put(Out& o, const Welcome& m) {
  o.u16(m.version);
  o.u16(m.image_width);
  o.u16(m.image_height);
  o.u8(m.cameras);
  o.f32(m.state_hz);
  o.f32(m.frame_hz);
  o.f32(m.speed);
}
void put(Out& o, const ButtonCommand& m) {
  o.u8(m.button);
  o.u8(m.action);
}
void put(Out& o, const ButtonAck& m) {
  o.u8(m.button);
  o.u8(m.drive_state);
  o.u64(m.tick);
}
void put(Out& o, const StatePacket& m) {
  o.u64(m.tick);
  for (const auto& t : m.motors) {
    o.i32(t.encoder_count);
    o.i16(t.pwm_duty);
    o.f32(t.velocity);
    o.u8(t.drive_state);
    o.u8(t.faulted);
  }
  for (const auto& f : m.fingers) {
    o.f32(f.mcp);
    o.f32(f.pip);
  }
  o.f32(m.progress);
}
void put(Out& o, const FramePacket& m) {
  const std::size_t cams = hand::kFingerCount;
  if (m.images.size() != cams * m.pixels() * 3 || m.prediction.size() != cams * m.packed_mask_bytes() ||
      ((m.flags & FramePacket::kHasTruth) ? m.truth.size() != cams * m.packed_mask_bytes()
                                          : !m.truth.empty())) {
    throw std::invalid_argument("frame packet buffers do not match its geometry");
  }
  o.u64(m.tick);
  o.u32(m.frame_counter);
  o.u16(m.width);
  o.u16(m.height);
  o.u8(static_cast<std::uint8_t>(cams));
  o.u8(m.flags);
  for (auto s : m.status) o.u8(static_cast<std::uint8_t>(s));
  o.bytes(m.images);
  o.bytes(m.prediction);
  o.bytes(m.truth);
  for (float a : m.accuracy) o.f32(a);
  o.u64(m.total_macs);
  o.u32(m.weight_bytes);
  o.u32(m.peak_activation_bytes);
}
void put(Out& o, const InjectFault& m) { o.u8(m.camera); }
void put(Out& o, const FaultAck& m) { o.u8(m.camera); }
void put(Out& o, const ErrorMessage& m) {
  const std::size_t n = std::min<std::size_t>(m.text.size(), 0xFFFF);
  o.u8(static_cast<std::uint8_t>(m.code));
  o.u16(static_cast<std::uint16_t>(n));
  o.bytes({reinterpret_cast<const std::uint8_t*>(m.text.data()), n});
}

Message read_body(Type t, In& in) {
  switch (t) {
    case Type::Hello: return Hello{in.u16()};
    case Type::Welcome: {
      Welcome w;
      w.version = in.u16();
      w.image_width = in.u16();
      w.image_height = in.u16();
      w.cameras = in.u8();
      w.state_hz = in.f32();
      w.frame_hz = in.f32();
      w.speed = in.f32();
      return w;
    }
    case Type::ButtonCommand: {
      ButtonCommand b;
      b.button = in.u8();
      b.action = in.u8();
      return b;
    }
    case Type::ButtonAck: {
      ButtonAck a;
      a.button = in.u8();
      a.drive_state = in.u8();
      a.tick = in.u64();
      return a;
    }
    case Type::StatePacket: {
      StatePacket s;
      s.tick = in.u64();
      for (auto& m : s.motors) {
        m.encoder_count = in.i32();
        m.pwm_duty = in.i16();
        m.velocity = in.f32();
        m.drive_state = in.u8();
        m.faulted = in.u8();
      }
      for (auto& f : s.fingers) {
        f.mcp = in.f32();
        f.pip = in.f32();
      }
      s.progress = in.f32();
      return s;
    }
    case Type::FramePacket: {
      FramePacket f;
      f.tick = in.u64();
      f.frame_counter = in.u32();
      f.width = in.u16();
      f.height = in.u16();
      if (in.u8() != hand::kFingerCount) throw std::invalid_argument("camera count must be 5");
      f.flags = in.u8();
      for (auto& s : f.status) {
        const auto v = in.u8();
        if (v > 2) throw std::invalid_argument("bad tile status");
        s = static_cast<TileStatus>(v);
      }
      const std::size_t cams = hand::kFingerCount;
      f.images = in.bytes(cams * f.pixels() * 3);
      f.prediction = in.bytes(cams * f.packed_mask_bytes());
      if (f.flags & FramePacket::kHasTruth) f.truth = in.bytes(cams * f.packed_mask_bytes());
      for (float& a : f.accuracy) a = in.f32();
      f.total_macs = in.u64();
      f.weight_bytes = in.u32();
      f.peak_activation_bytes = in.u32();
      return f;
    }
    case Type::InjectFault: return InjectFault{in.u8()};
    case Type::FaultAck: return FaultAck{in.u8()};
    case Type::Error: {
      ErrorMessage e;
      e.code = static_cast<ErrorCode>(in.u8());
      const auto n = in.u16();
      const auto text = in.bytes(n);
      e.text.assign(text.begin(), text.end());
      return e;
    }
  }
  throw std::logic_error("unreachable");
}

bool known_type(std::uint8_t t) {
  switch (static_cast<Type>(t)) {
    case Type::Hello:
    case Type::ButtonCommand:
    case Type::InjectFault:
    case Type::Welcome:
    case Type::ButtonAck:
    case Type::StatePacket:
    case Type::FramePacket:
    case Type::FaultAck:
    case Type::Error:
      return true;
  }
  return false;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace

Type type_of(const Message& m) {
  static constexpr Type kTypes[] = {Type::Hello,       Type::Welcome,     Type::ButtonCommand,
                                    Type::ButtonAck,   Type::StatePacket, Type::FramePacket,
                                    Type::InjectFault, Type::FaultAck,    Type::Error};
  return kTypes[m.index()];
}

std::vector<std::uint8_t> encode(const Message& m) {
  Out o;
  o.u32(0);  // patched below
  o.u8(static_cast<std::uint8_t>(type_of(m)));
  std::visit([&](const auto& v) { put(o, v); }, m);
  const auto len = static_cast<std::uint32_t>(o.b.size() - 4);
  for (int i = 0; i < 4; ++i) o.b[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(len >> (8 * i));
  return std::move(o.b);
}

std::variant<Message, DecodeError> decode_body(std::span<const std::uint8_t> body) {
  if (body.empty()) return DecodeError{ErrorCode::Malformed, "empty message"};
  if (!known_type(body[0])) {
    return DecodeError{ErrorCode::UnknownType, "unknown message type " + std::to_string(body[0])};
  }
  In in(body.subspan(1));
  try {
    Message m = read_body(static_cast<Type>(body[0]), in);
    if (!in.done()) return DecodeError{ErrorCode::Malformed, "trailing bytes in message"};
    return m;
  } catch (const Truncated&) {
    return DecodeError{ErrorCode::Malformed, "truncated message"};
  } catch (const std::invalid_argument& e) {
    return DecodeError{ErrorCode::Malformed, e.what()};
  }
}

void StreamReader::feed(std::span<const std::uint8_t> bytes) {
  if (start_ > 0 && start_ == buffer_.size()) {
    buffer_.clear();
    start_ = 0;
  }
  buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
}

std::optional<std::variant<std::vector<std::uint8_t>, DecodeError>> StreamReader::next() {
  if (broken_) return std::nullopt;
  const std::size_t avail = buffer_.size() - start_;
  if (avail < 4) return std::nullopt;
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(buffer_[start_ + i]) << (8 * i);
  if (len == 0 || len > kMaxMessageBytes) {
    broken_ = true;
    return DecodeError{ErrorCode::TooLarge, "declared message length " + std::to_string(len) +
                                                " is outside 1.." + std::to_string(kMaxMessageBytes)};
  }
  if (avail < 4 + static_cast<std::size_t>(len)) return std::nullopt;
  std::vector<std::uint8_t> body(buffer_.begin() + static_cast<std::ptrdiff_t>(start_ + 4),
                                 buffer_.begin() + static_cast<std::ptrdiff_t>(start_ + 4 + len));
  start_ += 4 + len;
  if (start_ > (1u << 16) && start_ * 2 > buffer_.size()) {
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(start_));
    start_ = 0;
  }
  return body;
}

std::vector<std::uint8_t> pack_mask(std::span<const std::uint8_t> mask) {
  std::vector<std::uint8_t> out((mask.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) out[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  }
  return out;
}

std::vector<std::uint8_t> unpack_mask(std::span<const std::uint8_t> packed, std::size_t pixels) {
  if (packed.size() != (pixels + 7) / 8) throw std::invalid_argument("packed mask size mismatch");
  std::vector<std::uint8_t> out(pixels);
  for (std::size_t i = 0; i < pixels; ++i) out[i] = (packed[i / 8] >> (i % 8)) & 1u;
  return out;
}

namespace ws {

std::string accept_key(std::string_view client_key) {
  static constexpr std::string_view kGuid = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11";
  std::string input(client_key);
  input += kGuid;
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(input.data(), input.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
    throw std::runtime_error("SHA-1 failed");
  }
  unsigned char b64[64];
  const int n = EVP_EncodeBlock(b64, digest, static_cast<int>(len));
  return std::string(reinterpret_cast<const char*>(b64), static_cast<std::size_t>(n));
}

std::vector<std::uint8_t> encode_frame(Opcode op, std::span<const std::uint8_t> payload,
                                       std::optional<std::uint32_t> mask_key) {
  std::vector<std::uint8_t> out;
  out.push_back(static_cast<std::uint8_t>(0x80 | static_cast<std::uint8_t>(op)));
  const std::uint8_t mask_bit = mask_key ? 0x80 : 0x00;
  const std::size_t n = payload.size();
  if (n < 126) {
    out.push_back(static_cast<std::uint8_t>(mask_bit | n));
  } else if (n <= 0xFFFF) {
    out.push_back(mask_bit | 126);
    out.push_back(static_cast<std::uint8_t>(n >> 8));
    out.push_back(static_cast<std::uint8_t>(n));
  } else {
    out.push_back(mask_bit | 127);
    for (int i = 7; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(n) >> (8 * i)));
  }
  if (!mask_key) {
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
  }
  std::uint8_t key[4];
  for (int i = 0; i < 4; ++i) key[i] = static_cast<std::uint8_t>(*mask_key >> (8 * (3 - i)));
  out.insert(out.end(), key, key + 4);
  for (std::size_t i = 0; i < n; ++i) out.push_back(payload[i] ^ key[i % 4]);
  return out;
}

void FrameParser::feed(std::span<const std::uint8_t> bytes) {
  buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
}

std::optional<Frame> FrameParser::next() {
  if (buffer_.size() < 2) return std::nullopt;
  const std::uint8_t b0 = buffer_[0], b1 = buffer_[1];
  if (b0 & 0x70) throw std::runtime_error("websocket: reserved bits set");
  Frame f;
  f.fin = (b0 & 0x80) != 0;
  const std::uint8_t op = b0 & 0x0F;
  if (op != 0x0 && op != 0x1 && op != 0x2 && op != 0x8 && op != 0x9 && op != 0xA) {
    throw std::runtime_error("websocket: unknown opcode");
  }
  f.opcode = static_cast<Opcode>(op);
  const bool masked = (b1 & 0x80) != 0;
  std::uint64_t len = b1 & 0x7F;
  std::size_t pos = 2;
  if (len == 126) {
    if (buffer_.size() < 4) return std::nullopt;
    len = (static_cast<std::uint64_t>(buffer_[2]) << 8) | buffer_[3];
    pos = 4;
  } else if (len == 127) {
    if (buffer_.size() < 10) return std::nullopt;
    len = 0;
    for (int i = 0; i < 8; ++i) len = (len << 8) | buffer_[2 + i];
    pos = 10;
  }
  if (op >= 0x8 && (len > 125 || !f.fin)) throw std::runtime_error("websocket: bad control frame");
  if (len > max_) throw std::runtime_error("websocket: frame too large");
  std::uint8_t key[4] = {0, 0, 0, 0};
  if (masked) {
    if (buffer_.size() < pos + 4) return std::nullopt;
    std::copy_n(buffer_.begin() + static_cast<std::ptrdiff_t>(pos), 4, key);
    pos += 4;
  }
  if (buffer_.size() < pos + len) return std::nullopt;
  f.payload.assign(buffer_.begin() + static_cast<std::ptrdiff_t>(pos),
                   buffer_.begin() + static_cast<std::ptrdiff_t>(pos + len));
  if (masked) {
    for (std::size_t i = 0; i < f.payload.size(); ++i) f.payload[i] ^= key[i % 4];
  }
  buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(pos + len));
  return f;
}

std::optional<Handshake> parse_handshake(std::string_view request, std::size_t* consumed) {
  const auto end = request.find("\r\n\r\n");
  if (end == std::string_view::npos) {
    if (request.size() > 16384) throw std::runtime_error("http: header block too large");
    return std::nullopt;
  }
  if (consumed) *consumed = end + 4;
  std::string_view head = request.substr(0, end);
  const auto line_end = head.find("\r\n");
  const std::string_view line = head.substr(0, line_end);
  if (line.substr(0, 4) != "GET ") throw std::runtime_error("http: only GET is supported");
  const auto sp = line.find(' ', 4);
  if (sp == std::string_view::npos) throw std::runtime_error("http: malformed request line");
  Handshake h;
  h.path = std::string(line.substr(4, sp - 4));
  bool upgrade_header = false, connection_upgrade = false;
  std::size_t p = line_end == std::string_view::npos ? head.size() : line_end + 2;
  while (p < head.size()) {
    auto e = head.find("\r\n", p);
    if (e == std::string_view::npos) e = head.size();
    const std::string_view hl = head.substr(p, e - p);
    p = e + 2;
    const auto colon = hl.find(':');
    if (colon == std::string_view::npos) continue;
    const std::string name = lower(trim(hl.substr(0, colon)));
    const std::string_view value = trim(hl.substr(colon + 1));
    if (name == "upgrade") upgrade_header = lower(value) == "websocket";
    if (name == "connection") connection_upgrade = lower(value).find("upgrade") != std::string::npos;
    if (name == "sec-websocket-key") h.key = std::string(value);
  }
  h.upgrade = upgrade_header && connection_upgrade && !h.key.empty();
  return h;
}

std::string handshake_response(const Handshake& h) {
  if (!h.upgrade) {
    return "HTTP/1.1 426 Upgrade Required\r\nUpgrade: websocket\r\nConnection: close\r\n"
           "Content-Length: 0\r\n\r\n";
  }
  return "HTTP/1.1 101 Switching Protocols\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n"
         "Sec-WebSocket-Accept: " +
         accept_key(h.key) + "\r\n\r\n";
}

}  // namespace ws

}  // namespace fvhand::wire
