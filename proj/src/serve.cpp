#include "fvhand/serve.hpp"

#include "fvhand/datapath.hpp"
#include "fvhand/grasp_eval.hpp"
#include "fvhand/wire.hpp"

#include <fmt/format.h>

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <limits>
#include <mutex>
#include <thread>
#include <vector>

namespace fvhand::serve {

namespace {

using Clock = std::chrono::steady_clock;
using hand::Finger;

constexpr auto kRawDetectTimeout = std::chrono::milliseconds(250);
constexpr std::string_view kGet = "GET ";

struct Client {
  enum class Mode { Unknown, Raw, WebSocketHandshake, WebSocket };

  explicit Client(int f) : fd(f), connected_at(Clock::now()) {}
  ~Client() {
    if (fd >= 0) ::close(fd);
  }

  int fd;
  Clock::time_point connected_at;
  Mode mode = Mode::Unknown;
  std::vector<std::uint8_t> pending;
  std::string http;
  wire::StreamReader raw;
  wire::ws::FrameParser frames;
  std::mutex write_mutex;
  std::atomic<bool> open{true};
  std::atomic<bool> streaming{false};

  // Only the receiver changes the mode; senders read it under the lock.
  void set_mode(Mode m) {
    std::lock_guard lock(write_mutex);
    mode = m;
  }

  bool send_bytes(std::span<const std::uint8_t> bytes) {
    std::lock_guard lock(write_mutex);
    return send_locked(bytes);
  }

  bool send(const wire::Message& m) {
    const auto body = wire::encode(m);
    std::lock_guard lock(write_mutex);
    if (mode == Mode::WebSocket) return send_locked(wire::ws::encode_frame(wire::ws::Opcode::Binary, body));
    return send_locked(body);
  }

 private:
  bool send_locked(std::span<const std::uint8_t> bytes) {
    if (!open) return false;
    std::size_t sent = 0;
    while (sent < bytes.size()) {
      const ssize_t n = ::send(fd, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) {
        open = false;
        return false;
      }
      sent += static_cast<std::size_t>(n);
    }
    return true;
  }
};

using ClientPtr = std::shared_ptr<Client>;

struct PendingCommand {
  std::weak_ptr<Client> client;
  wire::ButtonCommand command;
};

struct Snapshot {
  std::uint64_t tick = 0;
  motion::HandState hand;
  std::array<motion::DriveState, hand::kMotorCount> drive{};
  std::array<bool, hand::kMotorCount> faulted{};
};

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

}  // namespace

struct Server::Impl {
  explicit Impl(ServeConfig c) : config(std::move(c)), sim(config.simulation) {
    std::mt19937_64 rng(grasp::derive_seed(config.seed, {0x5e7e}));
    geometry = scene::make_run_geometry(config.object, rng, {}, config.render.camera);
    // The object stops every finger at contact.
    auto sim_config = config.simulation;
    const auto contact = static_cast<std::int64_t>(std::llround(geometry.contact_steps));
    sim_config.finger_limits.fill(contact);
    sim = motion::HandSimulator(sim_config);
    ledger = segnet::expected_ledger(config.weights ? config.weights->arch : segnet::Architecture{},
                                     datapath::kReducedHeight, datapath::kReducedWidth);
    if (config.weights) params = segnet::dequantize(*config.weights);
    publish_snapshot();
  }

  void log(const std::string& s) const {
    if (config.log) config.log(s);
  }

  // --- ticker ---

  void publish_snapshot() {
    Snapshot s;
    s.tick = sim.ticks();
    s.hand = sim.state();
    for (std::size_t m = 0; m < hand::kMotorCount; ++m) {
      const auto id = static_cast<hand::MotorId>(m);
      s.drive[m] = sim.panel().state(id);
      s.faulted[m] = sim.faulted(id);
    }
    std::lock_guard lock(snapshot_mutex);
    snapshot = s;
  }

  void apply_commands() {
    std::deque<PendingCommand> batch;
    {
      std::lock_guard lock(command_mutex);
      batch.swap(commands);
    }
    for (const auto& p : batch) {
      const auto action = static_cast<motion::ButtonAction>(p.command.action);
      const auto cmd = sim.button(p.command.button, action);
      wire::ButtonAck ack;
      ack.button = p.command.button;
      ack.drive_state = static_cast<std::uint8_t>(cmd.state);
      ack.tick = sim.ticks();
      if (auto c = p.client.lock()) c->send(ack);
    }
  }

  void ticker() {
    const auto t0 = Clock::now();
    while (!stopping) {
      if (config.speed > 0.0) {
        const double wall = std::chrono::duration<double>(Clock::now() - t0).count();
        const auto due = static_cast<std::uint64_t>(wall * config.speed * motion::kLoopRateHz);
        if (sim.ticks() >= due) {
          std::this_thread::sleep_for(std::chrono::milliseconds(1));
          continue;
        }
        // Catch up in bounded batches so stop requests stay responsive.
        const std::uint64_t batch = std::min<std::uint64_t>(due - sim.ticks(), 200);
        for (std::uint64_t i = 0; i < batch; ++i) {
          apply_commands();
          sim.tick();
        }
      } else {
        for (int i = 0; i < 64; ++i) {
          apply_commands();
          sim.tick();
        }
        std::this_thread::yield();
      }
      publish_snapshot();
      ticks = sim.ticks();
    }
  }

  // --- rendering ---

  double progress(const Snapshot& s) const {
    const double span = geometry.contact_steps - geometry.start_steps;
    double sum = 0.0;
    for (const auto& f : s.hand.fingers) sum += clamp01((f.tendon_displacement - geometry.start_steps) / span);
    return sum / static_cast<double>(hand::kFingerCount);
  }

  wire::StatePacket state_packet(const Snapshot& s) const {
    wire::StatePacket p;
    p.tick = s.tick;
    for (std::size_t m = 0; m < hand::kMotorCount; ++m) {
      const auto& ms = s.hand.motors[m];
      auto& t = p.motors[m];
      t.encoder_count = static_cast<std::int32_t>(ms.encoder_count);
      t.pwm_duty = static_cast<std::int16_t>(ms.pwm_duty);
      t.velocity = static_cast<float>(motion::rad_per_s_to_steps_per_s(ms.angular_velocity));
      t.drive_state = static_cast<std::uint8_t>(s.drive[m]);
      t.faulted = s.faulted[m] ? 1 : 0;
    }
    for (std::size_t f = 0; f < hand::kFingerCount; ++f) {
      p.fingers[f].mcp = static_cast<float>(s.hand.fingers[f].mcp_angle);
      p.fingers[f].pip = static_cast<float>(s.hand.fingers[f].pip_angle);
    }
    p.progress = static_cast<float>(progress(s));
    return p;
  }

  wire::FramePacket render_frame(const Snapshot& s, std::uint32_t counter) {
    wire::FramePacket p;
    p.tick = s.tick;
    p.frame_counter = counter;
    p.width = datapath::kReducedWidth;
    p.height = datapath::kReducedHeight;
    p.flags = wire::FramePacket::kHasTruth | (params ? wire::FramePacket::kHasPrediction : 0);
    const std::size_t pixels = p.pixels();
    p.total_macs = ledger.total_macs;
    p.weight_bytes = static_cast<std::uint32_t>(ledger.weight_bytes);
    p.peak_activation_bytes = static_cast<std::uint32_t>(ledger.peak_activation_bytes);

    for (Finger f : hand::kAllFingers) {
      const std::size_t i = hand::index_of(f);
      const double steps =
          std::clamp(s.hand.fingers[i].tendon_displacement, 0.0, static_cast<double>(hand::kFingerFullClose));
      const auto qcif = scene::render_qcif(geometry, f, steps, config.render,
                                           grasp::derive_seed(config.seed, {counter, i}), counter);
      auto packet = datapath::dcmi_encode(datapath::to_rgb565(qcif));
      if (pending_faults[i].exchange(false)) packet[packet.size() / 2] ^= 0x10;
      const auto decoded = datapath::dcmi_decode(packet);

      std::vector<std::uint8_t> image(pixels * 3, 0);
      std::vector<std::uint8_t> predicted(pixels, 0);
      const auto truth = scene::object_mask(geometry, f, steps, config.render.camera);
      p.accuracy[i] = std::numeric_limits<float>::quiet_NaN();
      if (decoded.frames == 1 && decoded.sync_losses == 0) {
        const auto small = datapath::downsample_2x2(std::get<datapath::Frame>(decoded.events.front()));
        image = small.pixels;
        p.status[i] = wire::TileStatus::Ok;
        if (params) {
          predicted = segnet::forward(segnet::normalize_rgb(image, p.height, p.width), *params).mask;
          p.accuracy[i] = static_cast<float>(grasp::pixel_accuracy(predicted, truth));
        }
      } else {
        p.status[i] = wire::TileStatus::Corrupt;
      }
      p.images.insert(p.images.end(), image.begin(), image.end());
      const auto pred_packed = wire::pack_mask(predicted);
      p.prediction.insert(p.prediction.end(), pred_packed.begin(), pred_packed.end());
      const auto truth_packed = wire::pack_mask(truth);
      p.truth.insert(p.truth.end(), truth_packed.begin(), truth_packed.end());
    }
    return p;
  }

  void renderer() {
    const auto interval = std::chrono::duration<double>(1.0 / config.frame_hz);
    auto next = Clock::now();
    std::uint32_t counter = 0;
    while (!stopping) {
      const auto now = Clock::now();
      if (now < next) {
        std::this_thread::sleep_for(std::min<Clock::duration>(
            next - now, std::chrono::duration_cast<Clock::duration>(std::chrono::milliseconds(20))));
        continue;
      }
      next = std::max(next + std::chrono::duration_cast<Clock::duration>(interval), now);
      Snapshot s;
      {
        std::lock_guard lock(snapshot_mutex);
        s = snapshot;
      }
      auto frame = render_frame(s, counter++);
      {
        std::lock_guard lock(frame_mutex);
        ready_frame = std::move(frame);
      }
      publish_cv.notify_one();
    }
  }

  // --- publisher ---

  std::vector<ClientPtr> streaming_clients() {
    std::lock_guard lock(clients_mutex);
    std::vector<ClientPtr> out;
    for (const auto& c : clients) {
      if (c->open && c->streaming) out.push_back(c);
    }
    return out;
  }

  void publisher() {
    const auto interval =
        std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(1.0 / config.state_hz));
    auto next_state = Clock::now();
    while (!stopping) {
      std::optional<wire::FramePacket> frame;
      {
        std::unique_lock lock(frame_mutex);
        publish_cv.wait_until(lock, std::min(next_state, Clock::now() + std::chrono::milliseconds(50)),
                              [&] { return ready_frame.has_value() || stopping.load(); });
        frame.swap(ready_frame);
      }
      if (stopping) break;
      if (frame) {
        const wire::Message m = std::move(*frame);
        for (const auto& c : streaming_clients()) c->send(m);
        ++frame_packets;
      }
      if (Clock::now() >= next_state) {
        next_state += interval;
        if (next_state < Clock::now()) next_state = Clock::now() + interval;
        Snapshot s;
        {
          std::lock_guard lock(snapshot_mutex);
          s = snapshot;
        }
        const wire::Message m = state_packet(s);
        for (const auto& c : streaming_clients()) c->send(m);
        ++state_packets;
      }
    }
  }

  // --- receiver ---

  wire::Welcome welcome() const {
    wire::Welcome w;
    w.image_width = datapath::kReducedWidth;
    w.image_height = datapath::kReducedHeight;
    w.cameras = hand::kFingerCount;
    w.state_hz = static_cast<float>(config.state_hz);
    w.frame_hz = static_cast<float>(config.frame_hz);
    w.speed = static_cast<float>(config.speed);
    return w;
  }

  void start_streaming(Client& c) {
    c.send(welcome());
    c.streaming = true;
  }

  void reply_error(Client& c, wire::ErrorCode code, std::string text) {
    c.send(wire::ErrorMessage{code, std::move(text)});
  }

  void handle(const ClientPtr& c, std::span<const std::uint8_t> body) {
    auto decoded = wire::decode_body(body);
    if (auto* err = std::get_if<wire::DecodeError>(&decoded)) {
      reply_error(*c, err->code, err->text);
      return;
    }
    const auto& msg = std::get<wire::Message>(decoded);
    if (const auto* h = std::get_if<wire::Hello>(&msg)) {
      if (h->version != wire::kProtocolVersion) {
        reply_error(*c, wire::ErrorCode::BadArgument,
                    fmt::format("protocol version {} not supported, server speaks {}", h->version,
                                wire::kProtocolVersion));
      } else {
        c->send(welcome());
      }
    } else if (const auto* b = std::get_if<wire::ButtonCommand>(&msg)) {
      if (b->button < 1 || b->button > hand::kMotorCount || b->action > 1) {
        reply_error(*c, wire::ErrorCode::BadArgument,
                    fmt::format("button {} action {} is invalid", b->button, b->action));
        return;
      }
      std::lock_guard lock(command_mutex);
      commands.push_back({c, *b});
    } else if (const auto* f = std::get_if<wire::InjectFault>(&msg)) {
      if (f->camera >= hand::kFingerCount) {
        reply_error(*c, wire::ErrorCode::BadArgument, fmt::format("camera {} does not exist", f->camera));
        return;
      }
      pending_faults[f->camera] = true;
      c->send(wire::FaultAck{f->camera});
    } else {
      reply_error(*c, wire::ErrorCode::BadArgument, "message type is not accepted from clients");
    }
  }

  void process_raw(const ClientPtr& c, std::span<const std::uint8_t> bytes) {
    c->raw.feed(bytes);
    while (c->open) {
      auto next = c->raw.next();
      if (!next) break;
      if (auto* err = std::get_if<wire::DecodeError>(&*next)) {
        reply_error(*c, err->code, err->text);
        c->open = false;
        break;
      }
      handle(c, std::get<std::vector<std::uint8_t>>(*next));
    }
  }

  void process_websocket(const ClientPtr& c, std::span<const std::uint8_t> bytes) {
    using wire::ws::Opcode;
    c->frames.feed(bytes);
    while (c->open) {
      std::optional<wire::ws::Frame> frame;
      try {
        frame = c->frames.next();
      } catch (const std::exception& e) {
        log(fmt::format("client {}: {}", c->fd, e.what()));
        c->send_bytes(wire::ws::encode_frame(Opcode::Close, std::vector<std::uint8_t>{0x03, 0xEA}));
        c->open = false;
        break;
      }
      if (!frame) break;
      if (!frame->fin || frame->opcode == Opcode::Continuation) {
        reply_error(*c, wire::ErrorCode::Malformed, "fragmented frames are not supported");
        continue;
      }
      switch (frame->opcode) {
        case Opcode::Binary: {
          const auto& p = frame->payload;
          std::uint32_t len = 0;
          if (p.size() >= 4) std::memcpy(&len, p.data(), 4);  // little-endian host
          if (p.size() < 5 || len != p.size() - 4) {
            reply_error(*c, wire::ErrorCode::Malformed, "frame does not hold exactly one message");
          } else {
            handle(c, std::span(p).subspan(4));
          }
          break;
        }
        case Opcode::Text:
          reply_error(*c, wire::ErrorCode::Malformed, "text frames are not supported");
          break;
        case Opcode::Ping:
          c->send_bytes(wire::ws::encode_frame(Opcode::Pong, frame->payload));
          break;
        case Opcode::Close:
          c->send_bytes(wire::ws::encode_frame(Opcode::Close, frame->payload));
          c->open = false;
          break;
        default:
          break;
      }
    }
  }

  void process_handshake(const ClientPtr& c) {
    std::size_t consumed = 0;
    std::optional<wire::ws::Handshake> h;
    try {
      h = wire::ws::parse_handshake(c->http, &consumed);
    } catch (const std::exception& e) {
      const std::string r = "HTTP/1.1 400 Bad Request\r\nConnection: close\r\nContent-Length: 0\r\n\r\n";
      c->send_bytes({reinterpret_cast<const std::uint8_t*>(r.data()), r.size()});
      c->open = false;
      return;
    }
    if (!h) return;
    const std::string response = wire::ws::handshake_response(*h);
    c->send_bytes({reinterpret_cast<const std::uint8_t*>(response.data()), response.size()});
    if (!h->upgrade) {
      c->open = false;
      return;
    }
    const std::string rest = c->http.substr(consumed);
    c->http.clear();
    c->set_mode(Client::Mode::WebSocket);
    start_streaming(*c);
    if (!rest.empty()) {
      process_websocket(c, {reinterpret_cast<const std::uint8_t*>(rest.data()), rest.size()});
    }
  }

  void on_bytes(const ClientPtr& c, std::span<const std::uint8_t> bytes) {
    switch (c->mode) {
      case Client::Mode::Unknown: {
        c->pending.insert(c->pending.end(), bytes.begin(), bytes.end());
        const std::size_t n = std::min(c->pending.size(), kGet.size());
        if (!std::equal(c->pending.begin(), c->pending.begin() + static_cast<std::ptrdiff_t>(n), kGet.begin())) {
          c->set_mode(Client::Mode::Raw);
          start_streaming(*c);
          auto pending = std::move(c->pending);
          process_raw(c, pending);
        } else if (n == kGet.size()) {
          c->set_mode(Client::Mode::WebSocketHandshake);
          c->http.assign(c->pending.begin(), c->pending.end());
          c->pending.clear();
          process_handshake(c);
        }
        break;
      }
      case Client::Mode::Raw:
        process_raw(c, bytes);
        break;
      case Client::Mode::WebSocketHandshake:
        c->http.append(reinterpret_cast<const char*>(bytes.data()), bytes.size());
        process_handshake(c);
        break;
      case Client::Mode::WebSocket:
        process_websocket(c, bytes);
        break;
    }
  }

  void accept_one() {
    const int fd = ::accept(listen_fd, nullptr, nullptr);
    if (fd < 0) return;
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    timeval tv{2, 0};
    ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
    auto c = std::make_shared<Client>(fd);
    ++connections;
    log(fmt::format("client {} connected", fd));
    std::lock_guard lock(clients_mutex);
    clients.push_back(std::move(c));
  }

  void receiver() {
    std::vector<std::uint8_t> buf(64 * 1024);
    while (!stopping) {
      std::vector<ClientPtr> current;
      {
        std::lock_guard lock(clients_mutex);
        std::erase_if(clients, [&](const ClientPtr& c) {
          if (!c->open) log(fmt::format("client {} closed", c->fd));
          return !c->open;
        });
        current = clients;
      }
      std::vector<pollfd> fds;
      fds.push_back({listen_fd, POLLIN, 0});
      for (const auto& c : current) fds.push_back({c->fd, POLLIN, 0});
      const int r = ::poll(fds.data(), fds.size(), 50);
      if (r < 0 && errno != EINTR) throw std::runtime_error(std::string("poll: ") + std::strerror(errno));

      const auto now = Clock::now();
      for (const auto& c : current) {
        if (c->mode == Client::Mode::Unknown && c->pending.empty() && now - c->connected_at > kRawDetectTimeout) {
          c->set_mode(Client::Mode::Raw);
          start_streaming(*c);
        }
      }
      if (r <= 0) continue;
      if (fds[0].revents & POLLIN) accept_one();
      for (std::size_t i = 0; i < current.size(); ++i) {
        const auto ev = fds[i + 1].revents;
        if (!ev) continue;
        const auto& c = current[i];
        const ssize_t n = ::recv(c->fd, buf.data(), buf.size(), 0);
        if (n <= 0) {
          c->open = false;
          continue;
        }
        on_bytes(c, std::span(buf.data(), static_cast<std::size_t>(n)));
      }
    }
  }

  std::uint16_t listen() {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    hints.ai_flags = AI_PASSIVE;
    addrinfo* res = nullptr;
    const std::string port = std::to_string(config.port);
    if (const int rc = ::getaddrinfo(config.host.c_str(), port.c_str(), &hints, &res); rc != 0) {
      throw std::runtime_error(fmt::format("cannot resolve {}: {}", config.host, ::gai_strerror(rc)));
    }
    std::unique_ptr<addrinfo, decltype(&::freeaddrinfo)> guard(res, ::freeaddrinfo);
    listen_fd = ::socket(res->ai_family, res->ai_socktype | SOCK_CLOEXEC, res->ai_protocol);
    if (listen_fd < 0) throw std::runtime_error(std::string("socket: ") + std::strerror(errno));
    const int one = 1;
    ::setsockopt(listen_fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(listen_fd, res->ai_addr, res->ai_addrlen) != 0) {
      const int e = errno;
      ::close(listen_fd);
      listen_fd = -1;
      if (e == EADDRINUSE) throw PortBusy(fmt::format("{}:{} is already in use", config.host, config.port));
      throw std::runtime_error(fmt::format("bind {}:{}: {}", config.host, config.port, std::strerror(e)));
    }
    if (::listen(listen_fd, 8) != 0) throw std::runtime_error(std::string("listen: ") + std::strerror(errno));
    sockaddr_in addr{};
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd, reinterpret_cast<sockaddr*>(&addr), &len);
    return ntohs(addr.sin_port);
  }

  ServeStats run() {
    if (listen_fd < 0) listen();
    std::vector<std::thread> threads;
    std::exception_ptr failure;
    std::mutex failure_mutex;
    const auto guarded = [&](void (Impl::*fn)()) {
      return std::thread([this, fn, &failure, &failure_mutex] {
        try {
          (this->*fn)();
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          stopping = true;
        }
      });
    };
    threads.push_back(guarded(&Impl::ticker));
    threads.push_back(guarded(&Impl::renderer));
    threads.push_back(guarded(&Impl::publisher));
    threads.push_back(guarded(&Impl::receiver));

    const auto t0 = Clock::now();
    while (!stopping) {
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
      if (config.duration_s > 0.0 &&
          std::chrono::duration<double>(Clock::now() - t0).count() >= config.duration_s) {
        stopping = true;
      }
    }
    publish_cv.notify_all();
    for (auto& t : threads) t.join();
    {
      std::lock_guard lock(clients_mutex);
      clients.clear();
    }
    ::close(listen_fd);
    listen_fd = -1;
    if (failure) std::rethrow_exception(failure);
    return {ticks.load(), state_packets.load(), frame_packets.load(), connections.load()};
  }

  ServeConfig config;
  motion::HandSimulator sim;
  scene::RunGeometry geometry;
  segnet::ResourceLedger ledger;
  std::optional<segnet::Params<float>> params;

  int listen_fd = -1;
  std::atomic<bool> stopping{false};
  std::atomic<std::uint64_t> ticks{0}, state_packets{0}, frame_packets{0}, connections{0};

  std::mutex snapshot_mutex;
  Snapshot snapshot;

  std::mutex command_mutex;
  std::deque<PendingCommand> commands;

  std::array<std::atomic<bool>, hand::kFingerCount> pending_faults{};

  std::mutex frame_mutex;
  std::condition_variable publish_cv;
  std::optional<wire::FramePacket> ready_frame;

  std::mutex clients_mutex;
  std::vector<ClientPtr> clients;
};

Server::Server(ServeConfig config) {
  if (!(config.speed >= 0.0) || !(config.state_hz > 0.0) || !(config.frame_hz > 0.0) ||
      config.frame_hz > datapath::kCameraFps) {
    throw std::invalid_argument("serve: speed must be >= 0, state_hz > 0 and frame_hz in (0, 20]");
  }
  impl_ = std::make_unique<Impl>(std::move(config));
}

Server::~Server() = default;

std::uint16_t Server::listen() { return impl_->listen(); }

ServeStats Server::run() { return impl_->run(); }

void Server::stop() noexcept { impl_->stopping = true; }

}  // namespace fvhand::serve
