#pragma once

// Live teleoperation session: the 1 kHz hand simulation driven by button
// commands from network clients, streaming telemetry and camera frames over
// the binary protocol of wire.hpp.
//
// Threads: a ticker advances the simulation and applies queued commands
// between ticks, a publisher sends StatePackets and finished FramePackets, a
// renderer produces FramePackets from the latest hand state, and a receiver
// accepts connections and reads client messages. A connection speaks
// WebSocket if it opens with "GET ", otherwise raw length-prefixed messages;
// a raw client that sends nothing is treated as raw after 250 ms.

#include "fvhand/motion_control.hpp"
#include "fvhand/scene.hpp"
#include "fvhand/segnet.hpp"

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>

namespace fvhand::serve {

struct ServeConfig {
  std::string host = "127.0.0.1";
  std::uint16_t port = 8765;  // 0 picks a free port
  double speed = 1.0;         // simulated seconds per wall-clock second; 0 runs unpaced
  double state_hz = 50.0;
  double frame_hz = 20.0;
  std::uint64_t seed = 1;
  motion::SimulationConfig simulation;
  scene::ObjectClass object = scene::ObjectClass::Cup;
  scene::RenderOptions render;
  std::optional<segnet::SegNetWeights> weights;  // no prediction without them
  double duration_s = 0.0;  // wall-clock limit, 0 = until stop()
  std::function<void(const std::string&)> log;
};

class PortBusy : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ServeStats {
  std::uint64_t ticks = 0;
  std::uint64_t state_packets = 0;  // per client sends are not counted separately
  std::uint64_t frame_packets = 0;
  std::uint64_t connections = 0;
};

class Server {
 public:
  explicit Server(ServeConfig config);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Binds and listens; returns the bound port. Throws PortBusy if the
  // address is taken, std::runtime_error for other socket failures.
  std::uint16_t listen();
  // Blocks until stop() is called or the duration elapses.
  ServeStats run();
  // Only stores a flag, so it is safe from a signal handler.
  void stop() noexcept;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace fvhand::serve
