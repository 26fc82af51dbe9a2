#include "fvhand/motion_control.hpp"

#include "doctest.h"

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

using namespace fvhand;
using namespace fvhand::motion;

TEST_CASE("encoder counts one pulley revolution as 47104 steps") {
  CHECK(kStepsPerRev == 512 * 4 * 23);
  EncoderCounter e;
  e.update(2.0 * std::numbers::pi, 1.0);
  CHECK(e.count() == 47104);
  e.update(-2.0 * std::numbers::pi, 0.5);
  CHECK(e.count() == 47104 / 2);
  CHECK(rad_per_s_to_steps_per_s(2.0 * std::numbers::pi) == doctest::Approx(47104.0));
  CHECK(steps_per_s_to_rad_per_s(47104.0) == doctest::Approx(2.0 * std::numbers::pi));
}

TEST_CASE("partitioning an interval does not change the count") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const double omega = 0.5 + 20.0 * u(rng);
    const double total = 0.5 + u(rng);
    std::vector<double> cuts(10000);
    for (auto& c : cuts) c = u(rng) * total;
    std::sort(cuts.begin(), cuts.end());
    EncoderCounter pieces;
    double prev = 0.0;
    for (double c : cuts) {
      pieces.update(omega, c - prev);
      prev = c;
    }
    pieces.update(omega, total - prev);
    const auto expect = static_cast<std::int64_t>(std::floor(omega * total / (2 * std::numbers::pi) * 47104.0 + 1e-6));
    CHECK(pieces.count() == expect);
  }
}

TEST_CASE("PID matches a textbook parallel form") {
  const PidGains g{1.3, 4.0, 0.02};
  Pid pid(g, 1e9);
  double integral = 0.0, prev = 0.0;
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 10.0);
  const double dt = 1e-3;
  for (int i = 0; i < 500; ++i) {
    const double e = n(rng);
    integral += e * dt;
    const double want = g.kp * e + g.ki * integral + g.kd * (e - prev) / dt;
    prev = e;
    CHECK(pid.step(e, dt) == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("PID integrator is clamped") {
  Pid pid({0.0, 2.0, 0.0}, 10.0);
  double u = 0.0;
  for (int i = 0; i < 10000; ++i) u = pid.step(100.0, 1e-3);
  CHECK(u == doctest::Approx(10.0));
  pid.reset();
  CHECK(pid.step(0.0, 1e-3) == 0.0);
}

TEST_CASE("cascade duty is an integer numerator within +-3000") {
  ControllerConfig cfg;
  CascadeController c(cfg);
  MotorState s;
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::int64_t> target(-200000, 200000);
  std::uniform_real_distribution<double> vel(-300.0, 300.0);
  for (int i = 0; i < 2000; ++i) {
    s.angular_velocity = vel(rng);
    const int duty = c.step(target(rng), s);
    CHECK(std::abs(duty) <= kPwmResolution);
  }
  CHECK_FALSE(c.faulted());
  s.angular_velocity = std::nan("");
  CHECK(c.step(0, s) == 0);
  CHECK(c.faulted());
}

TEST_CASE("cascade outer loop clamps the velocity setpoint") {
  // With only proportional inner gain the duty reveals the setpoint.
  ControllerConfig cfg;
  cfg.position = {50.0, 0.0, 0.0};
  cfg.velocity = {0.01, 0.0, 0.0};
  cfg.max_velocity = 100000.0;
  CascadeController c(cfg);
  MotorState s;
  CHECK(c.step(1000000, s) == 1000);  // 0.01 * 100000
  CHECK(c.step(10, s) == 5);          // 0.01 * 50 * 10
}

TEST_CASE("controller is deterministic") {
  auto run = [] {
    std::vector<int> duties;
    CascadeController c;
    MotorState s;
    for (int i = 0; i < 300; ++i) {
      s.angular_velocity = 0.3 * i;
      duties.push_back(c.step(50000, s));
    }
    return duties;
  };
  CHECK(run() == run());
}

TEST_CASE("button cycles idle close stop open idle") {
  ButtonPanel p(100000.0);
  CHECK(p.state(hand::MotorId::Thumb) == DriveState::Idle);
  auto c = p.handle(1, ButtonAction::Press);
  CHECK(c.state == DriveState::Close);
  CHECK(c.velocity_setpoint > 0.0);
  CHECK(p.handle(1, ButtonAction::Release).state == DriveState::Close);
  CHECK(p.handle(1, ButtonAction::Press).state == DriveState::Stop);
  c = p.handle(1, ButtonAction::Press);
  CHECK(c.state == DriveState::Open);
  CHECK(c.velocity_setpoint < 0.0);
  CHECK(p.handle(1, ButtonAction::Press).state == DriveState::Idle);
  CHECK(p.state(hand::MotorId::Index) == DriveState::Idle);
  CHECK(p.handle(3, ButtonAction::Press).motor == hand::MotorId::Coupled);
  CHECK_THROWS_AS(p.handle(0, ButtonAction::Press), std::invalid_argument);
  CHECK_THROWS_AS(p.handle(4, ButtonAction::Press), std::invalid_argument);
}

TEST_CASE("plant accelerates under duty and coasts to rest") {
  MotorPlantParams p;
  MotorState s;
  const auto up = motor_plant_step(s, 3000, 0.0, 1e-3, p);
  CHECK(up.angular_velocity > 0.0);
  CHECK(up.current > 0.0);
  s.angular_velocity = 10.0;
  const auto down = motor_plant_step(s, 0, 0.0, 1e-3, p);
  CHECK(down.angular_velocity < 10.0);
  CHECK_THROWS(motor_plant_step(s, 0, 0.0, 0.5, p));
}

TEST_CASE("closing reaches full close within tolerance") {
  for (auto m : {hand::MotorId::Thumb, hand::MotorId::Index, hand::MotorId::Coupled}) {
    const auto r = close_finger(m, {}, -1, false);
    REQUIRE(r.success);
    REQUIRE(r.closing_time);
    CHECK(*r.closing_time > 0.2);
    CHECK(*r.closing_time < 2.0);
  }
  const auto r = close_finger(hand::MotorId::Index);
  CHECK(std::abs(r.trajectory.back().motors[1].encoder_count - 60000) <= 500);
  CHECK(r.trajectory.front().motors[1].encoder_count == 0);
}

TEST_CASE("simulation keeps the coupled invariants") {
  HandSimulator sim;
  sim.command_position(hand::MotorId::Coupled, full_close_target(hand::MotorId::Coupled));
  for (int i = 0; i < 1500; ++i) {
    sim.tick();
    const auto& st = sim.state();
    const double sum = st.fingers[2].tendon_displacement + st.fingers[3].tendon_displacement +
                       st.fingers[4].tendon_displacement;
    CHECK(sum == static_cast<double>(std::clamp<std::int64_t>(st.motors[2].encoder_count, 0, 180000)));
    CHECK(st.fingers[2].tendon_tension == st.fingers[3].tendon_tension);
    CHECK(st.fingers[3].tendon_tension == st.fingers[4].tendon_tension);
  }
  CHECK(std::abs(sim.state().motors[2].encoder_count - 180000) <= 500);
}

TEST_CASE("idle simulation stays at zero") {
  HandSimulator sim;
  for (int i = 0; i < 200; ++i) sim.tick();
  for (const auto& m : sim.state().motors) {
    CHECK(m.encoder_count == 0);
    CHECK(m.pwm_duty == 0);
  }
}

TEST_CASE("invalid configuration is rejected") {
  SimulationConfig c;
  c.supply_voltage = -1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  ControllerConfig cc;
  cc.loop_rate_hz = 0.0;
  CHECK_THROWS_AS(cc.validate(), std::invalid_argument);
}
