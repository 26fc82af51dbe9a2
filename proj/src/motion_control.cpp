#include "fvhand/motion_control.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace fvhand::motion {

namespace {

// Accumulated positions closer than this to an integer count as that integer,
// so floating-point noise from partitioned sums cannot flip a truncation.
constexpr double kSnapSteps = 1e-6;

}  // namespace

std::int64_t EncoderCounter::update(double angular_velocity, double dt) {
  const double increment =
      angular_velocity * dt / (2.0 * std::numbers::pi) * static_cast<double>(kStepsPerRev);
  // Neumaier summation keeps the running position exact to ~1 ulp.
  const double t = sum_ + increment;
  if (std::abs(sum_) >= std::abs(increment)) {
    compensation_ += (sum_ - t) + increment;
  } else {
    compensation_ += (increment - t) + sum_;
  }
  sum_ = t;

  const double total = sum_ + compensation_;
  const double nearest = std::round(total);
  const double whole = std::abs(total - nearest) < kSnapSteps ? nearest : std::trunc(total);
  const auto count = static_cast<std::int64_t>(whole);
  const std::int64_t delta = count - emitted_;
  emitted_ = count;
  return delta;
}

double rad_per_s_to_steps_per_s(double angular_velocity) {
  return angular_velocity / (2.0 * std::numbers::pi) * static_cast<double>(kStepsPerRev);
}

double steps_per_s_to_rad_per_s(double steps_per_s) {
  return steps_per_s / static_cast<double>(kStepsPerRev) * 2.0 * std::numbers::pi;
}

void ControllerConfig::validate() const {
  if (loop_rate_hz != kLoopRateHz) {
    throw std::invalid_argument("control loop rate is fixed at 1000 Hz");
  }
  if (steps_per_rev != kStepsPerRev) {
    throw std::invalid_argument("steps_per_rev must be 512*4*23 = 47104");
  }
  if (!(max_velocity > 0.0) || position_integrator_clamp < 0.0 ||
      velocity_integrator_clamp < 0.0) {
    throw std::invalid_argument("controller limits must be positive");
  }
}

double Pid::step(double error, double dt) {
  integral_ += error * dt;
  if (gains_.ki != 0.0) {
    const double bound = clamp_ / std::abs(gains_.ki);
    integral_ = std::clamp(integral_, -bound, bound);
  }
  const double derivative = (error - previous_error_) / dt;
  previous_error_ = error;
  return gains_.kp * error + gains_.ki * integral_ + gains_.kd * derivative;
}

void Pid::reset() {
  integral_ = 0.0;
  previous_error_ = 0.0;
}

CascadeController::CascadeController(ControllerConfig config)
    : config_(config),
      outer_(config.position, config.position_integrator_clamp),
      inner_(config.velocity, config.velocity_integrator_clamp) {
  config_.validate();
}

void CascadeController::reset() {
  outer_.reset();
  inner_.reset();
  faulted_ = false;
}

int CascadeController::step(std::int64_t target_position, const MotorState& state) {
  if (faulted_) {
    return 0;
  }
  const double dt = 1.0 / config_.loop_rate_hz;
  const double error = static_cast<double>(target_position - state.encoder_count);
  const double setpoint =
      std::clamp(outer_.step(error, dt), -config_.max_velocity, config_.max_velocity);
  return inner(setpoint, state);
}

int CascadeController::step_velocity(double velocity_setpoint, const MotorState& state) {
  if (faulted_) {
    return 0;
  }
  outer_.reset();
  return inner(velocity_setpoint, state);
}

int CascadeController::inner(double velocity_setpoint, const MotorState& state) {
  if (!std::isfinite(velocity_setpoint) || !std::isfinite(state.angular_velocity)) {
    faulted_ = true;
    return 0;
  }
  const double dt = 1.0 / config_.loop_rate_hz;
  const double measured = rad_per_s_to_steps_per_s(state.angular_velocity);
  const double u = inner_.step(velocity_setpoint - measured, dt);
  if (!std::isfinite(u)) {
    faulted_ = true;
    return 0;
  }
  const auto duty = std::clamp(std::lround(u), -static_cast<long>(kPwmResolution),
                               static_cast<long>(kPwmResolution));
  return static_cast<int>(duty);
}

void MotorPlantParams::validate() const {
  if (!(terminal_resistance > 0.0 && torque_constant > 0.0 && back_emf_constant > 0.0 &&
        rotor_inertia > 0.0 && viscous_friction > 0.0)) {
    throw std::invalid_argument("motor plant parameters must be positive");
  }
  if (gear_ratio != static_cast<double>(kGearRatio)) {
    throw std::invalid_argument("gear ratio is fixed at 23");
  }
}

PlantOutput motor_plant_step(const MotorState& state, int duty, double load_torque, double dt,
                             const MotorPlantParams& p) {
  if (!(dt > 0.0) || dt > kTickSeconds + 1e-12) {
    throw std::invalid_argument("plant step must be in (0, 1 ms]");
  }
  const double voltage = state.supply_voltage * static_cast<double>(duty) / kPwmResolution;
  const int substeps = std::max(1, static_cast<int>(std::ceil(dt / kPlantSubstepSeconds - 1e-9)));
  const double h = dt / substeps;

  double omega_motor = state.angular_velocity * p.gear_ratio;
  double current = 0.0;
  for (int k = 0; k < substeps; ++k) {
    current = (voltage - p.back_emf_constant * omega_motor) / p.terminal_resistance;
    const double torque =
        p.torque_constant * current - p.viscous_friction * omega_motor - load_torque / p.gear_ratio;
    omega_motor += h * torque / p.rotor_inertia;
  }
  current = (voltage - p.back_emf_constant * omega_motor) / p.terminal_resistance;
  return {omega_motor / p.gear_ratio, current};
}

const char* drive_state_name(DriveState s) {
  switch (s) {
    case DriveState::Idle: return "idle";
    case DriveState::Close: return "close";
    case DriveState::Stop: return "stop";
    case DriveState::Open: return "open";
  }
  return "?";
}

MotorCommand ButtonPanel::handle(int button_id, ButtonAction action) {
  if (button_id < 1 || button_id > static_cast<int>(hand::kMotorCount)) {
    throw std::invalid_argument("unknown button " + std::to_string(button_id));
  }
  const auto motor = static_cast<std::size_t>(button_id - 1);
  if (action == ButtonAction::Press) {
    auto& s = states_[motor];
    s = static_cast<DriveState>((static_cast<int>(s) + 1) % 4);
  } else if (action != ButtonAction::Release) {
    throw std::invalid_argument("unknown button action");
  }
  return command_for(motor);
}

MotorCommand ButtonPanel::command_for(std::size_t motor) const {
  const auto s = states_[motor];
  double v = 0.0;
  if (s == DriveState::Close) v = drive_velocity_;
  if (s == DriveState::Open) v = -drive_velocity_;
  return {static_cast<hand::MotorId>(motor), s, v};
}

SimulationConfig::SimulationConfig() {
  // Velocity limits produced by calibrate_closing_times() with the default
  // plant; `fvhand calibrate` regenerates them.
  controllers[hand::index_of(hand::MotorId::Thumb)].max_velocity = 124763.7;
  controllers[hand::index_of(hand::MotorId::Index)].max_velocity = 139773.7;
  controllers[hand::index_of(hand::MotorId::Coupled)].max_velocity = 148964.5;
}

void SimulationConfig::validate() const {
  plant.validate();
  for (const auto& c : controllers) c.validate();
  if (!(supply_voltage > 0.0) || finger_stiffness < 0.0 || endstop_stiffness < 0.0 ||
      !(settle_threshold > 0.0) || !(timeout_s > 0.0) || !(button_velocity >= 0.0)) {
    throw std::invalid_argument("invalid simulation configuration");
  }
  for (auto l : finger_limits) {
    if (l < 0 || l > hand::kFingerFullClose) {
      throw std::invalid_argument("finger limit outside [0, 60000]");
    }
  }
}

std::int64_t full_close_target(hand::MotorId motor) {
  return motor == hand::MotorId::Coupled ? hand::kCoupledFullClose : hand::kFingerFullClose;
}

HandSimulator::HandSimulator(SimulationConfig config)
    : config_(std::move(config)), panel_(config_.button_velocity) {
  config_.validate();
  for (std::size_t m = 0; m < hand::kMotorCount; ++m) {
    controllers_[m] = CascadeController(config_.controllers[m]);
    state_.motors[m].supply_voltage = config_.supply_voltage;
  }
  refresh_fingers();
}

void HandSimulator::command_position(hand::MotorId motor, std::int64_t target) {
  auto& d = drives_[hand::index_of(motor)];
  if (d.mode != Mode::Position) controllers_[hand::index_of(motor)].reset();
  d = {Mode::Position, target, 0.0};
}

void HandSimulator::command_velocity(hand::MotorId motor, double steps_per_s) {
  auto& d = drives_[hand::index_of(motor)];
  if (d.mode == Mode::Idle) controllers_[hand::index_of(motor)].reset();
  d = {Mode::Velocity, 0, steps_per_s};
}

void HandSimulator::command_idle(hand::MotorId motor) {
  drives_[hand::index_of(motor)] = {};
}

MotorCommand HandSimulator::button(int button_id, ButtonAction action) {
  const auto cmd = panel_.handle(button_id, action);
  if (action == ButtonAction::Press) {
    if (cmd.state == DriveState::Idle) {
      command_idle(cmd.motor);
    } else {
      command_velocity(cmd.motor, cmd.velocity_setpoint);
    }
  }
  return cmd;
}

double HandSimulator::tendon_tension(std::size_t motor, std::int64_t count) const {
  const auto id = static_cast<hand::MotorId>(motor);
  if (count <= 0) {
    return 0.0;
  }
  const double k = config_.finger_stiffness;
  const double k_stop = config_.endstop_stiffness;
  if (id == hand::MotorId::Coupled) {
    std::array<std::int64_t, hand::kCoupledFingerCount> limits{};
    for (std::size_t i = 0; i < limits.size(); ++i) {
      limits[i] = config_.finger_limits[hand::index_of(hand::kCoupledFingers[i])];
    }
    const auto split = hand::split_coupled_displacement(count, limits);
    const auto longest = *std::max_element(split.fingers.begin(), split.fingers.end());
    return k * config_.tendons.steps_to_mm(id, static_cast<double>(longest)) +
           k_stop * config_.tendons.steps_to_mm(id, static_cast<double>(split.overtravel));
  }
  const auto finger = hand::TendonNetwork::driven_fingers(id).front();
  const auto limit = config_.finger_limits[hand::index_of(finger)];
  const auto free = std::min(count, limit);
  return k * config_.tendons.steps_to_mm(id, static_cast<double>(free)) +
         k_stop * config_.tendons.steps_to_mm(id, static_cast<double>(count - free));
}

void HandSimulator::tick() {
  for (std::size_t m = 0; m < hand::kMotorCount; ++m) {
    auto& motor = state_.motors[m];
    auto& drive = drives_[m];
    int duty = 0;
    switch (drive.mode) {
      case Mode::Idle:
        break;
      case Mode::Position:
        duty = controllers_[m].step(drive.target, motor);
        break;
      case Mode::Velocity: {
        const auto full = full_close_target(static_cast<hand::MotorId>(m));
        if ((drive.velocity > 0.0 && motor.encoder_count >= full) ||
            (drive.velocity < 0.0 && motor.encoder_count <= 0)) {
          drive.velocity = 0.0;  // soft end stop
        }
        duty = controllers_[m].step_velocity(drive.velocity, motor);
        break;
      }
    }
    motor.pwm_duty = duty;
  }

  const int substeps = static_cast<int>(std::lround(kTickSeconds / kPlantSubstepSeconds));
  for (int s = 0; s < substeps; ++s) {
    for (std::size_t m = 0; m < hand::kMotorCount; ++m) {
      auto& motor = state_.motors[m];
      const double load =
          tendon_tension(m, motor.encoder_count) * config_.tendons.pulley_radius_mm[m] * 1e-3;
      const auto out = motor_plant_step(motor, motor.pwm_duty, load, kPlantSubstepSeconds,
                                        config_.plant);
      encoders_[m].update(out.angular_velocity, kPlantSubstepSeconds);
      motor.angular_velocity = out.angular_velocity;
      motor.current = out.current;
      motor.encoder_count = encoders_[m].count();
    }
  }
  ++ticks_;
  refresh_fingers();
}

void HandSimulator::refresh_fingers() {
  const auto clamp_steps = [](std::int64_t v) {
    return static_cast<double>(std::clamp<std::int64_t>(v, 0, hand::kFingerFullClose));
  };
  for (std::size_t m = 0; m < hand::kMotorCount; ++m) {
    const auto id = static_cast<hand::MotorId>(m);
    const auto count = state_.motors[m].encoder_count;
    const double tension = tendon_tension(m, count);
    const auto tensions = hand::distribute_tension(config_.tendons, id, tension);
    if (id == hand::MotorId::Coupled) {
      std::array<std::int64_t, hand::kCoupledFingerCount> limits{};
      for (std::size_t i = 0; i < limits.size(); ++i) {
        limits[i] = config_.finger_limits[hand::index_of(hand::kCoupledFingers[i])];
      }
      const auto split = hand::split_coupled_displacement(count, limits);
      for (std::size_t i = 0; i < hand::kCoupledFingerCount; ++i) {
        const auto f = hand::kCoupledFingers[i];
        state_.fingers[hand::index_of(f)] = hand::make_finger_state(
            clamp_steps(split.fingers[i]), tensions[i].tension, config_.kinematics);
      }
      const double mm_middle = config_.tendons.steps_to_mm(id, static_cast<double>(split.fingers[0]));
      const double mm_ring = config_.tendons.steps_to_mm(id, static_cast<double>(split.fingers[1]));
      state_.pulley_block_offset = 0.5 * (mm_middle + mm_ring);
    } else {
      const auto f = tensions.front().finger;
      state_.fingers[hand::index_of(f)] =
          hand::make_finger_state(clamp_steps(count), tensions.front().tension, config_.kinematics);
    }
  }
}

ClosingResult close_finger(hand::MotorId group, const SimulationConfig& config, std::int64_t target,
                           bool record_trajectory) {
  if (target < 0) {
    target = full_close_target(group);
  }
  HandSimulator sim(config);
  ClosingResult result;
  const auto m = hand::index_of(group);
  const auto error = [&] {
    return std::abs(static_cast<double>(target - sim.state().motors[m].encoder_count));
  };
  if (record_trajectory) result.trajectory.push_back(sim.state());
  if (error() < config.settle_threshold) {
    result.success = true;
    result.closing_time = 0.0;
    return result;
  }
  sim.command_position(group, target);
  const auto max_ticks = static_cast<std::uint64_t>(std::llround(config.timeout_s * kLoopRateHz));
  while (sim.ticks() < max_ticks) {
    sim.tick();
    if (record_trajectory) result.trajectory.push_back(sim.state());
    if (error() < config.settle_threshold) {
      result.success = true;
      result.closing_time = sim.time();
      return result;
    }
  }
  return result;
}

CalibrationResult calibrate_closing_times(SimulationConfig base, const ClosingTargets& targets) {
  base.validate();
  CalibrationResult result;
  const double no_load =
      rad_per_s_to_steps_per_s(base.supply_voltage / base.plant.back_emf_constant / base.plant.gear_ratio);

  for (std::size_t m = 0; m < hand::kMotorCount; ++m) {
    const auto group = static_cast<hand::MotorId>(m);
    auto time_at = [&](double v_max) {
      SimulationConfig trial = base;
      trial.controllers[m].max_velocity = v_max;
      const auto r = close_finger(group, trial, -1, false);
      return r.closing_time.value_or(trial.timeout_s * 2.0);
    };
    // Closing time decreases monotonically with the velocity limit.
    double lo = 1000.0;
    double hi = 0.98 * no_load;
    for (int it = 0; it < 60 && hi - lo > 1.0; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (time_at(mid) > targets.seconds[m]) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    const double t_lo = time_at(lo);
    const double t_hi = time_at(hi);
    const double best = std::abs(t_lo - targets.seconds[m]) <= std::abs(t_hi - targets.seconds[m]) ? lo : hi;
    base.controllers[m].max_velocity = best;
    result.max_velocity[m] = best;
    result.closing_time[m] = time_at(best);
  }
  result.config = base;
  return result;
}

}  // namespace fvhand::motion
