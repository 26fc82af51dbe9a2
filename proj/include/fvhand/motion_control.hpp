#pragma once

// Simulated low-level motor controller: quadrature encoder counting, a
// brushed DC motor with 23:1 planetary gear, a cascaded position/velocity PID
// at 1 kHz with PWM duty quantized to 1/3000, and the three-button panel.

#include "fvhand/hand_model.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

namespace fvhand::motion {

inline constexpr std::int64_t kEncoderLines = 512;
inline constexpr std::int64_t kQuadratureEdges = 4;
inline constexpr std::int64_t kGearRatio = 23;
inline constexpr std::int64_t kStepsPerRev = kEncoderLines * kQuadratureEdges * kGearRatio;
static_assert(kStepsPerRev == 47104);
static_assert(kStepsPerRev == hand::kStepsPerPulleyRev);

inline constexpr int kPwmResolution = 3000;
inline constexpr double kLoopRateHz = 1000.0;
inline constexpr double kTickSeconds = 1.0 / kLoopRateHz;
inline constexpr double kPlantSubstepSeconds = 1e-4;

struct MotorState {
  std::int64_t encoder_count = 0;
  double angular_velocity = 0.0;  // rad/s, output shaft
  int pwm_duty = 0;               // numerator over kPwmResolution
  double current = 0.0;           // A
  double supply_voltage = 12.0;   // V
};

// Accumulates output-shaft rotation into whole encoder steps. The sub-step
// remainder is carried between calls so partitioning an interval never
// changes the total count.
class EncoderCounter {
 public:
  std::int64_t update(double angular_velocity, double dt);
  std::int64_t count() const { return emitted_; }
  double position_steps() const { return sum_ + compensation_; }

 private:
  double sum_ = 0.0;
  double compensation_ = 0.0;
  std::int64_t emitted_ = 0;
};

double rad_per_s_to_steps_per_s(double angular_velocity);
double steps_per_s_to_rad_per_s(double steps_per_s);

struct PidGains {
  double kp = 0.0;
  double ki = 0.0;
  double kd = 0.0;
};

struct ControllerConfig {
  PidGains position{50.0, 0.0, 0.0};   // steps -> steps/s
  PidGains velocity{0.01, 2.5, 0.0};   // steps/s -> duty
  double loop_rate_hz = kLoopRateHz;
  // Bound on |ki * integral| in the loop's output units.
  double position_integrator_clamp = 20000.0;
  double velocity_integrator_clamp = 3000.0;
  double max_velocity = 150000.0;  // steps/s, outer-loop setpoint clamp
  std::int64_t steps_per_rev = kStepsPerRev;

  void validate() const;
};

// Parallel-form discrete PID with a clamped integrator.
class Pid {
 public:
  Pid() = default;
  Pid(PidGains gains, double integrator_clamp) : gains_(gains), clamp_(integrator_clamp) {}

  double step(double error, double dt);
  void reset();

 private:
  PidGains gains_;
  double clamp_ = 0.0;
  double integral_ = 0.0;
  double previous_error_ = 0.0;
};

class CascadeController {
 public:
  explicit CascadeController(ControllerConfig config = {});

  // Position mode: outer loop produces the velocity setpoint.
  int step(std::int64_t target_position, const MotorState& state);
  // Velocity mode: the outer loop is bypassed.
  int step_velocity(double velocity_setpoint, const MotorState& state);

  bool faulted() const { return faulted_; }
  void reset();
  const ControllerConfig& config() const { return config_; }

 private:
  int inner(double velocity_setpoint, const MotorState& state);

  ControllerConfig config_;
  Pid outer_;
  Pid inner_;
  bool faulted_ = false;
};

struct MotorPlantParams {
  double terminal_resistance = 1.94;   // ohm
  double torque_constant = 0.0134;     // N*m/A
  double back_emf_constant = 0.0134;   // V*s/rad
  double rotor_inertia = 4.2e-7;       // kg*m^2, rotor plus gear input
  double viscous_friction = 3.5e-7;    // N*m*s/rad
  double gear_ratio = static_cast<double>(kGearRatio);

  void validate() const;
};

struct PlantOutput {
  double angular_velocity = 0.0;  // rad/s, output shaft
  double current = 0.0;           // A
};

// Advances the motor by dt (at most one control tick) with explicit Euler
// sub-steps of 0.1 ms. `load_torque` acts on the output shaft and opposes
// positive rotation.
PlantOutput motor_plant_step(const MotorState& state, int duty, double load_torque, double dt,
                             const MotorPlantParams& params);

enum class DriveState : std::uint8_t { Idle = 0, Close = 1, Stop = 2, Open = 3 };
enum class ButtonAction : std::uint8_t { Press = 0, Release = 1 };

const char* drive_state_name(DriveState s);

struct MotorCommand {
  hand::MotorId motor;
  DriveState state;
  // Velocity setpoint for the cascade, steps/s. Unused when Idle.
  double velocity_setpoint;
};

// Button i (1..3) drives motor i-1 through Idle -> Close -> Stop -> Open -> Idle.
class ButtonPanel {
 public:
  explicit ButtonPanel(double drive_velocity = 100000.0) : drive_velocity_(drive_velocity) {}

  // Throws std::invalid_argument for unknown buttons. Release returns the
  // current command unchanged.
  MotorCommand handle(int button_id, ButtonAction action);
  DriveState state(hand::MotorId motor) const { return states_[hand::index_of(motor)]; }

 private:
  MotorCommand command_for(std::size_t motor) const;

  double drive_velocity_;
  std::array<DriveState, hand::kMotorCount> states_{};
};

struct HandState {
  std::array<hand::FingerState, hand::kFingerCount> fingers{};
  std::array<MotorState, hand::kMotorCount> motors{};
  double pulley_block_offset = 0.0;  // mm
};

struct SimulationConfig {
  MotorPlantParams plant;
  std::array<ControllerConfig, hand::kMotorCount> controllers;
  double supply_voltage = 12.0;
  // Elastic return of one soft finger, tendon tension per mm of tendon travel.
  double finger_stiffness = 0.3;    // N/mm
  double endstop_stiffness = 50.0;  // N/mm beyond a finger's limit
  std::array<std::int64_t, hand::kFingerCount> finger_limits = {
      hand::kFingerFullClose, hand::kFingerFullClose, hand::kFingerFullClose,
      hand::kFingerFullClose, hand::kFingerFullClose};
  hand::TendonNetwork tendons;
  hand::KinematicsConfig kinematics;
  double button_velocity = 100000.0;  // steps/s
  double settle_threshold = 500.0;    // steps
  double timeout_s = 5.0;

  SimulationConfig();
  void validate() const;
};

// Full-close target of a motor in encoder steps.
std::int64_t full_close_target(hand::MotorId motor);

// Deterministic 1 kHz simulation of the three motors and five fingers.
class HandSimulator {
 public:
  explicit HandSimulator(SimulationConfig config = {});

  void command_position(hand::MotorId motor, std::int64_t target);
  void command_velocity(hand::MotorId motor, double steps_per_s);
  void command_idle(hand::MotorId motor);
  // Routes a panel event to the corresponding motor.
  MotorCommand button(int button_id, ButtonAction action);

  void tick();

  const HandState& state() const { return state_; }
  std::uint64_t ticks() const { return ticks_; }
  double time() const { return static_cast<double>(ticks_) * kTickSeconds; }
  const SimulationConfig& config() const { return config_; }
  const ButtonPanel& panel() const { return panel_; }
  bool faulted(hand::MotorId motor) const { return controllers_[hand::index_of(motor)].faulted(); }

 private:
  enum class Mode { Idle, Position, Velocity };
  struct Drive {
    Mode mode = Mode::Idle;
    std::int64_t target = 0;
    double velocity = 0.0;
  };

  double tendon_tension(std::size_t motor, std::int64_t count) const;
  void refresh_fingers();

  SimulationConfig config_;
  HandState state_;
  std::array<CascadeController, hand::kMotorCount> controllers_;
  std::array<EncoderCounter, hand::kMotorCount> encoders_;
  std::array<Drive, hand::kMotorCount> drives_{};
  ButtonPanel panel_;
  std::uint64_t ticks_ = 0;
};

struct ClosingResult {
  bool success = false;
  std::optional<double> closing_time;  // s, first tick with |error| < threshold
  std::vector<HandState> trajectory;   // one entry per tick, starting at t=0
};

// Closes one motor group from the open hand. Fails after config.timeout_s.
ClosingResult close_finger(hand::MotorId group, const SimulationConfig& config = {},
                           std::int64_t target = -1, bool record_trajectory = true);

struct ClosingTargets {
  // Measured thumb / index / coupled closing times of the physical hand.
  std::array<double, hand::kMotorCount> seconds = {0.49, 0.44, 1.22};
};

struct CalibrationResult {
  SimulationConfig config;
  std::array<double, hand::kMotorCount> closing_time{};
  std::array<double, hand::kMotorCount> max_velocity{};
};

// Searches each motor's outer-loop velocity limit by bisection so that the
// simulated closing time matches the target.
CalibrationResult calibrate_closing_times(SimulationConfig base, const ClosingTargets& targets = {});

}  // namespace fvhand::motion
