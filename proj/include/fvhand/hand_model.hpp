#pragma once

// Kinematic and tendon-force model of the five-finger soft hand.
//
// Three motors drive five fingers: thumb and index each have a dedicated
// tendon, middle/ring/little share one motor through a movable two-roller
// pulley block. Displacements are expressed in step-equivalents, i.e. motor
// encoder steps (47104 per pulley revolution); one fully closed finger takes
// 60000 of them.

#include <Eigen/Geometry>

#include <array>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>
#include <vector>

namespace fvhand::hand {

enum class Finger : std::uint8_t { Thumb = 0, Index = 1, Middle = 2, Ring = 3, Little = 4 };
enum class MotorId : std::uint8_t { Thumb = 0, Index = 1, Coupled = 2 };

inline constexpr std::size_t kFingerCount = 5;
inline constexpr std::size_t kMotorCount = 3;
inline constexpr std::size_t kCoupledFingerCount = 3;

inline constexpr std::int64_t kFingerFullClose = 60000;
inline constexpr std::int64_t kCoupledFullClose = kCoupledFingerCount * kFingerFullClose;
inline constexpr std::int64_t kStepsPerPulleyRev = 512 * 4 * 23;

inline constexpr std::array<Finger, kFingerCount> kAllFingers = {
    Finger::Thumb, Finger::Index, Finger::Middle, Finger::Ring, Finger::Little};
inline constexpr std::array<Finger, kCoupledFingerCount> kCoupledFingers = {
    Finger::Middle, Finger::Ring, Finger::Little};

std::string_view finger_name(Finger f);
std::string_view motor_name(MotorId m);

constexpr std::size_t index_of(Finger f) { return static_cast<std::size_t>(f); }
constexpr std::size_t index_of(MotorId m) { return static_cast<std::size_t>(m); }

struct FingerState {
  double mcp_angle = 0.0;            // rad
  double pip_angle = 0.0;            // rad
  double tendon_displacement = 0.0;  // step-equivalents
  double closing_angle = 0.0;        // rad, mcp + pip
  double tendon_tension = 0.0;       // N
};

struct TendonNetwork {
  std::array<double, kMotorCount> pulley_radius_mm = {4.0, 4.0, 4.0};
  bool friction_enabled = false;
  // Tension ratio across one roller of the pulley block, in (0, 1].
  double roller_efficiency = 1.0;

  static std::span<const Finger> driven_fingers(MotorId motor);
  static MotorId driver_of(Finger finger);

  double steps_to_mm(MotorId motor, double steps) const;
};

struct FingerTension {
  Finger finger;
  double tension;  // N
};

// Static tension distribution for a motor pulling with `motor_tension`.
// Ideal (frictionless) contract: every driven finger receives the motor
// tension. With friction enabled the roller efficiency applies per roller:
// the motor tendon crosses roller A and terminates at the little finger,
// middle and ring share the tendon over roller B.
std::vector<FingerTension> distribute_tension(const TendonNetwork& network, MotorId motor,
                                              double motor_tension);

// Motor displacement of the coupled group: the sum of the three finger
// displacements (equal tensions, virtual work T*x_m = sum T*x_i).
std::int64_t coupled_displacement(std::span<const std::int64_t, kCoupledFingerCount> fingers);

// Splits a coupled motor displacement across middle/ring/little. Fingers move
// equally until one reaches its limit (contact or full close); the remainder
// is shared by the others. Whatever exceeds the summed limits is returned in
// `overtravel`.
struct CoupledSplit {
  std::array<std::int64_t, kCoupledFingerCount> fingers{};
  std::int64_t overtravel = 0;
};
CoupledSplit split_coupled_displacement(
    std::int64_t motor_steps,
    std::span<const std::int64_t, kCoupledFingerCount> limits);

struct KinematicsConfig {
  double mcp_max = std::numbers::pi / 2;
  double pip_max = std::numbers::pi / 2;
  // Fraction of the full-close displacement spent flexing the MCP joint
  // before the PIP joint starts to move.
  double mcp_share = 0.6;
};

struct JointAngles {
  double mcp = 0.0;
  double pip = 0.0;
};

// Two-phase piecewise-linear tendon-to-angle map. Throws std::out_of_range
// outside [0, kFingerFullClose].
JointAngles finger_kinematics(double tendon_steps, const KinematicsConfig& config = {});

// Inverse of finger_kinematics on its image; strictly increasing in both angles.
double tendon_displacement_for(const JointAngles& angles, const KinematicsConfig& config = {});

FingerState make_finger_state(double tendon_steps, double tension,
                              const KinematicsConfig& config = {});

struct Pose {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();  // mm, palm frame
  Eigen::Matrix3d orientation = Eigen::Matrix3d::Identity();

  // The camera looks along the distal segment, the local x axis.
  Eigen::Vector3d optical_axis() const { return orientation.col(0); }
};

struct HandGeometry {
  double proximal_length_mm = 55.0;
  double distal_length_mm = 45.0;
  // MCP joint frames in the palm frame. Straight fingers extend along local
  // +x and flex about local +y, towards local -z.
  std::array<Eigen::Isometry3d, kFingerCount> mcp_frames;

  HandGeometry();
};

Pose fingertip_camera_pose(const FingerState& finger, Finger id, const HandGeometry& geometry = {});

}  // namespace fvhand::hand
