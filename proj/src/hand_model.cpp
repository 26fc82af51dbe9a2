#include "fvhand/hand_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace fvhand::hand {

namespace {

constexpr std::array<Finger, 1> kThumbRoute = {Finger::Thumb};
constexpr std::array<Finger, 1> kIndexRoute = {Finger::Index};

void check_displacement(double steps) {
  if (!(steps >= 0.0 && steps <= static_cast<double>(kFingerFullClose))) {
    throw std::out_of_range("finger displacement " + std::to_string(steps) +
                            " outside [0, 60000] step-equivalents");
  }
}

}  // namespace

std::string_view finger_name(Finger f) {
  switch (f) {
    case Finger::Thumb: return "thumb";
    case Finger::Index: return "index";
    case Finger::Middle: return "middle";
    case Finger::Ring: return "ring";
    case Finger::Little: return "little";
  }
  return "?";
}

std::string_view motor_name(MotorId m) {
  switch (m) {
    case MotorId::Thumb: return "thumb";
    case MotorId::Index: return "index";
    case MotorId::Coupled: return "coupled";
  }
  return "?";
}

std::span<const Finger> TendonNetwork::driven_fingers(MotorId motor) {
  switch (motor) {
    case MotorId::Thumb: return kThumbRoute;
    case MotorId::Index: return kIndexRoute;
    case MotorId::Coupled: return kCoupledFingers;
  }
  throw std::invalid_argument("unknown motor id");
}

MotorId TendonNetwork::driver_of(Finger finger) {
  switch (finger) {
    case Finger::Thumb: return MotorId::Thumb;
    case Finger::Index: return MotorId::Index;
    case Finger::Middle:
    case Finger::Ring:
    case Finger::Little: return MotorId::Coupled;
  }
  throw std::invalid_argument("unknown finger id");
}

double TendonNetwork::steps_to_mm(MotorId motor, double steps) const {
  const double revs = steps / static_cast<double>(kStepsPerPulleyRev);
  return revs * 2.0 * std::numbers::pi * pulley_radius_mm[index_of(motor)];
}

std::vector<FingerTension> distribute_tension(const TendonNetwork& network, MotorId motor,
                                              double motor_tension) {
  if (!(motor_tension >= 0.0) || !std::isfinite(motor_tension)) {
    throw std::invalid_argument("tendon tension must be finite and non-negative");
  }
  if (motor != MotorId::Coupled) {
    return {{TendonNetwork::driven_fingers(motor).front(), motor_tension}};
  }
  double eta = 1.0;
  if (network.friction_enabled) {
    eta = network.roller_efficiency;
    if (!(eta > 0.0 && eta <= 1.0)) {
      throw std::invalid_argument("roller efficiency must lie in (0, 1]");
    }
  }
  // Roller A: motor side T, little-finger side eta*T. Roller B carries T2 on
  // the middle side and eta*T2 on the ring side. The floating block balances
  // (1 + eta) * T2 against (1 + eta) * T, so T2 = T.
  const double t2 = motor_tension;
  return {{Finger::Middle, t2},
          {Finger::Ring, eta * t2},
          {Finger::Little, eta * motor_tension}};
}

std::int64_t coupled_displacement(std::span<const std::int64_t, kCoupledFingerCount> fingers) {
  std::int64_t total = 0;
  for (const auto d : fingers) {
    if (d < 0 || d > kFingerFullClose) {
      throw std::out_of_range("coupled finger displacement " + std::to_string(d) +
                              " outside [0, 60000]");
    }
    total += d;
  }
  return total;
}

CoupledSplit split_coupled_displacement(
    std::int64_t motor_steps, std::span<const std::int64_t, kCoupledFingerCount> limits) {
  CoupledSplit split;
  if (motor_steps <= 0) {
    return split;  // slack tendon
  }
  std::array<std::size_t, kCoupledFingerCount> order{};
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return limits[a] < limits[b]; });

  std::int64_t remaining = motor_steps;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto idx = order[k];
    const auto sharers = static_cast<std::int64_t>(order.size() - k);
    const std::int64_t fair = (remaining + sharers - 1) / sharers;
    const std::int64_t give = std::min({fair, std::max<std::int64_t>(limits[idx], 0), remaining});
    split.fingers[idx] = give;
    remaining -= give;
  }
  split.overtravel = remaining;
  return split;
}

JointAngles finger_kinematics(double tendon_steps, const KinematicsConfig& config) {
  check_displacement(tendon_steps);
  const double full = static_cast<double>(kFingerFullClose);
  const double knee = config.mcp_share * full;
  JointAngles angles;
  if (tendon_steps <= knee) {
    angles.mcp = config.mcp_max * tendon_steps / knee;
  } else {
    angles.mcp = config.mcp_max;
    angles.pip = config.pip_max * (tendon_steps - knee) / (full - knee);
  }
  return angles;
}

double tendon_displacement_for(const JointAngles& angles, const KinematicsConfig& config) {
  if (angles.mcp < 0.0 || angles.mcp > config.mcp_max || angles.pip < 0.0 ||
      angles.pip > config.pip_max) {
    throw std::out_of_range("joint angles outside configured limits");
  }
  const double full = static_cast<double>(kFingerFullClose);
  return angles.mcp / config.mcp_max * config.mcp_share * full +
         angles.pip / config.pip_max * (1.0 - config.mcp_share) * full;
}

FingerState make_finger_state(double tendon_steps, double tension, const KinematicsConfig& config) {
  if (tension < 0.0) {
    throw std::invalid_argument("tendon tension must be non-negative");
  }
  const auto angles = finger_kinematics(tendon_steps, config);
  FingerState s;
  s.mcp_angle = angles.mcp;
  s.pip_angle = angles.pip;
  s.tendon_displacement = tendon_steps;
  s.closing_angle = angles.mcp + angles.pip;
  s.tendon_tension = tension;
  return s;
}

HandGeometry::HandGeometry() {
  auto at = [](double x, double y, double z, double yaw) {
    Eigen::Isometry3d t = Eigen::Isometry3d::Identity();
    t.translate(Eigen::Vector3d(x, y, z));
    t.rotate(Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()));
    return t;
  };
  // Thumb opposes the four fingers across the palm.
  mcp_frames[index_of(Finger::Thumb)] = at(40.0, 0.0, 0.0, std::numbers::pi);
  mcp_frames[index_of(Finger::Index)] = at(0.0, 27.0, 0.0, 0.0);
  mcp_frames[index_of(Finger::Middle)] = at(0.0, 9.0, 0.0, 0.0);
  mcp_frames[index_of(Finger::Ring)] = at(0.0, -9.0, 0.0, 0.0);
  mcp_frames[index_of(Finger::Little)] = at(0.0, -27.0, 0.0, 0.0);
}

Pose fingertip_camera_pose(const FingerState& finger, Finger id, const HandGeometry& geometry) {
  if (!std::isfinite(finger.mcp_angle) || !std::isfinite(finger.pip_angle) ||
      finger.mcp_angle < 0.0 || finger.pip_angle < 0.0) {
    throw std::invalid_argument("invalid finger state");
  }
  // Planar chain in the local x-z plane; flexion rotates about +y, which
  // maps +x onto (cos a, 0, -sin a).
  const double a = finger.mcp_angle;
  const double b = finger.mcp_angle + finger.pip_angle;
  const Eigen::Vector3d local_tip(
      geometry.proximal_length_mm * std::cos(a) + geometry.distal_length_mm * std::cos(b), 0.0,
      -(geometry.proximal_length_mm * std::sin(a) + geometry.distal_length_mm * std::sin(b)));
  const Eigen::Matrix3d local_rot = Eigen::AngleAxisd(b, Eigen::Vector3d::UnitY()).toRotationMatrix();

  const auto& base = geometry.mcp_frames[index_of(id)];
  Pose pose;
  pose.position = base * local_tip;
  pose.orientation = base.linear() * local_rot;
  return pose;
}

}  // namespace fvhand::hand
