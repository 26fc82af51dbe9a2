#include "fvhand/hand_model.hpp"

#include "doctest.h"

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

using namespace fvhand::hand;

namespace {

constexpr double kHalfPi = std::numbers::pi / 2;

// Tabulates the two-phase curve by walking the tendon one step at a time:
// the MCP joint takes the first 60 % of the travel, the PIP joint the rest.
JointAngles walk_curve(int steps) {
  const int knee = 36000;
  JointAngles a;
  for (int s = 1; s <= steps; ++s) {
    if (s <= knee) {
      a.mcp += kHalfPi / knee;
    } else {
      a.pip += kHalfPi / (60000 - knee);
    }
  }
  return a;
}

}  // namespace

TEST_CASE("kinematics endpoints and midpoint") {
  auto a = finger_kinematics(0);
  CHECK(a.mcp == 0.0);
  CHECK(a.pip == 0.0);
  a = finger_kinematics(60000);
  CHECK(a.mcp == doctest::Approx(kHalfPi));
  CHECK(a.pip == doctest::Approx(kHalfPi));
  for (int s : {1000, 30000, 36000, 48000, 59999}) {
    const auto got = finger_kinematics(s);
    const auto want = walk_curve(s);
    CHECK(got.mcp == doctest::Approx(want.mcp).epsilon(1e-9));
    CHECK(got.pip == doctest::Approx(want.pip).epsilon(1e-9));
  }
}

TEST_CASE("kinematics is monotone and invertible") {
  JointAngles prev;
  for (int s = 0; s <= 60000; s += 250) {
    const auto a = finger_kinematics(s);
    CHECK(a.mcp >= prev.mcp);
    CHECK(a.pip >= prev.pip);
    CHECK(a.mcp <= kHalfPi + 1e-12);
    CHECK(a.pip <= kHalfPi + 1e-12);
    CHECK(tendon_displacement_for(a) == doctest::Approx(s).epsilon(1e-9));
    prev = a;
  }
  CHECK_THROWS_AS(finger_kinematics(-1), std::out_of_range);
  CHECK_THROWS_AS(finger_kinematics(60001), std::out_of_range);
  CHECK_THROWS_AS(tendon_displacement_for({2.0, 0.0}), std::out_of_range);
}

TEST_CASE("custom joint limits and MCP share") {
  KinematicsConfig c;
  c.mcp_max = 1.2;
  c.pip_max = 0.8;
  c.mcp_share = 0.5;
  const auto a = finger_kinematics(45000, c);
  CHECK(a.mcp == doctest::Approx(1.2));
  CHECK(a.pip == doctest::Approx(0.8 * 15000.0 / 30000.0));
}

TEST_CASE("coupled displacement is the sum of the fingers") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::int64_t> d(0, kFingerFullClose);
  for (int i = 0; i < 1000; ++i) {
    const std::array<std::int64_t, 3> f{d(rng), d(rng), d(rng)};
    CHECK(coupled_displacement(f) == f[0] + f[1] + f[2]);
  }
  const std::array<std::int64_t, 3> full{60000, 60000, 60000};
  CHECK(coupled_displacement(full) == kCoupledFullClose);
  const std::array<std::int64_t, 3> bad{0, -1, 0};
  CHECK_THROWS_AS(coupled_displacement(bad), std::out_of_range);
}

TEST_CASE("coupled split shares equally until a finger stops") {
  const std::array<std::int64_t, 3> free{60000, 60000, 60000};
  auto s = split_coupled_displacement(90000, free);
  CHECK(s.fingers == std::array<std::int64_t, 3>{30000, 30000, 30000});
  CHECK(s.overtravel == 0);

  // Ring finger blocked by an object at 10000 steps.
  const std::array<std::int64_t, 3> blocked{60000, 10000, 60000};
  s = split_coupled_displacement(90000, blocked);
  CHECK(s.fingers[1] == 10000);
  CHECK(s.fingers[0] == 40000);
  CHECK(s.fingers[2] == 40000);

  s = split_coupled_displacement(200000, free);
  CHECK(s.fingers == free);
  CHECK(s.overtravel == 20000);

  s = split_coupled_displacement(-500, free);
  CHECK(s.fingers == std::array<std::int64_t, 3>{0, 0, 0});

  std::mt19937_64 rng(9);
  std::uniform_int_distribution<std::int64_t> lim(0, 60000), mot(0, 200000);
  for (int i = 0; i < 2000; ++i) {
    const std::array<std::int64_t, 3> l{lim(rng), lim(rng), lim(rng)};
    const auto m = mot(rng);
    s = split_coupled_displacement(m, l);
    CHECK(s.fingers[0] + s.fingers[1] + s.fingers[2] + s.overtravel == m);
    for (int k = 0; k < 3; ++k) CHECK(s.fingers[k] <= l[k]);
  }
}

TEST_CASE("ideal tendon network gives every finger the motor tension") {
  TendonNetwork net;
  for (double t : {0.0, 1.5, 12.0}) {
    const auto c = distribute_tension(net, MotorId::Coupled, t);
    REQUIRE(c.size() == 3);
    for (const auto& ft : c) CHECK(ft.tension == t);
    const auto th = distribute_tension(net, MotorId::Thumb, t);
    REQUIRE(th.size() == 1);
    CHECK(th[0].finger == Finger::Thumb);
    CHECK(th[0].tension == t);
  }
  CHECK_THROWS_AS(distribute_tension(net, MotorId::Index, -1.0), std::invalid_argument);
}

TEST_CASE("roller friction lowers tension past each roller") {
  TendonNetwork net;
  net.friction_enabled = true;
  net.roller_efficiency = 0.9;
  const auto c = distribute_tension(net, MotorId::Coupled, 10.0);
  CHECK(c[0].tension == doctest::Approx(10.0));
  CHECK(c[1].tension == doctest::Approx(9.0));
  CHECK(c[2].tension == doctest::Approx(9.0));
  for (const auto& ft : c) CHECK(ft.tension >= 0.0);
  net.roller_efficiency = 0.0;
  CHECK_THROWS_AS(distribute_tension(net, MotorId::Coupled, 1.0), std::invalid_argument);
}

TEST_CASE("fingertip pose matches composed joint transforms") {
  const HandGeometry g;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ang(0.0, kHalfPi);
  for (Finger f : kAllFingers) {
    for (int i = 0; i < 20; ++i) {
      FingerState s;
      s.mcp_angle = ang(rng);
      s.pip_angle = ang(rng);
      Eigen::Isometry3d t = g.mcp_frames[index_of(f)];
      t.rotate(Eigen::AngleAxisd(s.mcp_angle, Eigen::Vector3d::UnitY()));
      t.translate(Eigen::Vector3d(g.proximal_length_mm, 0, 0));
      t.rotate(Eigen::AngleAxisd(s.pip_angle, Eigen::Vector3d::UnitY()));
      t.translate(Eigen::Vector3d(g.distal_length_mm, 0, 0));
      const auto pose = fingertip_camera_pose(s, f, g);
      CHECK((pose.position - t.translation()).norm() < 1e-9);
      CHECK((pose.orientation - t.linear()).norm() < 1e-12);
      CHECK((pose.optical_axis() - t.linear().col(0)).norm() < 1e-12);
    }
  }
}

TEST_CASE("straight finger reaches 100 mm and flexes towards the palm") {
  const HandGeometry g;
  FingerState open;
  const auto p = fingertip_camera_pose(open, Finger::Index, g);
  CHECK(p.position.x() == doctest::Approx(100.0));
  CHECK(p.position.y() == doctest::Approx(27.0));
  FingerState bent;
  bent.mcp_angle = kHalfPi;
  const auto q = fingertip_camera_pose(bent, Finger::Index, g);
  CHECK(q.position.z() == doctest::Approx(-100.0));
  CHECK_THROWS_AS(fingertip_camera_pose(FingerState{-0.1, 0, 0, 0, 0}, Finger::Index, g), std::invalid_argument);
}

TEST_CASE("finger state carries tension and closing angle") {
  const auto s = make_finger_state(48000, 2.5);
  CHECK(s.closing_angle == doctest::Approx(s.mcp_angle + s.pip_angle));
  CHECK(s.tendon_tension == 2.5);
  CHECK_THROWS_AS(make_finger_state(100, -1.0), std::invalid_argument);
}
