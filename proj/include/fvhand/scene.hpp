#pragma once

// Synthetic fingertip-camera imagery. Each object class is a flat-shaded
// superellipse of fixed physical size and hue; it is projected through a
// pinhole camera riding on the distal segment of each finger. The background
// is a muted value-noise texture attached to viewing direction, so it sweeps
// across the image as the finger flexes.
//
// Every camera sees the object from its own side: the run stores one object
// anchor per finger, placed in front of that finger's pose at contact.

#include "fvhand/datapath.hpp"
#include "fvhand/hand_model.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace fvhand::scene {

enum class ObjectClass : std::uint8_t { Bowl = 0, Lemon = 1, Pitcher = 2, Strawberry = 3, Cup = 4 };

inline constexpr std::array<ObjectClass, 5> kAllClasses = {
    ObjectClass::Bowl, ObjectClass::Lemon, ObjectClass::Pitcher, ObjectClass::Strawberry,
    ObjectClass::Cup};

std::string_view class_name(ObjectClass c);
std::optional<ObjectClass> parse_class(std::string_view name);

struct ObjectModel {
  double half_width_mm;
  double half_height_mm;
  double exponent;  // superellipse exponent, 2 = ellipse
  double hue_deg;
  double saturation;
  double value;
  bool speckled;  // small bright seeds (strawberry)
};

const ObjectModel& object_model(ObjectClass c);

struct CameraIntrinsics {
  int width = datapath::kQcifWidth;
  int height = datapath::kQcifHeight;
  double focal_px = 150.0;
};

struct RunGeometry {
  ObjectClass object = ObjectClass::Bowl;
  double size_scale = 1.0;
  double roll = 0.0;              // in-plane object rotation, rad
  double contact_steps = 0.0;     // tendon displacement when the object is reached
  double start_steps = 0.0;       // first recorded displacement
  std::array<Eigen::Vector3d, hand::kFingerCount> anchors;  // object centre per camera, palm frame
  std::uint64_t texture_seed = 0;
};

struct GeometryOptions {
  double contact_min = 0.55;  // fraction of full close
  double contact_max = 0.80;
  double target_radius_min_px = 80.0;  // apparent object radius at contact (QCIF)
  double target_radius_max_px = 105.0;
  double start_coverage_min = 0.02;  // mean coverage of the first frame
  double start_coverage_max = 0.10;
};

// Draws a run layout and chooses the start displacement by scanning back from
// contact until the mean camera coverage drops below a random target.
RunGeometry make_run_geometry(ObjectClass object, std::mt19937_64& rng,
                              const GeometryOptions& options = {},
                              const CameraIntrinsics& camera = {},
                              const hand::HandGeometry& hand_geometry = {});

struct RenderOptions {
  CameraIntrinsics camera;
  bool gain_distortion = true;
  double distortion_onset = 0.75;  // coverage where colours start to degrade
  double noise_sigma = 3.0;        // sensor noise, 8-bit levels
};

// Ground-truth footprint sampled at the centres of the 2x2-downsampled grid.
std::vector<std::uint8_t> object_mask(const RunGeometry& run, hand::Finger finger, double steps,
                                      const CameraIntrinsics& camera = {},
                                      const hand::HandGeometry& hand_geometry = {});

double coverage(std::span<const std::uint8_t> mask);
double mean_coverage(const RunGeometry& run, double steps, const CameraIntrinsics& camera = {});

// Distortion strength in [0, 1] for a view with the given coverage.
double distortion_strength(double coverage, const RenderOptions& options);

struct View {
  datapath::Frame image;           // 88x72 RGB888, via RGB565 and 2x2 downsampling
  std::vector<std::uint8_t> mask;  // 88x72, 1 = object
  double coverage = 0.0;
};

View render_view(const RunGeometry& run, hand::Finger finger, double steps,
                 const RenderOptions& options, std::uint64_t noise_seed,
                 std::uint32_t frame_counter = 0,
                 const hand::HandGeometry& hand_geometry = {});

// Camera-resolution RGB888 image before the datapath (for serve and replay).
datapath::Frame render_qcif(const RunGeometry& run, hand::Finger finger, double steps,
                            const RenderOptions& options, std::uint64_t noise_seed,
                            std::uint32_t frame_counter = 0,
                            const hand::HandGeometry& hand_geometry = {});

}  // namespace fvhand::scene
