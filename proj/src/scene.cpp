#include "fvhand/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace fvhand::scene {

namespace {

using hand::Finger;

// mt19937_64 is fully specified; the standard distributions are not, so
// draws go through these helpers to keep datasets identical across toolchains.
double uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform(rng); }
double gaussian(std::mt19937_64& rng) {
  // Irwin-Hall approximation, variance 1.
  double s = 0.0;
  for (int i = 0; i < 12; ++i) s += uniform(rng);
  return s - 6.0;
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double lattice(std::uint64_t seed, std::int64_t x, std::int64_t y, std::int64_t z) {
  std::uint64_t h = mix64(seed ^ static_cast<std::uint64_t>(x) * 0x8cb92ba72f3d8dd7ULL);
  h = mix64(h ^ static_cast<std::uint64_t>(y) * 0xd6e8feb86659fd93ULL);
  h = mix64(h ^ static_cast<std::uint64_t>(z) * 0xa0761d6478bd642fULL);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

double value_noise(std::uint64_t seed, const Eigen::Vector3d& p) {
  const double fx = std::floor(p.x()), fy = std::floor(p.y()), fz = std::floor(p.z());
  const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy),
             iz = static_cast<std::int64_t>(fz);
  const double tx = smooth(p.x() - fx), ty = smooth(p.y() - fy), tz = smooth(p.z() - fz);
  double acc = 0.0;
  for (int c = 0; c < 8; ++c) {
    const int dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
    const double w = (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty) * (dz ? tz : 1 - tz);
    acc += w * lattice(seed, ix + dx, iy + dy, iz + dz);
  }
  return acc;
}

double fbm(std::uint64_t seed, Eigen::Vector3d p) {
  double sum = 0.0, amp = 0.5;
  for (int o = 0; o < 3; ++o) {
    sum += amp * value_noise(seed + o, p);
    p *= 2.03;
    amp *= 0.5;
  }
  return sum / 0.875;
}

struct Rgb {
  double r, g, b;
};

Rgb hsv(double hue_deg, double s, double v) {
  const double h = std::fmod(std::fmod(hue_deg, 360.0) + 360.0, 360.0) / 60.0;
  const double c = v * s;
  const double x = c * (1.0 - std::fabs(std::fmod(h, 2.0) - 1.0));
  const double m = v - c;
  Rgb o{0, 0, 0};
  switch (static_cast<int>(h)) {
    case 0: o = {c, x, 0}; break;
    case 1: o = {x, c, 0}; break;
    case 2: o = {0, c, x}; break;
    case 3: o = {0, x, c}; break;
    case 4: o = {x, 0, c}; break;
    default: o = {c, 0, x}; break;
  }
  return {(o.r + m) * 255.0, (o.g + m) * 255.0, (o.b + m) * 255.0};
}

Rgb lerp(const Rgb& a, const Rgb& b, double t) {
  return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

struct CameraFrame {
  Eigen::Vector3d position, forward, right, up;
};

CameraFrame camera_frame(double steps, Finger finger, const hand::HandGeometry& geometry) {
  const double s = std::clamp(steps, 0.0, static_cast<double>(hand::kFingerFullClose));
  const auto pose = hand::fingertip_camera_pose(hand::make_finger_state(s, 0.0), finger, geometry);
  return {pose.position, pose.orientation.col(0), pose.orientation.col(1), pose.orientation.col(2)};
}

// Object footprint in image coordinates (continuous, pixel corners at integers).
struct Footprint {
  bool visible = false;
  double uc = 0, vc = 0, ru = 1, rv = 1, cos_r = 1, sin_r = 0, exponent = 2;

  // Superellipse radius: < 1 inside.
  double radius(double u, double v) const {
    const double dx = u - uc, dy = v - vc;
    const double x = (dx * cos_r + dy * sin_r) / ru;
    const double y = (-dx * sin_r + dy * cos_r) / rv;
    return std::pow(std::pow(std::fabs(x), exponent) + std::pow(std::fabs(y), exponent),
                    1.0 / exponent);
  }
  // Normalized object coordinates, for surface texture.
  std::pair<double, double> local(double u, double v) const {
    const double dx = u - uc, dy = v - vc;
    return {(dx * cos_r + dy * sin_r) / ru, (-dx * sin_r + dy * cos_r) / rv};
  }
};

constexpr double kMinDepthMm = 2.0;

Footprint project(const RunGeometry& run, const CameraFrame& cam, Finger finger,
                  const CameraIntrinsics& k) {
  Footprint fp;
  const Eigen::Vector3d p = run.anchors[hand::index_of(finger)] - cam.position;
  const double depth = p.dot(cam.forward);
  if (depth < kMinDepthMm) return fp;
  const ObjectModel& m = object_model(run.object);
  fp.visible = true;
  fp.uc = k.width / 2.0 + k.focal_px * p.dot(cam.right) / depth;
  fp.vc = k.height / 2.0 - k.focal_px * p.dot(cam.up) / depth;
  fp.ru = k.focal_px * m.half_width_mm * run.size_scale / depth;
  fp.rv = k.focal_px * m.half_height_mm * run.size_scale / depth;
  fp.cos_r = std::cos(run.roll);
  fp.sin_r = std::sin(run.roll);
  fp.exponent = m.exponent;
  return fp;
}

Eigen::Vector3d view_ray(const CameraFrame& cam, const CameraIntrinsics& k, double u, double v) {
  return (cam.forward * k.focal_px + cam.right * (u - k.width / 2.0) +
          cam.up * (k.height / 2.0 - v))
      .normalized();
}

Rgb background(std::uint64_t seed, const Eigen::Vector3d& dir) {
  const double n1 = fbm(seed, dir * 3.0);
  const double n2 = fbm(seed ^ 0x5555, dir * 9.0);
  const Rgb tan{128, 116, 98}, moss{72, 84, 76}, light{168, 164, 158};
  Rgb c = lerp(tan, moss, std::clamp((n1 - 0.35) * 2.2, 0.0, 1.0));
  return lerp(c, light, std::clamp((n2 - 0.55) * 3.0, 0.0, 0.8));
}

Rgb object_colour(const RunGeometry& run, const Footprint& fp, double u, double v, double r) {
  const ObjectModel& m = object_model(run.object);
  const double hue = m.hue_deg + 8.0 * (static_cast<double>(run.texture_seed % 1000) / 500.0 - 1.0);
  const double shade = 0.62 + 0.38 * std::sqrt(std::max(0.0, 1.0 - r * r));
  Rgb c = hsv(hue, m.saturation, m.value * shade);
  const auto [x, y] = fp.local(u, v);
  if (m.speckled) {
    const double cell = 0.16;
    const double gx = std::floor(x / cell), gy = std::floor(y / cell);
    const double cx = (gx + 0.5) * cell, cy = (gy + 0.5) * cell;
    if (lattice(run.texture_seed, static_cast<std::int64_t>(gx), static_cast<std::int64_t>(gy), 7) <
            0.45 &&
        std::hypot(x - cx, y - cy) < 0.035) {
      c = Rgb{225, 205, 110};
    }
  }
  const double hl = std::exp(-((x + 0.35) * (x + 0.35) + (y + 0.4) * (y + 0.4)) / 0.03);
  return lerp(c, Rgb{250, 250, 250}, 0.55 * hl);
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

const hand::HandGeometry& default_hand() {
  static const hand::HandGeometry g;
  return g;
}

}  // namespace

std::string_view class_name(ObjectClass c) {
  switch (c) {
    case ObjectClass::Bowl: return "bowl";
    case ObjectClass::Lemon: return "lemon";
    case ObjectClass::Pitcher: return "pitcher";
    case ObjectClass::Strawberry: return "strawberry";
    case ObjectClass::Cup: return "cup";
  }
  return "unknown";
}

std::optional<ObjectClass> parse_class(std::string_view name) {
  for (ObjectClass c : kAllClasses) {
    if (class_name(c) == name) return c;
  }
  return std::nullopt;
}

const ObjectModel& object_model(ObjectClass c) {
  static const std::array<ObjectModel, 5> models = {{
      {46.0, 30.0, 2.6, 4.0, 0.78, 0.80, false},     // bowl
      {30.0, 23.0, 2.0, 52.0, 0.85, 0.95, false},    // lemon
      {38.0, 52.0, 3.4, 212.0, 0.70, 0.78, false},   // pitcher
      {24.0, 28.0, 1.8, 352.0, 0.82, 0.82, true},    // strawberry
      {34.0, 38.0, 4.0, 150.0, 0.60, 0.72, false},   // cup
  }};
  return models[static_cast<std::size_t>(c)];
}

std::vector<std::uint8_t> object_mask(const RunGeometry& run, Finger finger, double steps,
                                      const CameraIntrinsics& camera,
                                      const hand::HandGeometry& hand_geometry) {
  const int w = camera.width / 2, h = camera.height / 2;
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(w) * h, 0);
  const Footprint fp = project(run, camera_frame(steps, finger, hand_geometry), finger, camera);
  if (!fp.visible) return mask;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // centre of the 2x2 block in camera pixel coordinates
      mask[static_cast<std::size_t>(y) * w + x] = fp.radius(2.0 * x + 1.0, 2.0 * y + 1.0) < 1.0;
    }
  }
  return mask;
}

double coverage(std::span<const std::uint8_t> mask) {
  if (mask.empty()) return 0.0;
  std::size_t n = 0;
  for (std::uint8_t m : mask) n += m != 0;
  return static_cast<double>(n) / static_cast<double>(mask.size());
}

double mean_coverage(const RunGeometry& run, double steps, const CameraIntrinsics& camera) {
  double sum = 0.0;
  for (Finger f : hand::kAllFingers) sum += coverage(object_mask(run, f, steps, camera, default_hand()));
  return sum / static_cast<double>(hand::kFingerCount);
}

double distortion_strength(double cov, const RenderOptions& options) {
  if (!options.gain_distortion || options.distortion_onset >= 1.0) return 0.0;
  return std::clamp((cov - options.distortion_onset) / (1.0 - options.distortion_onset), 0.0, 1.0);
}

RunGeometry make_run_geometry(ObjectClass object, std::mt19937_64& rng,
                              const GeometryOptions& options, const CameraIntrinsics& camera,
                              const hand::HandGeometry& hand_geometry) {
  if (!(options.contact_min > 0.0 && options.contact_min <= options.contact_max &&
        options.contact_max <= 1.0)) {
    throw std::invalid_argument("contact range must lie in (0, 1]");
  }
  RunGeometry run;
  run.object = object;
  run.size_scale = uniform(rng, 0.9, 1.1);
  run.roll = uniform(rng, -0.5, 0.5);
  run.contact_steps =
      std::round(uniform(rng, options.contact_min, options.contact_max) * hand::kFingerFullClose);
  run.texture_seed = rng();
  const ObjectModel& m = object_model(object);
  const double half_size = 0.5 * (m.half_width_mm + m.half_height_mm) * run.size_scale;
  for (Finger f : hand::kAllFingers) {
    const CameraFrame cam = camera_frame(run.contact_steps, f, hand_geometry);
    const double radius_px =
        uniform(rng, options.target_radius_min_px, options.target_radius_max_px);
    const double depth = camera.focal_px * half_size / radius_px;
    const double jx = uniform(rng, -0.12, 0.12) * depth;
    const double jy = uniform(rng, -0.12, 0.12) * depth;
    run.anchors[hand::index_of(f)] = cam.position + cam.forward * depth + cam.right * jx + cam.up * jy;
  }
  const double start_target =
      uniform(rng, options.start_coverage_min, options.start_coverage_max);
  constexpr double kScanStep = 250.0;
  run.start_steps = 0.0;
  for (double s = run.contact_steps - kScanStep; s > 0.0; s -= kScanStep) {
    if (mean_coverage(run, s, camera) < start_target) {
      run.start_steps = s;
      break;
    }
  }
  return run;
}

datapath::Frame render_qcif(const RunGeometry& run, Finger finger, double steps,
                            const RenderOptions& options, std::uint64_t noise_seed,
                            std::uint32_t frame_counter, const hand::HandGeometry& hand_geometry) {
  const CameraIntrinsics& k = options.camera;
  const CameraFrame cam = camera_frame(steps, finger, hand_geometry);
  const Footprint fp = project(run, cam, finger, k);
  const double strength = distortion_strength(
      coverage(object_mask(run, finger, steps, k, hand_geometry)), options);

  std::mt19937_64 rng(noise_seed);
  const Rgb cast{uniform(rng, -1.0, 1.0) * 55.0, uniform(rng, -1.0, 1.0) * 55.0,
                 uniform(rng, -1.0, 1.0) * 55.0};
  const double sigma = options.noise_sigma + 10.0 * strength;
  const double gain = 1.0 + 0.5 * strength;

  auto frame = datapath::make_frame(static_cast<std::uint8_t>(hand::index_of(finger)),
                                    frame_counter, static_cast<std::uint16_t>(k.width),
                                    static_cast<std::uint16_t>(k.height),
                                    datapath::PixelFormat::Rgb888);
  for (int y = 0; y < k.height; ++y) {
    for (int x = 0; x < k.width; ++x) {
      const double u = x + 0.5, v = y + 0.5;
      const double r = fp.visible ? fp.radius(u, v) : 2.0;
      Rgb c = r < 1.0 ? object_colour(run, fp, u, v, r)
                      : background(run.texture_seed, view_ray(cam, k, u, v));
      if (strength > 0.0) {
        const double lum = 0.299 * c.r + 0.587 * c.g + 0.114 * c.b;
        c = lerp(c, Rgb{lum, lum, lum}, 0.85 * strength);
        c = {(c.r + cast.r * strength) * gain, (c.g + cast.g * strength) * gain,
             (c.b + cast.b * strength) * gain};
      }
      std::uint8_t* px = frame.pixels.data() + (static_cast<std::size_t>(y) * k.width + x) * 3;
      px[0] = to_byte(c.r + sigma * gaussian(rng));
      px[1] = to_byte(c.g + sigma * gaussian(rng));
      px[2] = to_byte(c.b + sigma * gaussian(rng));
    }
  }
  return frame;
}

View render_view(const RunGeometry& run, Finger finger, double steps, const RenderOptions& options,
                 std::uint64_t noise_seed, std::uint32_t frame_counter,
                 const hand::HandGeometry& hand_geometry) {
  View view;
  const auto qcif = render_qcif(run, finger, steps, options, noise_seed, frame_counter, hand_geometry);
  view.image = datapath::downsample_2x2(datapath::to_rgb565(qcif));
  view.mask = object_mask(run, finger, steps, options.camera, hand_geometry);
  view.coverage = coverage(view.mask);
  return view;
}

}  // namespace fvhand::scene
