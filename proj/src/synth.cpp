#include "watchped/synth.hpp"

#include "watchped/csv.hpp"
#include "watchped/episode_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace watchped {
namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kGravity = 9.81;
constexpr double kOriginLat = 35.68;
constexpr double kOriginLon = 139.76;
constexpr double kImuPeriodS = 0.02;
constexpr double kGpsPeriodS = 0.1;
constexpr double kSpeedPeriodS = 1.0;
constexpr double kShakeCorrelation = 0.9;

using Rgb = std::array<double, 3>;

// Semantic palette for the global raster.
constexpr Rgb kRoad{128 / 255.0, 64 / 255.0, 128 / 255.0};
constexpr Rgb kSidewalk{244 / 255.0, 35 / 255.0, 232 / 255.0};
constexpr Rgb kBuilding{70 / 255.0, 70 / 255.0, 70 / 255.0};
constexpr Rgb kVegetation{107 / 255.0, 142 / 255.0, 35 / 255.0};
constexpr Rgb kSky{70 / 255.0, 130 / 255.0, 180 / 255.0};
constexpr Rgb kPerson{220 / 255.0, 20 / 255.0, 60 / 255.0};
constexpr std::array<Rgb, 6> kPalette{kRoad, kSidewalk, kBuilding, kVegetation, kSky, kPerson};

enum class SceneClass { kRoad, kSidewalk, kBuilding, kVegetation, kSky };

// COCO-18 keypoints as (across, down) fractions of an upright frontal bbox.
constexpr std::array<std::array<double, 2>, kPoseKeypoints> kPoseTemplate{{
    {0.50, 0.06}, {0.50, 0.17}, {0.25, 0.19}, {0.18, 0.33}, {0.15, 0.46}, {0.75, 0.19},
    {0.82, 0.33}, {0.85, 0.46}, {0.38, 0.52}, {0.37, 0.72}, {0.36, 0.95}, {0.62, 0.52},
    {0.63, 0.72}, {0.64, 0.95}, {0.45, 0.04}, {0.55, 0.04}, {0.38, 0.06}, {0.62, 0.06},
}};

double wrap_angle(double a) {
  a = std::fmod(a + kPi, 2 * kPi);
  if (a < 0) a += 2 * kPi;
  return a - kPi;
}

struct KinState {
  double east = 0, north = 0;
  double heading = 0, speed = 0, amplitude = 0;
  double phase = 0, yaw_rate = 0, accel = 0;
  Activity activity = Activity::kStanding;
};

const BehaviorSegment& active_segment(const std::vector<BehaviorSegment>& script, double t) {
  const BehaviorSegment* s = &script.front();
  for (const auto& seg : script) {
    if (seg.start_s <= t) s = &seg;
  }
  return *s;
}

double target_speed(Activity a, const GaitConfig& g) {
  switch (a) {
    case Activity::kWalking: return g.walk_speed_mps;
    case Activity::kJogging: return g.jog_speed_mps;
    default: return 0.0;
  }
}

double target_amplitude(Activity a, const GaitConfig& g) {
  switch (a) {
    case Activity::kWalking: return g.walk_amplitude;
    case Activity::kJogging: return g.jog_amplitude;
    default: return 0.0;
  }
}

double gait_hz(Activity a, const GaitConfig& g) {
  switch (a) {
    case Activity::kWalking: return g.walk_hz;
    case Activity::kJogging: return g.jog_hz;
    default: return 0.0;
  }
}

int preroll_steps(const ScenarioConfig& c) { return static_cast<int>(std::lround(c.preroll_s * c.fps)); }
int frame_total(const ScenarioConfig& c) { return static_cast<int>(std::lround(c.duration_s * c.fps)); }

// Pedestrian state on the frame grid from -preroll to duration (inclusive), with
// frame 0 placed at (lateral_offset, initial_distance).
std::vector<KinState> simulate_kinematics(const ScenarioConfig& c) {
  const double dt = 1.0 / c.fps;
  const int pre = preroll_steps(c);
  const int steps = pre + frame_total(c) + 1;
  const double speed_gain = 1 - std::exp(-dt / 0.3);
  const double heading_gain = 1 - std::exp(-dt / 0.25);
  std::vector<KinState> out(static_cast<std::size_t>(steps));
  KinState s;
  {
    const auto& seg = active_segment(c.script, -c.preroll_s);
    s.activity = seg.activity;
    s.heading = seg.heading_rad;
    s.speed = target_speed(seg.activity, c.gait);
    s.amplitude = target_amplitude(seg.activity, c.gait);
  }
  for (int k = 0; k < steps; ++k) {
    const double t = -c.preroll_s + k * dt;
    if (k > 0) {
      const auto& seg = active_segment(c.script, t);
      s.activity = seg.activity;
      const double prev_heading = s.heading;
      const double prev_speed = s.speed;
      if (seg.activity != Activity::kStanding) s.heading += wrap_angle(seg.heading_rad - s.heading) * heading_gain;
      s.speed += (target_speed(seg.activity, c.gait) - s.speed) * speed_gain;
      s.amplitude += (target_amplitude(seg.activity, c.gait) - s.amplitude) * speed_gain;
      s.yaw_rate = wrap_angle(s.heading - prev_heading) / dt;
      s.accel = (s.speed - prev_speed) / dt;
      s.phase += 2 * kPi * gait_hz(seg.activity, c.gait) * dt;
      s.east += s.speed * std::sin(s.heading) * dt;
      s.north += s.speed * std::cos(s.heading) * dt;
    }
    out[static_cast<std::size_t>(k)] = s;
  }
  const KinState origin = out[static_cast<std::size_t>(pre)];
  for (auto& st : out) {
    st.east += c.lateral_offset_m - origin.east;
    st.north += c.initial_distance_m - origin.north;
  }
  return out;
}

KinState state_at(const std::vector<KinState>& grid, const ScenarioConfig& c, double t) {
  const double pos = (t + c.preroll_s) * c.fps;
  const auto last = static_cast<double>(grid.size() - 1);
  const double clamped = std::clamp(pos, 0.0, last);
  const auto k0 = static_cast<std::size_t>(std::floor(clamped));
  const std::size_t k1 = std::min(k0 + 1, grid.size() - 1);
  const double w = clamped - static_cast<double>(k0);
  const KinState& a = grid[k0];
  const KinState& b = grid[k1];
  KinState s = a;
  auto lerp = [w](double x, double y) { return x + (y - x) * w; };
  s.east = lerp(a.east, b.east);
  s.north = lerp(a.north, b.north);
  s.speed = lerp(a.speed, b.speed);
  s.amplitude = lerp(a.amplitude, b.amplitude);
  s.phase = lerp(a.phase, b.phase);
  s.heading = a.heading + wrap_angle(b.heading - a.heading) * w;
  s.yaw_rate = b.yaw_rate;
  s.accel = b.accel;
  return s;
}

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t salt) { return std::mt19937_64(mix_seed(seed ^ mix_seed(salt))); }

double normal(std::mt19937_64& rng, double sigma) {
  if (sigma <= 0) return 0.0;
  return std::normal_distribution<double>(0.0, sigma)(rng);
}

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

SceneClass scene_class(double u, double v, const CameraConfig& cam) {
  const double cx = 0.5 * cam.frame_width;
  const double cy = 0.5 * cam.frame_height;
  if (v <= cy + 0.5) {
    const bool building = std::abs(u - cx) > 0.16 * cam.frame_width && v > cy - 0.3 * cam.frame_height;
    return building ? SceneClass::kBuilding : SceneClass::kSky;
  }
  const double depth = cam.focal_px * cam.mount_height_m / (v - cy);
  const double lateral = std::abs((u - cx) * depth / cam.focal_px);
  if (lateral <= 4.0) return SceneClass::kRoad;
  if (lateral <= 7.0) return SceneClass::kSidewalk;
  return SceneClass::kVegetation;
}

Rgb semantic_color(SceneClass k) { return kPalette[static_cast<std::size_t>(k)]; }

Rgb appearance_color(SceneClass k) {
  switch (k) {
    case SceneClass::kRoad: return {0.33, 0.33, 0.35};
    case SceneClass::kSidewalk: return {0.62, 0.60, 0.58};
    case SceneClass::kBuilding: return {0.45, 0.38, 0.33};
    case SceneClass::kVegetation: return {0.30, 0.45, 0.20};
    default: return {0.60, 0.75, 0.90};
  }
}

struct Look {
  LightingLook l;
  std::uint8_t apply(double c, std::mt19937_64& rng) const {
    const double v = l.brightness * (0.5 + l.contrast * (c - 0.5)) + normal(rng, l.noise);
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
  }
};

struct Outfit {
  Rgb shirt, pants, skin;
};

struct Figure {
  double x1, y1, x2, y2;  // true box in image pixels, shake included
  double side;            // sin(heading): -1 walking left, +1 right
  double swing;           // gait swing in [-1.3, 1.3]
};

// Silhouette colour at an image point, or nothing outside the figure.
std::optional<Rgb> figure_color(const Figure& f, const Outfit& o, double u, double v) {
  const double w = f.x2 - f.x1, h = f.y2 - f.y1;
  if (w <= 0 || h <= 0) return std::nullopt;
  const double a = (u - f.x1) / w, b = (v - f.y1) / h;
  if (a < 0 || a > 1 || b < 0 || b > 1) return std::nullopt;
  const double profile = std::abs(f.side);
  const double ha = (a - 0.5 - 0.12 * f.side) / 0.22, hb = (b - 0.08) / 0.08;
  if (ha * ha + hb * hb <= 1) return o.skin;
  const double torso = 0.25 * (1 - 0.5 * profile);
  if (b >= 0.16 && b < 0.55 && std::abs(a - 0.5) <= torso) return o.shirt;
  if (b >= 0.55) {
    const double offset = 0.12 * f.swing * profile;
    if (std::abs(a - (0.38 + offset)) <= 0.09 || std::abs(a - (0.62 - offset)) <= 0.09) return o.pants;
  }
  return std::nullopt;
}

ByteTensor render_global(const ScenarioConfig& c, const Figure& fig, double shake_u, double shake_v, const Look& look,
                         std::mt19937_64& rng) {
  const int r = c.raster_size;
  const double pw = static_cast<double>(c.camera.frame_width) / r;
  const double ph = static_cast<double>(c.camera.frame_height) / r;
  ByteTensor img({r, r, 3});
  std::uniform_int_distribution<std::size_t> pick(0, kPalette.size() - 1);
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < r; ++j) {
      const double u0 = j * pw, v0 = i * ph;
      Rgb bg{0, 0, 0};
      for (int sy = 0; sy < 3; ++sy)
        for (int sx = 0; sx < 3; ++sx) {
          const Rgb col = semantic_color(scene_class(u0 + (sx + 0.5) * pw / 3 - shake_u, v0 + (sy + 0.5) * ph / 3 - shake_v, c.camera));
          for (int k = 0; k < 3; ++k) bg[k] += col[k] / 9.0;
        }
      if (look.l.class_flip > 0 && uniform(rng, 0, 1) < look.l.class_flip) bg = kPalette[pick(rng)];
      const double ox = std::max(0.0, std::min(u0 + pw, fig.x2) - std::max(u0, fig.x1));
      const double oy = std::max(0.0, std::min(v0 + ph, fig.y2) - std::max(v0, fig.y1));
      const double cover = ox * oy / (pw * ph);
      for (int k = 0; k < 3; ++k) img.at({i, j, k}) = look.apply((1 - cover) * bg[k] + cover * kPerson[k], rng);
    }
  }
  return img;
}

ByteTensor render_local(const ScenarioConfig& c, const Figure& fig, const Outfit& outfit, double shake_u, double shake_v,
                        const Look& look, std::mt19937_64& rng) {
  const int r = c.raster_size;
  const double side = std::max(1.0, 1.5 * (fig.y2 - fig.y1));
  // A crop that spans fewer camera pixels than the raster is upsampled blockwise.
  const int n = std::clamp(static_cast<int>(std::lround(side)), 1, r);
  const double uc = 0.5 * (fig.x1 + fig.x2), vc = 0.5 * (fig.y1 + fig.y2);
  std::vector<Rgb> grid(static_cast<std::size_t>(n * n));
  for (int gi = 0; gi < n; ++gi)
    for (int gj = 0; gj < n; ++gj) {
      const double u = uc - side / 2 + (gj + 0.5) * side / n;
      const double v = vc - side / 2 + (gi + 0.5) * side / n;
      const auto person = figure_color(fig, outfit, u, v);
      grid[static_cast<std::size_t>(gi * n + gj)] = person ? *person : appearance_color(scene_class(u - shake_u, v - shake_v, c.camera));
    }
  ByteTensor img({r, r, 3});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < r; ++j) {
      const Rgb& col = grid[static_cast<std::size_t>((i * n / r) * n + j * n / r)];
      for (int k = 0; k < 3; ++k) img.at({i, j, k}) = look.apply(col[k], rng);
    }
  return img;
}

double pose_visibility(double distance) {
  if (distance <= 45) return 1.0;
  if (distance <= 70) return 1.0 - 0.7 * (distance - 45) / 25;
  return 0.0;
}

void check_range(double v, double lo, double hi, const char* what) {
  if (!(v >= lo && v <= hi)) throw std::invalid_argument(std::string(what) + " out of range");
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t x) {
  std::uint64_t z = x + 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

LightingLook lighting_look(Lighting l) {
  switch (l) {
    case Lighting::kSunny: return {1.0, 0.02, 1.0, 0.0, 1.0};
    case Lighting::kCloudy: return {0.8, 0.04, 0.85, 0.0, 1.2};
    case Lighting::kRainy: return {0.6, 0.08, 0.7, 0.02, 1.6};
    case Lighting::kNight: return {0.35, 0.12, 0.45, 0.1, 3.0};
  }
  throw std::invalid_argument("unknown lighting");
}

void ScenarioConfig::validate(const WindowConfig& window) const {
  if (!(fps > 0)) throw std::invalid_argument("fps must be positive");
  const double min_duration = 2.0 * (window.m + window.f) / fps;
  if (!(duration_s >= min_duration)) {
    throw std::invalid_argument("duration " + format_double(duration_s) + " s is shorter than two windows (" +
                                format_double(min_duration) + " s)");
  }
  if (!(initial_distance_m > 0)) throw std::invalid_argument("initial distance must be positive");
  if (!(preroll_s >= 0)) throw std::invalid_argument("preroll must be non-negative");
  if (!(pedestrian_height_m > 0)) throw std::invalid_argument("pedestrian height must be positive");
  if (!(ego_speed_mps >= 0)) throw std::invalid_argument("ego speed must be non-negative");
  if (raster_size < 1) throw std::invalid_argument("raster_size must be positive");
  if (anchor_every < 1) throw std::invalid_argument("anchor_every must be positive");
  if (script.empty()) throw std::invalid_argument("behavior script is empty");
  for (std::size_t i = 1; i < script.size(); ++i) {
    if (script[i].start_s < script[i - 1].start_s) throw std::invalid_argument("behavior script is not time-ordered");
  }
  check_range(pose_drop_rate, 0, 1, "pose_drop_rate");
  check_range(noise.outlier_keypoint_rate, 0, 1, "outlier_keypoint_rate");
  if (!(camera.focal_px > 0) || camera.frame_width < 1 || camera.frame_height < 1) {
    throw std::invalid_argument("camera must have positive focal length and frame size");
  }
}

BBoxSize project_bbox(double distance_m, double pedestrian_height_m, double focal_px, int frame_width, int frame_height) {
  if (!(distance_m > 0)) throw std::invalid_argument("distance must be positive");
  const double h = std::min(focal_px * pedestrian_height_m / distance_m, static_cast<double>(frame_height));
  return {std::min(0.4 * h, static_cast<double>(frame_width)), h};
}

Episode generate_episode(const ScenarioConfig& c) {
  c.validate();
  const auto grid = simulate_kinematics(c);
  const int pre = preroll_steps(c);
  const int frames = frame_total(c);
  const LightingLook look_params = lighting_look(c.lighting);
  const Look look{look_params};
  const CameraConfig& cam = c.camera;
  const double cx = 0.5 * cam.frame_width, cy = 0.5 * cam.frame_height;

  Episode e;
  e.id = c.id;
  e.fps = c.fps;
  e.lighting = c.lighting;
  e.frame_count = frames;
  e.timestamp_origin_ms = c.timestamp_origin_ms;
  e.frame_width = cam.frame_width;
  e.frame_height = cam.frame_height;
  e.raster_size = c.raster_size;

  const auto preroll_ms = static_cast<TimestampMs>(std::llround(c.preroll_s * 1000));
  const auto end_ms = static_cast<TimestampMs>(std::llround(c.duration_s * 1000));

  // Wearable IMU.
  {
    auto rng = stream(c.seed, 1);
    const auto period = static_cast<TimestampMs>(std::llround(kImuPeriodS * 1000));
    for (TimestampMs t = -preroll_ms; t <= end_ms; t += period) {
      const KinState s = state_at(grid, c, static_cast<double>(t) / 1000.0);
      const double a = s.amplitude;
      SensorSample x;
      x.timestamp_ms = c.timestamp_origin_ms + t;
      x.ax = s.accel + 0.35 * a * std::sin(2 * s.phase) + normal(rng, c.noise.imu_sigma);
      x.ay = 0.25 * a * std::cos(s.phase) + normal(rng, c.noise.imu_sigma);
      x.az = kGravity + a * std::sin(s.phase) + normal(rng, c.noise.imu_sigma);
      x.gx = 0.15 * a * std::cos(s.phase) + normal(rng, c.noise.gyro_sigma);
      x.gy = 0.10 * a * std::sin(s.phase) + normal(rng, c.noise.gyro_sigma);
      x.gz = s.yaw_rate + normal(rng, c.noise.gyro_sigma);
      e.sensor.push_back(x);
    }
  }
  // Wearable GPS.
  {
    auto rng = stream(c.seed, 2);
    const double deg = 180.0 / kPi;
    const double lon_scale = kEarthRadiusM * std::cos(kOriginLat / deg);
    const auto period = static_cast<TimestampMs>(std::llround(kGpsPeriodS * 1000));
    for (TimestampMs t = -preroll_ms; t <= end_ms; t += period) {
      const KinState s = state_at(grid, c, static_cast<double>(t) / 1000.0);
      const double north = s.north + normal(rng, c.noise.gps_jitter_m);
      const double east = s.east + normal(rng, c.noise.gps_jitter_m);
      e.gps.push_back({c.timestamp_origin_ms + t, kOriginLat + north / kEarthRadiusM * deg, kOriginLon + east / lon_scale * deg});
    }
  }
  // Vehicle speed.
  {
    auto rng = stream(c.seed, 3);
    const auto period = static_cast<TimestampMs>(std::llround(kSpeedPeriodS * 1000));
    for (TimestampMs t = -preroll_ms; t <= end_ms; t += period) {
      e.speed.push_back({c.timestamp_origin_ms + t, std::max(0.0, c.ego_speed_mps + normal(rng, c.noise.ego_speed_sigma))});
    }
  }

  auto shake_rng = stream(c.seed, 4);
  auto det_rng = stream(c.seed, 5);
  auto pose_rng = stream(c.seed, 6);
  auto pix_rng = stream(c.seed, 7);
  Outfit outfit;
  {
    auto rng = stream(c.seed, 8);
    outfit.shirt = {uniform(rng, 0.1, 0.9), uniform(rng, 0.1, 0.9), uniform(rng, 0.1, 0.9)};
    outfit.pants = {uniform(rng, 0.05, 0.3), uniform(rng, 0.05, 0.3), uniform(rng, 0.1, 0.4)};
    outfit.skin = {uniform(rng, 0.55, 0.85), uniform(rng, 0.4, 0.65), uniform(rng, 0.3, 0.5)};
  }
  const double innovation = c.noise.shake_px * std::sqrt(1 - kShakeCorrelation * kShakeCorrelation);
  double shake_u = normal(shake_rng, c.noise.shake_px), shake_v = normal(shake_rng, c.noise.shake_px);

  for (int f = 0; f < frames; ++f) {
    if (f > 0) {
      shake_u = kShakeCorrelation * shake_u + normal(shake_rng, innovation);
      shake_v = kShakeCorrelation * shake_v + normal(shake_rng, innovation);
    }
    const double t = f / c.fps;
    const KinState& s = grid[static_cast<std::size_t>(pre + f)];
    const double depth = s.north - c.ego_speed_mps * t;
    if (depth < 1.0) throw std::invalid_argument("pedestrian is less than 1 m ahead of the camera at frame " + std::to_string(f));
    const double distance = std::hypot(depth, s.east);
    e.distance_m.push_back(distance);

    const BehaviorSegment& seg = active_segment(c.script, t);
    e.activity.push_back(seg.activity);
    e.labels.push_back(c.crossing_decision_s && t >= *c.crossing_decision_s ? Action::kCrossing : Action::kNotCrossing);

    const BBoxSize size = project_bbox(depth, c.pedestrian_height_m, cam.focal_px, cam.frame_width, cam.frame_height);
    const double u = cx + cam.focal_px * s.east / depth + shake_u;
    const double bottom = cy + cam.focal_px * cam.mount_height_m / depth + shake_v;
    const double gait = s.amplitude / std::max(1e-9, c.gait.walk_amplitude);
    const Figure fig{u - size.width / 2, bottom - size.height, u + size.width / 2, bottom, std::sin(s.heading),
                     std::min(1.3, gait) * std::sin(s.phase)};

    // Detector / annotator output.
    if (!c.track_lost) {
      const bool anchors_only = distance > c.anchor_only_beyond_m;
      const bool annotate = !anchors_only || f % c.anchor_every == 0 || f == frames - 1;
      if (annotate) {
        const double sigma = anchors_only ? 1.0 : look_params.bbox_sigma_px;
        BBox b;
        b.frame = f;
        b.source = anchors_only ? BoxSource::kManual : BoxSource::kDetected;
        b.x1 = std::clamp(fig.x1 + normal(det_rng, sigma), 0.0, static_cast<double>(cam.frame_width));
        b.y1 = std::clamp(fig.y1 + normal(det_rng, sigma), 0.0, static_cast<double>(cam.frame_height));
        b.x2 = std::clamp(fig.x2 + normal(det_rng, sigma), 0.0, static_cast<double>(cam.frame_width));
        b.y2 = std::clamp(fig.y2 + normal(det_rng, sigma), 0.0, static_cast<double>(cam.frame_height));
        if (b.x2 - b.x1 >= 1 && b.y2 - b.y1 >= 1) e.bboxes.push_back(b);
      }
    }

    // Pose estimator output.
    const double vis = pose_visibility(distance);
    const bool dropped = uniform(pose_rng, 0, 1) < c.pose_drop_rate;
    if (!c.track_lost && vis > 0 && !dropped) {
      PoseFrame p;
      p.frame = f;
      const double w = fig.x2 - fig.x1, h = fig.y2 - fig.y1;
      const double profile = std::abs(fig.side);
      const double frontal = std::abs(std::cos(s.heading));
      for (int k = 0; k < kPoseKeypoints; ++k) {
        const double r_valid = uniform(pose_rng, 0, 1);
        const double r_outlier = uniform(pose_rng, 0, 1);
        const double nx = normal(pose_rng, c.noise.keypoint_sigma), ny = normal(pose_rng, c.noise.keypoint_sigma);
        if (r_valid >= 0.95 * vis) continue;
        auto [a, b] = kPoseTemplate[static_cast<std::size_t>(k)];
        const bool head = k == 0 || k >= 14;
        const double sign = (k >= 2 && k <= 4) || (k >= 8 && k <= 10) ? 1.0 : -1.0;  // right vs left limbs
        a = 0.5 + (a - 0.5) * (1 - 0.6 * profile);
        if (head) a += 0.12 * fig.side;
        if (k == 9 || k == 12) a += sign * 0.12 * fig.swing * profile;
        if (k == 10 || k == 13) {
          a += sign * 0.25 * fig.swing * profile;
          b -= 0.03 * std::max(0.0, sign * fig.swing) * frontal;
        }
        if (k == 4 || k == 7) a -= sign * 0.15 * fig.swing * profile;
        Keypoint kp{fig.x1 + a * w + nx * h, fig.y1 + b * h + ny * h, true};
        if (r_outlier < c.noise.outlier_keypoint_rate) kp.x = r_outlier < c.noise.outlier_keypoint_rate / 2 ? fig.x1 - 0.8 * h : fig.x2 + 0.8 * h;
        p.keypoints[static_cast<std::size_t>(k)] = kp;
      }
      if (p.valid_count() > 0) e.poses.push_back(p);
    }

    e.local.push_back({f, ContextKind::kLocal, render_local(c, fig, outfit, shake_u, shake_v, look, pix_rng)});
    e.global.push_back({f, ContextKind::kGlobal, render_global(c, fig, shake_u, shake_v, look, pix_rng)});
  }
  validate(e);
  return e;
}

ScenarioConfig sample_scenario(const std::string& id, DistanceStratum stratum, Lighting lighting, std::uint64_t seed,
                               int raster_size) {
  auto rng = stream(seed, 0);
  ScenarioConfig c;
  c.id = id;
  c.seed = seed;
  c.lighting = lighting;
  c.raster_size = raster_size;
  c.gait.walk_speed_mps = uniform(rng, 1.2, 1.6);
  c.gait.jog_speed_mps = uniform(rng, 2.5, 3.1);
  c.gait.walk_hz = uniform(rng, 1.85, 2.15);
  c.gait.jog_hz = uniform(rng, 2.8, 3.2);
  c.gait.walk_amplitude = uniform(rng, 1.7, 2.3);
  c.gait.jog_amplitude = uniform(rng, 4.5, 5.5);
  c.lateral_offset_m = uniform(rng, 4.5, 5.5);

  constexpr double kNorth = 0, kSouth = kPi, kWest = 1.5 * kPi;
  const double along = stratum == DistanceStratum::kClose || uniform(rng, 0, 1) < 0.5 ? kNorth : kSouth;
  auto moving = [&](double p_jog) { return uniform(rng, 0, 1) < p_jog ? Activity::kJogging : Activity::kWalking; };
  if (uniform(rng, 0, 1) < 0.6) {
    const double start = uniform(rng, 1.5, 3.0);
    const Activity before = uniform(rng, 0, 1) < 0.5 ? Activity::kStanding : Activity::kWalking;
    c.script = {{0, before, along}, {start, moving(0.25), kWest}};
    c.crossing_decision_s = start + 1.2;
  } else {
    const double r = uniform(rng, 0, 1);
    if (r < 0.35) {
      c.script = {{0, Activity::kStanding, along}};
    } else if (r < 0.7) {
      c.script = {{0, moving(0.3), along}};
    } else {
      static constexpr std::array<std::array<Activity, 2>, 4> kTransitions{{
          {Activity::kStanding, Activity::kWalking},
          {Activity::kWalking, Activity::kStanding},
          {Activity::kWalking, Activity::kJogging},
          {Activity::kJogging, Activity::kWalking},
      }};
      const auto& tr = kTransitions[std::uniform_int_distribution<std::size_t>(0, 3)(rng)];
      c.script = {{0, tr[0], along}, {uniform(rng, 1.5, 4.0), tr[1], along}};
    }
  }

  // Along-road displacement with the vehicle parked decides the speed and start distance
  // that keep the whole episode inside the stratum.
  ScenarioConfig probe = c;
  probe.initial_distance_m = 0;
  const auto track = simulate_kinematics(probe);
  const int pre = preroll_steps(c);
  const int frames = frame_total(c);
  const double mean_along = (track[static_cast<std::size_t>(pre + frames - 1)].north - track[static_cast<std::size_t>(pre)].north) /
                            ((frames - 1) / c.fps);
  c.ego_speed_mps = stratum == DistanceStratum::kClose ? std::clamp(mean_along + uniform(rng, -0.3, 0.3), 0.0, 2.5)
                                                       : uniform(rng, 0.0, 1.5);
  double lo_rel = 0, hi_rel = 0;
  for (int f = 0; f < frames; ++f) {
    const double rel = track[static_cast<std::size_t>(pre + f)].north - c.ego_speed_mps * f / c.fps;
    lo_rel = std::min(lo_rel, rel);
    hi_rel = std::max(hi_rel, rel);
  }
  static constexpr std::array<std::array<double, 2>, 3> kDepthRange{{{9, 18.5}, {24, 66}, {78, 172}}};
  const auto& range = kDepthRange[static_cast<std::size_t>(stratum)];
  const double lo = range[0] - lo_rel, hi = range[1] - hi_rel;
  if (!(lo <= hi)) throw std::logic_error("scenario " + id + " cannot stay inside its distance stratum");
  c.initial_distance_m = uniform(rng, lo, hi);

  if (lighting == Lighting::kNight) {
    c.track_lost = uniform(rng, 0, 1) < 0.35;
    c.pose_drop_rate = 0.6;
  }
  return c;
}

std::vector<ManifestRow> plan_suite(int n, const StrataMix& mix, std::uint64_t master_seed) {
  if (n < 1) throw std::invalid_argument("suite needs at least one episode");
  if (mix.distances.empty() || mix.lightings.empty()) throw std::invalid_argument("strata mix is empty");
  const std::size_t nl = mix.lightings.size();
  const std::size_t cells = mix.distances.size() * nl;
  std::vector<ManifestRow> rows;
  for (int i = 0; i < n; ++i) {
    const auto cell = static_cast<std::size_t>(i) % cells;
    char id[16];
    std::snprintf(id, sizeof id, "ep%04d", i);
    rows.push_back({id, mix.distances[cell / nl], mix.lightings[cell % nl], mix_seed(mix_seed(master_seed) + static_cast<std::uint64_t>(i))});
  }
  return rows;
}

ScenarioConfig scenario_for(const ManifestRow& row, int raster_size) {
  return sample_scenario(row.id, row.stratum, row.lighting, row.seed, raster_size);
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows) {
  std::ostringstream out;
  out << "id,distance_stratum,lighting,seed\n";
  for (const auto& r : rows) out << r.id << ',' << to_string(r.stratum) << ',' << to_string(r.lighting) << ',' << r.seed << '\n';
  write_text_file(path, out.str());
}

std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
  const CsvTable t = read_csv(path, {"id", "distance_stratum", "lighting", "seed"});
  std::vector<ManifestRow> rows;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    ManifestRow r;
    r.id = t.rows[i][0];
    try {
      r.stratum = parse_distance_stratum(t.rows[i][1]);
      r.lighting = parse_lighting(t.rows[i][2]);
      std::size_t used = 0;
      r.seed = std::stoull(t.rows[i][3], &used);
      if (used != t.rows[i][3].size()) throw std::invalid_argument("trailing characters in seed");
    } catch (const std::exception& ex) {
      t.fail(i, ex.what());
    }
    rows.push_back(r);
  }
  return rows;
}

std::vector<ManifestRow> generate_suite(const std::filesystem::path& out, int n, const StrataMix& mix,
                                        std::uint64_t master_seed, int raster_size) {
  const auto rows = plan_suite(n, mix, master_seed);
  std::filesystem::create_directories(out);
  for (const auto& row : rows) write_episode(out / row.id, generate_episode(scenario_for(row, raster_size)));
  write_manifest(out / "suite_manifest.csv", rows);
  return rows;
}

}  // namespace watchped
