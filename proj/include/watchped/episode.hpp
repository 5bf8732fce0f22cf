#pragma once

#include "watchped/tensor.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace watchped {

using TimestampMs = std::int64_t;

enum class BoxSource { kDetected, kManual, kInterpolated };
enum class Lighting { kSunny, kCloudy, kRainy, kNight };
enum class Action { kNotCrossing, kCrossing };
enum class Activity { kStanding, kWalking, kJogging };
enum class DistanceStratum { kClose, kMedium, kFar };
enum class ContextKind { kLocal, kGlobal };

inline constexpr int kPoseKeypoints = 18;
inline constexpr int kActivityClasses = 3;
inline constexpr std::array<Lighting, 4> kAllLighting{Lighting::kSunny, Lighting::kCloudy, Lighting::kRainy,
                                                     Lighting::kNight};
inline constexpr std::array<DistanceStratum, 3> kAllDistanceStrata{DistanceStratum::kClose, DistanceStratum::kMedium,
                                                                   DistanceStratum::kFar};

std::string_view to_string(BoxSource v);
std::string_view to_string(Lighting v);
std::string_view to_string(Action v);
std::string_view to_string(Activity v);
std::string_view to_string(DistanceStratum v);

BoxSource parse_box_source(std::string_view s);
Lighting parse_lighting(std::string_view s);
Action parse_action(std::string_view s);
Activity parse_activity(std::string_view s);
DistanceStratum parse_distance_stratum(std::string_view s);

/// close: up to 20 m, medium: (20, 70] m, far: beyond 70 m.
DistanceStratum distance_stratum(double meters);

struct BBox {
  int frame = 0;
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  BoxSource source = BoxSource::kDetected;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }
  bool contains(double x, double y) const { return x >= x1 && x <= x2 && y >= y1 && y <= y2; }
  friend bool operator==(const BBox&, const BBox&) = default;
};

struct Keypoint {
  double x = 0, y = 0;
  bool valid = false;
  friend bool operator==(const Keypoint&, const Keypoint&) = default;
};

struct PoseFrame {
  int frame = 0;
  std::array<Keypoint, kPoseKeypoints> keypoints{};

  int valid_count() const;
  friend bool operator==(const PoseFrame&, const PoseFrame&) = default;
};

struct SensorSample {
  TimestampMs timestamp_ms = 0;
  double ax = 0, ay = 0, az = 0;  // m/s^2
  double gx = 0, gy = 0, gz = 0;  // rad/s
  friend bool operator==(const SensorSample&, const SensorSample&) = default;
};

struct GpsSample {
  TimestampMs timestamp_ms = 0;
  double latitude = 0, longitude = 0;
  friend bool operator==(const GpsSample&, const GpsSample&) = default;
};

struct SpeedSample {
  TimestampMs timestamp_ms = 0;
  double mps = 0;
  friend bool operator==(const SpeedSample&, const SpeedSample&) = default;
};

/// 8-bit RGB raster [H,W,3]; value(...) maps to [0,1].
struct ContextRaster {
  int frame = 0;
  ContextKind kind = ContextKind::kLocal;
  ByteTensor pixels;

  double value(Index y, Index x, Index c) const { return pixels.at({y, x, c}) / 255.0; }
  friend bool operator==(const ContextRaster&, const ContextRaster&) = default;
};

struct Episode {
  std::string id;
  double fps = 30.0;
  Lighting lighting = Lighting::kSunny;
  int frame_count = 0;
  TimestampMs timestamp_origin_ms = 0;
  int frame_width = 1280;
  int frame_height = 720;
  int raster_size = 32;

  std::vector<BBox> bboxes;      // sorted by frame, at most one per frame
  std::vector<PoseFrame> poses;  // sorted by frame, at most one per frame
  std::vector<SensorSample> sensor;
  std::vector<GpsSample> gps;
  std::vector<SpeedSample> speed;
  std::vector<double> distance_m;    // per frame
  std::vector<Action> labels;        // per frame
  std::vector<Activity> activity;    // per frame, empty when not annotated
  std::vector<ContextRaster> local;  // per frame, empty when not loaded
  std::vector<ContextRaster> global;

  TimestampMs frame_timestamp(int frame) const;
  std::vector<TimestampMs> frame_timestamps() const;
  const BBox* bbox_at(int frame) const;
  const PoseFrame* pose_at(int frame) const;

  friend bool operator==(const Episode&, const Episode&) = default;
};

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checks every documented invariant; throws ValidationError naming the first violation.
void validate(const Episode& episode);

}  // namespace watchped
