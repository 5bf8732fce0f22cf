#include "watchped/episode.hpp"

#include <algorithm>
#include <cmath>

namespace watchped {
namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view s, const std::array<std::pair<E, std::string_view>, N>& table, const char* what) {
  for (const auto& [v, name] : table) {
    if (name == s) return v;
  }
  throw std::invalid_argument(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

template <typename E, std::size_t N>
std::string_view name_of(E v, const std::array<std::pair<E, std::string_view>, N>& table) {
  for (const auto& [e, name] : table) {
    if (e == v) return name;
  }
  return "?";
}

constexpr std::array<std::pair<BoxSource, std::string_view>, 3> kBoxSources{
    {{BoxSource::kDetected, "detected"}, {BoxSource::kManual, "manual"}, {BoxSource::kInterpolated, "interpolated"}}};
constexpr std::array<std::pair<Lighting, std::string_view>, 4> kLightings{{{Lighting::kSunny, "sunny"},
                                                                           {Lighting::kCloudy, "cloudy"},
                                                                           {Lighting::kRainy, "rainy"},
                                                                           {Lighting::kNight, "night"}}};
constexpr std::array<std::pair<Action, std::string_view>, 2> kActions{
    {{Action::kNotCrossing, "not_crossing"}, {Action::kCrossing, "crossing"}}};
constexpr std::array<std::pair<Activity, std::string_view>, 3> kActivities{
    {{Activity::kStanding, "standing"}, {Activity::kWalking, "walking"}, {Activity::kJogging, "jogging"}}};
constexpr std::array<std::pair<DistanceStratum, std::string_view>, 3> kStrata{
    {{DistanceStratum::kClose, "close"}, {DistanceStratum::kMedium, "medium"}, {DistanceStratum::kFar, "far"}}};

}  // namespace

std::string_view to_string(BoxSource v) { return name_of(v, kBoxSources); }
std::string_view to_string(Lighting v) { return name_of(v, kLightings); }
std::string_view to_string(Action v) { return name_of(v, kActions); }
std::string_view to_string(Activity v) { return name_of(v, kActivities); }
std::string_view to_string(DistanceStratum v) { return name_of(v, kStrata); }

BoxSource parse_box_source(std::string_view s) { return parse_enum(s, kBoxSources, "bbox source"); }
Lighting parse_lighting(std::string_view s) { return parse_enum(s, kLightings, "lighting tag"); }
Action parse_action(std::string_view s) { return parse_enum(s, kActions, "action"); }
Activity parse_activity(std::string_view s) { return parse_enum(s, kActivities, "activity"); }
DistanceStratum parse_distance_stratum(std::string_view s) { return parse_enum(s, kStrata, "distance stratum"); }

DistanceStratum distance_stratum(double meters) {
  if (meters <= 20.0) return DistanceStratum::kClose;
  if (meters <= 70.0) return DistanceStratum::kMedium;
  return DistanceStratum::kFar;
}

int PoseFrame::valid_count() const {
  return static_cast<int>(std::count_if(keypoints.begin(), keypoints.end(), [](const Keypoint& k) { return k.valid; }));
}

TimestampMs Episode::frame_timestamp(int frame) const {
  return timestamp_origin_ms + std::llround(frame * 1000.0 / fps);
}

std::vector<TimestampMs> Episode::frame_timestamps() const {
  std::vector<TimestampMs> ts(static_cast<std::size_t>(frame_count));
  for (int f = 0; f < frame_count; ++f) ts[static_cast<std::size_t>(f)] = frame_timestamp(f);
  return ts;
}

const BBox* Episode::bbox_at(int frame) const {
  auto it = std::lower_bound(bboxes.begin(), bboxes.end(), frame, [](const BBox& b, int f) { return b.frame < f; });
  return it != bboxes.end() && it->frame == frame ? &*it : nullptr;
}

const PoseFrame* Episode::pose_at(int frame) const {
  auto it = std::lower_bound(poses.begin(), poses.end(), frame, [](const PoseFrame& p, int f) { return p.frame < f; });
  return it != poses.end() && it->frame == frame ? &*it : nullptr;
}

void validate(const Episode& e) {
  auto fail = [&](const std::string& msg) { throw ValidationError("episode " + e.id + ": " + msg); };
  if (e.frame_count < 1) fail("frame_count must be positive");
  if (!(e.fps > 0)) fail("fps must be positive");
  const auto n = static_cast<std::size_t>(e.frame_count);
  if (e.distance_m.size() != n) fail("distance sequence length differs from frame count");
  if (e.labels.size() != n) fail("label sequence length differs from frame count");
  if (!e.activity.empty() && e.activity.size() != n) fail("activity sequence length differs from frame count");
  for (double d : e.distance_m) {
    if (!(d > 0) || !std::isfinite(d)) fail("distance must be positive and finite");
  }

  int prev = -1;
  for (const auto& b : e.bboxes) {
    const std::string where = "bbox at frame " + std::to_string(b.frame);
    if (b.frame <= prev) fail(where + " is out of order or duplicated");
    if (b.frame < 0 || b.frame >= e.frame_count) fail(where + " outside frame range");
    if (b.x1 > b.x2 || b.y1 > b.y2) fail(where + " has inverted corners");
    if (b.x1 < 0 || b.y1 < 0 || b.x2 > e.frame_width || b.y2 > e.frame_height) fail(where + " leaves the frame");
    prev = b.frame;
  }
  prev = -1;
  for (const auto& p : e.poses) {
    if (p.frame <= prev) fail("pose at frame " + std::to_string(p.frame) + " is out of order or duplicated");
    if (p.frame < 0 || p.frame >= e.frame_count) fail("pose frame outside frame range");
    prev = p.frame;
  }
  for (std::size_t i = 1; i < e.sensor.size(); ++i) {
    if (e.sensor[i].timestamp_ms <= e.sensor[i - 1].timestamp_ms) {
      fail("sensor timestamps not strictly increasing at sample " + std::to_string(i));
    }
  }
  for (std::size_t i = 0; i < e.gps.size(); ++i) {
    if (std::abs(e.gps[i].latitude) > 90 || std::abs(e.gps[i].longitude) > 180) fail("gps coordinate out of range");
    if (i > 0 && e.gps[i].timestamp_ms < e.gps[i - 1].timestamp_ms) fail("gps timestamps decreasing");
  }
  for (std::size_t i = 0; i < e.speed.size(); ++i) {
    if (e.speed[i].mps < 0) fail("negative vehicle speed");
    if (i > 0 && e.speed[i].timestamp_ms <= e.speed[i - 1].timestamp_ms) fail("speed timestamps not increasing");
  }
  for (const auto* rasters : {&e.local, &e.global}) {
    if (rasters->empty()) continue;
    if (rasters->size() != n) fail("context raster count differs from frame count");
    for (std::size_t f = 0; f < n; ++f) {
      const auto& r = (*rasters)[f];
      if (r.frame != static_cast<int>(f)) fail("context raster frame index mismatch");
      if (r.pixels.shape() != Shape{e.raster_size, e.raster_size, 3}) fail("context raster has wrong size");
    }
  }
}

}  // namespace watchped
