#pragma once

#include "watchped/episode.hpp"

#include <optional>

namespace watchped {

class InterpolationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class SyncError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class DirectionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class WindowError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Fills every frame in [first_frame, last_frame] by linear interpolation between the surrounding anchors.
/// Anchors are returned unchanged; filled boxes are marked interpolated.
std::vector<BBox> interpolate_bboxes(const std::vector<BBox>& anchors, int first_frame, int last_frame);

/// Invalidates (and zeroes) keypoints strictly outside the box. Points on the edge are kept.
PoseFrame purge_pose(const PoseFrame& pose, const BBox& bbox);

inline constexpr std::ptrdiff_t kNoSample = -1;

struct SyncResult {
  std::vector<std::ptrdiff_t> sample_index;  // nearest sample per frame, kNoSample if the stream is empty
  std::vector<TimestampMs> delta_ms;         // sample time minus frame time
  std::vector<bool> stale;                   // |delta| above tolerance
  std::size_t window_begin = 0;              // contiguous span [begin, end) covering the frames' samples
  std::size_t window_end = 0;

  std::size_t stale_count() const;
};

/// Nearest-timestamp assignment; on a tie the earlier sample wins.
/// Throws SyncError naming the first frame with no sample within tolerance.
SyncResult sync_sensor_to_frames(const std::vector<SensorSample>& stream, const std::vector<TimestampMs>& frame_ts,
                                 TimestampMs tolerance_ms);
/// Same assignment, but frames beyond tolerance are only flagged stale.
SyncResult sync_sensor_lenient(const std::vector<SensorSample>& stream, const std::vector<TimestampMs>& frame_ts,
                               TimestampMs tolerance_ms);

/// Last `n` samples ending at stream[end_index], as [n,6] (ax,ay,az,gx,gy,gz).
Tensor sensor_window_ending(const std::vector<SensorSample>& stream, std::size_t end_index, int n);

inline constexpr double kEarthRadiusM = 6371000.0;

/// Per frame: bearing of the GPS displacement (rad, north = 0, clockwise, in [0, 2pi)), ground speed (m/s),
/// bbox-center dx, dy (px/frame; 0 where either box is missing). GPS is linearly interpolated at the frame
/// timestamps and held constant outside its range. Row 0 copies row 1.
Tensor direction_features(const std::vector<GpsSample>& gps, const std::vector<std::optional<BBox>>& boxes,
                          const std::vector<TimestampMs>& frame_ts);

/// Interpolates the bbox track between its first and last anchor, then purges poses against it.
/// Poses on frames without a box lose all keypoints.
Episode prepare_episode(Episode episode);

struct WindowConfig {
  int m = 16;
  int f = 30;
  int sensor_window = 100;
  TimestampMs sync_tolerance_ms = 20;
  double bbox_scale_px = 100.0;  // bbox offsets are divided by this

  void validate() const;
};

struct ModelInput {
  Tensor pose;       // [m,36], keypoints relative to the frame's bbox, zero where invalid
  Tensor pose_mask;  // [m], 1 where the frame has at least one valid keypoint
  Tensor bbox;       // [m,4], (corner - first observed corner) / bbox_scale_px
  Tensor bbox_mask;  // [m]
  Tensor speed;      // [m,1], m/s, sample-and-hold
  Tensor local;      // [m,H,W,3] in [0,1]; empty when rasters were not loaded
  Tensor global;
  Tensor sensor;     // [sensor_window,6]
  Tensor direction;  // [m,4]
  int label = 0;

  std::string episode_id;
  int t = 0;
  int first_frame = 0;
  double distance_m = 0;
  Lighting lighting = Lighting::kSunny;

  bool has_bbox() const { return bbox_mask.size() > 0 && bbox_mask.data().maxCoeff() > 0; }
};

/// Window over frames [t-m+1, t] with the label at t+f. Expects a prepared episode.
ModelInput build_window(const Episode& episode, int t, const WindowConfig& cfg);

/// Last observed frames t for which build_window has enough history and future, stepping by `stride`.
std::vector<int> window_end_frames(const Episode& episode, const WindowConfig& cfg, int stride);

}  // namespace watchped
