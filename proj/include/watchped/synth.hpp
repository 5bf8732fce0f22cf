#pragma once

#include "watchped/episode.hpp"
#include "watchped/processing.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace watchped {

/// From start_s on the pedestrian performs `activity`, moving along the
/// compass bearing `heading_rad` (0 north, clockwise). Heading is ignored while standing.
struct BehaviorSegment {
  double start_s = 0;
  Activity activity = Activity::kStanding;
  double heading_rad = 0;
};

struct CameraConfig {
  double focal_px = 800;
  int frame_width = 1280;
  int frame_height = 720;
  double mount_height_m = 1.5;
};

struct GaitConfig {
  double walk_speed_mps = 1.4;
  double jog_speed_mps = 2.8;
  double walk_hz = 2.0;
  double jog_hz = 3.0;
  double walk_amplitude = 2.0;  // vertical accel, m/s^2
  double jog_amplitude = 5.0;
};

struct NoiseConfig {
  double imu_sigma = 0.3;
  double gyro_sigma = 0.05;
  double gps_jitter_m = 0.02;
  double shake_px = 3.0;         // stationary std of the AR(1) camera shake
  double keypoint_sigma = 0.02;  // fraction of bbox height
  double outlier_keypoint_rate = 0.03;
  double ego_speed_sigma = 0.05;
};

struct ScenarioConfig {
  std::string id = "ep0000";
  std::uint64_t seed = 0;
  double duration_s = 6.0;
  double fps = 30.0;
  double preroll_s = 3.0;  // sensor, GPS and speed history recorded before frame 0
  TimestampMs timestamp_origin_ms = 1'600'000'000'000;

  std::vector<BehaviorSegment> script{BehaviorSegment{}};
  std::optional<double> crossing_decision_s;

  double initial_distance_m = 15;  // along the road, pedestrian ahead of the camera
  double lateral_offset_m = 5;     // east of the camera axis
  double ego_speed_mps = 0;        // vehicle drives north
  double pedestrian_height_m = 1.7;
  Lighting lighting = Lighting::kSunny;
  int raster_size = 32;

  CameraConfig camera;
  GaitConfig gait;
  NoiseConfig noise;

  /// Detector failure: no bbox (and hence no pose) anywhere in the episode.
  bool track_lost = false;
  /// Fraction of frames whose pose estimate is missing entirely.
  double pose_drop_rate = 0.0;
  /// Beyond this distance the track comes from sparse manual anchors only.
  double anchor_only_beyond_m = 60;
  int anchor_every = 15;

  /// Throws std::invalid_argument; `window` sets the minimum duration.
  void validate(const WindowConfig& window = {}) const;
};

/// Per-lighting raster look: out = brightness*(0.5 + contrast*(c - 0.5)) + N(0, noise).
struct LightingLook {
  double contrast, noise, brightness, class_flip, bbox_sigma_px;
};
LightingLook lighting_look(Lighting l);

struct BBoxSize {
  double width = 0, height = 0;
};

/// Pinhole size of an upright pedestrian, clamped to the frame; width is 0.4*height.
BBoxSize project_bbox(double distance_m, double pedestrian_height_m, double focal_px, int frame_width,
                      int frame_height);

Episode generate_episode(const ScenarioConfig& cfg);

/// Random scenario inside one distance x lighting cell, fully determined by `seed`.
ScenarioConfig sample_scenario(const std::string& id, DistanceStratum stratum, Lighting lighting, std::uint64_t seed,
                               int raster_size = 32);

struct StrataMix {
  std::vector<DistanceStratum> distances{kAllDistanceStrata.begin(), kAllDistanceStrata.end()};
  std::vector<Lighting> lightings{kAllLighting.begin(), kAllLighting.end()};
};

struct ManifestRow {
  std::string id;
  DistanceStratum stratum = DistanceStratum::kClose;
  Lighting lighting = Lighting::kSunny;
  std::uint64_t seed = 0;
  friend bool operator==(const ManifestRow&, const ManifestRow&) = default;
};

/// Cells are visited round-robin (distance-major), so n = cells gives one episode each.
std::vector<ManifestRow> plan_suite(int n, const StrataMix& mix, std::uint64_t master_seed);
ScenarioConfig scenario_for(const ManifestRow& row, int raster_size = 32);

/// Writes <out>/<id>/ for every episode plus <out>/suite_manifest.csv.
std::vector<ManifestRow> generate_suite(const std::filesystem::path& out, int n, const StrataMix& mix,
                                        std::uint64_t master_seed, int raster_size = 32);

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> read_manifest(const std::filesystem::path& path);

/// splitmix64 finalizer, used to derive independent child seeds.
std::uint64_t mix_seed(std::uint64_t x);

}  // namespace watchped
