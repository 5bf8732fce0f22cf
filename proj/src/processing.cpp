#include "watchped/processing.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace watchped {

std::vector<BBox> interpolate_bboxes(const std::vector<BBox>& anchors, int first_frame, int last_frame) {
  if (first_frame > last_frame) throw InterpolationError("empty frame range");
  if (anchors.empty()) throw InterpolationError("no anchor boxes");
  for (std::size_t i = 1; i < anchors.size(); ++i) {
    if (anchors[i].frame <= anchors[i - 1].frame) throw InterpolationError("anchors must have increasing frames");
  }
  if (first_frame < anchors.front().frame || last_frame > anchors.back().frame) {
    throw InterpolationError("frame range [" + std::to_string(first_frame) + "," + std::to_string(last_frame) +
                             "] extends beyond anchors [" + std::to_string(anchors.front().frame) + "," +
                             std::to_string(anchors.back().frame) + "]");
  }
  std::vector<BBox> out;
  out.reserve(static_cast<std::size_t>(last_frame - first_frame + 1));
  std::size_t k = 0;
  for (int f = first_frame; f <= last_frame; ++f) {
    while (anchors[k].frame < f) ++k;  // anchors[k] is the first anchor at or after f
    if (anchors[k].frame == f) {
      out.push_back(anchors[k]);
      continue;
    }
    const BBox& a = anchors[k - 1];
    const BBox& b = anchors[k];
    const double u = static_cast<double>(f - a.frame) / (b.frame - a.frame);
    auto lerp = [u](double p, double q) { return p + u * (q - p); };
    out.push_back({f, lerp(a.x1, b.x1), lerp(a.y1, b.y1), lerp(a.x2, b.x2), lerp(a.y2, b.y2), BoxSource::kInterpolated});
  }
  return out;
}

PoseFrame purge_pose(const PoseFrame& pose, const BBox& bbox) {
  PoseFrame out = pose;
  for (auto& k : out.keypoints) {
    if (k.valid && !bbox.contains(k.x, k.y)) k = Keypoint{};
  }
  return out;
}

std::size_t SyncResult::stale_count() const { return static_cast<std::size_t>(std::count(stale.begin(), stale.end(), true)); }

SyncResult sync_sensor_lenient(const std::vector<SensorSample>& stream, const std::vector<TimestampMs>& frame_ts,
                               TimestampMs tolerance_ms) {
  SyncResult r;
  r.sample_index.assign(frame_ts.size(), kNoSample);
  r.delta_ms.assign(frame_ts.size(), 0);
  r.stale.assign(frame_ts.size(), true);
  if (stream.empty()) return r;
  for (std::size_t i = 0; i < frame_ts.size(); ++i) {
    const TimestampMs ft = frame_ts[i];
    auto it = std::lower_bound(stream.begin(), stream.end(), ft,
                               [](const SensorSample& s, TimestampMs t) { return s.timestamp_ms < t; });
    auto idx = static_cast<std::ptrdiff_t>(it - stream.begin());
    if (idx == static_cast<std::ptrdiff_t>(stream.size())) {
      idx -= 1;
    } else if (idx > 0) {
      const TimestampMs after = stream[static_cast<std::size_t>(idx)].timestamp_ms - ft;
      const TimestampMs before = ft - stream[static_cast<std::size_t>(idx - 1)].timestamp_ms;
      if (before <= after) idx -= 1;
    }
    r.sample_index[i] = idx;
    r.delta_ms[i] = stream[static_cast<std::size_t>(idx)].timestamp_ms - ft;
    r.stale[i] = std::abs(r.delta_ms[i]) > tolerance_ms;
  }
  if (!frame_ts.empty()) {
    auto [lo, hi] = std::minmax_element(r.sample_index.begin(), r.sample_index.end());
    r.window_begin = static_cast<std::size_t>(*lo);
    r.window_end = static_cast<std::size_t>(*hi) + 1;
  }
  return r;
}

SyncResult sync_sensor_to_frames(const std::vector<SensorSample>& stream, const std::vector<TimestampMs>& frame_ts,
                                 TimestampMs tolerance_ms) {
  SyncResult r = sync_sensor_lenient(stream, frame_ts, tolerance_ms);
  for (std::size_t i = 0; i < frame_ts.size(); ++i) {
    if (r.stale[i]) {
      throw SyncError("frame " + std::to_string(i) + " at " + std::to_string(frame_ts[i]) +
                      " ms has no sensor sample within " + std::to_string(tolerance_ms) + " ms");
    }
  }
  return r;
}

Tensor sensor_window_ending(const std::vector<SensorSample>& stream, std::size_t end_index, int n) {
  if (n < 1) throw std::invalid_argument("sensor window length must be positive");
  if (end_index >= stream.size() || end_index + 1 < static_cast<std::size_t>(n)) {
    throw WindowError("need " + std::to_string(n) + " sensor samples ending at index " + std::to_string(end_index) +
                      ", stream has " + std::to_string(stream.size()));
  }
  Tensor out({n, 6});
  const std::size_t start = end_index + 1 - static_cast<std::size_t>(n);
  for (int i = 0; i < n; ++i) {
    const SensorSample& s = stream[start + static_cast<std::size_t>(i)];
    const double row[6] = {s.ax, s.ay, s.az, s.gx, s.gy, s.gz};
    for (int c = 0; c < 6; ++c) out[i * 6 + c] = row[c];
  }
  return out;
}

namespace {

std::pair<double, double> gps_at(const std::vector<GpsSample>& gps, TimestampMs t) {
  if (t <= gps.front().timestamp_ms) return {gps.front().latitude, gps.front().longitude};
  if (t >= gps.back().timestamp_ms) return {gps.back().latitude, gps.back().longitude};
  auto it = std::upper_bound(gps.begin(), gps.end(), t, [](TimestampMs x, const GpsSample& g) { return x < g.timestamp_ms; });
  const GpsSample& b = *it;
  const GpsSample& a = *(it - 1);
  if (b.timestamp_ms == a.timestamp_ms) return {b.latitude, b.longitude};
  const double u = static_cast<double>(t - a.timestamp_ms) / static_cast<double>(b.timestamp_ms - a.timestamp_ms);
  return {a.latitude + u * (b.latitude - a.latitude), a.longitude + u * (b.longitude - a.longitude)};
}

}  // namespace

Tensor direction_features(const std::vector<GpsSample>& gps, const std::vector<std::optional<BBox>>& boxes,
                          const std::vector<TimestampMs>& frame_ts) {
  if (gps.size() < 2) throw DirectionError("direction features need at least 2 GPS samples, got " + std::to_string(gps.size()));
  if (boxes.size() != frame_ts.size()) throw DirectionError("bbox and timestamp sequences differ in length");
  const auto m = static_cast<Index>(frame_ts.size());
  Tensor out({m, 4});
  constexpr double kDeg = std::numbers::pi / 180.0;
  for (Index i = 1; i < m; ++i) {
    const auto [lat0, lon0] = gps_at(gps, frame_ts[static_cast<std::size_t>(i - 1)]);
    const auto [lat1, lon1] = gps_at(gps, frame_ts[static_cast<std::size_t>(i)]);
    const double dn = (lat1 - lat0) * kDeg * kEarthRadiusM;
    const double de = (lon1 - lon0) * kDeg * kEarthRadiusM * std::cos(0.5 * (lat0 + lat1) * kDeg);
    double bearing = 0;
    if (dn != 0 || de != 0) {
      bearing = std::atan2(de, dn);
      if (bearing < 0) bearing += 2 * std::numbers::pi;
    }
    const double dt = static_cast<double>(frame_ts[static_cast<std::size_t>(i)] - frame_ts[static_cast<std::size_t>(i - 1)]) / 1000.0;
    out[i * 4 + 0] = bearing;
    out[i * 4 + 1] = dt > 0 ? std::hypot(dn, de) / dt : 0.0;
    const auto& b0 = boxes[static_cast<std::size_t>(i - 1)];
    const auto& b1 = boxes[static_cast<std::size_t>(i)];
    if (b0 && b1) {
      out[i * 4 + 2] = b1->center_x() - b0->center_x();
      out[i * 4 + 3] = b1->center_y() - b0->center_y();
    }
  }
  if (m >= 2) {
    for (int c = 0; c < 4; ++c) out[c] = out[4 + c];
  }
  return out;
}

Episode prepare_episode(Episode e) {
  if (e.bboxes.size() >= 2) e.bboxes = interpolate_bboxes(e.bboxes, e.bboxes.front().frame, e.bboxes.back().frame);
  for (auto& p : e.poses) {
    const BBox* b = e.bbox_at(p.frame);
    if (b) {
      p = purge_pose(p, *b);
    } else {
      p.keypoints.fill(Keypoint{});
    }
  }
  return e;
}

void WindowConfig::validate() const {
  if (m < 1 || f < 1) throw std::invalid_argument("window m and f must be at least 1");
  if (sensor_window < 1) throw std::invalid_argument("sensor window must be at least 1 sample");
  if (sync_tolerance_ms < 0) throw std::invalid_argument("sync tolerance must be nonnegative");
  if (!(bbox_scale_px > 0)) throw std::invalid_argument("bbox scale must be positive");
}

namespace {

Tensor raster_block(const std::vector<ContextRaster>& rasters, int first, int m) {
  if (rasters.empty()) return {};
  const Index s = rasters.front().pixels.dim(0);
  const Index per = s * s * 3;
  Tensor out({m, s, s, 3});
  for (int i = 0; i < m; ++i) {
    const auto& px = rasters[static_cast<std::size_t>(first + i)].pixels.data();
    out.data().segment(i * per, per) = px.cast<double>() / 255.0;
  }
  return out;
}

}  // namespace

ModelInput build_window(const Episode& e, int t, const WindowConfig& cfg) {
  cfg.validate();
  if (t < cfg.m - 1) {
    throw WindowError("frame " + std::to_string(t) + " has fewer than " + std::to_string(cfg.m) + " frames of history");
  }
  if (t + cfg.f >= e.frame_count) {
    throw WindowError("label frame " + std::to_string(t + cfg.f) + " is beyond the episode (" +
                      std::to_string(e.frame_count) + " frames)");
  }
  const int m = cfg.m;
  const int first = t - m + 1;
  ModelInput in;
  in.episode_id = e.id;
  in.t = t;
  in.first_frame = first;
  in.distance_m = e.distance_m[static_cast<std::size_t>(t)];
  in.lighting = e.lighting;
  in.label = e.labels[static_cast<std::size_t>(t + cfg.f)] == Action::kCrossing ? 1 : 0;

  std::vector<TimestampMs> ts(static_cast<std::size_t>(m));
  std::vector<std::optional<BBox>> boxes(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    ts[static_cast<std::size_t>(i)] = e.frame_timestamp(first + i);
    if (const BBox* b = e.bbox_at(first + i)) boxes[static_cast<std::size_t>(i)] = *b;
  }

  in.pose = Tensor({m, 2 * kPoseKeypoints});
  in.pose_mask = Tensor({m});
  in.bbox = Tensor({m, 4});
  in.bbox_mask = Tensor({m});
  const BBox* origin = nullptr;
  for (const auto& b : boxes) {
    if (b) {
      origin = &*b;
      break;
    }
  }
  for (int i = 0; i < m; ++i) {
    const auto& b = boxes[static_cast<std::size_t>(i)];
    if (!b) continue;
    in.bbox_mask[i] = 1;
    in.bbox[i * 4 + 0] = (b->x1 - origin->x1) / cfg.bbox_scale_px;
    in.bbox[i * 4 + 1] = (b->y1 - origin->y1) / cfg.bbox_scale_px;
    in.bbox[i * 4 + 2] = (b->x2 - origin->x2) / cfg.bbox_scale_px;
    in.bbox[i * 4 + 3] = (b->y2 - origin->y2) / cfg.bbox_scale_px;
    const PoseFrame* p = e.pose_at(first + i);
    if (!p || p->valid_count() == 0) continue;
    in.pose_mask[i] = 1;
    const double w = std::max(b->width(), 1e-9);
    const double h = std::max(b->height(), 1e-9);
    for (int k = 0; k < kPoseKeypoints; ++k) {
      const Keypoint& kp = p->keypoints[static_cast<std::size_t>(k)];
      if (!kp.valid) continue;
      in.pose[i * 2 * kPoseKeypoints + 2 * k] = (kp.x - b->x1) / w;
      in.pose[i * 2 * kPoseKeypoints + 2 * k + 1] = (kp.y - b->y1) / h;
    }
  }

  in.speed = Tensor({m, 1});
  for (int i = 0; i < m; ++i) {
    const TimestampMs ft = ts[static_cast<std::size_t>(i)];
    auto it = std::upper_bound(e.speed.begin(), e.speed.end(), ft,
                               [](TimestampMs x, const SpeedSample& s) { return x < s.timestamp_ms; });
    if (it != e.speed.begin()) {
      in.speed[i] = (it - 1)->mps;
    } else if (!e.speed.empty()) {
      in.speed[i] = e.speed.front().mps;
    }
  }

  const SyncResult sync = sync_sensor_to_frames(e.sensor, ts, cfg.sync_tolerance_ms);
  in.sensor = sensor_window_ending(e.sensor, static_cast<std::size_t>(sync.sample_index.back()), cfg.sensor_window);
  in.direction = direction_features(e.gps, boxes, ts);
  in.local = raster_block(e.local, first, m);
  in.global = raster_block(e.global, first, m);
  return in;
}

std::vector<int> window_end_frames(const Episode& e, const WindowConfig& cfg, int stride) {
  if (stride < 1) throw std::invalid_argument("stride must be positive");
  std::vector<int> out;
  // Anchor at the last usable frame so every stride sees the latest observation.
  for (int t = e.frame_count - 1 - cfg.f; t >= cfg.m - 1; t -= stride) out.push_back(t);
  std::reverse(out.begin(), out.end());
  return out;
}

}  // namespace watchped
