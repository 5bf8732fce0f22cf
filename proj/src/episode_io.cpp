#include "watchped/episode_io.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <json.hpp>

namespace watchped {
namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::vector<std::string> pose_header() {
  std::vector<std::string> h{"frame"};
  for (int k = 0; k < kPoseKeypoints; ++k) {
    const std::string p = "k" + std::to_string(k);
    h.push_back(p + "x");
    h.push_back(p + "y");
    h.push_back(p + "v");
  }
  return h;
}

std::string raster_name(ContextKind kind, int frame) {
  std::array<char, 32> buf{};
  std::snprintf(buf.data(), buf.size(), "%s_%05d.png", kind == ContextKind::kLocal ? "local" : "global", frame);
  return buf.data();
}

int frame_field(const CsvTable& t, std::size_t row, int frame_count) {
  const long long f = t.integer(row, 0);
  if (f < 0 || f >= frame_count) t.fail(row, "frame " + std::to_string(f) + " outside [0," +
                                              std::to_string(frame_count) + ")");
  return static_cast<int>(f);
}

// Per-frame tables must list every frame exactly once, in order.
void require_dense(const CsvTable& t, int frame_count) {
  if (t.rows.size() != static_cast<std::size_t>(frame_count)) {
    throw ParseError(t.path.string() + ": expected " + std::to_string(frame_count) + " rows, found " +
                     std::to_string(t.rows.size()));
  }
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    if (t.integer(r, 0) != static_cast<long long>(r)) t.fail(r, "frames must be listed 0..frame_count-1 in order");
  }
}

template <typename Fn>
auto guarded(const CsvTable& t, std::size_t row, Fn&& fn) {
  try {
    return fn();
  } catch (const std::invalid_argument& e) {
    t.fail(row, e.what());
  }
}

}  // namespace

ByteTensor read_png_rgb(const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw ParseError(path.string() + ": cannot read PNG (" + image.message + ")");
  }
  image.format = PNG_FORMAT_RGB;
  ByteTensor px({static_cast<Index>(image.height), static_cast<Index>(image.width), 3});
  if (!png_image_finish_read(&image, nullptr, px.data().data(), 0, nullptr)) {
    png_image_free(&image);
    throw ParseError(path.string() + ": corrupt PNG (" + image.message + ")");
  }
  return px;
}

void write_png_rgb(const fs::path& path, const ByteTensor& pixels) {
  if (pixels.rank() != 3 || pixels.dim(2) != 3) throw ShapeError("write_png_rgb expects [H,W,3]");
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(pixels.dim(1));
  image.height = static_cast<png_uint_32>(pixels.dim(0));
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, pixels.data().data(), 0, nullptr)) {
    throw std::runtime_error(path.string() + ": cannot write PNG (" + image.message + ")");
  }
}

Episode parse_episode(const fs::path& dir, const ParseOptions& options) {
  Episode e;
  const fs::path meta_path = dir / "meta.json";
  json meta;
  try {
    meta = json::parse(read_text_file(meta_path));
    e.id = meta.at("id").get<std::string>();
    e.fps = meta.at("fps").get<double>();
    e.lighting = parse_lighting(meta.at("lighting").get<std::string>());
    e.frame_count = meta.at("frame_count").get<int>();
    e.timestamp_origin_ms = meta.at("timestamp_origin_ms").get<TimestampMs>();
    e.frame_width = meta.value("frame_width", 1280);
    e.frame_height = meta.value("frame_height", 720);
    e.raster_size = meta.value("raster_size", 32);
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception& ex) {
    throw ParseError(meta_path.string() + ": " + ex.what());
  }
  if (e.frame_count < 1 || !(e.fps > 0)) throw ParseError(meta_path.string() + ": frame_count and fps must be positive");

  {
    CsvTable t = read_csv(dir / "bboxes.csv", {"frame", "x1", "y1", "x2", "y2", "source"});
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      BBox b;
      b.frame = frame_field(t, r, e.frame_count);
      b.x1 = t.number(r, 1);
      b.y1 = t.number(r, 2);
      b.x2 = t.number(r, 3);
      b.y2 = t.number(r, 4);
      b.source = guarded(t, r, [&] { return parse_box_source(t.rows[r][5]); });
      if (b.x1 > b.x2 || b.y1 > b.y2) t.fail(r, "bbox corners inverted");
      if (!e.bboxes.empty() && b.frame <= e.bboxes.back().frame) t.fail(r, "bbox frames must increase");
      e.bboxes.push_back(b);
    }
  }
  {
    CsvTable t = read_csv(dir / "poses.csv", pose_header());
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      PoseFrame p;
      p.frame = frame_field(t, r, e.frame_count);
      for (int k = 0; k < kPoseKeypoints; ++k) {
        auto& kp = p.keypoints[static_cast<std::size_t>(k)];
        kp.x = t.number(r, 1 + 3 * k);
        kp.y = t.number(r, 2 + 3 * k);
        const long long v = t.integer(r, 3 + 3 * k);
        if (v != 0 && v != 1) t.fail(r, "keypoint validity must be 0 or 1");
        kp.valid = v == 1;
      }
      if (!e.poses.empty() && p.frame <= e.poses.back().frame) t.fail(r, "pose frames must increase");
      e.poses.push_back(p);
    }
  }
  {
    CsvTable t = read_csv(dir / "sensor.csv", {"t_ms", "ax", "ay", "az", "gx", "gy", "gz"});
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      SensorSample s{t.integer(r, 0), t.number(r, 1), t.number(r, 2), t.number(r, 3),
                     t.number(r, 4),  t.number(r, 5), t.number(r, 6)};
      if (!e.sensor.empty() && s.timestamp_ms <= e.sensor.back().timestamp_ms) {
        t.fail(r, "sensor timestamp " + std::to_string(s.timestamp_ms) + " not after previous " +
                      std::to_string(e.sensor.back().timestamp_ms));
      }
      e.sensor.push_back(s);
    }
  }
  {
    CsvTable t = read_csv(dir / "gps.csv", {"t_ms", "lat", "lon"});
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      GpsSample g{t.integer(r, 0), t.number(r, 1), t.number(r, 2)};
      if (std::abs(g.latitude) > 90 || std::abs(g.longitude) > 180) t.fail(r, "coordinate out of range");
      if (!e.gps.empty() && g.timestamp_ms < e.gps.back().timestamp_ms) t.fail(r, "gps timestamps decrease");
      e.gps.push_back(g);
    }
  }
  {
    CsvTable t = read_csv(dir / "speed.csv", {"t_ms", "mps"});
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      SpeedSample s{t.integer(r, 0), t.number(r, 1)};
      if (s.mps < 0) t.fail(r, "negative speed");
      if (!e.speed.empty() && s.timestamp_ms <= e.speed.back().timestamp_ms) t.fail(r, "speed timestamps must increase");
      e.speed.push_back(s);
    }
  }
  {
    CsvTable t = read_csv(dir / "distance.csv", {"frame", "meters"});
    require_dense(t, e.frame_count);
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      const double d = t.number(r, 1);
      if (!(d > 0)) t.fail(r, "distance must be positive");
      e.distance_m.push_back(d);
    }
  }
  {
    CsvTable t = read_csv(dir / "labels.csv", {"frame", "action"});
    require_dense(t, e.frame_count);
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      e.labels.push_back(guarded(t, r, [&] { return parse_action(t.rows[r][1]); }));
    }
  }
  if (fs::exists(dir / "activity.csv")) {
    CsvTable t = read_csv(dir / "activity.csv", {"frame", "activity"});
    require_dense(t, e.frame_count);
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      e.activity.push_back(guarded(t, r, [&] { return parse_activity(t.rows[r][1]); }));
    }
  }
  if (options.load_rasters) {
    for (auto kind : {ContextKind::kLocal, ContextKind::kGlobal}) {
      auto& dst = kind == ContextKind::kLocal ? e.local : e.global;
      dst.reserve(static_cast<std::size_t>(e.frame_count));
      for (int f = 0; f < e.frame_count; ++f) {
        const fs::path p = dir / "context" / raster_name(kind, f);
        ContextRaster r{f, kind, read_png_rgb(p)};
        if (r.pixels.dim(0) != e.raster_size || r.pixels.dim(1) != e.raster_size) {
          throw ParseError(p.string() + ": expected " + std::to_string(e.raster_size) + "x" +
                           std::to_string(e.raster_size) + " raster");
        }
        dst.push_back(std::move(r));
      }
    }
  }

  try {
    validate(e);
  } catch (const ValidationError& ex) {
    throw ParseError(dir.string() + ": " + ex.what());
  }
  return e;
}

void write_episode(const fs::path& dir, const Episode& e) {
  validate(e);
  fs::create_directories(dir / "context");

  json meta;
  meta["id"] = e.id;
  meta["fps"] = e.fps;
  meta["lighting"] = std::string(to_string(e.lighting));
  meta["frame_count"] = e.frame_count;
  meta["timestamp_origin_ms"] = e.timestamp_origin_ms;
  meta["frame_width"] = e.frame_width;
  meta["frame_height"] = e.frame_height;
  meta["raster_size"] = e.raster_size;
  write_text_file(dir / "meta.json", meta.dump(2) + "\n");

  std::string s = "frame,x1,y1,x2,y2,source\n";
  for (const auto& b : e.bboxes) {
    s += std::to_string(b.frame) + "," + format_double(b.x1) + "," + format_double(b.y1) + "," + format_double(b.x2) +
         "," + format_double(b.y2) + "," + std::string(to_string(b.source)) + "\n";
  }
  write_text_file(dir / "bboxes.csv", s);

  const auto ph = pose_header();
  s.clear();
  for (std::size_t i = 0; i < ph.size(); ++i) s += (i ? "," : "") + ph[i];
  s += "\n";
  for (const auto& p : e.poses) {
    s += std::to_string(p.frame);
    for (const auto& k : p.keypoints) {
      s += "," + format_double(k.x) + "," + format_double(k.y) + (k.valid ? ",1" : ",0");
    }
    s += "\n";
  }
  write_text_file(dir / "poses.csv", s);

  s = "t_ms,ax,ay,az,gx,gy,gz\n";
  for (const auto& x : e.sensor) {
    s += std::to_string(x.timestamp_ms) + "," + format_double(x.ax) + "," + format_double(x.ay) + "," +
         format_double(x.az) + "," + format_double(x.gx) + "," + format_double(x.gy) + "," + format_double(x.gz) + "\n";
  }
  write_text_file(dir / "sensor.csv", s);

  s = "t_ms,lat,lon\n";
  for (const auto& g : e.gps) {
    s += std::to_string(g.timestamp_ms) + "," + format_double(g.latitude) + "," + format_double(g.longitude) + "\n";
  }
  write_text_file(dir / "gps.csv", s);

  s = "t_ms,mps\n";
  for (const auto& v : e.speed) s += std::to_string(v.timestamp_ms) + "," + format_double(v.mps) + "\n";
  write_text_file(dir / "speed.csv", s);

  s = "frame,meters\n";
  for (int f = 0; f < e.frame_count; ++f) {
    s += std::to_string(f) + "," + format_double(e.distance_m[static_cast<std::size_t>(f)]) + "\n";
  }
  write_text_file(dir / "distance.csv", s);

  s = "frame,action\n";
  for (int f = 0; f < e.frame_count; ++f) {
    s += std::to_string(f) + "," + std::string(to_string(e.labels[static_cast<std::size_t>(f)])) + "\n";
  }
  write_text_file(dir / "labels.csv", s);

  if (!e.activity.empty()) {
    s = "frame,activity\n";
    for (int f = 0; f < e.frame_count; ++f) {
      s += std::to_string(f) + "," + std::string(to_string(e.activity[static_cast<std::size_t>(f)])) + "\n";
    }
    write_text_file(dir / "activity.csv", s);
  }

  for (const auto* rasters : {&e.local, &e.global}) {
    for (const auto& r : *rasters) write_png_rgb(dir / "context" / raster_name(r.kind, r.frame), r.pixels);
  }
}

std::vector<fs::path> list_episode_dirs(const fs::path& root) {
  if (fs::exists(root / "meta.json")) return {root};
  if (!fs::is_directory(root)) throw ParseError(root.string() + ": not a directory");
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && fs::exists(entry.path() / "meta.json")) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace watchped
