#pragma once

#include "watchped/csv.hpp"
#include "watchped/episode.hpp"

#include <filesystem>

namespace watchped {

// Episode directory layout (UTF-8, comma separated, header row required):
//   meta.json     id, fps, lighting, frame_count, timestamp_origin_ms,
//                 frame_width, frame_height, raster_size
//   bboxes.csv    frame,x1,y1,x2,y2,source
//   poses.csv     frame,k0x,k0y,k0v,...,k17x,k17y,k17v
//   sensor.csv    t_ms,ax,ay,az,gx,gy,gz
//   gps.csv       t_ms,lat,lon
//   speed.csv     t_ms,mps
//   distance.csv  frame,meters
//   labels.csv    frame,action
//   activity.csv  frame,activity            (optional)
//   context/local_%05d.png, context/global_%05d.png   8-bit RGB

struct ParseOptions {
  bool load_rasters = true;
};

Episode parse_episode(const std::filesystem::path& dir, const ParseOptions& options = {});
void write_episode(const std::filesystem::path& dir, const Episode& episode);

ByteTensor read_png_rgb(const std::filesystem::path& path);
void write_png_rgb(const std::filesystem::path& path, const ByteTensor& pixels);

/// Lists episode directories (those containing meta.json) under a suite root, sorted by name.
/// A path that is itself an episode directory yields just that path.
std::vector<std::filesystem::path> list_episode_dirs(const std::filesystem::path& root);

}  // namespace watchped
