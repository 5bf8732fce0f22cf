#include "test_util.hpp"
#include "watchped/episode_io.hpp"
#include "watchped/synth.hpp"

#include <doctest.h>

#include <complex>
#include <numbers>
#include <set>

using namespace watchped;
namespace fs = std::filesystem;

namespace {

// Frequency of the largest spectral peak of x (mean removed), scanning a fine grid.
double dominant_frequency(const std::vector<double>& x, double rate_hz, double lo_hz, double hi_hz) {
  double mean = 0;
  for (double v : x) mean += v / static_cast<double>(x.size());
  double best_f = lo_hz, best_p = -1;
  for (double f = lo_hz; f <= hi_hz; f += 0.005) {
    std::complex<double> acc = 0;
    for (std::size_t n = 0; n < x.size(); ++n) {
      acc += (x[n] - mean) * std::polar(1.0, -2 * std::numbers::pi * f * static_cast<double>(n) / rate_hz);
    }
    if (std::norm(acc) > best_p) {
      best_p = std::norm(acc);
      best_f = f;
    }
  }
  return best_f;
}

std::vector<double> accel_magnitude(const Episode& e, TimestampMs from, TimestampMs to) {
  std::vector<double> out;
  for (const auto& s : e.sensor) {
    if (s.timestamp_ms >= from && s.timestamp_ms < to) out.push_back(std::sqrt(s.ax * s.ax + s.ay * s.ay + s.az * s.az));
  }
  return out;
}

ScenarioConfig constant_activity(Activity a, std::uint64_t seed) {
  ScenarioConfig c;
  c.seed = seed;
  c.script = {{0, a, 0.0}};
  c.initial_distance_m = 30;
  c.raster_size = 8;
  return c;
}

}  // namespace

TEST_CASE("project_bbox") {
  const BBoxSize near = project_bbox(20, 1.7, 800, 1280, 720);
  CHECK(near.height == doctest::Approx(68).epsilon(1e-12));
  CHECK(near.width == doctest::Approx(0.4 * 68).epsilon(1e-12));
  CHECK(project_bbox(170, 1.7, 800, 1280, 720).height == doctest::Approx(8).epsilon(1e-12));
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) {
    const double d = std::uniform_real_distribution<double>(2, 200)(rng);
    CHECK(project_bbox(2 * d, 1.7, 800, 1280, 720).height == project_bbox(d, 1.7, 800, 1280, 720).height / 2);
  }
  CHECK(project_bbox(0.5, 1.7, 800, 1280, 720).height == 720);
  CHECK_THROWS_AS(project_bbox(0, 1.7, 800, 1280, 720), std::invalid_argument);
}

TEST_CASE("scenario validation") {
  ScenarioConfig c;
  CHECK_NOTHROW(c.validate());
  c.duration_s = 3.0;  // two windows of 16+30 frames need 3.07 s
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ScenarioConfig{};
  c.initial_distance_m = 0;
  CHECK_THROWS_AS(generate_episode(c), std::invalid_argument);
  c = ScenarioConfig{};
  c.script = {{2, Activity::kWalking, 0}, {1, Activity::kStanding, 0}};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ScenarioConfig{};
  c.initial_distance_m = 3;
  c.script = {{0, Activity::kWalking, std::numbers::pi}};  // walks into the camera
  CHECK_THROWS_AS(generate_episode(c), std::invalid_argument);
}

TEST_CASE("generated episodes") {
  SUBCASE("same seed gives identical episodes and bytes") {
    const ScenarioConfig c = sample_scenario("ep", DistanceStratum::kMedium, Lighting::kRainy, 99, 16);
    const Episode a = generate_episode(c);
    CHECK(a == generate_episode(c));
    const fs::path root = testutil::scratch_dir("synth_det");
    write_episode(root / "a", a);
    write_episode(root / "b", generate_episode(c));
    CHECK(testutil::tree_bytes(root / "a") == testutil::tree_bytes(root / "b"));
    const Episode back = parse_episode(root / "a");
    CHECK(back == a);
    ScenarioConfig other = c;
    other.seed = 100;
    CHECK_FALSE(generate_episode(other) == a);
  }
  SUBCASE("standing only") {
    const Episode e = generate_episode(constant_activity(Activity::kStanding, 3));
    for (Action a : e.labels) CHECK(a == Action::kNotCrossing);
    const auto mag = accel_magnitude(e, e.sensor.front().timestamp_ms, e.sensor.back().timestamp_ms + 1);
    double mean = 0, var = 0;
    for (double v : mag) mean += v / static_cast<double>(mag.size());
    for (double v : mag) var += (v - mean) * (v - mean) / static_cast<double>(mag.size());
    CHECK(mean == doctest::Approx(9.81).epsilon(0.01));
    CHECK(std::sqrt(var) < 0.5);
  }
  SUBCASE("walking and jogging gait peaks") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      ScenarioConfig c = constant_activity(Activity::kWalking, seed);
      c.gait.walk_hz = 1.85 + 0.075 * static_cast<double>(seed);
      const Episode walk = generate_episode(c);
      const double fw = dominant_frequency(accel_magnitude(walk, walk.frame_timestamp(0), walk.frame_timestamp(150)), 50, 0.5, 6);
      CHECK(fw >= 1.8);
      CHECK(fw <= 2.2);
      CHECK(fw == doctest::Approx(c.gait.walk_hz).epsilon(0.03));
      c = constant_activity(Activity::kJogging, seed);
      const Episode jog = generate_episode(c);
      const double fj = dominant_frequency(accel_magnitude(jog, jog.frame_timestamp(0), jog.frame_timestamp(150)), 50, 0.5, 6);
      CHECK(fj == doctest::Approx(c.gait.jog_hz).epsilon(0.03));
    }
  }
  SUBCASE("labels follow the decision time") {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      const ScenarioConfig c = sample_scenario("ep", kAllDistanceStrata[seed % 3], Lighting::kSunny, seed, 8);
      const Episode e = generate_episode(c);
      for (int f = 0; f < e.frame_count; ++f) {
        const bool crossing = e.labels[static_cast<std::size_t>(f)] == Action::kCrossing;
        CHECK(crossing == (c.crossing_decision_s.has_value() && *c.crossing_decision_s <= f / e.fps));
      }
    }
  }
  SUBCASE("distance stays inside the sampled stratum") {
    for (std::uint64_t seed = 0; seed < 60; ++seed) {
      const DistanceStratum s = kAllDistanceStrata[seed % 3];
      const Episode e = generate_episode(sample_scenario("ep", s, Lighting::kCloudy, seed * 7 + 1, 4));
      for (double d : e.distance_m) REQUIRE(distance_stratum(d) == s);
    }
  }
  SUBCASE("sensor and GPS cover the frames with preroll") {
    const Episode e = generate_episode(constant_activity(Activity::kWalking, 4));
    CHECK(e.sensor.front().timestamp_ms == e.timestamp_origin_ms - 3000);
    CHECK(e.sensor.back().timestamp_ms >= e.frame_timestamp(e.frame_count - 1));
    CHECK(e.sensor[1].timestamp_ms - e.sensor[0].timestamp_ms == 20);
    CHECK(e.gps[1].timestamp_ms - e.gps[0].timestamp_ms == 100);
    CHECK(e.activity.size() == static_cast<std::size_t>(e.frame_count));
    CHECK(e.local.size() == static_cast<std::size_t>(e.frame_count));
    CHECK(e.local[0].pixels.shape() == Shape{8, 8, 3});
  }
  SUBCASE("far range is annotated by sparse manual anchors") {
    const Episode e = generate_episode(sample_scenario("ep", DistanceStratum::kFar, Lighting::kSunny, 5, 8));
    REQUIRE_FALSE(e.bboxes.empty());
    for (const auto& b : e.bboxes) {
      CHECK(b.source == BoxSource::kManual);
      CHECK((b.frame % 15 == 0 || b.frame == e.frame_count - 1));
    }
    CHECK(e.poses.empty());
  }
  SUBCASE("night can lose the track entirely") {
    int lost = 0;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      const ScenarioConfig c = sample_scenario("ep", DistanceStratum::kClose, Lighting::kNight, seed, 4);
      const Episode e = generate_episode(c);
      if (c.track_lost) {
        ++lost;
        CHECK(e.bboxes.empty());
        CHECK(e.poses.empty());
      } else {
        CHECK(e.bboxes.size() == static_cast<std::size_t>(e.frame_count));
        CHECK(e.poses.size() < e.bboxes.size());
      }
    }
    CHECK(lost > 5);
    CHECK(lost < 25);
  }
}

TEST_CASE("walking and jogging windows separate in frequency-amplitude space") {
  // Dominant frequency above 2.5 Hz or magnitude spread above 2.2 m/s^2 marks jogging.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const ScenarioConfig c = sample_scenario("ep", DistanceStratum::kMedium, Lighting::kSunny, seed, 4);
    for (Activity a : {Activity::kWalking, Activity::kJogging}) {
      ScenarioConfig k = c;
      k.script = {{0, a, 0.0}};
      k.initial_distance_m = 30;
      const Episode e = generate_episode(k);
      const auto mag = accel_magnitude(e, e.frame_timestamp(0), e.frame_timestamp(0) + 2000);
      const double f = dominant_frequency(mag, 50, 0.5, 6);
      double mean = 0, var = 0;
      for (double v : mag) mean += v / static_cast<double>(mag.size());
      for (double v : mag) var += (v - mean) * (v - mean) / static_cast<double>(mag.size());
      const bool jog_side = f > 2.5 && std::sqrt(var) > 2.2;
      const bool walk_side = f < 2.5 && std::sqrt(var) < 2.2;
      CHECK((a == Activity::kJogging ? jog_side : walk_side));
    }
  }
}

TEST_CASE("suite generation") {
  SUBCASE("one episode per cell and manifest") {
    const auto rows = plan_suite(12, {}, 7);
    REQUIRE(rows.size() == 12);
    std::set<std::pair<DistanceStratum, Lighting>> cells;
    std::set<std::uint64_t> seeds;
    for (const auto& r : rows) {
      cells.insert({r.stratum, r.lighting});
      seeds.insert(r.seed);
    }
    CHECK(cells.size() == 12);
    CHECK(seeds.size() == 12);
    CHECK(plan_suite(12, {}, 7) == rows);
    CHECK_FALSE(plan_suite(12, {}, 8) == rows);
    CHECK(plan_suite(30, {}, 7).size() == 30);
    CHECK_THROWS_AS(plan_suite(0, {}, 7), std::invalid_argument);
  }
  SUBCASE("written suite regenerates from manifest seeds") {
    const fs::path root = testutil::scratch_dir("synth_suite");
    StrataMix mix;
    mix.distances = {DistanceStratum::kClose, DistanceStratum::kFar};
    mix.lightings = {Lighting::kSunny, Lighting::kNight};
    const auto rows = generate_suite(root / "a", 5, mix, 11, 8);
    const auto manifest = read_manifest(root / "a" / "suite_manifest.csv");
    CHECK(manifest == rows);
    CHECK(manifest.size() == 5);
    CHECK(list_episode_dirs(root / "a").size() == 5);
    for (const auto& r : manifest) {
      CHECK(parse_episode(root / "a" / r.id) == generate_episode(sample_scenario(r.id, r.stratum, r.lighting, r.seed, 8)));
    }
    generate_suite(root / "b", 5, mix, 11, 8);
    CHECK(testutil::tree_bytes(root / "a") == testutil::tree_bytes(root / "b"));
  }
}
