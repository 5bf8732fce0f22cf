#include "model_oracle.hpp"
#include "watchped/reference.hpp"

#include <doctest.h>

#include <chrono>

using namespace watchped;

namespace {

ModelInput random_input(const ModelConfig& cfg, std::mt19937_64& rng) {
  const Index m = cfg.window.m;
  const Index s = cfg.raster_size;
  ModelInput in;
  in.pose = testutil::random_tensor({m, 36}, rng, 0, 1);
  in.pose_mask = Tensor::constant({m}, 1.0);
  in.pose_mask[5] = 0;
  in.bbox = testutil::random_tensor({m, 4}, rng, -0.3, 0.3);
  in.bbox_mask = Tensor::constant({m}, 1.0);
  in.speed = testutil::random_tensor({m, 1}, rng, 0, 3);
  in.local = testutil::random_tensor({m, s, s, 3}, rng, 0, 1);
  in.global = testutil::random_tensor({m, s, s, 3}, rng, 0, 1);
  in.sensor = testutil::random_tensor({cfg.window.sensor_window, 6}, rng, -3, 3);
  in.direction = testutil::random_tensor({m, 4}, rng, -1, 1);
  return in;
}

}  // namespace

TEST_CASE("reference model reproduces the library forward") {
  std::mt19937_64 rng(41);
  ModelParams p = ModelParams::create(ModelConfig::desk(), 7);
  const ModelInput in = random_input(p.config, rng);
  for (Mode mode : {Mode::kFull, Mode::kVisionOnly, Mode::kSensorOnly}) {
    CAPTURE(to_string(mode));
    const double lib = forward_probability(in, p, mode, {}).value()[0];
    ReferenceModel<double> d(p, in, mode);
    ReferenceModel<long double> ld(p, in, mode);
    CHECK(d.probability() == doctest::Approx(lib).epsilon(1e-12));
    CHECK(static_cast<double>(ld.probability()) == doctest::Approx(lib).epsilon(1e-12));
    if (mode == Mode::kFull) CHECK(d.probability() == doctest::Approx(oracle::full_model(in, p)).epsilon(1e-12));
  }
}

TEST_CASE("reference model caching and fingerprint") {
  std::mt19937_64 rng(5);
  ModelParams p = ModelParams::create(ModelConfig::desk(), 3);
  const ModelInput in = random_input(p.config, rng);
  ReferenceModel<double> ref(p, in, Mode::kFull);
  const double base = ref.probability();
  const std::uint64_t pat = ref.pattern();

  SUBCASE("set then restore returns the same value") {
    for (std::size_t k = 0; k < ref.parameter_count(); ++k) {
      const double v = ref.get(k, 0);
      ref.set(k, 0, v + 0.25);
      ref.probability();
      ref.set(k, 0, v);
      REQUIRE(ref.probability() == base);
      REQUIRE(ref.pattern() == pat);
    }
  }
  SUBCASE("a perturbed parameter matches a fresh evaluation") {
    for (const std::string name : {"nv.gru2.u_r", "vis.global.cnn.b1.c0.w", "sensor.cnn1.c1.w", "fusion.att.v"}) {
      std::size_t k = 0;
      while (ref.parameter_name(k) != name) ++k;
      ref.set(k, 3, ref.get(k, 3) - 0.1);
      ad::Var v = p.params.at(name);
      v.mutable_value()[3] -= 0.1;
      ReferenceModel<double> fresh(p, in, Mode::kFull);
      CHECK(ref.probability() == fresh.probability());
      CHECK(ref.pattern() == fresh.pattern());
    }
  }
  SUBCASE("a large conv bias shift flips ReLUs") {
    std::size_t k = 0;
    while (ref.parameter_name(k) != "vis.local.cnn.b0.c0.b") ++k;
    ref.set(k, 0, ref.get(k, 0) - 50.0);
    CHECK(ref.pattern() != pat);
  }
  SUBCASE("a GRU weight leaves the fingerprint alone") {
    ref.set(0, 0, ref.get(0, 0) + 0.5);
    CHECK(ref.probability() != base);
    CHECK(ref.pattern() == pat);
  }
}

TEST_CASE("composed desk model passes the gradient check") {
  std::mt19937_64 rng(2024);
  ModelParams p = ModelParams::create(ModelConfig::desk(), 11);
  const ModelInput in = random_input(p.config, rng);
  for (int label : {0, 1}) {
    CAPTURE(label);
    const auto t0 = std::chrono::steady_clock::now();
    const ad::GradCheckResult r = model_grad_check(p, in, label);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    MESSAGE("label " << label << ": max rel err " << r.max_relative_error << " at " << r.worst_parameter << "[" << r.worst_index
                     << "] analytic " << r.analytic << " numeric " << r.numeric << ", " << secs << " s");
    CHECK(r.coordinates == p.params.scalar_count());
    CHECK(r.max_relative_error < 1e-4);
    CHECK(secs < 120);
  }
}

TEST_CASE("gradient check leaves freezing untouched") {
  std::mt19937_64 rng(9);
  ModelParams p = ModelParams::create(ModelConfig::desk(), 1);
  p.apply_default_freezing();
  const ModelInput in = random_input(p.config, rng);
  std::vector<bool> before;
  for (const auto& e : p.params.entries()) before.push_back(e.var.requires_grad());
  const ad::GradCheckResult r = model_grad_check(p, in, 1, {1e-6, Mode::kSensorOnly});
  CHECK(r.max_relative_error < 1e-4);
  for (std::size_t k = 0; k < before.size(); ++k) CHECK(p.params.entries()[k].var.requires_grad() == before[k]);
}
