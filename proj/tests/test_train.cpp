#include "test_util.hpp"
#include "watchped/csv.hpp"
#include "watchped/synth.hpp"
#include "watchped/train.hpp"

#include <doctest.h>

#include <chrono>
#include <numbers>
#include <set>

using namespace watchped;

using testutil::auc_pairs;
using testutil::confusion;

namespace {

ModelConfig small_config() {
  ModelConfig c = ModelConfig::desk();
  c.raster_size = 8;
  return c;
}

Episode small_episode(const std::string& id, std::uint64_t seed, DistanceStratum d = DistanceStratum::kClose,
                      Lighting l = Lighting::kSunny) {
  return prepare_episode(generate_episode(sample_scenario(id, d, l, seed, 8)));
}

Episode scripted_episode(const std::string& id, std::vector<BehaviorSegment> script, std::uint64_t seed) {
  ScenarioConfig c;
  c.id = id;
  c.seed = seed;
  c.script = std::move(script);
  c.initial_distance_m = 30;
  c.raster_size = 8;
  return prepare_episode(generate_episode(c));
}

CrossingPrediction pred(double p, bool abstained = false) { return classify(p, 0.5, abstained); }

}  // namespace

TEST_CASE("train config") {
  const TrainConfig full;
  CHECK(full.learning_rate == 5e-7);
  CHECK(full.batch_size == 2);
  CHECK(full.epochs == 40);
  CHECK(full.dropout == 0.5);
  CHECK(full.l2 == 1e-3);
  CHECK(full.test_split == 0.2);
  const TrainConfig c1 = TrainConfig::cnn1();
  CHECK(c1.learning_rate == 1e-3);
  CHECK(c1.epochs == 15);
  CHECK(c1.frame_size == 100);
  CHECK(c1.hop_size == 50);
  const TrainConfig c2 = TrainConfig::cnn2();
  CHECK(c2.learning_rate == 5e-3);
  CHECK(c2.epochs == 100);
  CHECK(c2.frame_size == 60);
  CHECK(c2.hop_size == 10);

  TrainConfig d = TrainConfig::desk();
  d.mode = Mode::kVisionOnly;
  d.seed = 42;
  CHECK(TrainConfig::from_json(nlohmann::json::parse(d.to_json().dump())).to_json() == d.to_json());
  const TrainConfig partial = TrainConfig::from_json(nlohmann::json::parse(R"({"epochs": 3})"), TrainConfig::cnn1());
  CHECK(partial.epochs == 3);
  CHECK(partial.learning_rate == 1e-3);
  CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json::parse(R"({"test_split": 1.0})")), std::invalid_argument);
  CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json::parse(R"({"epochs": 0})")), std::invalid_argument);
  CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json::parse(R"({"lr": 0.1})")), std::invalid_argument);
  CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json::parse(R"({"mode": "both"})")), std::invalid_argument);
}

TEST_CASE("split at episode granularity") {
  std::vector<std::string> ids;
  for (int i = 0; i < 10; ++i) ids.push_back("ep" + std::to_string(i));
  const auto [train, test] = split_ids(ids, 0.2, 5);
  CHECK(test.size() == 2);
  CHECK(train.size() == 8);
  CHECK(split_ids(ids, 0.2, 5) == std::make_pair(train, test));
  CHECK_THROWS_AS(split_ids({"a", "a"}, 0.2, 1), DatasetError);
  CHECK(split_ids({"a", "b"}, 0.01, 1).second.size() == 1);
  CHECK(split_ids({"a", "b"}, 0.99, 1).first.size() == 1);

  std::vector<Example> windows;
  for (int e = 0; e < 7; ++e)
    for (int w = 0; w < 1 + e % 3; ++w) {
      Example ex;
      ex.input.episode_id = "ep" + std::to_string(e);
      ex.input.t = w;
      windows.push_back(std::move(ex));
    }
  std::set<std::vector<std::string>> distinct;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto [tr, te] = split_dataset(windows, 0.3, seed);
    CHECK(tr.size() + te.size() == windows.size());
    std::set<std::string> a, b;
    for (const auto& x : tr) a.insert(x.input.episode_id);
    for (const auto& x : te) b.insert(x.input.episode_id);
    for (const auto& id : b) CHECK(a.count(id) == 0);
    CHECK(b.size() == 2);
    distinct.insert(std::vector<std::string>(b.begin(), b.end()));
  }
  CHECK(distinct.size() > 5);
}

TEST_CASE("sensor windowing") {
  CHECK(window_starts(1000, 100, 50).size() == 19);
  CHECK(window_starts(99, 100, 50).empty());
  CHECK(window_starts(100, 100, 50).size() == 1);
  std::mt19937_64 rng(2);
  for (int i = 0; i < 100; ++i) {
    const auto len = static_cast<std::size_t>(testutil::rand_int(rng, 0, 3000));
    const int frame = static_cast<int>(testutil::rand_int(rng, 1, 200));
    const int hop = static_cast<int>(testutil::rand_int(rng, 1, 100));
    const auto starts = window_starts(len, frame, hop);
    const std::size_t expect = len < static_cast<std::size_t>(frame) ? 0 : (len - static_cast<std::size_t>(frame)) / static_cast<std::size_t>(hop) + 1;
    REQUIRE(starts.size() == expect);
    for (std::size_t k = 0; k < starts.size(); ++k) CHECK(starts[k] == k * static_cast<std::size_t>(hop));
  }
  CHECK_THROWS_AS(window_starts(10, 0, 1), std::invalid_argument);

  // Standing for 2 s, then walking: no window straddles the change at frame 60.
  const Episode e = scripted_episode("mix", {{0, Activity::kStanding, 0}, {2.0, Activity::kWalking, 0}}, 3);
  const ActivityWindows w = activity_windows({e}, 100, 50);
  REQUIRE_FALSE(w.windows.empty());
  const TimestampMs change = e.frame_timestamp(60);
  std::set<int> seen;
  for (std::size_t i = 0; i < w.windows.size(); ++i) seen.insert(w.labels[i]);
  CHECK(seen == std::set<int>{0, 1});
  CHECK(w.windows.size() < window_starts(e.sensor.size(), 100, 50).size());
  for (std::size_t s : window_starts(e.sensor.size(), 100, 50)) {
    const bool straddles = e.sensor[s].timestamp_ms < change - 17 && e.sensor[s + 99].timestamp_ms > change + 17;
    if (straddles) CHECK(std::none_of(w.windows.begin(), w.windows.end(), [&](const Tensor& t) {
      return t.data() == sensor_window_ending(e.sensor, s + 99, 100).data();
    }));
  }
}

TEST_CASE("cnn1 training") {
  std::vector<Episode> train, test;
  for (std::uint64_t s = 0; s < 9; ++s) {
    const Activity a = static_cast<Activity>(s % 3);
    train.push_back(scripted_episode("tr" + std::to_string(s), {{0, a, 0}}, s));
    test.push_back(scripted_episode("te" + std::to_string(s), {{0, a, 0}}, 100 + s));
  }
  ModelParams p = ModelParams::create(small_config(), 1);
  const ActivityWindows single = activity_windows({train[0], train[3]}, 100, 50);
  CHECK_THROWS_AS(train_sensor_cnn1(single, p, TrainConfig::cnn1()), DatasetError);

  const auto before = p.params.at(kFusionFcWeight).value();
  const ActivityWindows tw = activity_windows(train, 100, 50);
  TrainConfig cfg = TrainConfig::cnn1();
  cfg.batch_size = 4;
  const TrainHistory h = train_sensor_cnn1(tw, p, cfg);
  CHECK(h.size() == static_cast<std::size_t>(cfg.epochs));
  CHECK(activity_accuracy(activity_windows(test, 100, 50), p) >= 0.9);
  CHECK(p.params.at(kFusionFcWeight).value() == before);
  CHECK(p.cnn1.layers[0].first.requires_grad());
  CHECK_FALSE(p.local_cnn.blocks[0][0].first.requires_grad());
}

TEST_CASE("cnn2 pretraining") {
  std::vector<Episode> eps;
  for (std::uint64_t s = 0; s < 6; ++s) eps.push_back(small_episode("e" + std::to_string(s), s));
  ModelParams p = ModelParams::create(small_config(), 2);
  const auto cnn1_before = p.cnn1.layers[0].first.value();
  const auto cnn2_before = p.cnn2.layers[0].first.value();
  const std::size_t count = p.params.size();
  TrainConfig cfg = TrainConfig::cnn2();
  cfg.epochs = 30;
  const TrainHistory h = train_sensor_cnn2(eps, p, cfg);
  CHECK(h.size() == 30);
  CHECK(h.back().loss < h.front().loss);
  CHECK(p.params.size() == count);
  CHECK(p.cnn1.layers[0].first.value() == cnn1_before);
  CHECK_FALSE(p.cnn2.layers[0].first.value() == cnn2_before);
}

TEST_CASE("train_full") {
  ModelParams p = ModelParams::create(small_config(), 3);
  std::vector<Episode> eps{small_episode("a", 1), small_episode("b", 4)};
  const auto data = make_examples(eps, p, 8);
  REQUIRE(data.size() > 8);
  CHECK(data[0].input.local.empty());
  CHECK(data[0].frozen.local->shape() == Shape{16, p.config.vision_feature_dim()});
  CHECK(data[0].frozen.activity.has_value());
  {
    // Cached features give the same probability as recomputing them from the rasters.
    const ModelInput full_in = build_window(eps[0], data[0].input.t, p.config.window);
    CHECK(predict(full_in, p, Mode::kFull).probability ==
          doctest::Approx(predict(data[0].input, p, Mode::kFull, &data[0].frozen).probability).epsilon(1e-12));
  }

  CHECK_THROWS_AS(train_full({}, p, TrainConfig::desk()), DatasetError);
  std::vector<Example> boxless{data[0]};
  boxless[0].input.bbox_mask = Tensor({16});
  CHECK_THROWS_AS(train_full(boxless, p, TrainConfig::desk()), DatasetError);

  SUBCASE("same seed gives identical weights") {
    TrainConfig cfg = TrainConfig::desk();
    cfg.epochs = 2;
    ModelParams a = ModelParams::create(small_config(), 3), b = ModelParams::create(small_config(), 3);
    const auto ha = train_full(data, a, cfg), hb = train_full(data, b, cfg);
    REQUIRE(ha.size() == 2);
    CHECK(ha[0].loss == hb[0].loss);
    CHECK(ha[1].step == static_cast<long>(2 * ((data.size() + 15) / 16)));
    for (std::size_t i = 0; i < a.params.size(); ++i) {
      CHECK(a.params.entries()[i].var.value() == b.params.entries()[i].var.value());
    }
    CHECK(a.local_cnn.blocks[0][0].first.value() == p.local_cnn.blocks[0][0].first.value());
    CHECK(a.cnn1.layers[0].first.value() == p.cnn1.layers[0].first.value());
    CHECK(a.cnn1.layers[0].first.requires_grad());
    cfg.seed = 1;
    ModelParams c = ModelParams::create(small_config(), 3);
    train_full(data, c, cfg);
    CHECK_FALSE(c.fc_w.value() == a.fc_w.value());
  }
  SUBCASE("overfits eight windows") {
    std::vector<Example> eight;
    int pos = 0, neg = 0;
    for (const auto& ex : data) {
      if (ex.input.label ? pos < 4 : neg < 4) {
        eight.push_back(ex);
        (ex.input.label ? pos : neg)++;
      }
    }
    REQUIRE(eight.size() == 8);
    TrainConfig cfg = TrainConfig::desk();
    cfg.learning_rate = 1e-2;
    cfg.batch_size = 8;
    cfg.epochs = 500;
    ModelParams q = ModelParams::create(small_config(), 5);
    const auto start = std::chrono::steady_clock::now();
    const TrainHistory h = train_full(eight, q, cfg);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    CHECK(h.back().step == 500);
    CHECK(evaluation_loss(eight, q, Mode::kFull) < 0.05);
    CHECK(seconds < 60);
  }
}

TEST_CASE("compute_metrics") {
  SUBCASE("perfect separation") {
    const Metrics m = compute_metrics({0.9, 0.8, 0.1, 0.2}, {1, 1, 0, 0}, 0.5);
    CHECK(m.accuracy == 1);
    CHECK(m.auc == 1);
    CHECK(m.f1 == 1);
    CHECK(m.precision == 1);
    CHECK(m.recall == 1);
  }
  SUBCASE("no positive predictions") {
    const Metrics m = compute_metrics({0, 0, 0, 0, 0, 0}, {1, 0, 1, 0, 0, 1}, 0.5);
    CHECK(m.f1 == 0);
    CHECK(m.precision == 0);
    CHECK(m.recall == 0);
    CHECK(m.auc == 0.5);
    CHECK(m.accuracy == 0.5);
  }
  SUBCASE("degenerate and invalid inputs") {
    CHECK(compute_metrics({0.2, 0.7}, {1, 1}, 0.5).auc == 0.5);
    CHECK(compute_metrics({0.2, 0.7}, {0, 0}, 0.5).recall == 0);
    CHECK_THROWS_AS(compute_metrics({}, {}, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(compute_metrics({0.1}, {1, 0}, 0.5), std::invalid_argument);
  }
  SUBCASE("randomized against pair counting and a brute-force confusion matrix") {
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 100; ++trial) {
      const auto n = static_cast<std::size_t>(testutil::rand_int(rng, 2, 1000));
      std::vector<double> s(n);
      std::vector<int> y(n);
      const bool coarse = trial % 2 == 0;  // many ties
      for (std::size_t i = 0; i < n; ++i) {
        s[i] = coarse ? static_cast<double>(testutil::rand_int(rng, 0, 10)) / 10 : std::uniform_real_distribution<double>()(rng);
        y[i] = static_cast<int>(testutil::rand_int(rng, 0, 1));
      }
      y[0] = 1;
      y[1] = 0;
      const double thr = std::uniform_real_distribution<double>()(rng);
      const Metrics m = compute_metrics(s, y, thr);
      CHECK(std::abs(m.auc - auc_pairs(s, y)) <= 1e-12);
      const testutil::Confusion c = confusion(s, y, thr);
      CHECK(m.accuracy == static_cast<double>(c.tp + c.tn) / static_cast<double>(n));
      const double prec = c.tp + c.fp ? static_cast<double>(c.tp) / (c.tp + c.fp) : 0.0;
      const double rec = c.tp + c.fn ? static_cast<double>(c.tp) / (c.tp + c.fn) : 0.0;
      CHECK(m.precision == prec);
      CHECK(m.recall == rec);
      CHECK(m.f1 == (prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0));
      std::vector<double> warped;
      for (double v : s) warped.push_back(std::exp(3 * v) - 7);
      CHECK(roc_auc(warped, y) == m.auc);
    }
  }
}

TEST_CASE("stratified report") {
  SUBCASE("single stratum leaves the others NA") {
    const std::vector<WindowTag> tags(4, WindowTag{"e", DistanceStratum::kMedium, Lighting::kRainy, 0});
    const EvalReport r = stratified_report(tags, {pred(0.1), pred(0.9), pred(0.2), pred(0.3)}, AbstentionMode::kExcluded);
    std::vector<std::string> names;
    for (const auto& row : r.rows) names.push_back(row.stratum);
    CHECK(names == std::vector<std::string>{"close", "medium", "far", "sunny", "cloudy", "rainy", "night", "overall"});
    for (const char* na : {"close", "far", "sunny", "cloudy", "night"}) {
      CHECK(r.row(na).n == 0);
      CHECK_FALSE(r.row(na).metrics.has_value());
    }
    CHECK(r.row("medium").n == 4);
    CHECK(r.row("medium").metrics->accuracy == 0.75);
    CHECK(report_csv(r) ==
          "stratum,n,accuracy,auc,f1,precision,recall,abstained\n"
          "close,0,NA,NA,NA,NA,NA,0\n"
          "medium,4,0.750000,0.500000,0.000000,0.000000,0.000000,0\n"
          "far,0,NA,NA,NA,NA,NA,0\n"
          "sunny,0,NA,NA,NA,NA,NA,0\n"
          "cloudy,0,NA,NA,NA,NA,NA,0\n"
          "rainy,4,0.750000,0.500000,0.000000,0.000000,0.000000,0\n"
          "night,0,NA,NA,NA,NA,NA,0\n"
          "overall,4,0.750000,0.500000,0.000000,0.000000,0.000000,0\n");
  }
  SUBCASE("abstention mode on five windows") {
    // Labels 1,1,0,0,1; window 2 (label 1) and window 4 (label 0) abstain.
    const std::vector<WindowTag> tags{{"a", DistanceStratum::kClose, Lighting::kNight, 1},
                                      {"a", DistanceStratum::kClose, Lighting::kNight, 1},
                                      {"b", DistanceStratum::kClose, Lighting::kNight, 0},
                                      {"b", DistanceStratum::kClose, Lighting::kNight, 0},
                                      {"c", DistanceStratum::kClose, Lighting::kNight, 1}};
    const std::vector<CrossingPrediction> p{pred(0.8), pred(0.9, true), pred(0.6), pred(0.7, true), pred(0.3)};
    const ReportRow inc = stratified_report(tags, p, AbstentionMode::kAsNotCrossing).row("night");
    const ReportRow exc = stratified_report(tags, p, AbstentionMode::kExcluded).row("night");
    // as_not_crossing: TP {0}, FN {1,4}, FP {2}, TN {3} -> 2/5; excluded keeps 0,2,4: TP, FP, FN -> 1/3.
    CHECK(inc.n == 5);
    CHECK(inc.abstained == 2);
    CHECK(inc.metrics->accuracy == 2.0 / 5);
    CHECK(inc.metrics->recall == 1.0 / 3);
    CHECK(inc.metrics->precision == 0.5);
    CHECK(exc.n == 3);
    CHECK(exc.abstained == 2);
    CHECK(exc.metrics->accuracy == 1.0 / 3);
    CHECK(exc.metrics->recall == 0.5);
    // Scores: abstentions rank at 0 under as_not_crossing.
    CHECK(inc.metrics->auc == doctest::Approx(auc_pairs({0.8, 0, 0.6, 0, 0.3}, {1, 1, 0, 0, 1})).epsilon(1e-12));
  }
  SUBCASE("an always-abstaining predictor scores the not-crossing fraction") {
    std::mt19937_64 rng(4);
    std::vector<WindowTag> tags;
    std::vector<CrossingPrediction> p;
    double negatives = 0;
    for (int i = 0; i < 200; ++i) {
      const int y = static_cast<int>(testutil::rand_int(rng, 0, 1));
      negatives += 1 - y;
      tags.push_back({"e", kAllDistanceStrata[static_cast<std::size_t>(i % 3)], kAllLighting[static_cast<std::size_t>(i % 4)], y});
      p.push_back(pred(std::uniform_real_distribution<double>()(rng), true));
    }
    const EvalReport r = stratified_report(tags, p, AbstentionMode::kAsNotCrossing);
    CHECK(r.row("overall").metrics->accuracy == negatives / 200);
    CHECK(r.row("overall").metrics->recall == 0);
    CHECK(r.row("overall").metrics->auc == 0.5);
    CHECK(r.row("overall").abstained == 200);
    const EvalReport ex = stratified_report(tags, p, AbstentionMode::kExcluded);
    CHECK(ex.row("overall").n == 0);
    CHECK(ex.row("overall").abstained == 200);
  }
  CHECK_THROWS_AS(stratified_report({WindowTag{}}, {}, AbstentionMode::kExcluded), std::invalid_argument);
  CHECK(parse_abstention_mode("excluded") == AbstentionMode::kExcluded);
  CHECK_THROWS_AS(parse_abstention_mode("ignore"), std::invalid_argument);
}

TEST_CASE("history csv") {
  const auto dir = testutil::scratch_dir("history");
  write_history_csv(dir / "h.csv", {{10, 0.5}, {20, 0.1234567}});
  CHECK(read_text_file(dir / "h.csv") == "step,loss\n10,0.500000\n20,0.123457\n");
}
