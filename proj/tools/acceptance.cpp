// Runs every acceptance criterion and prints one PASS/FAIL line per criterion.
// Usage: acceptance [--only N[,N...]] [--work DIR]

#include "test_util.hpp"
#include "watchped/cli.hpp"
#include "watchped/csv.hpp"
#include "watchped/layers.hpp"
#include "watchped/ops.hpp"
#include "watchped/optim.hpp"
#include "watchped/reference.hpp"
#include "watchped/synth.hpp"
#include "watchped/train.hpp"
#include "watchped/v2p.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <set>
#include <sstream>

using namespace watchped;
using namespace watchped::ad;
using testutil::rand_int;
using testutil::random_tensor;
namespace fs = std::filesystem;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      std::printf("    failed: %s\n", what.c_str());
    }
  }
};

std::string num(double v, int d = 4) { return format_fixed(v, d); }

// ---------------------------------------------------------------- 1

Var probe_loss(const Var& out, const Tensor& r) { return sum(mul(out, Var::constant(r))); }

double layer_suite(std::mt19937_64& rng, int trials) {
  double worst = 0;
  auto check = [&](const std::function<Var()>& f, ParamSet& ps) {
    worst = std::max(worst, grad_check(f, ps, 1e-6).max_relative_error);
  };
  for (int trial = 0; trial < trials; ++trial) {
    const Index c = rand_int(rng, 1, 3), h = rand_int(rng, 3, 7), w = rand_int(rng, 3, 7);
    const Index kh = rand_int(rng, 1, 3), kw = rand_int(rng, 1, 3), o = rand_int(rng, 1, 3);
    const Index stride = rand_int(rng, 1, 2), pad = rand_int(rng, 0, 1);
    ParamSet ps;
    Var x = ps.add("x", random_tensor({c, h, w}, rng));
    Var k = ps.add("k", random_tensor({o, c, kh, kw}, rng));
    Var b = ps.add("b", random_tensor({o}, rng));
    Tensor r = random_tensor({o, conv_output_extent(h, kh, stride, pad), conv_output_extent(w, kw, stride, pad)}, rng);
    check([&] { return probe_loss(conv2d(x, k, b, stride, pad), r); }, ps);

    ParamSet pp;
    Var px = pp.add("x", random_tensor({c, h, w}, rng));
    const Index pk = rand_int(rng, 1, 3);
    Tensor pr = random_tensor({c, h / pk, w / pk}, rng);
    check([&] { return probe_loss(pool2d(px, PoolMode::kMax, pk, pk), pr); }, pp);
    check([&] { return probe_loss(pool2d(px, PoolMode::kAverage, pk, pk), pr); }, pp);

    const Index n = rand_int(rng, 1, 6), m = rand_int(rng, 1, 6);
    ParamSet dp;
    Var dx = dp.add("x", random_tensor({n}, rng));
    Var dw = dp.add("w", random_tensor({m, n}, rng));
    Var db = dp.add("b", random_tensor({m}, rng));
    Tensor dr = random_tensor({m}, rng);
    for (Activation act : {Activation::kNone, Activation::kRelu, Activation::kSigmoid, Activation::kTanh}) {
      check([&] { return probe_loss(dense(dx, dw, db, act), dr); }, dp);
    }

    const Index steps = rand_int(rng, 1, 6), in = rand_int(rng, 1, 4), hid = rand_int(rng, 1, 5);
    ParamSet gp;
    GruParams g = GruParams::create(gp, "g", in, hid, rng);
    Var gx = gp.add("x", random_tensor({steps, in}, rng));
    Var h0 = gp.add("h0", random_tensor({hid}, rng));
    Tensor gr = random_tensor({steps, hid}, rng);
    check([&] { return probe_loss(gru_forward(gx, g, h0), gr); }, gp);

    ParamSet ap;
    AttentionParams att = AttentionParams::create(ap, "a", hid, rand_int(rng, 1, 4), rng);
    Var ax = ap.add("x", random_tensor({steps, hid}, rng));
    Tensor ar = random_tensor({hid}, rng);
    check([&] { return probe_loss(attention_block(ax, att).output, ar); }, ap);

    ParamSet cp;
    const Index len = rand_int(rng, 4, 12), kk = rand_int(rng, 1, 4);
    Var cx = cp.add("x", random_tensor({c, len}, rng));
    Var ck = cp.add("k", random_tensor({o, c, kk}, rng));
    Var cb = cp.add("b", random_tensor({o}, rng));
    Tensor cr = random_tensor({o, (len - kk + 1) / 2}, rng);
    check([&] { return probe_loss(max_pool1d(relu(conv1d(cx, ck, cb)), 2), cr); }, cp);

    ParamSet lp;
    const Index classes = rand_int(rng, 2, 5);
    Var logits = lp.add("l", random_tensor({classes}, rng, -2, 2));
    const Index target = rand_int(rng, 0, classes - 1);
    check([&] { return sparse_cce_loss(logits, target); }, lp);
    Tensor sr = random_tensor({classes}, rng);
    check([&] { return probe_loss(softmax(logits), sr); }, lp);

    ParamSet bp;
    Var z = bp.add("z", random_tensor({1}, rng, -3, 3));
    const int label = static_cast<int>(rand_int(rng, 0, 1));
    check([&] { return bce_loss(sigmoid(z), label); }, bp);
  }
  return worst;
}

ModelInput random_input(const ModelConfig& cfg, std::mt19937_64& rng) {
  const Index m = cfg.window.m, s = cfg.raster_size;
  ModelInput in;
  in.pose = random_tensor({m, 36}, rng, 0, 1);
  in.pose_mask = Tensor::constant({m}, 1.0);
  in.pose_mask[5] = 0;
  in.bbox = random_tensor({m, 4}, rng, -0.3, 0.3);
  in.bbox_mask = Tensor::constant({m}, 1.0);
  in.speed = random_tensor({m, 1}, rng, 0, 3);
  in.local = random_tensor({m, s, s, 3}, rng, 0, 1);
  in.global = random_tensor({m, s, s, 3}, rng, 0, 1);
  in.sensor = random_tensor({cfg.window.sensor_window, 6}, rng, -3, 3);
  in.direction = random_tensor({m, 4}, rng, -1, 1);
  return in;
}

Verdict criterion_gradients() {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(9);
  const double layers = layer_suite(rng, 20);
  std::printf("    layers: max relative error %.3e over 20 random shapes per layer\n", layers);
  v.require(layers < 1e-4, "layer gradient error " + std::to_string(layers));
  ModelParams p = ModelParams::create(ModelConfig::desk(), 11);
  const ModelInput in = random_input(p.config, rng);
  double composed = 0;
  for (int label : {0, 1}) {
    const GradCheckResult r = model_grad_check(p, in, label);
    std::printf("    desk model, label %d: %lld parameters, max relative error %.3e at %s[%lld]\n", label,
                static_cast<long long>(r.coordinates), r.max_relative_error, r.worst_parameter.c_str(),
                static_cast<long long>(r.worst_index));
    v.require(r.coordinates == p.params.scalar_count(), "not every parameter was checked");
    composed = std::max(composed, r.max_relative_error);
  }
  v.require(composed < 1e-4, "composed model error " + std::to_string(composed));
  const double secs = seconds_since(t0);
  v.require(secs < 120, "took " + num(secs, 1) + " s");
  std::ostringstream d;
  d << "layers " << std::scientific << std::setprecision(2) << layers << ", composed " << composed << ", "
    << std::fixed << std::setprecision(1) << secs << " s";
  v.detail = d.str();
  return v;
}

// ---------------------------------------------------------------- 2

Verdict criterion_oracles() {
  Verdict v;
  constexpr int kCases = 100;
  int ok_conv = 0, ok_pool = 0, ok_auc = 0, ok_conf = 0, ok_interp = 0, ok_sync = 0, ok_purge = 0;
  std::mt19937_64 rng(2);

  for (int i = 0; i < kCases; ++i) {
    const Index c = rand_int(rng, 1, 4), h = rand_int(rng, 3, 12), w = rand_int(rng, 3, 12);
    const Index kh = rand_int(rng, 1, std::min<Index>(h, 4)), kw = rand_int(rng, 1, std::min<Index>(w, 4));
    const Index stride = rand_int(rng, 1, 2), pad = rand_int(rng, 0, 1);
    const Tensor x = random_tensor({c, h, w}, rng), k = random_tensor({rand_int(rng, 1, 4), c, kh, kw}, rng);
    const Tensor got = conv2d(Var::constant(x), Var::constant(k), stride, pad).value();
    const Tensor want = testutil::conv2d_oracle(x, k, stride, pad);
    // Summation order differs from the nested loops, so equality is up to round-off.
    if (got.shape() == want.shape() && (got.data() - want.data()).cwiseAbs().maxCoeff() <= 1e-12) ++ok_conv;

    const Index ph = rand_int(rng, 1, 3), pw = rand_int(rng, 1, 3);
    const Tensor px = random_tensor({c, ph * rand_int(rng, 1, 5), pw * rand_int(rng, 1, 5)}, rng);
    const Tensor mx = pool2d(Var::constant(px), PoolMode::kMax, ph, pw).value();
    const Tensor av = pool2d(Var::constant(px), PoolMode::kAverage, ph, pw).value();
    const Tensor av_want = testutil::pool_oracle(px, false, ph, pw);
    if (mx == testutil::pool_oracle(px, true, ph, pw) && (av.data() - av_want.data()).cwiseAbs().maxCoeff() <= 1e-12) {
      ++ok_pool;
    }
  }

  for (int i = 0; i < kCases; ++i) {
    const auto n = static_cast<std::size_t>(rand_int(rng, 2, 1000));
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t j = 0; j < n; ++j) {
      s[j] = i % 2 ? std::uniform_real_distribution<double>()(rng) : static_cast<double>(rand_int(rng, 0, 10)) / 10;
      y[j] = static_cast<int>(rand_int(rng, 0, 1));
    }
    y[0] = 1;
    y[1] = 0;
    const double thr = std::uniform_real_distribution<double>()(rng);
    const Metrics m = compute_metrics(s, y, thr);
    if (std::abs(m.auc - testutil::auc_pairs(s, y)) <= 1e-12) ++ok_auc;
    const testutil::Confusion cm = testutil::confusion(s, y, thr);
    const double prec = cm.tp + cm.fp ? double(cm.tp) / (cm.tp + cm.fp) : 0.0;
    const double rec = cm.tp + cm.fn ? double(cm.tp) / (cm.tp + cm.fn) : 0.0;
    const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
    if (m.accuracy == double(cm.tp + cm.tn) / double(n) && m.precision == prec && m.recall == rec && m.f1 == f1) ++ok_conf;
  }

  std::uniform_real_distribution<double> coord(0, 600);
  for (int i = 0; i < kCases; ++i) {
    std::vector<BBox> anchors;
    int f = static_cast<int>(rand_int(rng, 0, 5));
    const auto n = rand_int(rng, 2, 6);
    for (Index a = 0; a < n; ++a) {
      const double x1 = coord(rng), y1 = coord(rng);
      anchors.push_back({f, x1, y1, x1 + coord(rng) / 4, y1 + coord(rng) / 4});
      f += static_cast<int>(rand_int(rng, 1, 12));
    }
    const auto out = interpolate_bboxes(anchors, anchors.front().frame, anchors.back().frame);
    bool ok = out.size() == static_cast<std::size_t>(anchors.back().frame - anchors.front().frame + 1);
    std::size_t seg = 0;
    for (const BBox& b : out) {
      while (anchors[seg + 1].frame < b.frame) ++seg;
      const BBox &a0 = anchors[seg], &a1 = anchors[seg + 1];
      const double u = double(b.frame - a0.frame) / (a1.frame - a0.frame);
      ok = ok && std::abs(b.x1 - ((1 - u) * a0.x1 + u * a1.x1)) <= 1e-9 &&
           std::abs(b.y1 - ((1 - u) * a0.y1 + u * a1.y1)) <= 1e-9 &&
           std::abs(b.x2 - ((1 - u) * a0.x2 + u * a1.x2)) <= 1e-9 && std::abs(b.y2 - ((1 - u) * a0.y2 + u * a1.y2)) <= 1e-9;
    }
    ok_interp += ok;
  }

  for (int i = 0; i < kCases; ++i) {
    std::vector<SensorSample> s;
    TimestampMs t = rand_int(rng, 0, 50);
    for (Index j = 0, n = rand_int(rng, 1, 80); j < n; ++j) {
      s.push_back({t, 0, 0, 0, 0, 0, 0});
      t += rand_int(rng, 1, 40);
    }
    std::vector<TimestampMs> ts;
    TimestampMs ft = rand_int(rng, -30, 60);
    for (int j = 0; j < 20; ++j) {
      ts.push_back(ft);
      ft += rand_int(rng, 0, 50);
    }
    const SyncResult r = sync_sensor_lenient(s, ts, 1'000'000);
    bool ok = true;
    for (std::size_t j = 0; j < ts.size(); ++j) ok = ok && r.sample_index[j] == testutil::nearest_oracle(s, ts[j]);
    ok_sync += ok;
  }

  std::uniform_real_distribution<double> u(0, 200);
  for (int i = 0; i < kCases; ++i) {
    const double x1 = u(rng), y1 = u(rng);
    const BBox b{0, x1, y1, x1 + u(rng) / 2, y1 + u(rng) / 2};
    PoseFrame p;
    for (auto& kp : p.keypoints) kp = {u(rng) * 1.5, u(rng) * 1.5, u(rng) < 170};
    const PoseFrame out = purge_pose(p, b);
    bool ok = true;
    for (int j = 0; j < kPoseKeypoints; ++j) {
      const Keypoint& in = p.keypoints[static_cast<std::size_t>(j)];
      const bool keep = in.valid && in.x >= b.x1 && in.x <= b.x2 && in.y >= b.y1 && in.y <= b.y2;
      const Keypoint& got = out.keypoints[static_cast<std::size_t>(j)];
      ok = ok && got.valid == keep && (!keep || got == in);
    }
    ok_purge += ok;
  }

  const std::pair<const char*, int> rows[] = {{"conv2d", ok_conv},       {"pool2d", ok_pool},
                                              {"auc", ok_auc},           {"confusion", ok_conf},
                                              {"interpolation", ok_interp}, {"sync", ok_sync},
                                              {"pose purge", ok_purge}};
  std::ostringstream d;
  for (const auto& [name, ok] : rows) {
    std::printf("    %-14s %d/%d\n", name, ok, kCases);
    v.require(ok == kCases, std::string(name) + " oracle disagreed");
    d << (d.tellp() ? ", " : "") << name << " " << ok << "/" << kCases;
  }
  v.detail = d.str();
  return v;
}

// ---------------------------------------------------------------- 3

Verdict criterion_shapes() {
  Verdict v;
  const ModelConfig cfg = ModelConfig::full_scale();
  ModelParams p = ModelParams::create(cfg, 3);
  NoGrad guard(p.params);
  std::mt19937_64 rng(8);

  const Tensor pose = random_tensor({cfg.window.m, 36}, rng, 0, 1);
  const Shape gru = gru_forward(Var::constant(pose), p.nv_gru1).shape();
  std::printf("    pose GRU sequence output %s\n", shape_string(gru).c_str());
  v.require(gru == Shape{16, 256}, "pose GRU output");

  // Global average pooling makes the feature width independent of the raster, so the sequence runs
  // with full channel widths on small frames and one frame is checked at full resolution.
  const Tensor small = random_tensor({cfg.window.m, 16, 16, 3}, rng, 0, 1);
  const Shape seq = vision_frame_features(small, p.local_cnn).shape();
  std::printf("    local-context pooled feature sequence %s\n", shape_string(seq).c_str());
  v.require(seq == Shape{16, 512}, "local feature sequence");
  const Tensor frame = random_tensor({1, 224, 224, 3}, rng, 0, 1);
  const Shape map = vision_cnn_map(frame_chw(frame, 0), p.local_cnn).shape();
  std::printf("    one 224x224 frame: feature map %s\n", shape_string(map).c_str());
  v.require(map == Shape{512, 14, 14}, "full-resolution feature map");

  ScenarioConfig sc;
  sc.raster_size = cfg.raster_size;
  sc.seed = 4;
  const Episode e = prepare_episode(generate_episode(sc));
  const ModelInput in = build_window(e, window_end_frames(e, cfg.window, 1).front(), cfg.window);
  std::printf("    context input %s (a stated 244 is treated as a typo for 224)\n",
              shape_string(in.local.shape()).c_str());
  v.require(in.local.shape() == Shape{16, 224, 224, 3} && in.global.shape() == in.local.shape(), "context input");
  v.detail = "[16,256], [16,512], [16,224,224,3]";
  return v;
}

// ---------------------------------------------------------------- 4

Verdict criterion_overfit() {
  Verdict v;
  ModelParams p = ModelParams::create(ModelConfig::desk(), 5);
  std::vector<Example> eight;
  int pos = 0, neg = 0;
  for (std::uint64_t seed = 1; eight.size() < 8 && seed < 50; ++seed) {
    const Episode e = prepare_episode(
        generate_episode(sample_scenario("ov" + std::to_string(seed), DistanceStratum::kClose, Lighting::kSunny, seed)));
    for (auto& ex : make_examples(e, p, 8)) {
      if (!ex.input.has_bbox() || (ex.input.label ? pos : neg) >= 4) continue;
      (ex.input.label ? pos : neg)++;
      eight.push_back(std::move(ex));
      if (eight.size() == 8) break;
    }
  }
  v.require(eight.size() == 8, "could not collect 4 crossing and 4 not-crossing windows");
  TrainConfig cfg = TrainConfig::desk();
  cfg.learning_rate = 1e-2;
  cfg.batch_size = 8;
  cfg.epochs = 500;
  const auto t0 = std::chrono::steady_clock::now();
  const TrainHistory h = train_full(eight, p, cfg);
  const double secs = seconds_since(t0);
  const double loss = evaluation_loss(eight, p, Mode::kFull);
  std::printf("    %ld steps, last epoch objective %.4f, BCE on the 8 windows %.5f, %.1f s\n", h.back().step,
              h.back().loss, loss, secs);
  v.require(h.back().step <= 500, "more than 500 steps");
  v.require(loss < 0.05, "BCE " + num(loss));
  v.require(secs < 60, "took " + num(secs, 1) + " s");
  v.detail = "BCE " + num(loss, 5) + " after " + std::to_string(h.back().step) + " steps, " + num(secs, 1) + " s";
  return v;
}

// ---------------------------------------------------------------- 5-8 share trained models

struct Trained {
  std::vector<Episode> test;   // held-out episodes of the 120-episode suite
  std::vector<Episode> eval;   // separate 96-episode suite
  ModelParams full, vision;
  int stride = 4;
};

std::vector<Episode> make_suite(int n, std::uint64_t master, const std::string& prefix) {
  std::vector<Episode> out;
  for (auto row : plan_suite(n, {}, master)) {
    row.id = prefix + row.id;
    out.push_back(prepare_episode(generate_episode(scenario_for(row))));
  }
  return out;
}

Trained& trained() {
  static std::optional<Trained> t;
  if (t) return *t;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<Episode> suite = make_suite(120, 2024, "");
  std::vector<std::string> ids;
  for (const auto& e : suite) ids.push_back(e.id);
  RunConfig rc;
  rc.train.seed = 1;
  const auto [train_ids, test_ids] = split_ids(ids, rc.train.test_split, rc.train.seed);
  const std::set<std::string> test_set(test_ids.begin(), test_ids.end());
  std::vector<Episode> train, test;
  for (auto& e : suite) (test_set.count(e.id) ? test : train).push_back(std::move(e));
  suite.clear();
  std::printf("    [suite of 120 episodes: %zu train, %zu held out]\n", train.size(), test.size());
  rc.train.mode = Mode::kFull;
  ModelParams full = train_model(train, rc);
  rc.train.mode = Mode::kVisionOnly;
  ModelParams vision = train_model(train, rc);
  train.clear();
  std::printf("    [trained full and vision_only in %.0f s]\n", seconds_since(t0));
  t = Trained{std::move(test), make_suite(96, 99, "ev"), std::move(full), std::move(vision), rc.train.window_stride};
  return *t;
}

EvalReport report_for(const std::vector<Episode>& eps, ModelParams& model, Mode mode, int stride) {
  const auto examples = make_examples(eps, model, stride);
  std::vector<WindowTag> tags;
  for (const auto& ex : examples) tags.push_back(tag_of(ex.input));
  return stratified_report(tags, predict_all(examples, model, mode), AbstentionMode::kAsNotCrossing);
}

void print_report(const char* name, const EvalReport& r) {
  std::printf("    %s\n", name);
  std::istringstream lines(report_csv(r));
  for (std::string line; std::getline(lines, line);) std::printf("      %s\n", line.c_str());
}

double metric(const EvalReport& r, const char* stratum, double Metrics::*field) {
  const ReportRow& row = r.row(stratum);
  return row.metrics ? (*row.metrics).*field : std::nan("");
}

Verdict criterion_learnability() {
  Verdict v;
  Trained& t = trained();
  const double act = activity_accuracy(activity_windows(t.test, 100, 50), t.full);
  const EvalReport r = report_for(t.test, t.full, Mode::kFull, t.stride);
  print_report("full mode, held-out episodes", r);
  const double acc = metric(r, "overall", &Metrics::accuracy);
  std::printf("    CNN1 held-out activity accuracy %.4f\n", act);
  v.require(act >= 0.9, "activity accuracy " + num(act));
  v.require(acc >= 0.85, "crossing accuracy " + num(acc));
  v.detail = "activity " + num(act) + ", crossing " + num(acc);
  return v;
}

struct EvalReports {
  EvalReport full, vision;
};

EvalReports& eval_reports() {
  static std::optional<EvalReports> r;
  if (!r) {
    Trained& t = trained();
    r = EvalReports{report_for(t.eval, t.full, Mode::kFull, t.stride),
                    report_for(t.eval, t.vision, Mode::kVisionOnly, t.stride)};
    print_report("full mode, 96-episode evaluation suite", r->full);
    print_report("vision_only, 96-episode evaluation suite", r->vision);
  }
  return *r;
}

Verdict criterion_far() {
  Verdict v;
  const EvalReports& r = eval_reports();
  const double full_far = metric(r.full, "far", &Metrics::accuracy);
  const double vis_far = metric(r.vision, "far", &Metrics::accuracy);
  const double vis_close = metric(r.vision, "close", &Metrics::accuracy);
  v.require(full_far - vis_far >= 0.10, "far: full - vision_only = " + num(full_far - vis_far));
  v.require(vis_close - vis_far >= 0.15, "vision_only close - far = " + num(vis_close - vis_far));
  v.detail = "far accuracy full " + num(full_far) + " vs vision_only " + num(vis_far) + "; vision_only close " +
             num(vis_close);
  return v;
}

Verdict criterion_night() {
  Verdict v;
  const EvalReports& r = eval_reports();
  const double vr_sun = metric(r.vision, "sunny", &Metrics::recall), vr_night = metric(r.vision, "night", &Metrics::recall);
  const double va_sun = metric(r.vision, "sunny", &Metrics::accuracy);
  const double va_night = metric(r.vision, "night", &Metrics::accuracy);
  const double fr_sun = metric(r.full, "sunny", &Metrics::recall), fr_night = metric(r.full, "night", &Metrics::recall);
  const double vis_gap = vr_sun - vr_night, full_gap = fr_sun - fr_night;
  v.require(vr_night < vr_sun, "vision_only night recall is not below sunny");
  v.require(va_sun - va_night < vis_gap, "vision_only accuracy drops as much as recall");
  v.require(full_gap < vis_gap, "full recall gap " + num(full_gap) + " not below vision_only " + num(vis_gap));
  v.detail = "vision_only recall sunny " + num(vr_sun) + " night " + num(vr_night) + ", accuracy drop " +
             num(va_sun - va_night) + "; recall gap full " + num(full_gap) + " vs vision_only " + num(vis_gap);
  return v;
}

// ---------------------------------------------------------------- 8

Verdict criterion_channel() {
  Verdict v;
  ScenarioConfig sc;  // the default script stands still for the whole episode
  sc.id = "standing";
  sc.seed = 21;
  const Episode e = prepare_episode(generate_episode(sc));
  const auto packets = packetize(e.sensor, e.gps, 10);
  const auto frames = e.frame_timestamps();

  const ResyncResult identity = receive_resync(transmit(packets, {}), frames, 20, static_cast<std::int64_t>(packets.size()));
  std::vector<GpsSample> gps;
  for (const auto& pk : packets) {
    if (pk.gps) gps.push_back(*pk.gps);
  }
  v.require(identity.stream == e.sensor, "identity channel changed the sensor stream");
  v.require(identity.stats.delivered_fraction == 1.0 && identity.stats.gap_count == 0, "identity channel lost packets");
  std::printf("    identity: %zu samples bit-exact, %zu GPS fixes carried\n", identity.stream.size(), gps.size());

  std::vector<SensorSample> long_stream;
  for (int i = 0; i < 10000; ++i) long_stream.push_back({i * 20, 0, 0, 0, 0, 0, 0});
  const auto many = packetize(long_stream, {}, 1);
  double lo = 1, hi = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ChannelConfig c;
    c.loss_probability = 0.1;
    c.seed = seed;
    const double frac = double(transmit(many, c).size()) / double(many.size());
    lo = std::min(lo, frac);
    hi = std::max(hi, frac);
  }
  std::printf("    loss 0.1 over 10000 packets, 5 seeds: delivered %.4f..%.4f\n", lo, hi);
  v.require(lo >= 0.88 && hi <= 0.92, "delivered fraction outside [0.88, 0.92]");

  ChannelConfig c;
  c.base_latency_ms = 50;
  c.jitter_ms = 20;
  c.seed = 3;
  const auto delivered = transmit(packets, c);
  const ResyncResult rr = receive_resync(delivered, frames, 20, static_cast<std::int64_t>(packets.size()));
  double expected = 0, min_delay = 1e9, max_delay = 0;
  for (const auto& d : delivered) {
    const double delay = d.arrival_ms - static_cast<double>(d.packet.send_timestamp_ms);
    min_delay = std::min(min_delay, delay);
    max_delay = std::max(max_delay, delay);
  }
  for (TimestampMs t : frames) {
    std::optional<TimestampMs> newest;
    for (const auto& d : delivered)
      for (const auto& s : d.packet.samples)
        if (d.arrival_ms <= static_cast<double>(t) && (!newest || s.timestamp_ms > *newest)) newest = s.timestamp_ms;
    if (newest) expected = std::max(expected, static_cast<double>(t - *newest));
  }
  const double bound = max_delay + 10 * 20;  // newest sample ages by at most one batch period plus the delay
  std::printf("    50 +- 20 ms: injected delays %.1f..%.1f ms, max staleness %.1f ms (scan %.1f, bound %.1f)\n",
              min_delay, max_delay, rr.stats.max_staleness_ms, expected, bound);
  v.require(min_delay >= 30 && max_delay <= 70, "injected delays outside 50 +- 20 ms");
  v.require(rr.stats.max_staleness_ms == expected, "staleness differs from the brute-force scan");
  v.require(rr.stats.max_staleness_ms >= min_delay && rr.stats.max_staleness_ms <= bound, "staleness outside bounds");

  ModelParams& model = trained().full;
  double worst = 0;
  int windows = 0;
  for (int t : window_end_frames(e, model.config.window, 1)) {
    ModelInput noisy;
    try {
      noisy = causal_window(e, delivered, t, model.config.window);
    } catch (const WindowError&) {
      continue;
    }
    const double pc = predict(build_window(e, t, model.config.window), model, Mode::kFull).probability;
    worst = std::max(worst, std::abs(predict(noisy, model, Mode::kFull).probability - pc));
    ++windows;
  }
  std::printf("    standing pedestrian, trained full model: largest |dp| %.5f over %d windows\n", worst, windows);
  v.require(windows > 0, "no window could be built from the received stream");
  v.require(worst < 0.05, "probability moved by " + num(worst));
  v.detail = "loss " + num(lo) + ".." + num(hi) + ", staleness " + num(rr.stats.max_staleness_ms, 0) + " ms, |dp| " +
             num(worst);
  return v;
}

// ---------------------------------------------------------------- 9

Verdict criterion_determinism(const fs::path& work) {
  Verdict v;
  fs::remove_all(work);
  fs::create_directories(work);
  RunConfig rc;
  write_text_file(work / "run.json", rc.to_json().dump(2));
  std::ostringstream sink;
  auto call = [&](std::vector<std::string> args) {
    const int code = run(args, sink, sink);
    if (code != 0) v.require(false, args.front() + " exited " + std::to_string(code) + ": " + sink.str());
  };
  for (const char* tag : {"a", "b"}) {
    const fs::path d = work / tag;
    call({"gen", "--n", "12", "--seed", "7", "--out", (d / "suite").string()});
    call({"train", "--data", (d / "suite").string(), "--config", (work / "run.json").string(), "--out-weights",
          (d / "model.json").string(), "--seed", "7"});
    call({"eval", "--data", (d / "suite").string(), "--weights", (d / "model.json").string(), "--split", "all", "--out",
          (d / "report.csv").string()});
  }
  if (!v.pass) return v;
  const auto a = testutil::tree_bytes(work / "a"), b = testutil::tree_bytes(work / "b");
  std::size_t same = 0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) same += a[i] == b[i];
  std::printf("    %zu of %zu files byte-identical (suite, weights, history, report)\n", same, a.size());
  v.require(a.size() == b.size() && same == a.size(), "outputs differ between runs");
  v.detail = std::to_string(same) + "/" + std::to_string(a.size()) + " files identical";
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance run"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "watchped_acceptance").string();
  app.add_option("--only", only, "criteria to run")->delimiter(',')->check(CLI::Range(1, 9));
  app.add_option("--work", work, "scratch directory");
  CLI11_PARSE(app, argc, argv);
  std::setvbuf(stdout, nullptr, _IONBF, 0);

  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria = {
      {"gradient suite", criterion_gradients},
      {"oracle suite", criterion_oracles},
      {"full-scale shapes", criterion_shapes},
      {"overfit eight windows", criterion_overfit},
      {"learnability", criterion_learnability},
      {"far stratum", criterion_far},
      {"night recall", criterion_night},
      {"channel suite", criterion_channel},
      {"determinism", [&] { return criterion_determinism(work); }},
  };
  std::vector<std::string> lines;
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    std::printf("criterion %d (%s)\n", id, criteria[i].first);
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("error: ") + e.what();
    }
    all = all && v.pass;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.0f s", seconds_since(t0));
    lines.push_back(std::string(v.pass ? "PASS" : "FAIL") + "  " + std::to_string(id) + " " + criteria[i].first + ": " +
                    v.detail + " (" + buf + ")");
    std::printf("%s\n", lines.back().c_str());
  }
  std::printf("\nsummary\n");
  for (const auto& l : lines) std::printf("%s\n", l.c_str());
  return all ? 0 : 1;
}
