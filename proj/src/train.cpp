#include "watchped/train.hpp"

#include "watchped/csv.hpp"
#include "watchped/optim.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace watchped {
using namespace ad;
using json = nlohmann::ordered_json;

namespace {

// Restores every parameter's requires_grad flag on scope exit.
class FreezeGuard {
 public:
  explicit FreezeGuard(ParamSet& ps) : ps_(ps) {
    for (const auto& e : ps_.entries()) saved_.push_back(e.var.requires_grad());
  }
  ~FreezeGuard() {
    for (std::size_t i = 0; i < saved_.size(); ++i) ps_.entries()[i].var.set_requires_grad(saved_[i]);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

  /// Only parameters under the given prefixes stay trainable.
  void train_only(const std::vector<std::string>& prefixes) {
    for (auto& e : ps_.entries()) e.var.set_requires_grad(false);
    ps_.freeze_prefixes(prefixes, false);
  }

 private:
  ParamSet& ps_;
  std::vector<bool> saved_;
};

Tensor raster_chw(const ContextRaster& r) {
  const Index h = r.pixels.dim(0), w = r.pixels.dim(1);
  Tensor out({3, h, w});
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index c = 0; c < 3; ++c) out[(c * h + y) * w + x] = r.value(y, x, c);
  return out;
}

Tensor frame_features(const std::vector<ContextRaster>& rasters, const VisionCnnParams& cnn) {
  std::vector<Tensor> rows;
  for (const auto& r : rasters) rows.push_back(vision_cnn_forward(raster_chw(r), cnn).value());
  const Index d = rows.empty() ? 0 : rows.front().size();
  Tensor out({static_cast<Index>(rows.size()), d});
  for (std::size_t i = 0; i < rows.size(); ++i) out.data().segment(static_cast<Index>(i) * d, d) = rows[i].data();
  return out;
}

Tensor slice_rows(const Tensor& t, int first, int count) {
  const Index d = t.dim(1);
  Tensor out({count, d});
  out.data() = t.data().segment(first * d, count * d);
  return out;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

// Shared minibatch loop: `loss_of(i, ctx)` builds the loss of example i.
template <typename LossFn>
TrainHistory run_epochs(std::size_t n, ParamSet& params, const TrainConfig& cfg, const LossFn& loss_of,
                        const std::function<Var()>& penalty = {}) {
  std::mt19937_64 rng(cfg.seed);
  AdamState adam(AdamHyper{cfg.learning_rate});
  const ForwardContext ctx{true, cfg.dropout, &rng};
  TrainHistory history;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(n, rng);
    double total = 0;
    long batches = 0;
    for (std::size_t begin = 0; begin < n; begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(n, begin + static_cast<std::size_t>(cfg.batch_size));
      std::vector<Var> losses;
      for (std::size_t k = begin; k < end; ++k) losses.push_back(loss_of(order[k], ctx));
      Var loss = scale(sum(concat(losses)), 1.0 / static_cast<double>(end - begin));
      if (penalty) loss = add(loss, penalty());
      params.zero_grad();
      loss.backward();
      adam_step(params, adam);
      total += loss.item();
      ++batches;
    }
    history.push_back({adam.step_count, total / static_cast<double>(batches)});
  }
  return history;
}

int activity_at(const Episode& e, TimestampMs ts) {
  const long frame = std::lround(static_cast<double>(ts - e.timestamp_origin_ms) * e.fps / 1000.0);
  const long clamped = std::clamp<long>(frame, 0, static_cast<long>(e.activity.size()) - 1);
  return static_cast<int>(e.activity[static_cast<std::size_t>(clamped)]);
}

const std::vector<std::string> kStrataRows = {"close", "medium", "far", "sunny", "cloudy", "rainy", "night", "overall"};

}  // namespace

TrainConfig TrainConfig::cnn1() {
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.epochs = 15;
  c.batch_size = 32;
  c.dropout = 0;
  c.frame_size = 100;
  c.hop_size = 50;
  return c;
}

TrainConfig TrainConfig::cnn2() {
  TrainConfig c;
  c.learning_rate = 5e-3;
  c.epochs = 100;
  c.batch_size = 32;
  c.dropout = 0;
  c.frame_size = 60;
  c.hop_size = 10;
  return c;
}

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.learning_rate = 3e-3;
  c.batch_size = 16;
  c.epochs = 20;
  c.window_stride = 4;
  return c;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw std::invalid_argument("learning_rate must be positive");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  if (!(dropout >= 0 && dropout < 1)) throw std::invalid_argument("dropout must lie in [0,1)");
  if (!(l2 >= 0)) throw std::invalid_argument("l2 must be nonnegative");
  if (!(test_split > 0 && test_split < 1)) throw std::invalid_argument("test_split must lie in (0,1)");
  if (frame_size < 1 || hop_size < 1) throw std::invalid_argument("frame_size and hop_size must be positive");
  if (window_stride < 1) throw std::invalid_argument("window_stride must be positive");
}

json TrainConfig::to_json() const {
  json j;
  j["learning_rate"] = learning_rate;
  j["batch_size"] = batch_size;
  j["epochs"] = epochs;
  j["dropout"] = dropout;
  j["l2"] = l2;
  j["test_split"] = test_split;
  j["seed"] = seed;
  j["mode"] = std::string(to_string(mode));
  j["frame_size"] = frame_size;
  j["hop_size"] = hop_size;
  j["window_stride"] = window_stride;
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, const TrainConfig& base) {
  if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
  TrainConfig c = base;
  for (const auto& [key, v] : j.items()) {
    if (key == "learning_rate") c.learning_rate = v.get<double>();
    else if (key == "batch_size") c.batch_size = v.get<int>();
    else if (key == "epochs") c.epochs = v.get<int>();
    else if (key == "dropout") c.dropout = v.get<double>();
    else if (key == "l2") c.l2 = v.get<double>();
    else if (key == "test_split") c.test_split = v.get<double>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "mode") c.mode = parse_mode(v.get<std::string>());
    else if (key == "frame_size") c.frame_size = v.get<int>();
    else if (key == "hop_size") c.hop_size = v.get<int>();
    else if (key == "window_stride") c.window_stride = v.get<int>();
    else throw std::invalid_argument("unknown train config key '" + key + "'");
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path, const TrainConfig& base) {
  try {
    return from_json(nlohmann::json::parse(read_text_file(path)), base);
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_history_csv(const std::filesystem::path& path, const TrainHistory& history) {
  std::ostringstream out;
  out << "step,loss\n";
  for (const auto& h : history) out << h.step << ',' << format_fixed(h.loss, 6) << '\n';
  write_text_file(path, out.str());
}

std::pair<std::vector<std::string>, std::vector<std::string>> split_ids(std::vector<std::string> ids,
                                                                        double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0 && test_fraction < 1)) throw std::invalid_argument("test fraction must lie in (0,1)");
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (ids.size() < 2) throw DatasetError("need at least 2 episodes to split, got " + std::to_string(ids.size()));
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  const auto n = static_cast<long>(ids.size());
  const long n_test = std::clamp<long>(std::lround(test_fraction * static_cast<double>(n)), 1, n - 1);
  std::vector<std::string> test(ids.begin(), ids.begin() + n_test), train(ids.begin() + n_test, ids.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

std::pair<std::vector<Example>, std::vector<Example>> split_dataset(std::vector<Example> windows, double test_fraction,
                                                                    std::uint64_t seed) {
  std::vector<std::string> ids;
  for (const auto& w : windows) ids.push_back(w.input.episode_id);
  const auto [train_ids, test_ids] = split_ids(ids, test_fraction, seed);
  const std::set<std::string> test_set(test_ids.begin(), test_ids.end());
  std::pair<std::vector<Example>, std::vector<Example>> out;
  for (auto& w : windows) (test_set.count(w.input.episode_id) ? out.second : out.first).push_back(std::move(w));
  return out;
}

std::vector<Example> make_examples(const Episode& prepared, ModelParams& model, int stride) {
  const WindowConfig& wc = model.config.window;
  const bool vision_frozen = !model.local_cnn.blocks[0][0].first.requires_grad();
  const bool has_rasters = !prepared.local.empty() && !prepared.global.empty();
  if (has_rasters && prepared.local.front().pixels.dim(0) != model.config.raster_size) {
    throw DatasetError("episode " + prepared.id + " has rasters of size " +
                       std::to_string(prepared.local.front().pixels.dim(0)) + ", model expects " +
                       std::to_string(model.config.raster_size));
  }
  if (!has_rasters) throw DatasetError("episode " + prepared.id + " has no context rasters");
  NoGrad no_grad(model.params);
  std::optional<Tensor> local, global;
  const Episode* source = &prepared;
  Episode stripped;
  if (vision_frozen) {
    local = frame_features(prepared.local, model.local_cnn);
    global = frame_features(prepared.global, model.global_cnn);
    stripped = prepared;
    stripped.local.clear();
    stripped.global.clear();
    source = &stripped;
  }
  std::vector<Example> out;
  for (int t : window_end_frames(prepared, wc, stride)) {
    Example ex;
    ex.input = build_window(*source, t, wc);
    ex.frozen.activity = sensor_cnn1_forward(ex.input.sensor, model).value();
    if (local) {
      ex.frozen.local = slice_rows(*local, ex.input.first_frame, wc.m);
      ex.frozen.global = slice_rows(*global, ex.input.first_frame, wc.m);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<Example> make_examples(const std::vector<Episode>& prepared, ModelParams& model, int stride) {
  std::vector<Example> out;
  for (const auto& e : prepared) {
    auto part = make_examples(e, model, stride);
    std::move(part.begin(), part.end(), std::back_inserter(out));
  }
  return out;
}

std::vector<std::size_t> window_starts(std::size_t length, int frame, int hop) {
  if (frame < 1 || hop < 1) throw std::invalid_argument("frame and hop must be positive");
  std::vector<std::size_t> out;
  for (std::size_t s = 0; s + static_cast<std::size_t>(frame) <= length; s += static_cast<std::size_t>(hop)) out.push_back(s);
  return out;
}

ActivityWindows activity_windows(const std::vector<Episode>& episodes, int frame, int hop) {
  ActivityWindows out;
  for (const auto& e : episodes) {
    if (e.activity.empty()) throw DatasetError("episode " + e.id + " has no activity annotation");
    for (std::size_t s : window_starts(e.sensor.size(), frame, hop)) {
      const int first = activity_at(e, e.sensor[s].timestamp_ms);
      bool uniform = true;
      for (std::size_t i = s; i < s + static_cast<std::size_t>(frame) && uniform; ++i) {
        uniform = activity_at(e, e.sensor[i].timestamp_ms) == first;
      }
      if (!uniform) continue;
      out.windows.push_back(sensor_window_ending(e.sensor, s + static_cast<std::size_t>(frame) - 1, frame));
      out.labels.push_back(first);
      out.episode_ids.push_back(e.id);
    }
  }
  return out;
}

TrainHistory train_sensor_cnn1(const ActivityWindows& data, ModelParams& model, const TrainConfig& cfg) {
  cfg.validate();
  if (std::set<int>(data.labels.begin(), data.labels.end()).size() < 2) {
    throw DatasetError("activity training needs at least two classes");
  }
  FreezeGuard guard(model.params);
  guard.train_only({kCnn1Prefix});
  return run_epochs(data.windows.size(), model.params, cfg, [&](std::size_t i, const ForwardContext&) {
    return sparse_cce_loss(sensor_cnn1_logits(data.windows[i], model), data.labels[i]);
  });
}

double activity_accuracy(const ActivityWindows& data, ModelParams& model) {
  if (data.windows.empty()) throw DatasetError("no activity windows");
  NoGrad guard(model.params);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < data.windows.size(); ++i) {
    const Tensor logits = sensor_cnn1_logits(data.windows[i], model).value();
    Index best = 0;
    logits.data().maxCoeff(&best);
    hit += static_cast<int>(best) == data.labels[i];
  }
  return static_cast<double>(hit) / static_cast<double>(data.windows.size());
}

TrainHistory train_sensor_cnn2(const std::vector<Episode>& prepared, ModelParams& model, const TrainConfig& cfg) {
  cfg.validate();
  const WindowConfig& wc = model.config.window;
  struct Window {
    Tensor activity, direction;
    int label;
  };
  std::vector<Window> windows;
  {
    NoGrad no_grad(model.params);
    for (const auto& e : prepared) {
      const auto ts = e.frame_timestamps();
      const SyncResult sync = sync_sensor_lenient(e.sensor, ts, wc.sync_tolerance_ms);
      for (int t = cfg.frame_size - 1; t + wc.f < e.frame_count; t += cfg.hop_size) {
        const auto end = sync.sample_index[static_cast<std::size_t>(t)];
        if (sync.stale[static_cast<std::size_t>(t)] || end + 1 < wc.sensor_window) continue;
        Window w;
        w.activity = sensor_cnn1_forward(sensor_window_ending(e.sensor, static_cast<std::size_t>(end), wc.sensor_window), model).value();
        std::vector<TimestampMs> wts;
        std::vector<std::optional<BBox>> boxes;
        for (int f = t - cfg.frame_size + 1; f <= t; ++f) {
          wts.push_back(ts[static_cast<std::size_t>(f)]);
          const BBox* b = e.bbox_at(f);
          boxes.push_back(b ? std::optional<BBox>(*b) : std::nullopt);
        }
        w.direction = direction_features(e.gps, boxes, wts);
        w.label = e.labels[static_cast<std::size_t>(t + wc.f)] == Action::kCrossing ? 1 : 0;
        windows.push_back(std::move(w));
      }
    }
  }
  if (windows.empty()) throw DatasetError("no direction windows for CNN2 pretraining");
  std::set<int> classes;
  for (const auto& w : windows) classes.insert(w.label);
  if (classes.size() < 2) throw DatasetError("CNN2 pretraining needs both crossing and not-crossing windows");

  // Temporary two-class head, discarded afterwards.
  std::mt19937_64 rng(cfg.seed ^ 0x5eedULL);
  const Index c = model.config.sensor_dim();
  ParamSet head;
  const Var w = head.add("w", glorot_uniform({2, c}, c, 2, rng));
  const Var b = head.add("b", Tensor({2}));
  FreezeGuard guard(model.params);
  guard.train_only({kCnn2Prefix});
  ParamSet joint;
  for (const auto& e : model.params.entries()) {
    if (e.var.requires_grad()) joint.entries().push_back(e);
  }
  for (const auto& e : head.entries()) joint.entries().push_back(e);
  return run_epochs(windows.size(), joint, cfg, [&](std::size_t i, const ForwardContext&) {
    const Var trunk = sensor_cnn2_trunk(Var::constant(windows[i].activity), windows[i].direction, model);
    return sparse_cce_loss(dense(trunk, w, b, Activation::kNone), windows[i].label);
  });
}

TrainHistory train_full(const std::vector<Example>& train, ModelParams& model, const TrainConfig& cfg) {
  cfg.validate();
  std::vector<const Example*> usable;
  for (const auto& ex : train) {
    if (ex.input.has_bbox()) usable.push_back(&ex);
  }
  if (usable.empty()) throw DatasetError("no training windows with a bounding box");
  FreezeGuard guard(model.params);
  model.params.freeze_prefixes({kCnn1Prefix});
  model.params.freeze_prefixes({kVisionCnnPrefixes[0], kVisionCnnPrefixes[1]}, model.config.freeze_vision_cnn);
  return run_epochs(
      usable.size(), model.params, cfg,
      [&](std::size_t i, const ForwardContext& ctx) {
        const Example& ex = *usable[i];
        return bce_loss(forward_probability(ex.input, model, cfg.mode, ctx, &ex.frozen), ex.input.label);
      },
      [&] { return l2_penalty(model, cfg.l2); });
}

double evaluation_loss(const std::vector<Example>& data, ModelParams& model, Mode mode) {
  NoGrad guard(model.params);
  double total = 0;
  std::size_t n = 0;
  for (const auto& ex : data) {
    if (!ex.input.has_bbox()) continue;
    total += bce_loss(forward_probability(ex.input, model, mode, {}, &ex.frozen), ex.input.label).item();
    ++n;
  }
  if (n == 0) throw DatasetError("no evaluation windows with a bounding box");
  return total / static_cast<double>(n);
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("scores and labels differ in length");
  if (scores.empty()) throw std::invalid_argument("no scores");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double pos = 0, neg = 0;
  for (int l : labels) (l ? pos : neg) += 1;
  if (pos == 0 || neg == 0) return 0.5;
  double tp = 0, fp = 0, area = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    double dtp = 0, dfp = 0;
    for (; i < order.size() && scores[order[i]] == s; ++i) (labels[order[i]] ? dtp : dfp) += 1;
    area += dfp * (tp + tp + dtp) / 2;
    tp += dtp;
    fp += dfp;
  }
  return area / (pos * neg);
}

namespace {

Metrics metrics_from(const std::vector<int>& predicted, const std::vector<double>& scores, const std::vector<int>& labels) {
  double tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i]) {
      (predicted[i] ? tp : fn) += 1;
    } else {
      (predicted[i] ? fp : tn) += 1;
    }
  }
  Metrics m;
  m.auc = roc_auc(scores, labels);
  m.accuracy = (tp + tn) / static_cast<double>(labels.size());
  m.precision = tp + fp > 0 ? tp / (tp + fp) : 0;
  m.recall = tp + fn > 0 ? tp / (tp + fn) : 0;
  m.f1 = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0;
  return m;
}

}  // namespace

Metrics compute_metrics(const std::vector<double>& scores, const std::vector<int>& labels, double threshold) {
  std::vector<int> predicted;
  for (double s : scores) predicted.push_back(s >= threshold ? 1 : 0);
  return metrics_from(predicted, scores, labels);
}

std::string_view to_string(AbstentionMode m) {
  return m == AbstentionMode::kAsNotCrossing ? "as_not_crossing" : "excluded";
}

AbstentionMode parse_abstention_mode(std::string_view s) {
  if (s == "as_not_crossing") return AbstentionMode::kAsNotCrossing;
  if (s == "excluded") return AbstentionMode::kExcluded;
  throw std::invalid_argument("unknown abstention mode '" + std::string(s) + "'");
}

WindowTag tag_of(const ModelInput& in) {
  return {in.episode_id, distance_stratum(in.distance_m), in.lighting, in.label};
}

const ReportRow& EvalReport::row(std::string_view stratum) const {
  for (const auto& r : rows) {
    if (r.stratum == stratum) return r;
  }
  throw std::out_of_range("no report row '" + std::string(stratum) + "'");
}

std::vector<CrossingPrediction> predict_all(const std::vector<Example>& data, ModelParams& model, Mode mode) {
  std::vector<CrossingPrediction> out;
  out.reserve(data.size());
  for (const auto& ex : data) out.push_back(predict(ex.input, model, mode, &ex.frozen));
  return out;
}

EvalReport stratified_report(const std::vector<WindowTag>& tags, const std::vector<CrossingPrediction>& predictions,
                             AbstentionMode mode) {
  if (tags.size() != predictions.size()) throw std::invalid_argument("tags and predictions differ in length");
  EvalReport report;
  report.abstention_mode = mode;
  for (const auto& name : kStrataRows) {
    ReportRow row;
    row.stratum = name;
    std::vector<double> scores;
    std::vector<int> labels, predicted;
    for (std::size_t i = 0; i < tags.size(); ++i) {
      const bool in_row = name == "overall" || name == to_string(tags[i].distance) || name == to_string(tags[i].lighting);
      if (!in_row) continue;
      const CrossingPrediction& p = predictions[i];
      if (p.abstained) {
        ++row.abstained;
        if (mode == AbstentionMode::kExcluded) continue;
      }
      // An abstention is a not-crossing call with score 0.
      scores.push_back(p.abstained ? 0.0 : p.probability);
      predicted.push_back(p.predicted == Action::kCrossing ? 1 : 0);
      labels.push_back(tags[i].label);
    }
    row.n = labels.size();
    if (row.n > 0) row.metrics = metrics_from(predicted, scores, labels);
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::string report_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "stratum,n,accuracy,auc,f1,precision,recall,abstained\n";
  for (const auto& r : report.rows) {
    out << r.stratum << ',' << r.n;
    if (r.metrics) {
      for (double v : {r.metrics->accuracy, r.metrics->auc, r.metrics->f1, r.metrics->precision, r.metrics->recall}) {
        out << ',' << format_fixed(v, 6);
      }
    } else {
      out << ",NA,NA,NA,NA,NA";
    }
    out << ',' << r.abstained << '\n';
  }
  return out.str();
}

void write_report_csv(const std::filesystem::path& path, const EvalReport& report) {
  write_text_file(path, report_csv(report));
}

}  // namespace watchped
