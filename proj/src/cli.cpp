#include "watchped/cli.hpp"

#include "watchped/csv.hpp"
#include "watchped/episode_io.hpp"
#include "watchped/reference.hpp"
#include "watchped/synth.hpp"
#include "watchped/v2p.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

namespace watchped {
namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

nlohmann::ordered_json RunConfig::to_json() const {
  json j;
  j["model"] = model.to_json();
  j["train"] = train.to_json();
  j["cnn1"] = cnn1.to_json();
  j["cnn2"] = cnn2.to_json();
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("run config must be a JSON object");
  RunConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "model") c.model = ModelConfig::from_json(json::parse(v.dump()));
    else if (key == "train") c.train = TrainConfig::from_json(v, c.train);
    else if (key == "cnn1") c.cnn1 = TrainConfig::from_json(v, c.cnn1);
    else if (key == "cnn2") c.cnn2 = TrainConfig::from_json(v, c.cnn2);
    else throw std::invalid_argument("unknown run config section '" + key + "'");
  }
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  try {
    return from_json(nlohmann::json::parse(read_text_file(path)));
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

ModelParams train_model(const std::vector<Episode>& train, RunConfig rc, TrainHistory* history, std::ostream* log) {
  const std::uint64_t seed = rc.train.seed;
  rc.model.mode = rc.train.mode;
  rc.model.dropout = rc.train.dropout;
  ModelParams model = ModelParams::create(rc.model, seed);
  if (rc.train.mode != Mode::kVisionOnly) {
    TrainConfig c1 = rc.cnn1, c2 = rc.cnn2;
    c1.seed = mix_seed(seed + 1);
    c2.seed = mix_seed(seed + 2);
    const auto h1 = train_sensor_cnn1(activity_windows(train, c1.frame_size, c1.hop_size), model, c1);
    const auto h2 = train_sensor_cnn2(train, model, c2);
    if (log) *log << "cnn1 loss " << format_fixed(h1.back().loss, 6) << ", cnn2 loss " << format_fixed(h2.back().loss, 6) << '\n';
  }
  const auto examples = make_examples(train, model, rc.train.window_stride);
  const TrainHistory h = train_full(examples, model, rc.train);
  if (log) {
    *log << "trained " << to_string(rc.train.mode) << " on " << examples.size() << " windows from " << train.size()
         << " episodes; final loss " << format_fixed(h.back().loss, 6) << '\n';
  }
  if (history) *history = h;
  return model;
}

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("WATCHPED_SEED");
  if (!s || !*s) return std::nullopt;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (used != std::string(s).size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw UsageError(std::string("WATCHPED_SEED is not an unsigned integer: '") + s + "'");
  }
}

// Explicit flag first, then the environment, then the given default.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t fallback) {
  if (flag) return *flag;
  if (auto e = env_seed()) return *e;
  return fallback;
}

std::vector<Episode> load_suite(const fs::path& dir, bool rasters = true) {
  const auto dirs = list_episode_dirs(dir);
  if (dirs.empty()) throw std::runtime_error("no episodes under " + dir.string());
  std::vector<Episode> out;
  for (const auto& d : dirs) out.push_back(parse_episode(d, {rasters}));
  return out;
}

std::vector<Episode> prepared(std::vector<Episode> eps) {
  for (auto& e : eps) e = prepare_episode(std::move(e));
  return eps;
}

std::vector<Episode> select(const std::vector<Episode>& eps, const std::vector<std::string>& ids) {
  const std::set<std::string> keep(ids.begin(), ids.end());
  std::vector<Episode> out;
  for (const auto& e : eps) {
    if (keep.count(e.id)) out.push_back(e);
  }
  return out;
}

fs::path history_path(const fs::path& weights, const std::string& flag) {
  if (!flag.empty()) return flag;
  fs::path p = weights;
  p.replace_extension(".history.csv");
  return p;
}

std::vector<std::string> ids_of(const std::vector<Episode>& eps) {
  std::vector<std::string> ids;
  for (const auto& e : eps) ids.push_back(e.id);
  return ids;
}

std::string fixed(double v, int d = 6) { return format_fixed(v, d); }

struct Options {
  // gen
  int n = 12;
  int raster = 32;
  std::optional<std::uint64_t> seed;
  std::string out;
  // shared
  std::string data;
  std::string config;
  std::string weights;
  std::string out_weights;
  std::string init_weights;
  std::string history;
  bool check = false;
  std::string which;
  std::string mode;
  std::string abstention = "as_not_crossing";
  std::string split = "auto";
  std::string channel;
  int batch = 10;
  int tolerance = 20;
  int stride = 0;
  std::string in;
  std::string plot_data;
};

int cmd_gen(const Options& o, std::ostream& out) {
  const std::uint64_t seed = resolve_seed(o.seed, 0);
  const auto rows = generate_suite(o.out, o.n, {}, seed, o.raster);
  out << "generated " << rows.size() << " episodes under " << o.out << " (seed " << seed << ")\n";
  return kExitOk;
}

int cmd_ingest(const Options& o, std::ostream& out, std::ostream& err) {
  const auto dirs = list_episode_dirs(o.data);
  if (dirs.empty()) throw std::runtime_error("no episodes under " + o.data);
  std::size_t frames = 0, failures = 0;
  std::map<std::string, int> lighting;
  for (const auto& d : dirs) {
    try {
      const Episode e = parse_episode(d, {o.check});
      frames += static_cast<std::size_t>(e.frame_count);
      ++lighting[std::string(to_string(e.lighting))];
      if (o.check) {
        const Episode p = prepare_episode(e);
        validate(p);
        if (window_end_frames(p, WindowConfig{}, 1).empty()) throw ValidationError("episode too short for one window");
      }
    } catch (const std::exception& ex) {
      ++failures;
      err << d.string() << ": " << ex.what() << '\n';
    }
  }
  out << dirs.size() << " episodes, " << frames << " frames";
  for (const auto& [k, v] : lighting) out << ", " << k << " " << v;
  out << '\n';
  if (failures) {
    out << failures << " episodes failed\n";
    return kExitFailure;
  }
  if (o.check) out << "all invariants hold\n";
  return kExitOk;
}

int cmd_sync(const Options& o, std::ostream& out) {
  const auto eps = load_suite(o.data, false);
  std::ostringstream csv;
  csv << "id,frame,frame_ms,sample_ms,delta_ms,stale\n";
  std::size_t stale = 0, total = 0;
  for (const auto& e : eps) {
    const auto ts = e.frame_timestamps();
    const SyncResult s = sync_sensor_lenient(e.sensor, ts, o.tolerance);
    for (std::size_t f = 0; f < ts.size(); ++f) {
      csv << e.id << ',' << f << ',' << ts[f] << ',';
      if (s.sample_index[f] == kNoSample) {
        csv << "NA,NA,1\n";
      } else {
        csv << e.sensor[static_cast<std::size_t>(s.sample_index[f])].timestamp_ms << ',' << s.delta_ms[f] << ','
            << (s.stale[f] ? 1 : 0) << '\n';
      }
    }
    stale += s.stale_count();
    total += ts.size();
  }
  write_text_file(o.out, csv.str());
  out << "synced " << total << " frames of " << eps.size() << " episodes, " << stale << " beyond " << o.tolerance
      << " ms\n";
  return kExitOk;
}

int cmd_train_sensor(const Options& o, std::ostream& out) {
  const RunConfig rc = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  json extra;
  ModelParams model;
  if (!o.init_weights.empty()) {
    model = load_model(o.init_weights, &extra);
  } else {
    model = ModelParams::create(rc.model, resolve_seed(o.seed, rc.train.seed));
  }
  TrainConfig cfg = o.which == "cnn1" ? rc.cnn1 : rc.cnn2;
  cfg.seed = resolve_seed(o.seed, cfg.seed);
  auto eps = prepared(load_suite(o.data, false));
  const auto [train_ids, test_ids] = split_ids(ids_of(eps), cfg.test_split, cfg.seed);
  const auto train = select(eps, train_ids), test = select(eps, test_ids);
  TrainHistory h;
  if (o.which == "cnn1") {
    h = train_sensor_cnn1(activity_windows(train, cfg.frame_size, cfg.hop_size), model, cfg);
    const double acc = activity_accuracy(activity_windows(test, cfg.frame_size, cfg.hop_size), model);
    out << "cnn1: final loss " << fixed(h.back().loss) << ", held-out activity accuracy " << fixed(acc, 4) << '\n';
    extra["cnn1_heldout_accuracy"] = acc;
  } else {
    h = train_sensor_cnn2(train, model, cfg);
    out << "cnn2: final loss " << fixed(h.back().loss) << '\n';
  }
  extra[o.which] = cfg.to_json();
  save_model(o.out_weights, model, extra);
  write_history_csv(history_path(o.out_weights, o.history), h);
  return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out) {
  RunConfig rc = RunConfig::load(o.config);
  const std::uint64_t seed = resolve_seed(o.seed, rc.train.seed);
  rc.train.seed = seed;
  if (!o.mode.empty()) rc.train.mode = parse_mode(o.mode);
  rc.model.mode = rc.train.mode;
  rc.model.dropout = rc.train.dropout;

  auto eps = prepared(load_suite(o.data));
  const auto [train_ids, test_ids] = split_ids(ids_of(eps), rc.train.test_split, seed);
  const auto train = select(eps, train_ids);
  eps.clear();

  TrainHistory h;
  const ModelParams model = train_model(train, rc, &h, &out);
  json extra;
  extra["run"] = rc.to_json();
  extra["train_ids"] = train_ids;
  extra["test_ids"] = test_ids;
  save_model(o.out_weights, model, extra);
  write_history_csv(history_path(o.out_weights, o.history), h);
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  json extra;
  ModelParams model = load_model(o.weights, &extra);
  const Mode mode = o.mode.empty() ? model.config.mode : parse_mode(o.mode);
  const AbstentionMode am = parse_abstention_mode(o.abstention);
  auto eps = prepared(load_suite(o.data));
  std::string split = o.split;
  if (split == "auto") split = extra.contains("test_ids") ? "test" : "all";
  if (split == "test") {
    if (!extra.contains("test_ids")) throw std::runtime_error("weights carry no test split; use --split all");
    eps = select(eps, extra["test_ids"].get<std::vector<std::string>>());
    if (eps.empty()) throw std::runtime_error("none of the test episodes are under " + o.data);
  }
  int stride = o.stride;
  if (stride == 0) {
    stride = extra.contains("run") ? extra["run"]["train"]["window_stride"].get<int>() : 1;
  }
  const auto examples = make_examples(eps, model, stride);
  std::vector<WindowTag> tags;
  for (const auto& ex : examples) tags.push_back(tag_of(ex.input));
  const EvalReport report = stratified_report(tags, predict_all(examples, model, mode), am);
  write_report_csv(o.out, report);
  const ReportRow& all = report.row("overall");
  out << to_string(mode) << " on " << eps.size() << " episodes (" << split << "), " << examples.size() << " windows, "
      << all.abstained << " abstained";
  if (all.metrics) out << ": accuracy " << fixed(all.metrics->accuracy, 4) << ", recall " << fixed(all.metrics->recall, 4);
  out << '\n';
  return kExitOk;
}

int cmd_simulate(const Options& o, std::ostream& out) {
  const ChannelConfig base = ChannelConfig::load(o.channel);
  if (o.batch < 1) throw UsageError("--batch must be at least 1");
  const bool with_model = !o.weights.empty();
  std::optional<ModelParams> model;
  if (with_model) model = load_model(o.weights);
  const auto eps = prepared(load_suite(o.data, with_model));
  fs::create_directories(o.out);
  std::vector<std::pair<std::string, ResyncStats>> rows;
  std::ostringstream preds;
  preds << "id,t,label,p_clean,p_channel\n";
  double worst = 0;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const Episode& e = eps[i];
    ChannelConfig c = base;
    c.seed = mix_seed(base.seed + i);
    const auto packets = packetize(e.sensor, e.gps, o.batch, "ped" + std::to_string(i));
    const auto delivered = transmit(packets, c);
    const ResyncResult r = receive_resync(delivered, e.frame_timestamps(), o.tolerance,
                                          static_cast<std::int64_t>(packets.size()));
    rows.emplace_back(e.id, r.stats);
    if (!with_model) continue;
    const WindowConfig& wc = model->config.window;
    for (int t : window_end_frames(e, wc, 8)) {
      ModelInput clean = build_window(e, t, wc);
      ModelInput noisy;
      try {
        noisy = causal_window(e, delivered, t, wc);
      } catch (const WindowError&) {
        continue;  // not enough sensor data received yet
      }
      const Mode mode = model->config.mode;
      const double pc = predict(clean, *model, mode).probability;
      const double pn = predict(noisy, *model, mode).probability;
      worst = std::max(worst, std::abs(pc - pn));
      preds << e.id << ',' << t << ',' << clean.label << ',' << fixed(pc) << ',' << fixed(pn) << '\n';
    }
  }
  write_stats_csv(fs::path(o.out) / "v2p_stats.csv", rows);
  double delivered = 0, staleness = 0;
  for (const auto& [id, s] : rows) {
    delivered += s.delivered_fraction / static_cast<double>(rows.size());
    staleness = std::max(staleness, s.max_staleness_ms);
  }
  out << "simulated " << rows.size() << " episodes: mean delivered fraction " << fixed(delivered, 4)
      << ", worst staleness " << fixed(staleness, 1) << " ms";
  if (with_model) {
    write_text_file(fs::path(o.out) / "predictions.csv", preds.str());
    out << ", largest probability change " << fixed(worst, 4);
  }
  out << '\n';
  return kExitOk;
}

int cmd_gradcheck(const Options& o, std::ostream& out) {
  const RunConfig rc = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  const std::uint64_t seed = resolve_seed(o.seed, 0);
  ModelParams model = ModelParams::create(rc.model, seed);
  ScenarioConfig sc = sample_scenario("gradcheck", DistanceStratum::kClose, Lighting::kSunny, seed, rc.model.raster_size);
  const Episode e = prepare_episode(generate_episode(sc));
  const auto ends = window_end_frames(e, rc.model.window, 1);
  if (ends.empty()) throw std::runtime_error("episode too short for the configured window");
  const ModelInput in = build_window(e, ends[ends.size() / 2], rc.model.window);
  ModelGradCheckOptions opts;
  opts.mode = o.mode.empty() ? rc.model.mode : parse_mode(o.mode);
  const ad::GradCheckResult r = model_grad_check(model, in, in.label, opts);
  out << "checked " << r.coordinates << " parameters (" << to_string(opts.mode) << "): max relative error "
      << std::scientific << std::setprecision(3) << r.max_relative_error << " at " << r.worst_parameter << "["
      << r.worst_index << "]\n";
  out << std::defaultfloat;
  return r.max_relative_error < 1e-4 ? kExitOk : kExitFailure;
}

int cmd_report(const Options& o, std::ostream& out) {
  const CsvTable t = read_csv(o.in, {"stratum", "n", "accuracy", "auc", "f1", "precision", "recall", "abstained"});
  static const std::map<std::string, std::string> kGroup = {
      {"close", "distance"}, {"medium", "distance"}, {"far", "distance"}, {"sunny", "lighting"},
      {"cloudy", "lighting"}, {"rainy", "lighting"}, {"night", "lighting"}, {"overall", "overall"}};
  std::ostringstream csv;
  csv << "group,stratum,metric,value\n";
  std::size_t points = 0;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto it = kGroup.find(t.rows[r][0]);
    if (it == kGroup.end()) t.fail(r, "unknown stratum '" + t.rows[r][0] + "'");
    for (std::size_t c = 2; c < 7; ++c) {
      if (t.rows[r][c] == "NA") continue;
      csv << it->second << ',' << t.rows[r][0] << ',' << t.header[c] << ',' << fixed(t.number(r, c)) << '\n';
      ++points;
    }
    csv << it->second << ',' << t.rows[r][0] << ",abstained," << t.integer(r, 7) << '\n';
    ++points;
  }
  write_text_file(o.plot_data, csv.str());
  out << "wrote " << points << " points to " << o.plot_data << '\n';
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Pedestrian crossing-intention pipeline", "watchped"};
  app.require_subcommand(1);
  Options o;
  auto seed_opt = [&](CLI::App* sub) { sub->add_option("--seed", o.seed, "seed (default: $WATCHPED_SEED)"); };
  const std::vector<std::string> modes{"full", "vision_only", "sensor_only"};

  auto* gen = app.add_subcommand("gen", "generate a synthetic episode suite");
  gen->add_option("--n", o.n, "number of episodes")->check(CLI::PositiveNumber);
  seed_opt(gen);
  gen->add_option("--out", o.out, "output directory")->required();
  gen->add_option("--raster", o.raster, "context raster size in pixels")->check(CLI::PositiveNumber);

  auto* ingest = app.add_subcommand("ingest", "parse a suite and report on it");
  ingest->add_option("--data", o.data, "suite or episode directory")->required();
  ingest->add_flag("--check", o.check, "also load rasters and validate every invariant");

  auto* sync = app.add_subcommand("sync", "nearest-sample alignment of sensor streams to frames");
  sync->add_option("--data", o.data)->required();
  sync->add_option("--out", o.out, "per-frame CSV")->required();
  sync->add_option("--tolerance", o.tolerance, "ms")->check(CLI::NonNegativeNumber);

  auto* train_sensor = app.add_subcommand("train-sensor", "train a sensor CNN on its own");
  train_sensor->add_option("--data", o.data)->required();
  train_sensor->add_option("--which", o.which)->required()->check(CLI::IsMember({"cnn1", "cnn2"}));
  train_sensor->add_option("--out-weights", o.out_weights)->required();
  train_sensor->add_option("--config", o.config, "run config JSON");
  train_sensor->add_option("--init-weights", o.init_weights, "start from these weights (cnn2 needs a trained cnn1)");
  train_sensor->add_option("--history", o.history, "loss history CSV");
  seed_opt(train_sensor);

  auto* train = app.add_subcommand("train", "train the full model");
  train->add_option("--data", o.data)->required();
  train->add_option("--config", o.config, "run config JSON")->required();
  train->add_option("--out-weights", o.out_weights)->required();
  train->add_option("--mode", o.mode)->check(CLI::IsMember(modes));
  train->add_option("--history", o.history, "loss history CSV");
  seed_opt(train);

  auto* eval = app.add_subcommand("eval", "stratified evaluation report");
  eval->add_option("--data", o.data)->required();
  eval->add_option("--weights", o.weights)->required();
  eval->add_option("--mode", o.mode)->check(CLI::IsMember(modes));
  eval->add_option("--abstention", o.abstention)->check(CLI::IsMember({"as_not_crossing", "excluded"}));
  eval->add_option("--out", o.out, "report CSV")->required();
  eval->add_option("--split", o.split, "test episodes of the weights' split, or all")
      ->check(CLI::IsMember({"auto", "test", "all"}));
  eval->add_option("--stride", o.stride, "frames between windows (default: as trained)")->check(CLI::PositiveNumber);

  auto* simulate = app.add_subcommand("simulate", "send sensor streams through a lossy channel");
  simulate->add_option("--data", o.data)->required();
  simulate->add_option("--channel", o.channel, "channel config JSON")->required();
  simulate->add_option("--out", o.out, "output directory")->required();
  simulate->add_option("--batch", o.batch, "samples per packet")->check(CLI::PositiveNumber);
  simulate->add_option("--weights", o.weights, "also compare predictions on clean and received streams");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the whole model");
  gradcheck->add_option("--config", o.config, "run config JSON");
  gradcheck->add_option("--mode", o.mode)->check(CLI::IsMember(modes));
  seed_opt(gradcheck);

  auto* report = app.add_subcommand("report", "long-format plot data from a report CSV");
  report->add_option("--in", o.in)->required();
  report->add_option("--plot-data", o.plot_data)->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen(o, out);
    if (*ingest) return cmd_ingest(o, out, err);
    if (*sync) return cmd_sync(o, out);
    if (*train_sensor) return cmd_train_sensor(o, out);
    if (*train) return cmd_train(o, out);
    if (*eval) return cmd_eval(o, out);
    if (*simulate) return cmd_simulate(o, out);
    if (*gradcheck) return cmd_gradcheck(o, out);
    if (*report) return cmd_report(o, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace watchped
