#include "watchped/model.hpp"

#include "watchped/weights_io.hpp"
#include "watchped/csv.hpp"

#include <random>

namespace watchped {
using namespace ad;
using json = nlohmann::ordered_json;

std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::kFull: return "full";
    case Mode::kVisionOnly: return "vision_only";
    case Mode::kSensorOnly: return "sensor_only";
  }
  return "?";
}

Mode parse_mode(std::string_view s) {
  if (s == "full") return Mode::kFull;
  if (s == "vision_only") return Mode::kVisionOnly;
  if (s == "sensor_only") return Mode::kSensorOnly;
  throw std::invalid_argument("unknown mode '" + std::string(s) + "'");
}

ModelConfig ModelConfig::desk() { return {}; }

ModelConfig ModelConfig::full_scale() {
  ModelConfig c;
  c.raster_size = 224;
  c.nv_hidden = 256;
  c.vision_hidden = 256;
  c.attention_dim = 256;
  c.vision_blocks = {{64, 64}, {128, 128}, {256, 256, 256, 256}, {512, 512, 512, 512}};
  c.cnn1_channels = {64, 64};
  c.cnn2_channels = {64, 64};
  return c;
}

void ModelConfig::validate() const {
  window.validate();
  auto positive = [](int v, const char* what) {
    if (v < 1) throw std::invalid_argument(std::string(what) + " must be positive");
  };
  positive(raster_size, "raster_size");
  positive(nv_hidden, "nv_hidden");
  positive(vision_hidden, "vision_hidden");
  positive(attention_dim, "attention_dim");
  positive(cnn1_kernel, "cnn1_kernel");
  positive(cnn2_kernel, "cnn2_kernel");
  if (vision_blocks.empty() || cnn1_channels.empty() || cnn2_channels.empty()) {
    throw std::invalid_argument("conv stacks must have at least one layer");
  }
  for (const auto& b : vision_blocks) {
    if (b.empty()) throw std::invalid_argument("vision block without conv layers");
    for (int c : b) positive(c, "vision channel count");
  }
  for (int c : cnn1_channels) positive(c, "cnn1 channel count");
  for (int c : cnn2_channels) positive(c, "cnn2 channel count");
  if (pooled_extent() < 1) throw std::invalid_argument("raster_size too small for the number of pooling stages");
  Index len = window.sensor_window;
  for (std::size_t i = 0; i < cnn1_channels.size(); ++i) {
    len = len - cnn1_kernel + 1;
    if (i + 1 < cnn1_channels.size()) len /= 2;
  }
  if (len < 1) throw std::invalid_argument("sensor_window too short for the cnn1 stack");
  if (window.m - static_cast<int>(cnn2_channels.size()) * (cnn2_kernel - 1) < 1) {
    throw std::invalid_argument("window m too short for the cnn2 stack");
  }
  if (!(threshold >= 0 && threshold <= 1)) throw std::invalid_argument("threshold must lie in [0,1]");
  if (!(dropout >= 0 && dropout < 1)) throw std::invalid_argument("dropout must lie in [0,1)");
}

json ModelConfig::to_json() const {
  json j;
  j["m"] = window.m;
  j["f"] = window.f;
  j["sensor_window"] = window.sensor_window;
  j["sync_tolerance_ms"] = window.sync_tolerance_ms;
  j["bbox_scale_px"] = window.bbox_scale_px;
  j["raster_size"] = raster_size;
  j["nv_hidden"] = nv_hidden;
  j["vision_hidden"] = vision_hidden;
  j["attention_dim"] = attention_dim;
  j["vision_blocks"] = vision_blocks;
  j["freeze_vision_cnn"] = freeze_vision_cnn;
  j["cnn1_channels"] = cnn1_channels;
  j["cnn1_kernel"] = cnn1_kernel;
  j["cnn2_channels"] = cnn2_channels;
  j["cnn2_kernel"] = cnn2_kernel;
  j["threshold"] = threshold;
  j["dropout"] = dropout;
  j["mode"] = std::string(to_string(mode));
  return j;
}

ModelConfig ModelConfig::from_json(const json& j) {
  static const char* kKnown[] = {"m", "f", "sensor_window", "sync_tolerance_ms", "bbox_scale_px", "raster_size",
                                 "nv_hidden", "vision_hidden", "attention_dim", "vision_blocks", "freeze_vision_cnn",
                                 "cnn1_channels", "cnn1_kernel", "cnn2_channels", "cnn2_kernel", "threshold",
                                 "dropout", "mode", "preset"};
  if (!j.is_object()) throw std::invalid_argument("model config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find_if(std::begin(kKnown), std::end(kKnown), [&](const char* k) { return key == k; }) == std::end(kKnown)) {
      throw std::invalid_argument("unknown model config key '" + key + "'");
    }
  }
  ModelConfig c;
  if (j.contains("preset")) {
    const auto preset = j["preset"].get<std::string>();
    if (preset == "full_scale") {
      c = full_scale();
    } else if (preset != "desk") {
      throw std::invalid_argument("unknown preset '" + preset + "'");
    }
  }
  auto get = [&](const char* key, auto& dst) {
    if (j.contains(key)) dst = j[key].get<std::decay_t<decltype(dst)>>();
  };
  get("m", c.window.m);
  get("f", c.window.f);
  get("sensor_window", c.window.sensor_window);
  get("sync_tolerance_ms", c.window.sync_tolerance_ms);
  get("bbox_scale_px", c.window.bbox_scale_px);
  get("raster_size", c.raster_size);
  get("nv_hidden", c.nv_hidden);
  get("vision_hidden", c.vision_hidden);
  get("attention_dim", c.attention_dim);
  get("vision_blocks", c.vision_blocks);
  get("freeze_vision_cnn", c.freeze_vision_cnn);
  get("cnn1_channels", c.cnn1_channels);
  get("cnn1_kernel", c.cnn1_kernel);
  get("cnn2_channels", c.cnn2_channels);
  get("cnn2_kernel", c.cnn2_kernel);
  get("threshold", c.threshold);
  get("dropout", c.dropout);
  if (j.contains("mode")) c.mode = parse_mode(j["mode"].get<std::string>());
  c.validate();
  return c;
}

ModelConfig ModelConfig::load(const std::filesystem::path& path) {
  try {
    return from_json(json::parse(read_text_file(path)));
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

namespace {

std::string conv_name(const std::string& prefix, std::size_t block, std::size_t layer) {
  return prefix + "b" + std::to_string(block) + ".c" + std::to_string(layer);
}

void create_vision_cnn(ParamSet& ps, const std::string& prefix, const ModelConfig& c, std::mt19937_64& rng) {
  Index in = 3;
  for (std::size_t b = 0; b < c.vision_blocks.size(); ++b) {
    for (std::size_t l = 0; l < c.vision_blocks[b].size(); ++l) {
      const Index out = c.vision_blocks[b][l];
      const std::string n = conv_name(prefix, b, l);
      ps.add(n + ".w", glorot_uniform({out, in, 3, 3}, in * 9, out * 9, rng));
      ps.add(n + ".b", Tensor({out}));
      in = out;
    }
  }
}

VisionCnnParams bind_vision_cnn(const ParamSet& ps, const std::string& prefix, const ModelConfig& c) {
  VisionCnnParams cnn;
  for (std::size_t b = 0; b < c.vision_blocks.size(); ++b) {
    cnn.blocks.emplace_back();
    for (std::size_t l = 0; l < c.vision_blocks[b].size(); ++l) {
      const std::string n = conv_name(prefix, b, l);
      cnn.blocks.back().emplace_back(ps.at(n + ".w"), ps.at(n + ".b"));
    }
  }
  return cnn;
}

void create_conv1d_stack(ParamSet& ps, const std::string& prefix, Index in, const std::vector<int>& channels,
                         Index kernel, std::mt19937_64& rng) {
  for (std::size_t i = 0; i < channels.size(); ++i) {
    const Index out = channels[i];
    ps.add(prefix + "c" + std::to_string(i) + ".w", glorot_uniform({out, in, kernel}, in * kernel, out * kernel, rng));
    ps.add(prefix + "c" + std::to_string(i) + ".b", Tensor({out}));
    in = out;
  }
}

Conv1dStack bind_conv1d_stack(const ParamSet& ps, const std::string& prefix, std::size_t layers) {
  Conv1dStack s;
  for (std::size_t i = 0; i < layers; ++i) {
    s.layers.emplace_back(ps.at(prefix + "c" + std::to_string(i) + ".w"), ps.at(prefix + "c" + std::to_string(i) + ".b"));
  }
  return s;
}

}  // namespace

ModelParams ModelParams::create(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  ModelParams p;
  p.config = c;
  std::mt19937_64 rng(seed);
  ParamSet& ps = p.params;
  const Index h = c.nv_hidden;
  GruParams::create(ps, "nv.gru1", 2 * kPoseKeypoints, h, rng);
  GruParams::create(ps, "nv.gru2", h + 4, h, rng);
  GruParams::create(ps, "nv.gru3", h + 1, h, rng);
  AttentionParams::create(ps, "nv.att", h, c.attention_dim, rng);
  create_vision_cnn(ps, kVisionCnnPrefixes[0], c, rng);
  create_vision_cnn(ps, kVisionCnnPrefixes[1], c, rng);
  GruParams::create(ps, "vis.local.gru", c.vision_feature_dim(), c.vision_hidden, rng);
  GruParams::create(ps, "vis.global.gru", c.vision_feature_dim(), c.vision_hidden, rng);
  AttentionParams::create(ps, "vis.local.att", c.vision_hidden, c.attention_dim, rng);
  AttentionParams::create(ps, "vis.global.att", c.vision_hidden, c.attention_dim, rng);
  create_conv1d_stack(ps, kCnn1Prefix, 6, c.cnn1_channels, c.cnn1_kernel, rng);
  const Index c1 = c.cnn1_channels.back();
  ps.add(std::string(kCnn1Prefix) + "fc.w", glorot_uniform({kActivityClasses, c1}, c1, kActivityClasses, rng));
  ps.add(std::string(kCnn1Prefix) + "fc.b", Tensor({kActivityClasses}));
  create_conv1d_stack(ps, kCnn2Prefix, kActivityClasses + 4, c.cnn2_channels, c.cnn2_kernel, rng);
  AttentionParams::create(ps, "fusion.att", c.fused_dim(), c.attention_dim, rng);
  const Index fin = c.fused_dim() + c.sensor_dim();
  ps.add(kFusionFcWeight, glorot_uniform({1, fin}, fin, 1, rng));
  ps.add("fusion.fc.b", Tensor({1}));
  p.bind();
  p.apply_default_freezing();
  return p;
}

void ModelParams::bind() {
  const ParamSet& ps = params;
  nv_gru1 = GruParams::bind(ps, "nv.gru1");
  nv_gru2 = GruParams::bind(ps, "nv.gru2");
  nv_gru3 = GruParams::bind(ps, "nv.gru3");
  nv_att = AttentionParams::bind(ps, "nv.att");
  local_cnn = bind_vision_cnn(ps, kVisionCnnPrefixes[0], config);
  global_cnn = bind_vision_cnn(ps, kVisionCnnPrefixes[1], config);
  local_gru = GruParams::bind(ps, "vis.local.gru");
  global_gru = GruParams::bind(ps, "vis.global.gru");
  local_att = AttentionParams::bind(ps, "vis.local.att");
  global_att = AttentionParams::bind(ps, "vis.global.att");
  cnn1 = bind_conv1d_stack(ps, kCnn1Prefix, config.cnn1_channels.size());
  cnn1_fc_w = ps.at(std::string(kCnn1Prefix) + "fc.w");
  cnn1_fc_b = ps.at(std::string(kCnn1Prefix) + "fc.b");
  cnn2 = bind_conv1d_stack(ps, kCnn2Prefix, config.cnn2_channels.size());
  fusion_att = AttentionParams::bind(ps, "fusion.att");
  fc_w = ps.at(kFusionFcWeight);
  fc_b = ps.at("fusion.fc.b");
}

void ModelParams::apply_default_freezing() {
  params.freeze_prefixes({kVisionCnnPrefixes[0], kVisionCnnPrefixes[1]}, config.freeze_vision_cnn);
}

void save_model(const std::filesystem::path& path, const ModelParams& model, json extra) {
  json meta;
  meta["config"] = model.config.to_json();
  if (!extra.is_null()) meta["extra"] = std::move(extra);
  write_weights(path, snapshot(model.params, meta.dump()));
}

ModelParams load_model(const std::filesystem::path& path, json* extra) {
  const WeightsFile file = read_weights(path);
  json meta;
  try {
    meta = json::parse(file.metadata);
  } catch (const std::exception& e) {
    throw WeightsFormatError(path.string() + ": bad metadata: " + e.what());
  }
  if (!meta.contains("config")) throw WeightsFormatError(path.string() + ": metadata lacks the model config");
  ModelParams p = ModelParams::create(ModelConfig::from_json(meta["config"]), 0);
  restore(p.params, file);
  if (extra) *extra = meta.value("extra", json{});
  return p;
}

NoGrad::NoGrad(ParamSet& params) : params_(params) {
  for (auto& e : params_.entries()) {
    saved_.push_back(e.var.requires_grad());
    e.var.set_requires_grad(false);
  }
}

NoGrad::~NoGrad() {
  std::size_t i = 0;
  for (auto& e : params_.entries()) e.var.set_requires_grad(saved_[i++]);
}

Tensor frame_chw(const Tensor& rasters, Index frame) {
  if (rasters.rank() != 4 || rasters.dim(3) != 3) throw ShapeError("rasters must be [m,H,W,3], got " + shape_string(rasters.shape()));
  const Index h = rasters.dim(1), w = rasters.dim(2);
  Tensor out({3, h, w});
  const Index base = frame * h * w * 3;
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index c = 0; c < 3; ++c) out[(c * h + y) * w + x] = rasters[base + (y * w + x) * 3 + c];
  return out;
}

Var vision_cnn_map(const Tensor& image_chw, const VisionCnnParams& cnn) {
  Var x = Var::constant(image_chw);
  for (const auto& block : cnn.blocks) {
    for (const auto& [w, b] : block) x = relu(conv2d(x, w, b, 1, 1));
    x = pool2d(x, PoolMode::kMax, 2, 2);
  }
  return x;
}

Var vision_cnn_forward(const Tensor& image_chw, const VisionCnnParams& cnn) {
  const Var x = vision_cnn_map(image_chw, cnn);
  // Averaging over the whole remaining map, e.g. 14x14 at full scale.
  return reshape(pool2d(x, PoolMode::kAverage, x.shape()[1], x.shape()[2]), {x.shape()[0]});
}

Var vision_frame_features(const Tensor& rasters, const VisionCnnParams& cnn) {
  std::vector<Var> rows;
  for (Index i = 0; i < rasters.dim(0); ++i) rows.push_back(vision_cnn_forward(frame_chw(rasters, i), cnn));
  return stack_rows(rows);
}

FeatureVector non_vision_forward(const ModelInput& in, const ModelParams& p, const ForwardContext& ctx) {
  const Index m = in.pose.dim(0);
  if (in.pose.shape() != Shape{m, 2 * kPoseKeypoints} || in.bbox.shape() != Shape{m, 4} || in.speed.shape() != Shape{m, 1} ||
      in.pose_mask.shape() != Shape{m}) {
    throw ShapeError("non-vision inputs must be pose [m,36], mask [m], bbox [m,4], speed [m,1]");
  }
  Var pose = scale_rows(Var::constant(in.pose), in.pose_mask);
  Var h1 = gru_forward(pose, p.nv_gru1);
  Var h2 = gru_forward(concat_cols(h1, Var::constant(in.bbox)), p.nv_gru2);
  Var h3 = gru_forward(concat_cols(h2, Var::constant(in.speed)), p.nv_gru3);
  Var v = attention_block(h3, p.nv_att).output;
  return {dropout(v, ctx), FeatureOrigin::kNonVision};
}

FeatureVector vision_forward(const ModelInput& in, const ModelParams& p, const ForwardContext& ctx,
                             const FrozenFeatures* cache) {
  auto branch = [&](const Tensor& rasters, const std::optional<Tensor>* cached, const VisionCnnParams& cnn,
                    const GruParams& gru, const AttentionParams& att) {
    Var feats = cached && cached->has_value() ? Var::constant(**cached) : vision_frame_features(rasters, cnn);
    return dropout(attention_block(gru_forward(feats, gru), att).output, ctx);
  };
  Var local = branch(in.local, cache ? &cache->local : nullptr, p.local_cnn, p.local_gru, p.local_att);
  Var global = branch(in.global, cache ? &cache->global : nullptr, p.global_cnn, p.global_gru, p.global_att);
  return {concat({local, global}), FeatureOrigin::kVision};
}

Var sensor_cnn1_logits(const Tensor& sensor_window, const ModelParams& p) {
  if (sensor_window.shape() != Shape{p.config.window.sensor_window, 6}) {
    throw ShapeError("sensor window must be [" + std::to_string(p.config.window.sensor_window) + ",6], got " +
                     shape_string(sensor_window.shape()));
  }
  Var x = transpose(Var::constant(sensor_window));  // [6, L]
  for (std::size_t i = 0; i < p.cnn1.layers.size(); ++i) {
    x = relu(conv1d(x, p.cnn1.layers[i].first, p.cnn1.layers[i].second));
    if (i + 1 < p.cnn1.layers.size()) x = max_pool1d(x, 2);
  }
  return dense(global_average(x), p.cnn1_fc_w, p.cnn1_fc_b, Activation::kNone);
}

Var sensor_cnn1_forward(const Tensor& sensor_window, const ModelParams& p) {
  return softmax(sensor_cnn1_logits(sensor_window, p));
}

Var sensor_cnn2_trunk(const Var& activity, const Tensor& direction, const ModelParams& p) {
  if (direction.rank() != 2 || direction.dim(1) != 4) throw ShapeError("direction features must be [T,4]");
  Var x = concat_cols(broadcast_rows(activity, direction.dim(0)), Var::constant(direction));
  x = transpose(x);  // [7, T]
  for (const auto& [w, b] : p.cnn2.layers) x = relu(conv1d(x, w, b));
  return global_average(x);
}

FeatureVector sensor_branch_forward(const ModelInput& in, const ModelParams& p, const FrozenFeatures* cache) {
  Var act = cache && cache->activity ? Var::constant(*cache->activity) : sensor_cnn1_forward(in.sensor, p);
  return {sensor_cnn2_trunk(act, in.direction, p), FeatureOrigin::kSensor};
}

FeatureVector initial_fusion(const FeatureVector& v_v, const FeatureVector& v_nv, const ModelParams& p) {
  if (v_v.origin != FeatureOrigin::kVision || v_nv.origin != FeatureOrigin::kNonVision) {
    throw std::invalid_argument("initial_fusion expects (V_v, V_nv)");
  }
  const Index d = p.config.fused_dim();
  Var seq = stack_rows({pad_to(v_v.values, d), pad_to(v_nv.values, d)});
  return {attention_block(seq, p.fusion_att).output, FeatureOrigin::kFused};
}

Var final_fusion(const FeatureVector& fused, const FeatureVector& v_s, const ModelParams& p) {
  if (fused.origin != FeatureOrigin::kFused || v_s.origin != FeatureOrigin::kSensor) {
    throw std::invalid_argument("final_fusion expects (fused, V_s)");
  }
  return dense(concat({fused.values, v_s.values}), p.fc_w, p.fc_b, Activation::kSigmoid);
}

Var forward_probability(const ModelInput& in, const ModelParams& p, Mode mode, const ForwardContext& ctx,
                        const FrozenFeatures* cache) {
  const ModelConfig& c = p.config;
  FeatureVector fused{Var::constant(Tensor({c.fused_dim()})), FeatureOrigin::kFused};
  if (mode != Mode::kSensorOnly) {
    fused = initial_fusion(vision_forward(in, p, ctx, cache), non_vision_forward(in, p, ctx), p);
  }
  FeatureVector vs{Var::constant(Tensor({c.sensor_dim()})), FeatureOrigin::kSensor};
  if (mode != Mode::kVisionOnly) vs = sensor_branch_forward(in, p, cache);
  return final_fusion(fused, vs, p);
}

CrossingPrediction classify(double probability, double threshold, bool abstained) {
  CrossingPrediction out;
  out.probability = probability;
  out.threshold = threshold;
  out.abstained = abstained;
  out.predicted = !abstained && probability >= threshold ? Action::kCrossing : Action::kNotCrossing;
  return out;
}

CrossingPrediction predict(const ModelInput& in, ModelParams& p, Mode mode, const FrozenFeatures* cache) {
  NoGrad guard(p.params);
  const ForwardContext ctx;  // evaluation: dropout off
  const double prob = forward_probability(in, p, mode, ctx, cache).value()[0];
  return classify(prob, p.config.threshold, !in.has_bbox());
}

FrozenFeatures compute_frozen_features(const ModelInput& in, ModelParams& p) {
  FrozenFeatures f;
  const bool vision_frozen = !p.local_cnn.blocks[0][0].first.requires_grad();
  const bool cnn1_frozen = !p.cnn1.layers[0].first.requires_grad();
  NoGrad guard(p.params);
  if (vision_frozen) {
    f.local = vision_frame_features(in.local, p.local_cnn).value();
    f.global = vision_frame_features(in.global, p.global_cnn).value();
  }
  if (cnn1_frozen) f.activity = sensor_cnn1_forward(in.sensor, p).value();
  return f;
}

Var l2_penalty(const ModelParams& p, double lambda) { return scale(sum(square(p.fc_w)), lambda); }

}  // namespace watchped
