#pragma once

#include "watchped/autodiff.hpp"
#include "watchped/layers.hpp"
#include "watchped/processing.hpp"

#include <filesystem>
#include <json.hpp>
#include <optional>

namespace watchped {

enum class Mode { kFull, kVisionOnly, kSensorOnly };
std::string_view to_string(Mode m);
Mode parse_mode(std::string_view s);

/// Architecture and window settings. Sizes are free; desk() and full_scale() are the two presets.
struct ModelConfig {
  WindowConfig window;
  int raster_size = 32;
  int nv_hidden = 8;      // each of the three non-vision GRUs
  int vision_hidden = 8;  // local and global GRUs
  int attention_dim = 8;
  std::vector<std::vector<int>> vision_blocks{{4}, {8}};  // 3x3 convs per block, each block ends in a 2x2 max pool
  bool freeze_vision_cnn = true;
  std::vector<int> cnn1_channels{8, 8};
  int cnn1_kernel = 5;
  std::vector<int> cnn2_channels{8, 8};
  int cnn2_kernel = 3;
  double threshold = 0.5;
  double dropout = 0.5;
  Mode mode = Mode::kFull;

  static ModelConfig desk();
  static ModelConfig full_scale();

  int vision_feature_dim() const { return vision_blocks.back().back(); }
  int nv_dim() const { return nv_hidden; }
  int vision_dim() const { return 2 * vision_hidden; }
  int fused_dim() const { return std::max(nv_dim(), vision_dim()); }
  int sensor_dim() const { return cnn2_channels.back(); }
  int pooled_extent() const { return raster_size >> vision_blocks.size(); }

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static ModelConfig from_json(const nlohmann::ordered_json& j);
  static ModelConfig load(const std::filesystem::path& path);
};

/// 3x3 / stride 1 / pad 1 conv layers with ReLU, 2x2 max pool closing each block.
struct VisionCnnParams {
  std::vector<std::vector<std::pair<ad::Var, ad::Var>>> blocks;  // (kernels, bias)
};

struct Conv1dStack {
  std::vector<std::pair<ad::Var, ad::Var>> layers;
};

/// All trainable weights plus the config that shaped them.
struct ModelParams {
  ModelConfig config;
  ad::ParamSet params;

  ad::GruParams nv_gru1, nv_gru2, nv_gru3;
  ad::AttentionParams nv_att;
  VisionCnnParams local_cnn, global_cnn;
  ad::GruParams local_gru, global_gru;
  ad::AttentionParams local_att, global_att;
  Conv1dStack cnn1;
  ad::Var cnn1_fc_w, cnn1_fc_b;
  Conv1dStack cnn2;
  ad::AttentionParams fusion_att;
  ad::Var fc_w, fc_b;

  static ModelParams create(const ModelConfig& config, std::uint64_t seed);
  /// Re-resolves the named handles after `params` was replaced or restored.
  void bind();
  /// Freezes the vision CNNs when the config asks for it.
  void apply_default_freezing();

  ModelParams() = default;
  ModelParams(const ModelParams&) = delete;
  ModelParams& operator=(const ModelParams&) = delete;
  ModelParams(ModelParams&&) = default;
  ModelParams& operator=(ModelParams&&) = default;
};

/// Parameter name prefixes of each component.
inline constexpr const char* kVisionCnnPrefixes[] = {"vis.local.cnn.", "vis.global.cnn."};
inline constexpr const char* kCnn1Prefix = "sensor.cnn1.";
inline constexpr const char* kCnn2Prefix = "sensor.cnn2.";
inline constexpr const char* kFusionFcWeight = "fusion.fc.w";

void save_model(const std::filesystem::path& path, const ModelParams& model, nlohmann::ordered_json extra = {});
/// Loads config and weights; `extra` receives any additional metadata stored alongside.
ModelParams load_model(const std::filesystem::path& path, nlohmann::ordered_json* extra = nullptr);

/// Disables gradient tracking on every parameter for the guard's lifetime.
class NoGrad {
 public:
  explicit NoGrad(ad::ParamSet& params);
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  ad::ParamSet& params_;
  std::vector<bool> saved_;
};

enum class FeatureOrigin { kNonVision, kVision, kSensor, kFused };

struct FeatureVector {
  ad::Var values;
  FeatureOrigin origin;
};

struct CrossingPrediction {
  double probability = 0;
  Action predicted = Action::kNotCrossing;
  double threshold = 0.5;
  bool abstained = false;
};

/// Per-frame CNN features and the CNN1 distribution for a window, computed with frozen weights.
struct FrozenFeatures {
  std::optional<Tensor> local;     // [m, d_cnn]
  std::optional<Tensor> global;    // [m, d_cnn]
  std::optional<Tensor> activity;  // [3]
};

/// [H,W,3] frame of a [m,H,W,3] block, as channel-first [3,H,W].
Tensor frame_chw(const Tensor& rasters, Index frame);

/// Feature map after the last pooling stage, [C, H/2^blocks, W/2^blocks].
ad::Var vision_cnn_map(const Tensor& image_chw, const VisionCnnParams& cnn);
ad::Var vision_cnn_forward(const Tensor& image_chw, const VisionCnnParams& cnn);
/// Per-frame pooled features [m, d_cnn] of a raster block.
ad::Var vision_frame_features(const Tensor& rasters, const VisionCnnParams& cnn);

FeatureVector non_vision_forward(const ModelInput& in, const ModelParams& p, const ad::ForwardContext& ctx);
FeatureVector vision_forward(const ModelInput& in, const ModelParams& p, const ad::ForwardContext& ctx,
                             const FrozenFeatures* cache = nullptr);
/// Logits over {standing, walking, jogging} for a [window,6] sensor block.
ad::Var sensor_cnn1_logits(const Tensor& sensor_window, const ModelParams& p);
ad::Var sensor_cnn1_forward(const Tensor& sensor_window, const ModelParams& p);
/// CNN2 trunk over [T,7] = (activity distribution broadcast over time | direction features); returns [channels].
ad::Var sensor_cnn2_trunk(const ad::Var& activity, const Tensor& direction, const ModelParams& p);
FeatureVector sensor_branch_forward(const ModelInput& in, const ModelParams& p, const FrozenFeatures* cache = nullptr);
FeatureVector initial_fusion(const FeatureVector& v_v, const FeatureVector& v_nv, const ModelParams& p);
/// Probability [1] from the fused vector and V_s.
ad::Var final_fusion(const FeatureVector& fused, const FeatureVector& v_s, const ModelParams& p);

/// Differentiable probability for the given mode.
ad::Var forward_probability(const ModelInput& in, const ModelParams& p, Mode mode, const ad::ForwardContext& ctx,
                            const FrozenFeatures* cache = nullptr);

CrossingPrediction classify(double probability, double threshold, bool abstained);
/// Evaluation-mode prediction; abstains when the window has no bbox at all.
CrossingPrediction predict(const ModelInput& in, ModelParams& p, Mode mode, const FrozenFeatures* cache = nullptr);

/// Frozen-weight features for one window (only the parts that are frozen are filled).
FrozenFeatures compute_frozen_features(const ModelInput& in, ModelParams& p);

/// lambda * sum of squared final FC weights.
ad::Var l2_penalty(const ModelParams& p, double lambda);

}  // namespace watchped
