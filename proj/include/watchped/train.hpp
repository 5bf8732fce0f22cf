#pragma once

#include "watchped/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace watchped {

/// Optimizer and schedule settings. Defaults are the full-model values; cnn1()/cnn2() give the sensor CNN ones.
struct TrainConfig {
  double learning_rate = 5e-7;
  int batch_size = 2;
  int epochs = 40;
  double dropout = 0.5;
  double l2 = 1e-3;
  double test_split = 0.2;
  std::uint64_t seed = 0;
  Mode mode = Mode::kFull;
  int frame_size = 100;    // sensor CNN training windows
  int hop_size = 50;
  int window_stride = 1;   // spacing of full-model windows within an episode

  static TrainConfig cnn1();
  static TrainConfig cnn2();
  /// Small-data settings used by the synthetic experiments.
  static TrainConfig desk();

  void validate() const;
  nlohmann::ordered_json to_json() const;
  /// Keys absent from `j` keep the values of `base`.
  static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& base);
  static TrainConfig from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }
  static TrainConfig load(const std::filesystem::path& path, const TrainConfig& base);
};

struct HistoryEntry {
  long step = 0;
  double loss = 0;
};
using TrainHistory = std::vector<HistoryEntry>;
void write_history_csv(const std::filesystem::path& path, const TrainHistory& history);

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Seeded split of unique ids; the test side gets round(fraction * n) ids, at least one and at most n - 1.
std::pair<std::vector<std::string>, std::vector<std::string>> split_ids(std::vector<std::string> ids,
                                                                        double test_fraction, std::uint64_t seed);

/// A window together with the frozen-weight features the model needs for it.
struct Example {
  ModelInput input;
  FrozenFeatures frozen;
};

/// Train/test split at episode granularity.
std::pair<std::vector<Example>, std::vector<Example>> split_dataset(std::vector<Example> windows, double test_fraction,
                                                                    std::uint64_t seed);

/// Windows of a prepared episode ending every `stride` frames, with the CNN1 distribution cached. When the
/// vision CNNs are frozen their per-frame features are computed once and the rasters are dropped from the
/// inputs. Build examples after the sensor CNNs are trained; train_full keeps CNN1 frozen.
std::vector<Example> make_examples(const Episode& prepared, ModelParams& model, int stride);
std::vector<Example> make_examples(const std::vector<Episode>& prepared, ModelParams& model, int stride);

/// Start offsets of windows of `frame` samples every `hop`: floor((length - frame) / hop) + 1 of them.
std::vector<std::size_t> window_starts(std::size_t length, int frame, int hop);

struct ActivityWindows {
  std::vector<Tensor> windows;  // [frame,6]
  std::vector<int> labels;      // Activity as int
  std::vector<std::string> episode_ids;
};
/// Cuts each sensor stream into labelled windows; windows spanning an activity change are skipped.
/// A sample takes the activity of the frame nearest to it (the first frame before the video starts).
ActivityWindows activity_windows(const std::vector<Episode>& episodes, int frame, int hop);

/// Adam + sparse categorical cross-entropy on the CNN1 weights only. One history entry per epoch.
TrainHistory train_sensor_cnn1(const ActivityWindows& data, ModelParams& model, const TrainConfig& cfg);
double activity_accuracy(const ActivityWindows& data, ModelParams& model);

/// CNN2 pretraining on crossing labels through a temporary two-class head, over direction windows of
/// `frame_size` frames every `hop_size` frames. CNN1 is used frozen. One history entry per epoch.
TrainHistory train_sensor_cnn2(const std::vector<Episode>& prepared, ModelParams& model, const TrainConfig& cfg);

/// Minibatch Adam over mean BCE + L2 on the final FC, dropout active. Vision CNNs and CNN1 stay frozen.
/// Windows without a bbox are skipped. One history entry per epoch: (optimizer steps so far, mean loss).
TrainHistory train_full(const std::vector<Example>& train, ModelParams& model, const TrainConfig& cfg);

/// Mean BCE in evaluation mode over the windows that have a bbox.
double evaluation_loss(const std::vector<Example>& data, ModelParams& model, Mode mode);

struct Metrics {
  double accuracy = 0;
  double auc = 0;
  double f1 = 0;
  double precision = 0;
  double recall = 0;
};

/// Confusion-matrix metrics at `threshold` (score >= threshold is crossing) and trapezoidal ROC AUC over
/// unique scores, which equals pair counting with ties worth one half. AUC is 0.5 when one class is
/// absent; precision, recall and F1 are 0 when their denominators are.
Metrics compute_metrics(const std::vector<double>& scores, const std::vector<int>& labels, double threshold);
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

enum class AbstentionMode { kAsNotCrossing, kExcluded };
std::string_view to_string(AbstentionMode m);
AbstentionMode parse_abstention_mode(std::string_view s);

struct WindowTag {
  std::string episode_id;
  DistanceStratum distance = DistanceStratum::kClose;
  Lighting lighting = Lighting::kSunny;
  int label = 0;
};
WindowTag tag_of(const ModelInput& in);

struct ReportRow {
  std::string stratum;
  std::size_t n = 0;  // windows scored
  std::optional<Metrics> metrics;  // empty when n = 0
  std::size_t abstained = 0;
};

struct EvalReport {
  AbstentionMode abstention_mode = AbstentionMode::kAsNotCrossing;
  std::vector<ReportRow> rows;  // close, medium, far, sunny, cloudy, rainy, night, overall

  const ReportRow& row(std::string_view stratum) const;
};

std::vector<CrossingPrediction> predict_all(const std::vector<Example>& data, ModelParams& model, Mode mode);

/// Abstained windows count as not-crossing with score 0 (as_not_crossing) or are dropped (excluded).
EvalReport stratified_report(const std::vector<WindowTag>& tags, const std::vector<CrossingPrediction>& predictions,
                             AbstentionMode mode);

/// stratum,n,accuracy,auc,f1,precision,recall,abstained; empty strata print NA.
std::string report_csv(const EvalReport& report);
void write_report_csv(const std::filesystem::path& path, const EvalReport& report);

}  // namespace watchped
