#pragma once

#include "watchped/model.hpp"
#include "watchped/train.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace watchped {

/// Settings for the `train`, `train-sensor` and `gradcheck` subcommands. Every section is optional:
/// {"model": ModelConfig, "train": TrainConfig, "cnn1": TrainConfig, "cnn2": TrainConfig}.
/// Missing sections fall back to the desk model, TrainConfig::desk(), cnn1() and cnn2().
struct RunConfig {
  ModelConfig model = ModelConfig::desk();
  TrainConfig train = TrainConfig::desk();
  TrainConfig cnn1 = TrainConfig::cnn1();
  TrainConfig cnn2 = TrainConfig::cnn2();

  nlohmann::ordered_json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
};

/// What `train` does after the split: unless vision_only, pretrain CNN1 and CNN2 on `train` (seeds derived from
/// rc.train.seed), then build windows and train the full model in rc.train.mode.
ModelParams train_model(const std::vector<Episode>& train, RunConfig rc, TrainHistory* history = nullptr,
                        std::ostream* log = nullptr);

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Runs one subcommand. `args` excludes the program name. Human-readable summaries go to `out`,
/// errors and usage text to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace watchped
