#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tcil/dataset.hpp"
#include "tcil/losses.hpp"
#include "tcil/pruning.hpp"

namespace tcil {

struct DatasetConfig {
  std::string name = "synthetic";  // synthetic | cifar10 | cifar100
  std::string root;                // for the CIFAR loaders; TCIL_DATA_ROOT overrides
  SyntheticSpec synthetic;
};

struct OptimizerConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

struct ScheduleConfig {
  int epochs_per_step = 30;
  int warmup_epochs = 10;
  std::vector<int> milestones = {20, 25};
  double decay = 0.1;
};

struct ModelConfig {
  std::vector<int> channels = {16, 32, 64};
  int reduction = 16;
  // When false (default) the old-class rows of the grown classifier stay
  // frozen during a step, matching the frozen previous classifier; the
  // alternative reading keeps them trainable.
  bool train_old_rows = false;
};

struct PruneSection {
  bool after_each_step = false;
  std::string mode = "ratio";
  double ratio = 0.5;
  double threshold = 0.95;
  int recovery_epochs = 0;

  PruneConfig to_prune_config() const;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  std::string protocol = "B0";
  int steps = 5;
  int memory_budget = 2000;
  std::string selection = "herding";
  long long seed = 1;
  std::optional<std::string> class_order_file;
  KdConfig loss;
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  int batch_size = 128;
  ModelConfig model;
  AugmentationConfig augmentation;
  std::string method = "tcil";  // tcil | finetune
  bool rescore = true;          // evaluation applies classifier re-scoring
  PruneSection prune;

  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig from_file(const std::string& path);
  nlohmann::json to_json() const;
  uint64_t hash() const;
  void validate() const;
};

// JSON pointer paths whose values differ; used for the resume refusal diff.
std::vector<std::string> json_diff_paths(const nlohmann::json& a, const nlohmann::json& b);

}  // namespace tcil
