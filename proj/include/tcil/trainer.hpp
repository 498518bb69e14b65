#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tcil/analysis.hpp"
#include "tcil/config.hpp"
#include "tcil/dataset.hpp"
#include "tcil/losses.hpp"
#include "tcil/manifest.hpp"
#include "tcil/model.hpp"
#include "tcil/protocol.hpp"

namespace tcil {

// Linear warmup from base_lr/warmup to base_lr, then piecewise decay at the
// milestones (0-based epochs).
double lr_at_epoch(const ScheduleConfig& schedule, double base_lr, int epoch);

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  LossBundle mean;
};

struct StepReport {
  int step = 0;
  LossBundle final_bundle;
  std::vector<EpochStats> epochs;
  int64_t param_count = 0;                // model parameters, before any pruning
  std::vector<uint64_t> extractor_checksums;  // after the step, one per extractor
};

struct StepEval {
  int step = 0;
  std::vector<PredictionRecord> records;            // primary predictions
  std::vector<PredictionRecord> records_norescore;  // raw classifier argmax
  double top1 = 0.0;
  double top5 = 0.0;
};

struct ExperimentResult {
  std::vector<StepReport> reports;  // steps executed in this process
  std::vector<StepEval> evals;      // every step, including resumed ones
  AccuracyMetrics metrics;
  ErrorBreakdown breakdown;
  AccuracyMetrics metrics_norescore;
  ErrorBreakdown breakdown_norescore;
  std::vector<double> per_step_top5;
  std::map<int, int> class_to_task;
};

// Drives the incremental loop: expansion, epoch schedule, multi-level
// distillation, gamma computation, memory rebalancing and checkpointing.
// With an out_dir, every step persists enough state to resume after a crash.
class Trainer {
 public:
  Trainer(const ExperimentConfig& config, Dataset dataset, std::string out_dir = "");

  ExperimentResult run_experiment(bool resume = false);

  // Steps must be invoked in order 1..T; the report carries the final loss
  // bundle and the per-epoch trace.
  StepReport run_step(DeaModel& model, const TaskStream& stream, ExemplarMemory& memory, int t);

  const TaskStream& stream() const { return stream_; }
  const ExperimentConfig& config() const { return config_; }
  const KdConfig& effective_loss() const { return effective_loss_; }
  DeaModel& model() { return model_; }
  const ExemplarMemory& memory() const { return memory_; }

 private:
  struct TrainSample {
    int id = 0;
    int label = 0;       // dataset class id
    int origin_task = 0; // 1-based step the sample belongs to
    bool exemplar = false;
  };

  struct FinetuneNet {
    Extractor extractor;
    GrowingClassifier classifier;
  };

  void rebuild_class_index(int t);
  Tensor image_tensor(const DataItem& item) const;
  std::vector<TrainSample> collect_step_samples(const TaskStream& stream,
                                                ExemplarMemory& memory, int t);
  EpochStats run_epoch_tcil(DeaModel& model, std::vector<TrainSample>& samples, Sgd& opt,
                            LinearLayer* aux, int t, int epoch, double lr);
  EpochStats run_epoch_finetune(std::vector<TrainSample>& samples, Sgd& opt, int t, int epoch,
                                double lr);
  void rebalance_memory_after_step(DeaModel& model, const TaskStream& stream,
                                   ExemplarMemory& memory, int t);
  StepReport run_step_finetune(const TaskStream& stream, int t);
  StepEval evaluate(int t);
  std::vector<double> eval_logits(const DataItem& item) const;  // raw, no re-scoring
  void persist_step(int t, const StepReport& report, const StepEval& eval);
  void log_iteration(int step, int epoch, int iter, const LossBundle& bundle);
  std::string dataset_descriptor() const;

  ExperimentConfig config_;
  KdConfig effective_loss_;
  Dataset dataset_;
  std::string out_dir_;
  TaskStream stream_;
  DeaModel model_;
  std::optional<FinetuneNet> finetune_;
  ExemplarMemory memory_;
  int completed_ = 0;
  std::map<int, int> class_to_index_;
  std::vector<int> index_to_class_;
  std::map<int, const DataItem*> train_by_id_;
  RunManifest manifest_;
  std::ofstream runlog_;
};

}  // namespace tcil
