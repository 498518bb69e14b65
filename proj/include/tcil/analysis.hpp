#pragma once

#include <map>
#include <string>
#include <vector>

namespace tcil {

enum class ErrorKind { correct, wtc, onc, itc };

// ONC is any cross-task error touching the latest task. The narrower rule
// (only predictions INTO the latest task) is kept for sensitivity analysis.
enum class OncRule { either_latest, predicted_latest };

const char* error_kind_name(ErrorKind k);

ErrorKind classify_error(int true_class, int pred_class,
                         const std::map<int, int>& class_to_task, int latest_task,
                         OncRule rule = OncRule::either_latest);

struct PredictionRecord {
  int sample_id = 0;
  int true_class = 0;
  int pred_class = 0;
  int step = 0;  // evaluation step; also the latest trained task
};

struct PredictionLog {
  std::vector<PredictionRecord> records;
  std::map<int, int> class_to_task;

  void validate() const;
};

struct StepErrorCounts {
  int step = 0;
  long long correct = 0;
  long long wtc = 0;
  long long onc = 0;
  long long itc = 0;

  long long total() const { return correct + wtc + onc + itc; }
  long long errors() const { return wtc + onc + itc; }
  double accuracy() const { return total() ? 100.0 * correct / total() : 0.0; }
};

struct ErrorBreakdown {
  std::vector<StepErrorCounts> steps;  // ascending step order

  const StepErrorCounts* find_step(int step) const;
};

ErrorBreakdown compute_breakdown(const PredictionLog& log, OncRule rule = OncRule::either_latest);

struct AccuracyMetrics {
  std::vector<double> per_step;  // top-1 percentage per step
  double avg = 0.0;              // arithmetic mean over steps
  double last = 0.0;             // value at the final step
};

AccuracyMetrics accuracy_metrics(const ErrorBreakdown& breakdown);

// --- file formats -----------------------------------------------------------
// Prediction log: CSV with header "sample_id,true_class,pred_class,step".
// Class/task map: CSV with header "class_id,task_id".
PredictionLog load_prediction_log(const std::string& log_path, const std::string& map_path);
void save_prediction_log(const std::string& path, const std::vector<PredictionRecord>& records);
void save_class_task_map(const std::string& path, const std::map<int, int>& class_to_task);
std::map<int, int> load_class_task_map(const std::string& path);

// Writes results.csv plus accuracy_evolution.svg and error_breakdown.svg
// under out_dir. Deterministic: identical inputs give identical bytes.
void emit_report(const ErrorBreakdown& breakdown, const AccuracyMetrics& metrics,
                 const std::string& out_dir);

}  // namespace tcil
