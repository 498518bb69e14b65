#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace tcil {

enum class Protocol { B0, B50 };

Protocol protocol_from_string(const std::string& name);
std::string protocol_to_string(Protocol p);

// Ordered class batches C_1..C_T with the training sample ids of each step.
// Label sets are pairwise disjoint and cover the dataset.
struct TaskStream {
  int num_steps = 0;
  std::vector<std::vector<int>> class_batches;  // C_t, ascending within a batch
  std::vector<std::vector<int>> sample_index;   // ids of D_t, ascending
  Protocol protocol = Protocol::B0;
  long long class_order_seed = 0;

  std::vector<int> seen_classes(int step) const;  // union C_1..C_step
  int task_of_class(int class_id) const;          // 1-based step, -1 if unknown
  std::map<int, int> class_to_task() const;
  int total_classes() const;

  void validate(const std::map<int, int>& dataset_labels) const;
};

// For B50 `num_steps` counts the incremental splits after the base batch, so
// the stream has num_steps+1 batches in total.
TaskStream build_stream(const std::map<int, int>& dataset_labels, Protocol protocol,
                        int num_steps, long long seed,
                        const std::optional<std::vector<int>>& explicit_class_order = {});

std::vector<int> load_class_order(const std::string& path);
void save_class_order(const std::string& path, const std::vector<int>& order);

enum class SelectionMethod { herding, random };

SelectionMethod selection_from_string(const std::string& name);
std::string selection_to_string(SelectionMethod m);

struct HerdingResult {
  std::vector<int> ids;
  bool clamped = false;  // k exceeded the candidate count
};

// Greedy herding: repeatedly pick the sample that keeps the mean of the
// selected set closest to the class mean. Ties go to the lowest id. The
// order is prefix-consistent, so truncation preserves the selection.
HerdingResult select_exemplars(const std::vector<int>& ids,
                               const std::vector<std::vector<double>>& features, int k);

// Budgeted rehearsal store. Budget 0 encodes the non-rehearsal setting.
class ExemplarMemory {
 public:
  ExemplarMemory() = default;
  ExemplarMemory(int budget, SelectionMethod method, long long seed = 0);

  int budget() const { return budget_; }
  SelectionMethod selection_method() const { return method_; }
  int total_count() const;
  const std::map<int, std::vector<int>>& entries() const { return entries_; }
  std::vector<int> stored_classes() const;

  // Flattened (class_id, sample_id) view used by the trainer to build the
  // rehearsal part of a step's training set. Reads are counted so the
  // non-rehearsal setting can assert exemplar data was never touched.
  std::vector<std::pair<int, int>> sample_list() const;
  long long access_count() const { return access_count_; }

  // Per-class feature sets for classes entering the memory.
  struct ClassCandidates {
    std::vector<int> ids;
    std::vector<std::vector<double>> features;
  };

  // Recomputes balanced quotas over all seen classes, truncates existing
  // herding orders and selects exemplars for the new classes.
  void rebalance(const std::vector<int>& new_classes,
                 const std::map<int, ClassCandidates>& candidates);

  void save_snapshot(const std::string& path) const;
  static ExemplarMemory load_snapshot(const std::string& path);

 private:
  int quota_for(int class_id, const std::vector<int>& seen_sorted) const;

  int budget_ = 0;
  SelectionMethod method_ = SelectionMethod::herding;
  long long seed_ = 0;
  std::map<int, std::vector<int>> entries_;
  mutable long long access_count_ = 0;
};

}  // namespace tcil
