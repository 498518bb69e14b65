#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace tcil {

// Run bookkeeping written next to the artifacts. Completion markers are
// strictly sequential and the config hash never changes after creation.
struct RunManifest {
  uint64_t config_hash = 0;
  std::string dataset_descriptor;
  std::string protocol;
  long long seed = 0;
  std::string method;
  int total_steps = 0;
  std::vector<int> completed_steps;
  std::map<std::string, std::string> artifacts;

  struct EvalSummary {
    int step = 0;
    double top1 = 0.0;
    double top5 = 0.0;
  };
  std::vector<EvalSummary> eval_summaries;

  void mark_completed(int step);
  int last_completed() const { return completed_steps.empty() ? 0 : completed_steps.back(); }

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  void save(const std::string& path) const;
  static RunManifest load(const std::string& path);
};

}  // namespace tcil
