#include "tcil/manifest.hpp"

#include <fstream>

#include "tcil/errors.hpp"

namespace tcil {

void RunManifest::mark_completed(int step) {
  if (step != last_completed() + 1)
    throw state_error("completion markers must be sequential: got step " +
                      std::to_string(step) + " after " + std::to_string(last_completed()));
  completed_steps.push_back(step);
}

nlohmann::json RunManifest::to_json() const {
  nlohmann::json j;
  j["config_hash"] = config_hash;
  j["dataset"] = dataset_descriptor;
  j["protocol"] = protocol;
  j["seed"] = seed;
  j["method"] = method;
  j["total_steps"] = total_steps;
  j["completed_steps"] = completed_steps;
  j["artifacts"] = artifacts;
  nlohmann::json evals = nlohmann::json::array();
  for (const auto& e : eval_summaries)
    evals.push_back({{"step", e.step}, {"top1", e.top1}, {"top5", e.top5}});
  j["evals"] = evals;
  return j;
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
  RunManifest m;
  m.config_hash = j.at("config_hash").get<uint64_t>();
  m.dataset_descriptor = j.at("dataset").get<std::string>();
  m.protocol = j.at("protocol").get<std::string>();
  m.seed = j.at("seed").get<long long>();
  m.method = j.value("method", "tcil");
  m.total_steps = j.at("total_steps").get<int>();
  m.completed_steps = j.at("completed_steps").get<std::vector<int>>();
  m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
  for (const auto& e : j.value("evals", nlohmann::json::array())) {
    EvalSummary s;
    s.step = e.at("step").get<int>();
    s.top1 = e.at("top1").get<double>();
    s.top5 = e.at("top5").get<double>();
    m.eval_summaries.push_back(s);
  }
  return m;
}

void RunManifest::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw io_error("cannot write manifest: " + path);
  out << to_json().dump(2) << "\n";
}

RunManifest RunManifest::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open manifest: " + path);
  nlohmann::json j;
  try {
    in >> j;
    return from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw resume_error("corrupt manifest " + path + ": " + e.what());
  }
}

}  // namespace tcil
