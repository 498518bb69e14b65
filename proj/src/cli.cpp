#include "tcil/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "tcil/checkpoint.hpp"
#include "tcil/config.hpp"
#include "tcil/errors.hpp"
#include "tcil/pruning.hpp"
#include "tcil/trainer.hpp"

namespace tcil {

namespace {

int report_failure(const std::exception& e) {
  if (const auto* err = dynamic_cast<const Error*>(&e))
    std::cerr << err->line() << "\n";
  else
    std::cerr << "E_INTERNAL: " << e.what() << "\n";
  return 1;
}

Dataset load_dataset(const DatasetConfig& cfg) {
  std::string root = cfg.root;
  if (const char* env = std::getenv("TCIL_DATA_ROOT")) root = env;
  if (cfg.name == "synthetic") return make_synthetic(cfg.synthetic);
  if (cfg.name == "cifar10") return load_cifar10(root);
  return load_cifar100(root);
}

}  // namespace

int cmd_train(const std::string& config_path, const std::string& out_dir, bool resume) {
  try {
    ExperimentConfig config = ExperimentConfig::from_file(config_path);
    Dataset dataset = load_dataset(config.dataset);
    Trainer trainer(config, std::move(dataset), out_dir);
    ExperimentResult result = trainer.run_experiment(resume);

    std::printf("step  top1     top5     wtc   onc   itc\n");
    for (size_t i = 0; i < result.breakdown.steps.size(); ++i) {
      const auto& s = result.breakdown.steps[i];
      std::printf("%-5d %-8.2f %-8.2f %-5lld %-5lld %-5lld\n", s.step,
                  result.metrics.per_step[i], result.per_step_top5[i], s.wtc, s.onc, s.itc);
    }
    std::printf("Avg %.2f  Last %.2f\n", result.metrics.avg, result.metrics.last);
    return 0;
  } catch (const std::exception& e) {
    return report_failure(e);
  }
}

int cmd_analyze(const std::string& log_path, const std::string& map_path,
                const std::string& out_dir) {
  try {
    PredictionLog log = load_prediction_log(log_path, map_path);
    ErrorBreakdown breakdown = compute_breakdown(log);
    AccuracyMetrics metrics = accuracy_metrics(breakdown);
    emit_report(breakdown, metrics, out_dir);

    std::printf("step  total   correct  accuracy  wtc   onc   itc\n");
    for (size_t i = 0; i < breakdown.steps.size(); ++i) {
      const auto& s = breakdown.steps[i];
      std::printf("%-5d %-7lld %-8lld %-9.2f %-5lld %-5lld %-5lld\n", s.step, s.total(),
                  s.correct, metrics.per_step[i], s.wtc, s.onc, s.itc);
    }
    std::printf("Avg %.2f  Last %.2f\n", metrics.avg, metrics.last);
    return 0;
  } catch (const std::exception& e) {
    return report_failure(e);
  }
}

int cmd_prune(const std::string& checkpoint_path, const std::string& prune_config_path,
              const std::string& out_path) {
  try {
    PruneConfig config;
    {
      std::ifstream in(prune_config_path);
      if (!in) throw io_error("cannot open prune config: " + prune_config_path);
      nlohmann::json j;
      try {
        in >> j;
      } catch (const nlohmann::json::exception& e) {
        throw config_error("prune config is not valid JSON: " + std::string(e.what()));
      }
      if (!j.is_object()) throw config_error("prune config must be a JSON object");
      for (const auto& [key, value] : j.items())
        if (key != "mode" && key != "ratio" && key != "threshold")
          throw config_error("unknown key in prune config: " + key);
      std::string mode = j.value("mode", "ratio");
      if (mode == "ratio")
        config.mode = PruneMode::ratio;
      else if (mode == "threshold")
        config.mode = PruneMode::threshold;
      else
        throw config_error("prune mode must be 'ratio' or 'threshold'");
      config.ratio = j.value("ratio", 0.5);
      config.threshold = j.value("threshold", 0.95);
      config.validate();
    }

    DeaModel model = load_checkpoint(checkpoint_path);
    PruneReport report = prune_model(model, config);
    save_checkpoint(model, out_path);

    nlohmann::json rj{{"params_before", report.params_before},
                      {"params_after", report.params_after},
                      {"ratio", report.ratio()}};
    std::ofstream rout(out_path + ".report.json");
    rout << rj.dump(2) << "\n";
    std::printf("params before: %lld\nparams after:  %lld\nratio:         %.3fx\n",
                static_cast<long long>(report.params_before),
                static_cast<long long>(report.params_after), report.ratio());
    return 0;
  } catch (const std::exception& e) {
    return report_failure(e);
  }
}

}  // namespace tcil
