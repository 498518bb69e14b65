#include "tcil/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "tcil/errors.hpp"
#include "tcil/protocol.hpp"

namespace tcil {

namespace {

using nlohmann::json;

// Unknown keys are hard errors so a typo in a loss weight cannot silently
// fall back to a default.
void check_keys(const json& j, const std::string& section, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw config_error("'" + section + "' must be an object");
  std::string offending;
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) offending += (offending.empty() ? "" : ", ") + key;
  }
  if (!offending.empty())
    throw config_error("unknown key(s) in " + section + ": " + offending);
}

template <typename T>
T get_or(const json& j, const std::string& key, const T& fallback, const std::string& section) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw config_error("bad value for '" + section + "." + key + "'");
  }
}

}  // namespace

PruneConfig PruneSection::to_prune_config() const {
  PruneConfig out;
  if (mode == "ratio")
    out.mode = PruneMode::ratio;
  else if (mode == "threshold")
    out.mode = PruneMode::threshold;
  else
    throw config_error("prune.mode must be 'ratio' or 'threshold'");
  out.ratio = ratio;
  out.threshold = threshold;
  return out;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  check_keys(j, "config",
             {"dataset", "protocol", "steps", "memory_budget", "selection", "seed",
              "class_order_file", "loss", "optimizer", "schedule", "batch_size", "model",
              "augmentation", "method", "rescore", "prune"});
  ExperimentConfig c;

  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    check_keys(d, "dataset",
               {"name", "root", "classes", "train_per_class", "test_per_class", "image_size",
                "channels", "noise", "seed"});
    c.dataset.name = get_or<std::string>(d, "name", "synthetic", "dataset");
    c.dataset.root = get_or<std::string>(d, "root", "", "dataset");
    c.dataset.synthetic.classes = get_or<int>(d, "classes", 10, "dataset");
    c.dataset.synthetic.train_per_class = get_or<int>(d, "train_per_class", 100, "dataset");
    c.dataset.synthetic.test_per_class = get_or<int>(d, "test_per_class", 50, "dataset");
    c.dataset.synthetic.image_size = get_or<int>(d, "image_size", 16, "dataset");
    c.dataset.synthetic.channels = get_or<int>(d, "channels", 3, "dataset");
    c.dataset.synthetic.noise = get_or<double>(d, "noise", 0.6, "dataset");
    c.dataset.synthetic.seed = static_cast<uint64_t>(get_or<long long>(d, "seed", 7, "dataset"));
  }

  c.protocol = get_or<std::string>(j, "protocol", "B0", "config");
  c.steps = get_or<int>(j, "steps", 5, "config");
  c.memory_budget = get_or<int>(j, "memory_budget", 2000, "config");
  c.selection = get_or<std::string>(j, "selection", "herding", "config");
  c.seed = get_or<long long>(j, "seed", 1, "config");
  if (j.contains("class_order_file") && !j.at("class_order_file").is_null())
    c.class_order_file = j.at("class_order_file").get<std::string>();

  if (j.contains("loss")) {
    const json& l = j.at("loss");
    check_keys(l, "loss",
               {"temperature", "lambda", "mu", "alpha", "beta", "feature_kd_on",
                "kd_t2_compensation"});
    c.loss.temperature = get_or<double>(l, "temperature", 2.0, "loss");
    c.loss.lambda = get_or<double>(l, "lambda", 0.5, "loss");
    c.loss.mu = get_or<double>(l, "mu", 0.5, "loss");
    c.loss.alpha = get_or<double>(l, "alpha", 1.0, "loss");
    c.loss.beta = get_or<double>(l, "beta", 1.0, "loss");
    c.loss.t2_compensation = get_or<bool>(l, "kd_t2_compensation", true, "loss");
    std::string on = get_or<std::string>(l, "feature_kd_on", "maps", "loss");
    if (on == "maps")
      c.loss.feature_kd_on = FeatureKdOn::maps;
    else if (on == "pooled")
      c.loss.feature_kd_on = FeatureKdOn::pooled;
    else
      throw config_error("loss.feature_kd_on must be 'maps' or 'pooled'");
  }

  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    check_keys(o, "optimizer", {"lr", "momentum", "weight_decay"});
    c.optimizer.lr = get_or<double>(o, "lr", 0.1, "optimizer");
    c.optimizer.momentum = get_or<double>(o, "momentum", 0.9, "optimizer");
    c.optimizer.weight_decay = get_or<double>(o, "weight_decay", 5e-4, "optimizer");
  }

  if (j.contains("schedule")) {
    const json& s = j.at("schedule");
    check_keys(s, "schedule", {"epochs_per_step", "warmup_epochs", "milestones", "decay"});
    c.schedule.epochs_per_step = get_or<int>(s, "epochs_per_step", 30, "schedule");
    c.schedule.warmup_epochs = get_or<int>(s, "warmup_epochs", 10, "schedule");
    c.schedule.milestones = get_or<std::vector<int>>(s, "milestones", {20, 25}, "schedule");
    c.schedule.decay = get_or<double>(s, "decay", 0.1, "schedule");
  }

  c.batch_size = get_or<int>(j, "batch_size", 128, "config");

  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, "model", {"channels", "reduction", "train_old_rows"});
    c.model.channels = get_or<std::vector<int>>(m, "channels", {16, 32, 64}, "model");
    c.model.reduction = get_or<int>(m, "reduction", 16, "model");
    c.model.train_old_rows = get_or<bool>(m, "train_old_rows", false, "model");
  }

  if (j.contains("augmentation")) {
    const json& a = j.at("augmentation");
    check_keys(a, "augmentation",
               {"random_crop", "crop_pad", "horizontal_flip", "rotation", "rotation_degrees",
                "brightness", "brightness_delta", "cutout", "cutout_size"});
    c.augmentation.random_crop = get_or<bool>(a, "random_crop", false, "augmentation");
    c.augmentation.crop_pad = get_or<int>(a, "crop_pad", 2, "augmentation");
    c.augmentation.horizontal_flip = get_or<bool>(a, "horizontal_flip", false, "augmentation");
    c.augmentation.rotation = get_or<bool>(a, "rotation", false, "augmentation");
    c.augmentation.rotation_degrees = get_or<double>(a, "rotation_degrees", 15.0, "augmentation");
    c.augmentation.brightness = get_or<bool>(a, "brightness", false, "augmentation");
    c.augmentation.brightness_delta = get_or<double>(a, "brightness_delta", 0.2, "augmentation");
    c.augmentation.cutout = get_or<bool>(a, "cutout", false, "augmentation");
    c.augmentation.cutout_size = get_or<int>(a, "cutout_size", 4, "augmentation");
  }

  c.method = get_or<std::string>(j, "method", "tcil", "config");
  c.rescore = get_or<bool>(j, "rescore", true, "config");

  if (j.contains("prune")) {
    const json& p = j.at("prune");
    check_keys(p, "prune", {"after_each_step", "mode", "ratio", "threshold", "recovery_epochs"});
    c.prune.after_each_step = get_or<bool>(p, "after_each_step", false, "prune");
    c.prune.mode = get_or<std::string>(p, "mode", "ratio", "prune");
    c.prune.ratio = get_or<double>(p, "ratio", 0.5, "prune");
    c.prune.threshold = get_or<double>(p, "threshold", 0.95, "prune");
    c.prune.recovery_epochs = get_or<int>(p, "recovery_epochs", 0, "prune");
  }

  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw config_error("config " + path + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

json ExperimentConfig::to_json() const {
  json j;
  j["dataset"] = {{"name", dataset.name},
                  {"root", dataset.root},
                  {"classes", dataset.synthetic.classes},
                  {"train_per_class", dataset.synthetic.train_per_class},
                  {"test_per_class", dataset.synthetic.test_per_class},
                  {"image_size", dataset.synthetic.image_size},
                  {"channels", dataset.synthetic.channels},
                  {"noise", dataset.synthetic.noise},
                  {"seed", static_cast<long long>(dataset.synthetic.seed)}};
  j["protocol"] = protocol;
  j["steps"] = steps;
  j["memory_budget"] = memory_budget;
  j["selection"] = selection;
  j["seed"] = seed;
  j["class_order_file"] = class_order_file ? json(*class_order_file) : json(nullptr);
  j["loss"] = {{"temperature", loss.temperature},
               {"lambda", loss.lambda},
               {"mu", loss.mu},
               {"alpha", loss.alpha},
               {"beta", loss.beta},
               {"feature_kd_on", loss.feature_kd_on == FeatureKdOn::maps ? "maps" : "pooled"},
               {"kd_t2_compensation", loss.t2_compensation}};
  j["optimizer"] = {{"lr", optimizer.lr},
                    {"momentum", optimizer.momentum},
                    {"weight_decay", optimizer.weight_decay}};
  j["schedule"] = {{"epochs_per_step", schedule.epochs_per_step},
                   {"warmup_epochs", schedule.warmup_epochs},
                   {"milestones", schedule.milestones},
                   {"decay", schedule.decay}};
  j["batch_size"] = batch_size;
  j["model"] = {{"channels", model.channels},
                {"reduction", model.reduction},
                {"train_old_rows", model.train_old_rows}};
  j["augmentation"] = {{"random_crop", augmentation.random_crop},
                       {"crop_pad", augmentation.crop_pad},
                       {"horizontal_flip", augmentation.horizontal_flip},
                       {"rotation", augmentation.rotation},
                       {"rotation_degrees", augmentation.rotation_degrees},
                       {"brightness", augmentation.brightness},
                       {"brightness_delta", augmentation.brightness_delta},
                       {"cutout", augmentation.cutout},
                       {"cutout_size", augmentation.cutout_size}};
  j["method"] = method;
  j["rescore"] = rescore;
  j["prune"] = {{"after_each_step", prune.after_each_step},
                {"mode", prune.mode},
                {"ratio", prune.ratio},
                {"threshold", prune.threshold},
                {"recovery_epochs", prune.recovery_epochs}};
  return j;
}

uint64_t ExperimentConfig::hash() const {
  std::string canon = to_json().dump();
  uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : canon) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

void ExperimentConfig::validate() const {
  protocol_from_string(protocol);
  selection_from_string(selection);
  if (steps < 1) throw config_error("steps must be >= 1");
  if (memory_budget < 0) throw config_error("memory_budget must be >= 0");
  if (batch_size < 1) throw config_error("batch_size must be >= 1");
  if (method != "tcil" && method != "finetune")
    throw config_error("method must be 'tcil' or 'finetune'");
  if (dataset.name != "synthetic" && dataset.name != "cifar10" && dataset.name != "cifar100")
    throw config_error("dataset.name must be synthetic, cifar10 or cifar100");
  loss.validate();
  if (schedule.warmup_epochs >= schedule.epochs_per_step)
    throw config_error("warmup_epochs must be smaller than epochs_per_step");
  if (schedule.warmup_epochs < 0) throw config_error("warmup_epochs must be >= 0");
  if (schedule.decay <= 0.0 || schedule.decay > 1.0)
    throw config_error("schedule.decay must be in (0,1]");
  for (size_t i = 1; i < schedule.milestones.size(); ++i)
    if (schedule.milestones[i] <= schedule.milestones[i - 1])
      throw config_error("schedule.milestones must be strictly increasing");
  if (optimizer.lr <= 0.0) throw config_error("optimizer.lr must be > 0");
  if (model.channels.empty()) throw config_error("model.channels must not be empty");
  for (int ch : model.channels)
    if (ch < 1) throw config_error("model.channels entries must be >= 1");
  if (model.reduction < 1) throw config_error("model.reduction must be >= 1");
  prune.to_prune_config();  // parses mode, range-checks
  if (prune.recovery_epochs < 0) throw config_error("prune.recovery_epochs must be >= 0");
}

namespace {

void diff_recurse(const json& a, const json& b, const std::string& path,
                  std::vector<std::string>& out) {
  if (a.is_object() && b.is_object()) {
    std::set<std::string> keys;
    for (const auto& [k, v] : a.items()) keys.insert(k);
    for (const auto& [k, v] : b.items()) keys.insert(k);
    for (const std::string& k : keys) {
      if (!a.contains(k) || !b.contains(k))
        out.push_back(path + "/" + k);
      else
        diff_recurse(a.at(k), b.at(k), path + "/" + k, out);
    }
    return;
  }
  if (a != b) out.push_back(path.empty() ? "/" : path);
}

}  // namespace

std::vector<std::string> json_diff_paths(const json& a, const json& b) {
  std::vector<std::string> out;
  diff_recurse(a, b, "", out);
  return out;
}

}  // namespace tcil
