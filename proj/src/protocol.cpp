#include "tcil/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tcil/errors.hpp"

namespace tcil {

Protocol protocol_from_string(const std::string& name) {
  if (name == "B0") return Protocol::B0;
  if (name == "B50") return Protocol::B50;
  throw config_error("unknown protocol '" + name + "' (expected B0 or B50)");
}

std::string protocol_to_string(Protocol p) { return p == Protocol::B0 ? "B0" : "B50"; }

SelectionMethod selection_from_string(const std::string& name) {
  if (name == "herding") return SelectionMethod::herding;
  if (name == "random") return SelectionMethod::random;
  throw config_error("unknown selection method '" + name + "'");
}

std::string selection_to_string(SelectionMethod m) {
  return m == SelectionMethod::herding ? "herding" : "random";
}

std::vector<int> TaskStream::seen_classes(int step) const {
  std::vector<int> out;
  for (int t = 0; t < step && t < num_steps; ++t)
    out.insert(out.end(), class_batches[t].begin(), class_batches[t].end());
  return out;
}

int TaskStream::task_of_class(int class_id) const {
  for (int t = 0; t < num_steps; ++t)
    if (std::binary_search(class_batches[t].begin(), class_batches[t].end(), class_id))
      return t + 1;
  return -1;
}

std::map<int, int> TaskStream::class_to_task() const {
  std::map<int, int> out;
  for (int t = 0; t < num_steps; ++t)
    for (int c : class_batches[t]) out[c] = t + 1;
  return out;
}

int TaskStream::total_classes() const {
  int n = 0;
  for (const auto& b : class_batches) n += static_cast<int>(b.size());
  return n;
}

void TaskStream::validate(const std::map<int, int>& dataset_labels) const {
  std::set<int> seen_classes_all;
  for (const auto& batch : class_batches) {
    for (int c : batch) {
      if (!seen_classes_all.insert(c).second)
        throw internal_error("class " + std::to_string(c) + " appears in two batches");
    }
  }
  std::set<int> dataset_classes;
  for (const auto& [id, label] : dataset_labels) dataset_classes.insert(label);
  if (seen_classes_all != dataset_classes)
    throw internal_error("stream class union does not match the dataset label set");

  std::set<int> seen_ids;
  size_t total = 0;
  for (const auto& ids : sample_index) {
    total += ids.size();
    for (int id : ids)
      if (!seen_ids.insert(id).second)
        throw internal_error("sample " + std::to_string(id) + " assigned to two steps");
  }
  if (total != dataset_labels.size())
    throw internal_error("stream does not cover every dataset sample exactly once");
}

TaskStream build_stream(const std::map<int, int>& dataset_labels, Protocol protocol,
                        int num_steps, long long seed,
                        const std::optional<std::vector<int>>& explicit_class_order) {
  if (dataset_labels.empty()) throw input_error("build_stream: empty dataset");
  if (num_steps < 1) throw protocol_config_error("num_steps must be >= 1");

  std::set<int> class_set;
  for (const auto& [id, label] : dataset_labels) class_set.insert(label);
  std::vector<int> order;
  if (explicit_class_order) {
    order = *explicit_class_order;
    std::set<int> order_set(order.begin(), order.end());
    if (order_set != class_set || order.size() != class_set.size())
      throw input_error("explicit class order does not match the dataset label set");
  } else {
    order.assign(class_set.begin(), class_set.end());
    std::mt19937_64 rng(static_cast<uint64_t>(seed));
    std::shuffle(order.begin(), order.end(), rng);
  }

  int total = static_cast<int>(order.size());
  std::vector<int> batch_sizes;
  if (protocol == Protocol::B0) {
    if (total % num_steps != 0)
      throw protocol_config_error("B0: " + std::to_string(total) +
                                  " classes not divisible by " + std::to_string(num_steps) +
                                  " steps");
    batch_sizes.assign(num_steps, total / num_steps);
  } else {
    if (total % 2 != 0)
      throw protocol_config_error("B50: class count " + std::to_string(total) + " must be even");
    int half = total / 2;
    if (half % num_steps != 0)
      throw protocol_config_error("B50: remaining " + std::to_string(half) +
                                  " classes not divisible by " + std::to_string(num_steps) +
                                  " incremental splits");
    batch_sizes.push_back(half);
    for (int t = 0; t < num_steps; ++t) batch_sizes.push_back(half / num_steps);
  }

  TaskStream stream;
  stream.protocol = protocol;
  stream.class_order_seed = seed;
  stream.num_steps = static_cast<int>(batch_sizes.size());

  size_t cursor = 0;
  for (int size : batch_sizes) {
    std::vector<int> batch(order.begin() + cursor, order.begin() + cursor + size);
    std::sort(batch.begin(), batch.end());
    stream.class_batches.push_back(std::move(batch));
    cursor += size;
  }

  stream.sample_index.assign(stream.num_steps, {});
  std::map<int, int> class_step;
  for (int t = 0; t < stream.num_steps; ++t)
    for (int c : stream.class_batches[t]) class_step[c] = t;
  for (const auto& [id, label] : dataset_labels)
    stream.sample_index[class_step.at(label)].push_back(id);
  for (auto& ids : stream.sample_index) std::sort(ids.begin(), ids.end());

  stream.validate(dataset_labels);
  return stream;
}

std::vector<int> load_class_order(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open class-order file: " + path);
  std::vector<int> order;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      size_t pos = 0;
      int v = std::stoi(line, &pos);
      if (pos != line.size()) throw std::invalid_argument("trailing");
      order.push_back(v);
    } catch (const std::exception&) {
      throw input_error("class-order file " + path + ": bad class id at line " +
                        std::to_string(line_no));
    }
  }
  return order;
}

void save_class_order(const std::string& path, const std::vector<int>& order) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot write class-order file: " + path);
  for (int c : order) out << c << "\n";
}

HerdingResult select_exemplars(const std::vector<int>& ids,
                               const std::vector<std::vector<double>>& features, int k) {
  if (k < 0) throw input_error("select_exemplars: k must be >= 0");
  if (ids.size() != features.size())
    throw input_error("select_exemplars: id/feature count mismatch");
  HerdingResult result;
  if (ids.empty() || k == 0) {
    result.clamped = k > 0;
    return result;
  }
  size_t dim = features[0].size();
  for (const auto& f : features)
    if (f.size() != dim) throw input_error("select_exemplars: inconsistent feature dims");

  int n = static_cast<int>(ids.size());
  if (k > n) {
    std::cerr << "[protocol] warning: requested " << k << " exemplars, only " << n
              << " candidates; clamping\n";
    result.clamped = true;
    k = n;
  }

  std::vector<double> mean(dim, 0.0);
  for (const auto& f : features)
    for (size_t d = 0; d < dim; ++d) mean[d] += f[d];
  for (double& v : mean) v /= n;

  std::vector<bool> taken(static_cast<size_t>(n), false);
  std::vector<double> selected_sum(dim, 0.0);
  for (int s = 1; s <= k; ++s) {
    int best = -1;
    double best_dist = 0.0;
    for (int i = 0; i < n; ++i) {
      if (taken[i]) continue;
      double dist = 0.0;
      for (size_t d = 0; d < dim; ++d) {
        double diff = mean[d] - (selected_sum[d] + features[i][d]) / s;
        dist += diff * diff;
      }
      bool better = best < 0 || dist < best_dist ||
                    (dist == best_dist && ids[i] < ids[best]);
      if (better) {
        best = i;
        best_dist = dist;
      }
    }
    taken[best] = true;
    for (size_t d = 0; d < dim; ++d) selected_sum[d] += features[best][d];
    result.ids.push_back(ids[best]);
  }
  return result;
}

ExemplarMemory::ExemplarMemory(int budget, SelectionMethod method, long long seed)
    : budget_(budget), method_(method), seed_(seed) {
  if (budget < 0) throw input_error("memory budget must be >= 0");
}

int ExemplarMemory::total_count() const {
  int n = 0;
  for (const auto& [c, ids] : entries_) n += static_cast<int>(ids.size());
  return n;
}

std::vector<int> ExemplarMemory::stored_classes() const {
  std::vector<int> out;
  for (const auto& [c, ids] : entries_) out.push_back(c);
  return out;
}

std::vector<std::pair<int, int>> ExemplarMemory::sample_list() const {
  ++access_count_;
  std::vector<std::pair<int, int>> out;
  for (const auto& [c, ids] : entries_)
    for (int id : ids) out.emplace_back(c, id);
  return out;
}

void ExemplarMemory::rebalance(const std::vector<int>& new_classes,
                               const std::map<int, ClassCandidates>& candidates) {
  std::set<int> seen;
  for (const auto& [c, ids] : entries_) seen.insert(c);
  for (int c : new_classes) seen.insert(c);
  if (seen.empty()) return;
  std::vector<int> seen_sorted(seen.begin(), seen.end());

  if (budget_ == 0) {
    entries_.clear();
    return;
  }

  for (auto& [c, ids] : entries_) {
    int quota = quota_for(c, seen_sorted);
    if (static_cast<int>(ids.size()) > quota) ids.resize(quota);
  }

  for (int c : new_classes) {
    int quota = quota_for(c, seen_sorted);
    auto it = candidates.find(c);
    if (it == candidates.end())
      throw input_error("rebalance: no candidate features for class " + std::to_string(c));
    if (method_ == SelectionMethod::herding) {
      entries_[c] = select_exemplars(it->second.ids, it->second.features, quota).ids;
    } else {
      std::vector<int> ids = it->second.ids;
      std::mt19937_64 rng(static_cast<uint64_t>(seed_) ^
                          (0x9e3779b97f4a7c15ull * static_cast<uint64_t>(c + 1)));
      std::shuffle(ids.begin(), ids.end(), rng);
      if (static_cast<int>(ids.size()) > quota) ids.resize(quota);
      entries_[c] = std::move(ids);
    }
  }
}

int ExemplarMemory::quota_for(int class_id, const std::vector<int>& seen_sorted) const {
  int n = static_cast<int>(seen_sorted.size());
  int base = budget_ / n;
  int rem = budget_ % n;
  auto it = std::lower_bound(seen_sorted.begin(), seen_sorted.end(), class_id);
  int rank = static_cast<int>(it - seen_sorted.begin());
  return base + (rank < rem ? 1 : 0);
}

void ExemplarMemory::save_snapshot(const std::string& path) const {
  nlohmann::json j;
  j["budget"] = budget_;
  j["selection_method"] = selection_to_string(method_);
  j["seed"] = seed_;
  nlohmann::json entries = nlohmann::json::object();
  for (const auto& [c, ids] : entries_) entries[std::to_string(c)] = ids;
  j["entries"] = entries;
  std::ofstream out(path);
  if (!out) throw io_error("cannot write memory snapshot: " + path);
  out << j.dump(2) << "\n";
}

ExemplarMemory ExemplarMemory::load_snapshot(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open memory snapshot: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw io_error("malformed memory snapshot " + path + ": " + e.what());
  }
  ExemplarMemory mem(j.at("budget").get<int>(),
                     selection_from_string(j.at("selection_method").get<std::string>()),
                     j.value("seed", 0ll));
  for (const auto& [key, ids] : j.at("entries").items())
    mem.entries_[std::stoi(key)] = ids.get<std::vector<int>>();
  return mem;
}

}  // namespace tcil
