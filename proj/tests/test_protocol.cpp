#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "tcil/errors.hpp"
#include "tcil/protocol.hpp"

using namespace tcil;

namespace {

std::map<int, int> fake_labels(int classes, int per_class) {
  std::map<int, int> labels;
  int id = 0;
  for (int c = 0; c < classes; ++c)
    for (int i = 0; i < per_class; ++i) labels[id++] = c;
  return labels;
}

// Reference herding: recomputes every candidate mean from scratch at every
// greedy step, no running sums.
std::vector<int> herding_oracle(const std::vector<int>& ids,
                                const std::vector<std::vector<double>>& feats, int k) {
  size_t dim = feats[0].size();
  std::vector<double> class_mean(dim, 0.0);
  for (const auto& f : feats)
    for (size_t d = 0; d < dim; ++d) class_mean[d] += f[d] / feats.size();

  std::vector<int> selected;
  std::set<int> used;
  while (static_cast<int>(selected.size()) < k) {
    int best = -1;
    double best_dist = 0.0;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (used.count(static_cast<int>(i))) continue;
      std::vector<double> mean(dim, 0.0);
      for (int s : selected)
        for (size_t d = 0; d < dim; ++d) mean[d] += feats[static_cast<size_t>(s)][d];
      for (size_t d = 0; d < dim; ++d)
        mean[d] = (mean[d] + feats[i][d]) / (selected.size() + 1);
      double dist = 0.0;
      for (size_t d = 0; d < dim; ++d)
        dist += (class_mean[d] - mean[d]) * (class_mean[d] - mean[d]);
      dist = std::sqrt(dist);
      if (best < 0 || dist < best_dist ||
          (dist == best_dist && ids[i] < ids[static_cast<size_t>(best)])) {
        best = static_cast<int>(i);
        best_dist = dist;
      }
    }
    used.insert(best);
    selected.push_back(best);
  }
  std::vector<int> out;
  for (int s : selected) out.push_back(ids[static_cast<size_t>(s)]);
  return out;
}

}  // namespace

TEST_CASE("B0 splits classes evenly") {
  auto stream = build_stream(fake_labels(100, 2), Protocol::B0, 10, 42);
  CHECK(stream.num_steps == 10);
  for (const auto& batch : stream.class_batches) CHECK(batch.size() == 10);
  CHECK(stream.total_classes() == 100);
}

TEST_CASE("B0 single step is joint training") {
  auto stream = build_stream(fake_labels(100, 1), Protocol::B0, 1, 0);
  CHECK(stream.num_steps == 1);
  CHECK(stream.class_batches[0].size() == 100);
}

TEST_CASE("B50 takes half the classes first, then equal splits") {
  auto stream = build_stream(fake_labels(100, 1), Protocol::B50, 5, 7);
  CHECK(stream.num_steps == 6);
  CHECK(stream.class_batches[0].size() == 50);
  int total = 50;
  for (int t = 1; t < 6; ++t) {
    CHECK(stream.class_batches[static_cast<size_t>(t)].size() == 10);
    total += 10;
  }
  CHECK(total == 100);
}

TEST_CASE("indivisible protocols are rejected") {
  CHECK_THROWS_AS(build_stream(fake_labels(100, 1), Protocol::B0, 7, 0), Error);
  CHECK_THROWS_AS(build_stream(fake_labels(100, 1), Protocol::B50, 4, 0), Error);
  CHECK_THROWS_AS(build_stream(fake_labels(99, 1), Protocol::B50, 7, 0), Error);
  CHECK_THROWS_AS(build_stream({}, Protocol::B0, 5, 0), Error);
}

TEST_CASE("streams are disjoint, covering and seed-reproducible") {
  auto labels = fake_labels(20, 3);
  auto a = build_stream(labels, Protocol::B0, 4, 11);
  auto b = build_stream(labels, Protocol::B0, 4, 11);
  CHECK(a.class_batches == b.class_batches);
  CHECK(a.sample_index == b.sample_index);

  std::set<int> seen;
  for (const auto& batch : a.class_batches)
    for (int c : batch) CHECK(seen.insert(c).second);
  CHECK(seen.size() == 20);

  size_t samples = 0;
  for (const auto& ids : a.sample_index) samples += ids.size();
  CHECK(samples == labels.size());

  auto c = build_stream(labels, Protocol::B0, 4, 12);
  CHECK(a.class_batches != c.class_batches);
}

TEST_CASE("explicit class order file drives the batches") {
  std::vector<int> order = {4, 2, 0, 1, 3, 5};
  std::string path = std::filesystem::temp_directory_path() / "tcil_order.txt";
  save_class_order(path, order);
  auto loaded = load_class_order(path);
  CHECK(loaded == order);

  auto stream = build_stream(fake_labels(6, 2), Protocol::B0, 3, 0, loaded);
  CHECK(stream.class_batches[0] == std::vector<int>{2, 4});
  CHECK(stream.class_batches[1] == std::vector<int>{0, 1});
  CHECK(stream.class_batches[2] == std::vector<int>{3, 5});
  std::filesystem::remove(path);
}

TEST_CASE("seen classes accumulate and map back to tasks") {
  auto stream = build_stream(fake_labels(6, 1), Protocol::B0, 3, 5);
  CHECK(stream.seen_classes(2).size() == 4);
  auto map = stream.class_to_task();
  for (int t = 0; t < 3; ++t)
    for (int c : stream.class_batches[static_cast<size_t>(t)]) CHECK(map.at(c) == t + 1);
}

TEST_CASE("herding base cases") {
  SUBCASE("single sample") {
    auto r = select_exemplars({42}, {{1.0, 2.0}}, 1);
    CHECK(r.ids == std::vector<int>{42});
    CHECK_FALSE(r.clamped);
  }
  SUBCASE("symmetric candidates break ties by lowest id") {
    auto r = select_exemplars({10, 3}, {{1.0, 0.0}, {-1.0, 0.0}}, 1);
    CHECK(r.ids == std::vector<int>{3});
  }
  SUBCASE("k larger than the candidate set clamps") {
    auto r = select_exemplars({1, 2}, {{0.0}, {1.0}}, 5);
    CHECK(r.ids.size() == 2);
    CHECK(r.clamped);
  }
  SUBCASE("k zero") {
    auto r = select_exemplars({1}, {{0.0}}, 0);
    CHECK(r.ids.empty());
  }
}

TEST_CASE("herding matches the brute-force greedy oracle") {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (int trial = 0; trial < 30; ++trial) {
    int n = 3 + static_cast<int>(rng() % 6);  // up to 8 points
    std::vector<int> ids;
    std::vector<std::vector<double>> feats;
    for (int i = 0; i < n; ++i) {
      ids.push_back(i * 3 + 1);
      feats.push_back({dist(rng), dist(rng)});
    }
    int k = 1 + static_cast<int>(rng() % n);
    auto got = select_exemplars(ids, feats, k);
    auto expected = herding_oracle(ids, feats, k);
    CHECK(got.ids == expected);
  }
}

TEST_CASE("herding order is prefix-consistent") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<int> ids;
  std::vector<std::vector<double>> feats;
  for (int i = 0; i < 8; ++i) {
    ids.push_back(i);
    feats.push_back({dist(rng), dist(rng), dist(rng)});
  }
  auto full = select_exemplars(ids, feats, 8);
  for (int j = 1; j < 8; ++j) {
    auto partial = select_exemplars(ids, feats, j);
    CHECK(std::equal(partial.ids.begin(), partial.ids.end(), full.ids.begin()));
  }
}

namespace {

ExemplarMemory::ClassCandidates make_candidates(int class_id, int count, std::mt19937_64& rng) {
  ExemplarMemory::ClassCandidates c;
  std::normal_distribution<double> dist(0.0, 1.0);
  for (int i = 0; i < count; ++i) {
    c.ids.push_back(class_id * 1000 + i);
    c.features.push_back({dist(rng), dist(rng)});
  }
  return c;
}

}  // namespace

TEST_CASE("rebalance quotas") {
  std::mt19937_64 rng(1);
  SUBCASE("budget 2000 over 10 classes gives 200 each") {
    ExemplarMemory mem(2000, SelectionMethod::herding);
    std::vector<int> classes;
    std::map<int, ExemplarMemory::ClassCandidates> cands;
    for (int c = 0; c < 10; ++c) {
      classes.push_back(c);
      cands[c] = make_candidates(c, 250, rng);
    }
    mem.rebalance(classes, cands);
    CHECK(mem.total_count() == 2000);
    for (const auto& [c, ids] : mem.entries()) CHECK(ids.size() == 200);
  }
  SUBCASE("budget 2000 over 100 classes gives 20 each") {
    ExemplarMemory mem(2000, SelectionMethod::herding);
    std::vector<int> classes;
    std::map<int, ExemplarMemory::ClassCandidates> cands;
    for (int c = 0; c < 100; ++c) {
      classes.push_back(c);
      cands[c] = make_candidates(c, 25, rng);
    }
    mem.rebalance(classes, cands);
    CHECK(mem.total_count() == 2000);
    for (const auto& [c, ids] : mem.entries()) CHECK(ids.size() == 20);
  }
  SUBCASE("budget 0 stays empty") {
    ExemplarMemory mem(0, SelectionMethod::herding);
    std::map<int, ExemplarMemory::ClassCandidates> cands;
    cands[0] = make_candidates(0, 5, rng);
    mem.rebalance({0}, cands);
    CHECK(mem.total_count() == 0);
    CHECK(mem.access_count() == 0);
  }
  SUBCASE("remainder goes to the lowest class ids") {
    ExemplarMemory mem(7, SelectionMethod::herding);
    std::map<int, ExemplarMemory::ClassCandidates> cands;
    for (int c : {2, 5, 9}) cands[c] = make_candidates(c, 10, rng);
    mem.rebalance({2, 5, 9}, cands);
    CHECK(mem.entries().at(2).size() == 3);
    CHECK(mem.entries().at(5).size() == 2);
    CHECK(mem.entries().at(9).size() == 2);
  }
}

TEST_CASE("memory never exceeds budget over random step sequences") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 10; ++trial) {
    int budget = static_cast<int>(rng() % 40);
    ExemplarMemory mem(budget, SelectionMethod::herding);
    int next_class = 0;
    for (int step = 0; step < 6; ++step) {
      int new_classes = 1 + static_cast<int>(rng() % 3);
      std::vector<int> classes;
      std::map<int, ExemplarMemory::ClassCandidates> cands;
      for (int i = 0; i < new_classes; ++i) {
        classes.push_back(next_class);
        cands[next_class] = make_candidates(next_class, 12, rng);
        ++next_class;
      }
      mem.rebalance(classes, cands);
      CHECK(mem.total_count() <= budget);
      int lo = 1 << 30, hi = 0;
      for (const auto& [c, ids] : mem.entries()) {
        lo = std::min(lo, static_cast<int>(ids.size()));
        hi = std::max(hi, static_cast<int>(ids.size()));
      }
      if (!mem.entries().empty() && budget / std::max(1, next_class) < 12) CHECK(hi - lo <= 1);
    }
  }
}

TEST_CASE("truncation keeps the herding prefix") {
  std::mt19937_64 rng(3);
  ExemplarMemory mem(8, SelectionMethod::herding);
  std::map<int, ExemplarMemory::ClassCandidates> cands;
  cands[0] = make_candidates(0, 12, rng);
  mem.rebalance({0}, cands);
  auto first = mem.entries().at(0);  // quota 8
  std::map<int, ExemplarMemory::ClassCandidates> cands2;
  cands2[1] = make_candidates(1, 12, rng);
  mem.rebalance({1}, cands2);
  auto truncated = mem.entries().at(0);  // quota 4
  CHECK(truncated.size() == 4);
  CHECK(std::equal(truncated.begin(), truncated.end(), first.begin()));
}

TEST_CASE("memory snapshot round trip") {
  std::mt19937_64 rng(8);
  ExemplarMemory mem(10, SelectionMethod::herding, 4);
  std::map<int, ExemplarMemory::ClassCandidates> cands;
  cands[3] = make_candidates(3, 6, rng);
  cands[7] = make_candidates(7, 6, rng);
  mem.rebalance({3, 7}, cands);

  std::string path = std::filesystem::temp_directory_path() / "tcil_mem.json";
  mem.save_snapshot(path);
  auto loaded = ExemplarMemory::load_snapshot(path);
  CHECK(loaded.budget() == 10);
  CHECK(loaded.selection_method() == SelectionMethod::herding);
  CHECK(loaded.entries() == mem.entries());
  std::filesystem::remove(path);
}
