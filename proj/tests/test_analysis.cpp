#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "tcil/analysis.hpp"
#include "tcil/errors.hpp"

using namespace tcil;
namespace fs = std::filesystem;

namespace {

// 5 tasks x 4 classes; class id = 4*(task-1) + k.
std::map<int, int> toy_map(int tasks = 5) {
  std::map<int, int> m;
  for (int t = 1; t <= tasks; ++t)
    for (int k = 0; k < 4; ++k) m[4 * (t - 1) + k] = t;
  return m;
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("classify_error base cases") {
  auto map = toy_map(3);
  CHECK(classify_error(5, 5, map, 3) == ErrorKind::correct);
  CHECK(classify_error(5, 6, map, 3) == ErrorKind::wtc);  // both task 2
  CHECK(classify_error(0, 9, map, 3) == ErrorKind::onc);  // task 1 vs task 3 = latest
  CHECK(classify_error(0, 4, map, 3) == ErrorKind::itc);  // task 1 vs task 2, latest 3
  CHECK_THROWS_AS(classify_error(0, 99, map, 3), Error);
  CHECK_THROWS_AS(classify_error(99, 0, map, 3), Error);
}

TEST_CASE("taxonomy matches exhaustive enumeration of task triples") {
  // Independent oracle: spell the definition out over every
  // (true_task, pred_task, latest) combination for up to 5 tasks.
  auto map = toy_map(5);
  for (int latest = 1; latest <= 5; ++latest) {
    for (int true_task = 1; true_task <= latest; ++true_task) {
      for (int pred_task = 1; pred_task <= latest; ++pred_task) {
        // distinct classes within possibly equal tasks
        int true_class = 4 * (true_task - 1);
        int pred_class = 4 * (pred_task - 1) + 1;
        ErrorKind expect;
        if (true_task == pred_task)
          expect = ErrorKind::wtc;
        else if ((true_task == latest && pred_task != latest) ||
                 (pred_task == latest && true_task != latest))
          expect = ErrorKind::onc;
        else
          expect = ErrorKind::itc;
        CHECK(classify_error(true_class, pred_class, map, latest) == expect);

        // Same-class records are always correct regardless of tasks.
        CHECK(classify_error(true_class, true_class, map, latest) == ErrorKind::correct);
      }
    }
  }
}

TEST_CASE("step-2 cross-task errors collapse to ONC") {
  auto map = toy_map(2);
  for (int c1 = 0; c1 < 4; ++c1)
    for (int c2 = 4; c2 < 8; ++c2) {
      CHECK(classify_error(c1, c2, map, 2) == ErrorKind::onc);
      CHECK(classify_error(c2, c1, map, 2) == ErrorKind::onc);
    }
}

TEST_CASE("the narrower ONC rule only counts predictions into the latest task") {
  auto map = toy_map(3);
  // true in latest task, predicted into an old task
  CHECK(classify_error(8, 0, map, 3, OncRule::either_latest) == ErrorKind::onc);
  CHECK(classify_error(8, 0, map, 3, OncRule::predicted_latest) == ErrorKind::itc);
  CHECK(classify_error(0, 8, map, 3, OncRule::predicted_latest) == ErrorKind::onc);
}

TEST_CASE("structural zeros hold for any predictor") {
  auto map = toy_map(5);
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    PredictionLog log;
    log.class_to_task = map;
    for (int step = 1; step <= 2; ++step) {
      int seen = 4 * step;
      for (int i = 0; i < 50; ++i) {
        PredictionRecord r;
        r.sample_id = i;
        r.true_class = static_cast<int>(rng() % seen);
        r.pred_class = static_cast<int>(rng() % seen);
        r.step = step;
        log.records.push_back(r);
      }
    }
    auto breakdown = compute_breakdown(log);
    const StepErrorCounts* s1 = breakdown.find_step(1);
    REQUIRE(s1 != nullptr);
    CHECK(s1->onc == 0);
    CHECK(s1->itc == 0);
    const StepErrorCounts* s2 = breakdown.find_step(2);
    REQUIRE(s2 != nullptr);
    CHECK(s2->itc == 0);
  }
}

TEST_CASE("every record lands in exactly one bucket and sums are consistent") {
  auto map = toy_map(4);
  std::mt19937_64 rng(33);
  PredictionLog log;
  log.class_to_task = map;
  for (int step = 1; step <= 4; ++step) {
    int seen = 4 * step;
    for (int i = 0; i < 100; ++i) {
      log.records.push_back({i, static_cast<int>(rng() % seen),
                             static_cast<int>(rng() % seen), step});
    }
  }
  auto breakdown = compute_breakdown(log);
  long long total = 0;
  for (const auto& s : breakdown.steps) {
    CHECK(s.total() == 100);
    CHECK(s.correct + s.wtc + s.onc + s.itc == 100);
    total += s.total();
  }
  CHECK(total == static_cast<long long>(log.records.size()));
}

TEST_CASE("accuracy metrics") {
  auto map = toy_map(2);
  SUBCASE("all correct gives 100 everywhere") {
    PredictionLog log;
    log.class_to_task = map;
    for (int step = 1; step <= 2; ++step)
      for (int i = 0; i < 10; ++i) log.records.push_back({i, 1, 1, step});
    auto m = accuracy_metrics(compute_breakdown(log));
    CHECK(m.avg == doctest::Approx(100.0));
    CHECK(m.last == doctest::Approx(100.0));
  }
  SUBCASE("per-step 80/60 gives avg 70 last 60") {
    PredictionLog log;
    log.class_to_task = map;
    for (int i = 0; i < 10; ++i) log.records.push_back({i, 0, i < 8 ? 0 : 1, 1});
    for (int i = 0; i < 10; ++i) log.records.push_back({i, 0, i < 6 ? 0 : 4, 2});
    auto m = accuracy_metrics(compute_breakdown(log));
    REQUIRE(m.per_step.size() == 2);
    CHECK(m.per_step[0] == doctest::Approx(80.0));
    CHECK(m.per_step[1] == doctest::Approx(60.0));
    CHECK(m.avg == doctest::Approx(70.0));
    CHECK(m.last == doctest::Approx(60.0));
  }
  SUBCASE("empty log is an input error") {
    PredictionLog log;
    log.class_to_task = map;
    CHECK_THROWS_AS(compute_breakdown(log), Error);
  }
}

TEST_CASE("prediction log files round trip and validate") {
  auto dir = fs::temp_directory_path() / "tcil_analysis_test";
  fs::create_directories(dir);
  std::string log_path = (dir / "pred.csv").string();
  std::string map_path = (dir / "map.csv").string();

  std::vector<PredictionRecord> records{{0, 1, 1, 1}, {1, 0, 1, 1}, {2, 4, 0, 2}};
  save_prediction_log(log_path, records);
  save_class_task_map(map_path, toy_map(2));

  auto log = load_prediction_log(log_path, map_path);
  CHECK(log.records.size() == 3);
  CHECK(log.records[2].true_class == 4);
  CHECK(log.class_to_task.at(4) == 2);

  SUBCASE("malformed row reports the line number") {
    std::ofstream out(log_path, std::ios::app);
    out << "7,oops,1,2\n";
    out.close();
    try {
      load_prediction_log(log_path, map_path);
      FAIL("expected an input error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("line 5") != std::string::npos);
    }
  }
  SUBCASE("unknown class id is named in the error") {
    save_prediction_log(log_path, {{0, 77, 1, 1}});
    try {
      load_prediction_log(log_path, map_path);
      FAIL("expected an input error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("77") != std::string::npos);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("emit_report writes a table and two plots, deterministically") {
  auto map = toy_map(5);
  std::mt19937_64 rng(55);
  PredictionLog log;
  log.class_to_task = map;
  for (int step = 1; step <= 5; ++step) {
    int seen = 4 * step;
    for (int i = 0; i < 60; ++i)
      log.records.push_back({i, static_cast<int>(rng() % seen),
                             static_cast<int>(rng() % seen), step});
  }
  auto breakdown = compute_breakdown(log);
  auto metrics = accuracy_metrics(breakdown);

  auto dir = fs::temp_directory_path() / "tcil_report_test";
  fs::remove_all(dir);
  emit_report(breakdown, metrics, dir.string());
  CHECK(fs::exists(dir / "results.csv"));
  CHECK(fs::exists(dir / "accuracy_evolution.svg"));
  CHECK(fs::exists(dir / "error_breakdown.svg"));

  // 5 step rows + header + avg + last
  std::ifstream in(dir / "results.csv");
  int lines = 0;
  std::string line;
  while (std::getline(in, line)) ++lines;
  CHECK(lines == 8);

  std::string first = read_bytes((dir / "results.csv").string());
  emit_report(breakdown, metrics, dir.string());
  CHECK(read_bytes((dir / "results.csv").string()) == first);

  SUBCASE("empty experiment emits nothing") {
    ErrorBreakdown empty;
    AccuracyMetrics m;
    auto dir2 = fs::temp_directory_path() / "tcil_report_empty";
    fs::remove_all(dir2);
    CHECK_THROWS_AS(emit_report(empty, m, dir2.string()), Error);
    CHECK_FALSE(fs::exists(dir2));
  }
  fs::remove_all(dir);
}
