#include "tcil/analysis.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tcil/errors.hpp"

namespace tcil {

const char* error_kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::correct: return "correct";
    case ErrorKind::wtc: return "WTC";
    case ErrorKind::onc: return "ONC";
    case ErrorKind::itc: return "ITC";
  }
  return "?";
}

ErrorKind classify_error(int true_class, int pred_class,
                         const std::map<int, int>& class_to_task, int latest_task,
                         OncRule rule) {
  auto task_of = [&](int c) {
    auto it = class_to_task.find(c);
    if (it == class_to_task.end())
      throw input_error("unknown class id " + std::to_string(c));
    return it->second;
  };
  int true_task = task_of(true_class);
  int pred_task = task_of(pred_class);
  if (true_class == pred_class) return ErrorKind::correct;
  if (true_task == pred_task) return ErrorKind::wtc;
  bool onc = rule == OncRule::either_latest
                 ? (true_task == latest_task) != (pred_task == latest_task)
                 : pred_task == latest_task;
  return onc ? ErrorKind::onc : ErrorKind::itc;
}

void PredictionLog::validate() const {
  for (const PredictionRecord& r : records) {
    auto check = [&](int c) {
      auto it = class_to_task.find(c);
      if (it == class_to_task.end())
        throw input_error("unknown class id " + std::to_string(c));
      if (it->second > r.step)
        throw input_error("class " + std::to_string(c) + " (task " +
                          std::to_string(it->second) + ") not yet seen at step " +
                          std::to_string(r.step));
    };
    check(r.true_class);
    check(r.pred_class);
  }
}

const StepErrorCounts* ErrorBreakdown::find_step(int step) const {
  for (const auto& s : steps)
    if (s.step == step) return &s;
  return nullptr;
}

ErrorBreakdown compute_breakdown(const PredictionLog& log, OncRule rule) {
  if (log.records.empty()) throw input_error("empty prediction log");
  log.validate();
  std::map<int, StepErrorCounts> by_step;
  for (const PredictionRecord& r : log.records) {
    StepErrorCounts& s = by_step[r.step];
    s.step = r.step;
    switch (classify_error(r.true_class, r.pred_class, log.class_to_task, r.step, rule)) {
      case ErrorKind::correct: ++s.correct; break;
      case ErrorKind::wtc: ++s.wtc; break;
      case ErrorKind::onc: ++s.onc; break;
      case ErrorKind::itc: ++s.itc; break;
    }
  }
  ErrorBreakdown out;
  for (const auto& [step, counts] : by_step) out.steps.push_back(counts);
  return out;
}

AccuracyMetrics accuracy_metrics(const ErrorBreakdown& breakdown) {
  if (breakdown.steps.empty()) throw input_error("no evaluation steps");
  AccuracyMetrics m;
  for (const auto& s : breakdown.steps) {
    if (s.total() == 0) throw input_error("empty log at step " + std::to_string(s.step));
    m.per_step.push_back(s.accuracy());
  }
  m.avg = 0.0;
  for (double a : m.per_step) m.avg += a;
  m.avg /= static_cast<double>(m.per_step.size());
  m.last = m.per_step.back();
  return m;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

int parse_int_field(const std::string& s, const std::string& file, int line_no) {
  try {
    size_t pos = 0;
    int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw input_error(file + ": malformed row at line " + std::to_string(line_no));
  }
}

std::string fmt(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

}  // namespace

std::map<int, int> load_class_task_map(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open class/task map: " + path);
  std::map<int, int> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1 && line.rfind("class_id", 0) == 0) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != 2)
      throw input_error(path + ": malformed row at line " + std::to_string(line_no));
    out[parse_int_field(fields[0], path, line_no)] = parse_int_field(fields[1], path, line_no);
  }
  if (out.empty()) throw input_error(path + ": empty class/task map");
  return out;
}

void save_class_task_map(const std::string& path, const std::map<int, int>& class_to_task) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot write class/task map: " + path);
  out << "class_id,task_id\n";
  for (const auto& [c, t] : class_to_task) out << c << "," << t << "\n";
}

PredictionLog load_prediction_log(const std::string& log_path, const std::string& map_path) {
  PredictionLog log;
  log.class_to_task = load_class_task_map(map_path);
  std::ifstream in(log_path);
  if (!in) throw io_error("cannot open prediction log: " + log_path);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1 && line.rfind("sample_id", 0) == 0) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != 4)
      throw input_error(log_path + ": malformed row at line " + std::to_string(line_no));
    PredictionRecord r;
    r.sample_id = parse_int_field(fields[0], log_path, line_no);
    r.true_class = parse_int_field(fields[1], log_path, line_no);
    r.pred_class = parse_int_field(fields[2], log_path, line_no);
    r.step = parse_int_field(fields[3], log_path, line_no);
    log.records.push_back(r);
  }
  if (log.records.empty()) throw input_error(log_path + ": empty prediction log");
  log.validate();
  return log;
}

void save_prediction_log(const std::string& path, const std::vector<PredictionRecord>& records) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot write prediction log: " + path);
  out << "sample_id,true_class,pred_class,step\n";
  for (const PredictionRecord& r : records)
    out << r.sample_id << "," << r.true_class << "," << r.pred_class << "," << r.step << "\n";
}

namespace {

// Minimal line/bar SVG writers; fixed-precision output keeps re-runs
// byte-identical.
struct SvgCanvas {
  std::ostringstream body;
  int width, height;
  int margin_left = 60, margin_right = 20, margin_top = 30, margin_bottom = 45;

  SvgCanvas(int w, int h) : width(w), height(h) {}
  double plot_w() const { return width - margin_left - margin_right; }
  double plot_h() const { return height - margin_top - margin_bottom; }
  double px(double frac) const { return margin_left + frac * plot_w(); }
  double py(double frac) const { return margin_top + (1.0 - frac) * plot_h(); }

  void text(double x, double y, const std::string& s, const char* anchor = "middle",
            int size = 12) {
    body << "<text x=\"" << fmt(x, 1) << "\" y=\"" << fmt(y, 1) << "\" font-size=\"" << size
         << "\" font-family=\"sans-serif\" text-anchor=\"" << anchor << "\">" << s
         << "</text>\n";
  }

  void line(double x1, double y1, double x2, double y2, const char* color, double w = 1.0) {
    body << "<line x1=\"" << fmt(x1, 1) << "\" y1=\"" << fmt(y1, 1) << "\" x2=\"" << fmt(x2, 1)
         << "\" y2=\"" << fmt(y2, 1) << "\" stroke=\"" << color << "\" stroke-width=\""
         << fmt(w, 1) << "\"/>\n";
  }

  void rect(double x, double y, double w, double h, const char* color) {
    body << "<rect x=\"" << fmt(x, 1) << "\" y=\"" << fmt(y, 1) << "\" width=\"" << fmt(w, 1)
         << "\" height=\"" << fmt(h, 1) << "\" fill=\"" << color << "\"/>\n";
  }

  void circle(double x, double y, double r, const char* color) {
    body << "<circle cx=\"" << fmt(x, 1) << "\" cy=\"" << fmt(y, 1) << "\" r=\"" << fmt(r, 1)
         << "\" fill=\"" << color << "\"/>\n";
  }

  void write(const std::string& path, const std::string& title) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write plot: " + path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << "<text x=\"" << width / 2 << "\" y=\"18\" font-size=\"14\" font-family=\"sans-serif\""
        << " text-anchor=\"middle\">" << title << "</text>\n"
        << body.str() << "</svg>\n";
  }
};

void write_accuracy_plot(const AccuracyMetrics& metrics, const std::vector<int>& steps,
                         const std::string& path) {
  SvgCanvas svg(640, 400);
  svg.line(svg.px(0), svg.py(0), svg.px(1), svg.py(0), "black");
  svg.line(svg.px(0), svg.py(0), svg.px(0), svg.py(1), "black");
  for (int g = 0; g <= 10; g += 2) {
    double y = svg.py(g / 10.0);
    svg.line(svg.px(0) - 4, y, svg.px(0), y, "black");
    svg.text(svg.px(0) - 8, y + 4, fmt(g * 10.0, 0), "end", 11);
  }
  int n = static_cast<int>(metrics.per_step.size());
  auto x_at = [&](int i) { return svg.px(n == 1 ? 0.5 : static_cast<double>(i) / (n - 1)); };
  for (int i = 0; i < n; ++i) {
    double x = x_at(i), y = svg.py(metrics.per_step[static_cast<size_t>(i)] / 100.0);
    if (i > 0)
      svg.line(x_at(i - 1), svg.py(metrics.per_step[static_cast<size_t>(i - 1)] / 100.0), x, y,
               "#1f77b4", 2.0);
    svg.circle(x, y, 3.5, "#1f77b4");
    svg.text(x, svg.py(0) + 16, std::to_string(steps[static_cast<size_t>(i)]), "middle", 11);
  }
  svg.text(svg.px(0.5), svg.height - 8, "incremental step");
  svg.text(svg.px(0.5), svg.margin_top - 4,
           "Avg " + fmt(metrics.avg, 2) + "  Last " + fmt(metrics.last, 2), "middle", 11);
  svg.write(path, "Top-1 accuracy evolution");
}

void write_error_plot(const ErrorBreakdown& breakdown, const std::string& path) {
  SvgCanvas svg(640, 400);
  long long max_err = 1;
  for (const auto& s : breakdown.steps) max_err = std::max(max_err, s.errors());
  svg.line(svg.px(0), svg.py(0), svg.px(1), svg.py(0), "black");
  svg.line(svg.px(0), svg.py(0), svg.px(0), svg.py(1), "black");
  int n = static_cast<int>(breakdown.steps.size());
  double band = svg.plot_w() / n;
  const char* colors[3] = {"#2ca02c", "#d62728", "#9467bd"};  // WTC, ONC, ITC
  for (int i = 0; i < n; ++i) {
    const auto& s = breakdown.steps[static_cast<size_t>(i)];
    double x = svg.px(0) + band * i + band * 0.2;
    double w = band * 0.6;
    double base = svg.py(0);
    long long parts[3] = {s.wtc, s.onc, s.itc};
    for (int p = 0; p < 3; ++p) {
      double h = svg.plot_h() * static_cast<double>(parts[p]) / static_cast<double>(max_err);
      if (h > 0) svg.rect(x, base - h, w, h, colors[p]);
      base -= h;
    }
    svg.text(x + w / 2, svg.py(0) + 16, std::to_string(s.step), "middle", 11);
  }
  for (int g = 0; g <= 4; ++g) {
    double y = svg.py(g / 4.0);
    svg.line(svg.px(0) - 4, y, svg.px(0), y, "black");
    svg.text(svg.px(0) - 8, y + 4, std::to_string(max_err * g / 4), "end", 11);
  }
  double lx = svg.px(0.02), ly = svg.py(1) + 4;
  const char* names[3] = {"WTC", "ONC", "ITC"};
  for (int p = 0; p < 3; ++p) {
    svg.rect(lx, ly, 12, 12, colors[p]);
    svg.text(lx + 16, ly + 10, names[p], "start", 11);
    lx += 70;
  }
  svg.text(svg.px(0.5), svg.height - 8, "incremental step");
  svg.write(path, "Error breakdown per step");
}

}  // namespace

void emit_report(const ErrorBreakdown& breakdown, const AccuracyMetrics& metrics,
                 const std::string& out_dir) {
  if (breakdown.steps.empty()) throw input_error("emit_report: empty experiment");
  if (metrics.per_step.size() != breakdown.steps.size())
    throw input_error("emit_report: metrics/breakdown step mismatch");
  std::filesystem::create_directories(out_dir);

  std::string table_path = out_dir + "/results.csv";
  {
    std::ofstream out(table_path);
    if (!out) throw io_error("cannot write " + table_path);
    out << "step,total,correct,accuracy,wtc,onc,itc\n";
    for (size_t i = 0; i < breakdown.steps.size(); ++i) {
      const auto& s = breakdown.steps[i];
      out << s.step << "," << s.total() << "," << s.correct << ","
          << fmt(metrics.per_step[i], 4) << "," << s.wtc << "," << s.onc << "," << s.itc
          << "\n";
    }
    out << "avg," << fmt(metrics.avg, 4) << "\n";
    out << "last," << fmt(metrics.last, 4) << "\n";
  }

  std::vector<int> steps;
  for (const auto& s : breakdown.steps) steps.push_back(s.step);
  write_accuracy_plot(metrics, steps, out_dir + "/accuracy_evolution.svg");
  write_error_plot(breakdown, out_dir + "/error_breakdown.svg");
}

}  // namespace tcil
