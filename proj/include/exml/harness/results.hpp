// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "exml/harness/config.hpp"

namespace exml::harness {

namespace fs = std::filesystem;

inline constexpr const char* kResultsHeader =
    "run_id,strategy,scenario,seed,experience_index,stream_accuracy,wall_time_seconds,"
    "exml_compliant";
inline constexpr const char* kPerExperienceHeader =
    "run_id,strategy,scenario,seed,experience_index,eval_experience,correct,total";

/// Evaluation after one experience of one (strategy, seed) run. `correct` and
/// `total` hold the counts on every test set of the stream.
struct ResultRecord {
  std::string run_id;
  std::string strategy;
  std::string scenario;
  std::uint64_t seed = 0;
  std::size_t experience_index = 0;
  double stream_accuracy = 0;
  std::vector<std::size_t> correct;
  std::vector<std::size_t> total;
  double wall_time_seconds = 0;
  bool exml_compliant = false;

  std::vector<double> per_experience_accuracies() const {
    return StreamEval{correct, total}.per_experience();
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string f; std::getline(ss, f, ',');) out.push_back(f);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

/// Rows of a results CSV (per-experience counts are left empty).
inline std::vector<ResultRecord> read_results(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read results file " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kResultsHeader)
    throw IoError(path.string() + " does not start with the results header");
  std::vector<ResultRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 8) throw IoError("malformed results row in " + path.string() + ": " + line);
    ResultRecord r;
    r.run_id = f[0];
    r.strategy = f[1];
    r.scenario = f[2];
    r.seed = std::stoull(f[3]);
    r.experience_index = std::stoul(f[4]);
    r.stream_accuracy = std::stod(f[5]);
    r.wall_time_seconds = std::stod(f[6]);
    r.exml_compliant = f[7] == "true";
    out.push_back(std::move(r));
  }
  return out;
}

/// Next free id "run-NNNN" given the ids already present in `results`.
inline std::string next_run_id(const fs::path& results) {
  int last = 0;
  if (fs::exists(results))
    for (const auto& r : read_results(results))
      if (r.run_id.rfind("run-", 0) == 0) last = std::max(last, std::stoi(r.run_id.substr(4)));
  char buf[32];
  std::snprintf(buf, sizeof buf, "run-%04d", last + 1);
  return buf;
}

namespace detail {

/// Opens `path` for appending, writing `header` if the file is new and
/// refusing files with a different header.
inline std::ofstream open_append(const fs::path& path, const std::string& header) {
  const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  if (!fresh) {
    std::ifstream in(path);
    std::string first;
    std::getline(in, first);
    if (first != header)
      throw IoError(path.string() + " exists with a different header; refusing to append");
  }
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot open " + path.string() + " for appending");
  if (fresh) out << header << "\n";
  return out;
}

}  // namespace detail

/// Sole writer of results.csv and per_experience.csv in one output directory.
class ResultsWriter {
 public:
  explicit ResultsWriter(const fs::path& dir) : dir_(dir) {
    fs::create_directories(dir_);
    run_id_ = next_run_id(results_path());
    results_ = detail::open_append(results_path(), kResultsHeader);
    per_experience_ = detail::open_append(dir_ / "per_experience.csv", kPerExperienceHeader);
  }

  const std::string& run_id() const { return run_id_; }
  fs::path results_path() const { return dir_ / "results.csv"; }

  void append(ResultRecord& r) {
    r.run_id = run_id_;
    results_ << r.run_id << ',' << r.strategy << ',' << r.scenario << ',' << r.seed << ','
             << r.experience_index << ',' << detail::format_double(r.stream_accuracy) << ','
             << detail::format_double(r.wall_time_seconds) << ','
             << (r.exml_compliant ? "true" : "false") << "\n";
    for (std::size_t j = 0; j < r.total.size(); ++j)
      per_experience_ << r.run_id << ',' << r.strategy << ',' << r.scenario << ',' << r.seed
                      << ',' << r.experience_index << ',' << j << ',' << r.correct[j] << ','
                      << r.total[j] << "\n";
    results_.flush();
    per_experience_.flush();
    if (!results_ || !per_experience_) throw IoError("failed writing results in " + dir_.string());
  }

 private:
  fs::path dir_;
  std::string run_id_;
  std::ofstream results_;
  std::ofstream per_experience_;
};

struct MeanStd {
  std::size_t n = 0;
  double mean = 0;
  double std = 0;  // sample standard deviation; 0 for a single value
};

inline MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd m;
  m.n = xs.size();
  if (xs.empty()) return m;
  m.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(m.n);
  if (m.n > 1) {
    double ss = 0;
    for (double x : xs) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(m.n - 1));
  }
  return m;
}

struct SummaryCell {
  std::string strategy;
  std::string scenario;
  MeanStd stat;
};

/// Mean and sample std over seeds of the final-experience stream accuracy,
/// per (strategy, scenario) in order of first appearance.
inline std::vector<SummaryCell> summarize(const std::vector<ResultRecord>& rows) {
  std::map<std::tuple<std::string, std::string, std::uint64_t>, const ResultRecord*> last;
  std::vector<std::pair<std::string, std::string>> order;
  for (const auto& r : rows) {
    const auto key = std::make_tuple(r.strategy, r.scenario, r.seed);
    auto& slot = last[key];
    if (!slot || r.experience_index >= slot->experience_index) slot = &r;
    const auto cell = std::make_pair(r.strategy, r.scenario);
    if (std::find(order.begin(), order.end(), cell) == order.end()) order.push_back(cell);
  }
  std::vector<SummaryCell> out;
  for (const auto& [strategy, scenario] : order) {
    std::vector<double> xs;
    for (const auto& [key, r] : last)
      if (std::get<0>(key) == strategy && std::get<1>(key) == scenario)
        xs.push_back(r->stream_accuracy);
    out.push_back({strategy, scenario, mean_std(xs)});
  }
  return out;
}

inline std::string format_cell(const MeanStd& m) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f ± %.3f", m.mean, m.std);
  return buf;
}

/// Appends the cells to summary.csv and rewrites summary.md with them.
inline void write_summary(const fs::path& dir, const std::string& run_id,
                          const std::vector<SummaryCell>& cells) {
  auto csv = detail::open_append(dir / "summary.csv", "run_id,strategy,scenario,n_seeds,mean,std");
  for (const auto& c : cells)
    csv << run_id << ',' << c.strategy << ',' << c.scenario << ',' << c.stat.n << ','
        << detail::format_double(c.stat.mean) << ',' << detail::format_double(c.stat.std) << "\n";
  std::ofstream md(dir / "summary.md");
  md << "Stream accuracy (" << run_id << ", mean ± sample std over seeds)\n\n";
  md << "| strategy | scenario | seeds | accuracy |\n|---|---|---|---|\n";
  for (const auto& c : cells)
    md << "| " << c.strategy << " | " << c.scenario << " | " << c.stat.n << " | "
       << format_cell(c.stat) << " |\n";
  if (!csv || !md) throw IoError("failed writing summary in " + dir.string());
}

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> mean;
  std::vector<double> std;
};

/// Line plot with a logarithmic x axis whose ticks sit exactly at `ticks`.
inline std::string log_x_svg(const std::vector<PlotSeries>& series,
                             const std::vector<double>& ticks, const std::string& title,
                             const std::string& xlabel, const std::string& ylabel) {
  const double W = 640, H = 420, L = 70, R = 150, T = 40, B = 60;
  double lo = *std::min_element(ticks.begin(), ticks.end());
  double hi = *std::max_element(ticks.begin(), ticks.end());
  if (hi <= lo) hi = lo * 10;
  const double pad = 0.05 * (std::log10(hi) - std::log10(lo));
  const double a = std::log10(lo) - pad, b = std::log10(hi) + pad;
  auto px = [&](double x) { return L + (std::log10(x) - a) / (b - a) * (W - L - R); };
  auto py = [&](double y) { return H - B - std::clamp(y, 0.0, 1.0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                 "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"};
  std::ostringstream s;
  s.precision(6);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << (L + (W - L - R) / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
    << title << "</text>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n";
  for (double t : ticks) {
    s << "<line class=\"xtick\" data-value=\"" << t << "\" x1=\"" << px(t) << "\" y1=\"" << H - B
      << "\" x2=\"" << px(t) << "\" y2=\"" << H - B + 5 << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << px(t) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">" << t
      << "</text>\n";
  }
  for (int k = 0; k <= 5; ++k) {
    const double y = k / 5.0;
    s << "<line x1=\"" << L - 5 << "\" y1=\"" << py(y) << "\" x2=\"" << W - R << "\" y2=\""
      << py(y) << "\" stroke=\"#ddd\"/>\n";
    s << "<text x=\"" << L - 8 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << y
      << "</text>\n";
  }
  s << "<text x=\"" << (L + (W - L - R) / 2) << "\" y=\"" << H - 15
    << "\" text-anchor=\"middle\">" << xlabel << " (log scale)</text>\n";
  s << "<text transform=\"translate(18," << (T + (H - T - B) / 2)
    << ") rotate(-90)\" text-anchor=\"middle\">" << ylabel << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& sr = series[k];
    const char* c = colors[k % 8];
    s << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < sr.x.size(); ++i) s << px(sr.x[i]) << "," << py(sr.mean[i]) << " ";
    s << "\"/>\n";
    for (std::size_t i = 0; i < sr.x.size(); ++i) {
      s << "<line x1=\"" << px(sr.x[i]) << "\" y1=\"" << py(sr.mean[i] - sr.std[i]) << "\" x2=\""
        << px(sr.x[i]) << "\" y2=\"" << py(sr.mean[i] + sr.std[i]) << "\" stroke=\"" << c
        << "\"/>\n";
      s << "<circle cx=\"" << px(sr.x[i]) << "\" cy=\"" << py(sr.mean[i]) << "\" r=\"3\" fill=\""
        << c << "\"/>\n";
    }
    s << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * (k + 1) << "\" fill=\"" << c << "\">"
      << sr.label << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace exml::harness
