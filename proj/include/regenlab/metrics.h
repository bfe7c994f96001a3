#pragma once

#include <fstream>
#include <string>
#include <vector>

namespace regenlab {

// One row of the experiment trajectory. `ppl` is the neutral test-split
// perplexity (the general-competence proxy); `ppl_val` is the budget
// validation perplexity used by the dynamic-K loop. Both are recorded since
// the phase points could reasonably be plotted against either.
struct MetricRow {
  int step = 0;  // strictly increasing across the experiment
  int cycle = 0;
  std::string phase;  // BASELINE, PRE_ABLATE, POST_ABLATE, E1..E5
  double ppl = 0.0;
  double ppl_val = 0.0;
  double deception_rate = 0.0;
  double aggregate_score = 0.0;
  int k = 0;  // chosen K for this cycle; 0 before selection
  bool breach = false;
};

inline constexpr const char* kMetricsFileName = "metrics.csv";
inline constexpr const char* kFigure1FileName = "figure1.csv";

/// Appends rows to a CSV, flushing after each row so a crashed run keeps
/// everything up to the last completed phase.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path);
  void append(const MetricRow& row);

 private:
  std::ofstream out_;
  std::string path_;
};

std::string metric_row_to_csv(const MetricRow& row);
std::vector<MetricRow> read_metrics(const std::string& path);  // ReportError on corrupt rows

/// Renders the plot-ready table: header
/// "step,cycle,phase,ppl,deception_rate,aggregate_score" and one row per
/// (cycle, phase) in step order, baseline row excluded. Byte-deterministic.
std::string render_figure1(const std::vector<MetricRow>& rows);

/// Reads <run_dir>/metrics.csv and returns the figure-1 bytes. ReportError
/// when the run directory has no metrics.
std::string export_figure1_data(const std::string& run_dir);

}  // namespace regenlab
