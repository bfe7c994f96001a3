#include "regenlab/metrics.h"

#include <cstdio>
#include <filesystem>
#include <sstream>

#include "regenlab/errors.h"

namespace regenlab {

namespace {

constexpr const char* kHeader = "step,cycle,phase,ppl,ppl_val,deception_rate,aggregate_score,k,breach";

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string metric_row_to_csv(const MetricRow& r) {
  std::ostringstream out;
  out << r.step << ',' << r.cycle << ',' << r.phase << ',' << fmt(r.ppl) << ','
      << fmt(r.ppl_val) << ',' << fmt(r.deception_rate) << ',' << fmt(r.aggregate_score) << ','
      << r.k << ',' << (r.breach ? 1 : 0);
  return out.str();
}

MetricsWriter::MetricsWriter(const std::string& path) : path_(path) {
  out_.open(path, std::ios::trunc);
  if (!out_) throw Error("metrics: cannot open " + path + " for writing");
  out_ << kHeader << '\n';
  out_.flush();
}

void MetricsWriter::append(const MetricRow& row) {
  out_ << metric_row_to_csv(row) << '\n';
  out_.flush();
  if (!out_) throw Error("metrics: write failed for " + path_);
}

std::vector<MetricRow> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ReportError("metrics file not found: " + path);
  std::string line;
  if (!std::getline(in, line) || line != kHeader)
    throw ReportError("metrics file has a bad header: " + path);

  std::vector<MetricRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    MetricRow r;
    char c;
    int breach = 0;
    std::string rest;
    if (!(ls >> r.step >> c >> r.cycle >> c))
      throw ReportError("corrupt metrics row at line " + std::to_string(line_no));
    if (!std::getline(ls, rest))
      throw ReportError("corrupt metrics row at line " + std::to_string(line_no));
    std::istringstream fs(rest);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(fs, field, ',')) fields.push_back(field);
    if (fields.size() != 7)
      throw ReportError("corrupt metrics row (cycle " + std::to_string(r.cycle) + ") at line " +
                        std::to_string(line_no));
    try {
      r.phase = fields[0];
      r.ppl = std::stod(fields[1]);
      r.ppl_val = std::stod(fields[2]);
      r.deception_rate = std::stod(fields[3]);
      r.aggregate_score = std::stod(fields[4]);
      r.k = std::stoi(fields[5]);
      breach = std::stoi(fields[6]);
    } catch (const std::exception&) {
      throw ReportError("corrupt metrics row (cycle " + std::to_string(r.cycle) + ") at line " +
                        std::to_string(line_no));
    }
    r.breach = breach != 0;
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string render_figure1(const std::vector<MetricRow>& rows) {
  std::ostringstream out;
  out << "step,cycle,phase,ppl,deception_rate,aggregate_score\n";
  for (const auto& r : rows) {
    if (r.cycle == 0) continue;  // baseline point is not part of the cycle series
    out << r.step << ',' << r.cycle << ',' << r.phase << ',' << fmt(r.ppl) << ','
        << fmt(r.deception_rate) << ',' << fmt(r.aggregate_score) << '\n';
  }
  return out.str();
}

std::string export_figure1_data(const std::string& run_dir) {
  const auto path = std::filesystem::path(run_dir) / kMetricsFileName;
  if (!std::filesystem::exists(path))
    throw ReportError("run directory has no metrics file: " + path.string());
  return render_figure1(read_metrics(path.string()));
}

}  // namespace regenlab
