#pragma once

#include <string>
#include <vector>

#include "caprese/analysis.hpp"
#include "caprese/distill.hpp"

namespace caprese {

// Pinned numeric formatting ("%.10g") so reruns are byte-identical. Reports
// never embed timestamps or machine-local paths.
std::string format_value(double v);

// Comment lines (written as "# ..."), one column-name row, data rows. Cells
// must be comma/quote/newline free; comments may hold anything line-shaped.
struct CsvTable {
    std::vector<std::string> comments;
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;
};

std::string render_csv(const CsvTable& table);  // DomainError on unsafe cells

void write_text_file(const std::string& path, const std::string& content);  // IoError
std::string read_text_file(const std::string& path);                        // IoError

// "step=<n> layer=<l> loss=<v> lr=<v>"; layer -1 marks end-to-end records.
std::string train_record_line(const TrainRecord& record);

// Column orders (also documented in the README):
//   error_curve.csv: density, residual_rank, error
//   coverage.csv:    k, mean_pass_at_k, stddev
//   latency.csv:     method, prompt_tokens, gen_tokens, reps,
//                    end_to_end_s, prefill_s, ttnt_ms
//   lengths.csv:     label, count, mean_tokens
//   spectra.csv:     series, index, relative   (series: layer.<i> or mean;
//                    degenerate layers are listed in a comment, not as rows)
// config_json, when non-empty, is echoed as a "config: ..." comment.
CsvTable error_curve_table(const ErrorCurveTable& table, const std::string& config_json);
CsvTable coverage_table(const CoverageReport& report, const std::string& config_json);
CsvTable latency_table(const LatencyReport& report, const std::string& config_json);
CsvTable lengths_table(const LengthStats& stats, const std::string& config_json);
CsvTable spectra_table(const SpectrumReport& report, const std::string& config_json);

// Plot descriptions: {"title", "x", "y", "config", "series": [{name, points}]}.
// Points are [x, y] pairs; series order matches the tables above.
std::string error_curve_plot(const ErrorCurveTable& table, const std::string& config_json);
std::string coverage_plot(const CoverageReport& report, const std::string& config_json);
std::string spectra_plot(const SpectrumReport& report, const std::string& config_json);

}  // namespace caprese
