#include "caprese/report.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "caprese/errors.hpp"

#include <json.hpp>

namespace caprese {

namespace {

using nlohmann::json;

void append_config_comment(CsvTable& table, const std::string& config_json) {
    if (!config_json.empty()) table.comments.push_back("config: " + config_json);
}

json plot_skeleton(const char* title, const char* x, const char* y,
                   const std::string& config_json) {
    json out;
    out["title"] = title;
    out["x"] = x;
    out["y"] = y;
    if (!config_json.empty()) {
        json config = json::parse(config_json, nullptr, false);
        out["config"] = config.is_discarded() ? json(config_json) : config;
    } else {
        out["config"] = nullptr;
    }
    out["series"] = json::array();
    return out;
}

}  // namespace

std::string format_value(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

std::string render_csv(const CsvTable& table) {
    const auto check_cell = [](const std::string& cell) {
        if (cell.find_first_of(",\"\n\r") != std::string::npos)
            throw DomainError("render_csv: cell contains a delimiter: '" + cell + "'");
    };
    std::string out;
    for (const std::string& comment : table.comments) {
        if (comment.find_first_of("\n\r") != std::string::npos)
            throw DomainError("render_csv: multi-line comment");
        out += "# " + comment + "\n";
    }
    for (size_t c = 0; c < table.columns.size(); ++c) {
        check_cell(table.columns[c]);
        out += (c ? "," : "") + table.columns[c];
    }
    out += "\n";
    for (const std::vector<std::string>& row : table.rows) {
        if (row.size() != table.columns.size())
            throw DomainError("render_csv: row width does not match the columns");
        for (size_t c = 0; c < row.size(); ++c) {
            check_cell(row[c]);
            out += (c ? "," : "") + row[c];
        }
        out += "\n";
    }
    return out;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("report: cannot open '" + path + "' for writing");
    out.write(content.data(), std::streamsize(content.size()));
    if (!out) throw IoError("report: write failed for '" + path + "'");
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("report: cannot open '" + path + "'");
    std::stringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

std::string train_record_line(const TrainRecord& record) {
    const long long layer = record.layer == size_t(-1) ? -1 : (long long)record.layer;
    return "step=" + std::to_string(record.step) + " layer=" + std::to_string(layer) +
           " loss=" + format_value(record.loss) + " lr=" + format_value(record.lr);
}

CsvTable error_curve_table(const ErrorCurveTable& table, const std::string& config_json) {
    CsvTable out;
    append_config_comment(out, config_json);
    out.columns = {"density", "residual_rank", "error"};
    for (const ErrorCurveRow& row : table.rows)
        out.rows.push_back({format_value(row.density), std::to_string(row.residual_rank),
                            format_value(row.error)});
    return out;
}

CsvTable coverage_table(const CoverageReport& report, const std::string& config_json) {
    CsvTable out;
    append_config_comment(out, config_json);
    out.comments.push_back("n=" + std::to_string(report.n) +
                           " pool_size=" + std::to_string(report.pool_size) +
                           " pools=" + std::to_string(report.pools) +
                           " active_fraction=" + format_value(report.active_fraction) +
                           " compute_units=" + format_value(report.compute_units));
    out.columns = {"k", "mean_pass_at_k", "stddev"};
    for (size_t k = 0; k < report.mean.size(); ++k)
        out.rows.push_back({std::to_string(k + 1), format_value(report.mean[k]),
                            format_value(report.stddev[k])});
    return out;
}

CsvTable latency_table(const LatencyReport& report, const std::string& config_json) {
    CsvTable out;
    append_config_comment(out, config_json);
    out.comments.push_back("cores=" + std::to_string(report.cores) + " " +
                           report.governor_note);
    out.columns = {"method",       "prompt_tokens", "gen_tokens", "reps",
                   "end_to_end_s", "prefill_s",     "ttnt_ms"};
    for (const LatencyRow& row : report.rows)
        out.rows.push_back({latency_method_name(row.method), std::to_string(row.prompt_tokens),
                            std::to_string(row.gen_tokens), std::to_string(row.reps),
                            format_value(row.end_to_end_s), format_value(row.prefill_s),
                            format_value(row.ttnt_ms)});
    return out;
}

CsvTable lengths_table(const LengthStats& stats, const std::string& config_json) {
    CsvTable out;
    append_config_comment(out, config_json);
    out.comments.push_back("global_mean=" + format_value(stats.global_mean) +
                           " total_logs=" + std::to_string(stats.total_logs));
    out.columns = {"label", "count", "mean_tokens"};
    for (const LengthBucket& bucket : stats.buckets)
        out.rows.push_back({std::to_string(bucket.label), std::to_string(bucket.count),
                            format_value(bucket.mean_tokens)});
    return out;
}

CsvTable spectra_table(const SpectrumReport& report, const std::string& config_json) {
    CsvTable out;
    append_config_comment(out, config_json);
    std::string degenerate;
    for (const SingularSpectrum& layer : report.layers)
        if (layer.degenerate)
            degenerate += (degenerate.empty() ? "" : " ") + std::to_string(layer.layer);
    out.comments.push_back("degenerate_layers=" + (degenerate.empty() ? "none" : degenerate));
    out.columns = {"series", "index", "relative"};
    for (const SingularSpectrum& layer : report.layers) {
        if (layer.degenerate) continue;
        for (size_t i = 0; i < layer.relative.size(); ++i)
            out.rows.push_back({"layer." + std::to_string(layer.layer), std::to_string(i + 1),
                                format_value(layer.relative[i])});
    }
    for (size_t i = 0; i < report.mean_curve.size(); ++i)
        out.rows.push_back({"mean", std::to_string(i + 1), format_value(report.mean_curve[i])});
    return out;
}

std::string error_curve_plot(const ErrorCurveTable& table, const std::string& config_json) {
    json out = plot_skeleton("residual error vs density", "density", "relative error",
                             config_json);
    for (size_t rank : table.ranks) {
        json series;
        series["name"] = "rank " + std::to_string(rank);
        series["points"] = json::array();
        for (double density : table.densities)
            series["points"].push_back({density, table.at(density, rank)});
        out["series"].push_back(series);
    }
    return out.dump();
}

std::string coverage_plot(const CoverageReport& report, const std::string& config_json) {
    json out = plot_skeleton("coverage scaling", "k", "pass@k", config_json);
    json mean, stddev;
    mean["name"] = "mean_pass_at_k";
    stddev["name"] = "stddev";
    mean["points"] = json::array();
    stddev["points"] = json::array();
    for (size_t k = 0; k < report.mean.size(); ++k) {
        mean["points"].push_back({k + 1, report.mean[k]});
        stddev["points"].push_back({k + 1, report.stddev[k]});
    }
    out["series"].push_back(mean);
    out["series"].push_back(stddev);
    return out.dump();
}

std::string spectra_plot(const SpectrumReport& report, const std::string& config_json) {
    json out = plot_skeleton("residual singular spectra", "index", "relative singular value",
                             config_json);
    for (const SingularSpectrum& layer : report.layers) {
        if (layer.degenerate) continue;
        json series;
        series["name"] = "layer." + std::to_string(layer.layer);
        series["points"] = json::array();
        for (size_t i = 0; i < layer.relative.size(); ++i)
            series["points"].push_back({i + 1, layer.relative[i]});
        out["series"].push_back(series);
    }
    json mean;
    mean["name"] = "mean";
    mean["points"] = json::array();
    for (size_t i = 0; i < report.mean_curve.size(); ++i)
        mean["points"].push_back({i + 1, report.mean_curve[i]});
    out["series"].push_back(mean);
    return out.dump();
}

}  // namespace caprese
