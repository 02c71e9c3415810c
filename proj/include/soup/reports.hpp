// SPDX-License-Identifier: Apache-2.0
//
// JSON/CSV/markdown forms of soup results. Accuracies are stored as [0, 1] decimals everywhere and
// only turned into percentages by the table renderers.
#pragma once

#include "soup/soup_engine.hpp"

#include "json.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace soup {

nlohmann::json to_json(const SoupReport & report);
SoupReport soup_report_from_json(const nlohmann::json & j);

nlohmann::json to_json(const AggregateReport & report);
AggregateReport aggregate_report_from_json(const nlohmann::json & j);

// "Uniform soup", "Greedy soup (sorted)", ...
std::string method_label(Method method, Strategy strategy);

struct TableRow {
    std::string method;
    double acc = 0.0;                      // test accuracy in [0, 1]
    std::optional<double> ingredients;     // empty for the best individual row
};

// Best individual first (when present), then the soup.
std::vector<TableRow> table_rows(const AggregateReport & report);

// Columns: Method, Acc. (%), Ingredients (avg)
std::string render_markdown(const std::vector<TableRow> & rows);
std::string render_csv(const std::vector<TableRow> & rows);
std::string format_percent(double acc);
std::string format_ingredients(double count);

// What the soup command writes: config echo, environment stamp, input hashes, result and table rows.
struct RunManifest {
    nlohmann::json config;
    nlohmann::json environment;
    std::string dataset_hash;
    std::string manifest_hash;
    AggregateReport result;

    std::vector<TableRow> rows() const { return table_rows(result); }
};

nlohmann::json to_json(const RunManifest & run);
RunManifest run_manifest_from_json(const nlohmann::json & j);
RunManifest load_run_manifest(const std::filesystem::path & path);

nlohmann::json environment_stamp();

// Merges several run manifests into one table. All must share a dataset hash; the best individual
// row is taken from the first report that has one.
std::vector<TableRow> merge_reports(const std::vector<RunManifest> & runs);

struct CurvePoint {
    std::int64_t x = 0;
    double mean_acc = 0.0;  // selection split
    std::optional<double> std_acc;
    double mean_test_acc = 0.0;
    std::optional<double> std_test_acc;
    double mean_ingredients = 0.0;
};

struct AblationCurve {
    std::string x_name;  // "max_ingredients" or "passes"
    Method method = Method::greedy;
    Strategy strategy = Strategy::sorted;
    std::int64_t runs = 1;
    std::uint64_t seed = 0;
    std::vector<CurvePoint> points;
};

CurvePoint curve_point(std::int64_t x, const AggregateReport & report);

nlohmann::json to_json(const AblationCurve & curve);
AblationCurve ablation_curve_from_json(const nlohmann::json & j);
std::string render_csv(const AblationCurve & curve);

void write_text(const std::filesystem::path & path, const std::string & text);
nlohmann::json read_json(const std::filesystem::path & path);

} // namespace soup
