// SPDX-License-Identifier: Apache-2.0
#include "soup/reports.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace soup {

using json = nlohmann::json;

json to_json(const SoupReport & r) {
    json history = json::array();
    for (const auto & h : r.history) {
        history.push_back({{"step", h.step},
                           {"candidate_id", h.candidate_id},
                           {"action", to_string(h.action)},
                           {"acc_after", h.acc_after},
                           {"guard", h.guard},
                           {"pass", h.pass}});
    }
    json j = {{"method", to_string(r.method)},
              {"strategy", to_string(r.strategy)},
              {"seed", r.seed},
              {"final_ids", r.final_ids},
              {"n_ingredients", r.n_ingredients},
              {"val_acc", r.val_acc},
              {"test_acc", r.test_acc},
              {"history", history}};
    if (r.best_individual) {
        j["best_individual"] = {{"id", r.best_individual->id},
                                {"val_acc", r.best_individual->val_acc},
                                {"test_acc", r.best_individual->test_acc}};
    } else {
        j["best_individual"] = nullptr;
    }
    return j;
}

namespace {

std::optional<BestIndividual> best_from_json(const json & j) {
    if (j.is_null()) {
        return std::nullopt;
    }
    return BestIndividual{j.at("id").get<std::string>(), j.at("val_acc").get<double>(), j.at("test_acc").get<double>()};
}

json best_to_json(const std::optional<BestIndividual> & b) {
    if (!b) {
        return nullptr;
    }
    return {{"id", b->id}, {"val_acc", b->val_acc}, {"test_acc", b->test_acc}};
}

} // namespace

SoupReport soup_report_from_json(const json & j) {
    SoupReport r;
    r.method = parse_method(j.at("method").get<std::string>());
    r.strategy = parse_strategy(j.at("strategy").get<std::string>());
    r.seed = j.at("seed").get<std::uint64_t>();
    r.final_ids = j.at("final_ids").get<std::vector<std::string>>();
    r.n_ingredients = j.at("n_ingredients").get<std::int64_t>();
    r.val_acc = j.at("val_acc").get<double>();
    r.test_acc = j.at("test_acc").get<double>();
    for (const auto & h : j.at("history")) {
        r.history.push_back({h.at("step").get<std::int64_t>(), h.at("candidate_id").get<std::string>(),
                             parse_action(h.at("action").get<std::string>()), h.at("acc_after").get<double>(),
                             h.at("guard").get<bool>(), h.at("pass").get<std::int64_t>()});
    }
    r.best_individual = best_from_json(j.at("best_individual"));
    return r;
}

json to_json(const AggregateReport & a) {
    json runs = json::array();
    for (const auto & r : a.reports) {
        runs.push_back(to_json(r));
    }
    return {{"method", to_string(a.method)},
            {"strategy", to_string(a.strategy)},
            {"seed", a.seed},
            {"runs", a.runs},
            {"mean_val_acc", a.mean_val_acc},
            {"std_val_acc", a.std_val_acc},
            {"mean_test_acc", a.mean_test_acc},
            {"std_test_acc", a.std_test_acc},
            {"mean_ingredients", a.mean_ingredients},
            {"best_individual", best_to_json(a.best_individual)},
            {"reports", runs}};
}

AggregateReport aggregate_report_from_json(const json & j) {
    AggregateReport a;
    a.method = parse_method(j.at("method").get<std::string>());
    a.strategy = parse_strategy(j.at("strategy").get<std::string>());
    a.seed = j.at("seed").get<std::uint64_t>();
    a.runs = j.at("runs").get<std::int64_t>();
    a.mean_val_acc = j.at("mean_val_acc").get<double>();
    a.std_val_acc = j.at("std_val_acc").get<double>();
    a.mean_test_acc = j.at("mean_test_acc").get<double>();
    a.std_test_acc = j.at("std_test_acc").get<double>();
    a.mean_ingredients = j.at("mean_ingredients").get<double>();
    a.best_individual = best_from_json(j.at("best_individual"));
    for (const auto & r : j.at("reports")) {
        a.reports.push_back(soup_report_from_json(r));
    }
    return a;
}

std::string method_label(Method method, Strategy strategy) {
    switch (method) {
        case Method::uniform: return "Uniform soup";
        case Method::greedy:  return std::string("Greedy soup (") + to_string(strategy) + ")";
        case Method::pruned:  return std::string("Pruned soup (") + to_string(strategy) + ")";
    }
    return "?";
}

std::vector<TableRow> table_rows(const AggregateReport & report) {
    std::vector<TableRow> rows;
    if (report.best_individual) {
        rows.push_back({"Best individual model", report.best_individual->test_acc, std::nullopt});
    }
    rows.push_back({method_label(report.method, report.strategy), report.mean_test_acc, report.mean_ingredients});
    return rows;
}

std::string format_percent(double acc) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", acc * 100.0);
    return buf;
}

std::string format_ingredients(double count) {
    char buf[32];
    if (std::abs(count - std::round(count)) < 1e-9) {
        std::snprintf(buf, sizeof(buf), "%.0f", count);
    } else {
        std::snprintf(buf, sizeof(buf), "%.1f", count);
    }
    return buf;
}

std::string render_markdown(const std::vector<TableRow> & rows) {
    std::ostringstream os;
    os << "| Method | Acc. (%) | Ingredients (avg) |\n";
    os << "|---|---:|---:|\n";
    for (const auto & r : rows) {
        os << "| " << r.method << " | " << format_percent(r.acc) << " | "
           << (r.ingredients ? format_ingredients(*r.ingredients) : "-") << " |\n";
    }
    return os.str();
}

std::string render_csv(const std::vector<TableRow> & rows) {
    std::ostringstream os;
    os << "Method,Acc. (%),Ingredients (avg)\n";
    for (const auto & r : rows) {
        os << '"' << r.method << "\"," << format_percent(r.acc) << ','
           << (r.ingredients ? format_ingredients(*r.ingredients) : "-") << '\n';
    }
    return os.str();
}

json to_json(const RunManifest & run) {
    json rows = json::array();
    for (const auto & r : run.rows()) {
        rows.push_back({{"method", r.method},
                        {"acc", r.acc},
                        {"ingredients", r.ingredients ? json(*r.ingredients) : json(nullptr)}});
    }
    return {{"config", run.config},
            {"environment", run.environment},
            {"dataset_hash", run.dataset_hash},
            {"manifest_hash", run.manifest_hash},
            {"result", to_json(run.result)},
            {"table", rows}};
}

RunManifest run_manifest_from_json(const json & j) {
    RunManifest run;
    run.config = j.at("config");
    run.environment = j.at("environment");
    run.dataset_hash = j.at("dataset_hash").get<std::string>();
    run.manifest_hash = j.at("manifest_hash").get<std::string>();
    run.result = aggregate_report_from_json(j.at("result"));
    return run;
}

RunManifest load_run_manifest(const std::filesystem::path & path) {
    try {
        return run_manifest_from_json(read_json(path));
    } catch (const json::exception & e) {
        throw Error("malformed report '" + path.string() + "': " + e.what());
    }
}

json environment_stamp() {
    return {{"tool", "soup"},
            {"version", "0.1.0"},
#if defined(__VERSION__)
            {"compiler", __VERSION__},
#endif
            {"cplusplus", __cplusplus}};
}

std::vector<TableRow> merge_reports(const std::vector<RunManifest> & runs) {
    if (runs.empty()) {
        throw Error("no reports to merge");
    }
    for (const auto & r : runs) {
        if (r.dataset_hash != runs.front().dataset_hash) {
            throw Error("reports come from different datasets (" + runs.front().dataset_hash + " vs " + r.dataset_hash +
                        "); refusing to merge");
        }
    }
    std::vector<TableRow> rows;
    for (const auto & r : runs) {
        if (r.result.best_individual) {
            rows.push_back({"Best individual model", r.result.best_individual->test_acc, std::nullopt});
            break;
        }
    }
    for (const auto & r : runs) {
        rows.push_back(
            {method_label(r.result.method, r.result.strategy), r.result.mean_test_acc, r.result.mean_ingredients});
    }
    return rows;
}

CurvePoint curve_point(std::int64_t x, const AggregateReport & report) {
    CurvePoint p;
    p.x = x;
    p.mean_acc = report.mean_val_acc;
    p.mean_test_acc = report.mean_test_acc;
    p.mean_ingredients = report.mean_ingredients;
    if (report.runs > 1) {
        p.std_acc = report.std_val_acc;
        p.std_test_acc = report.std_test_acc;
    }
    return p;
}

json to_json(const AblationCurve & c) {
    json points = json::array();
    for (const auto & p : c.points) {
        points.push_back({{"x", p.x},
                          {"mean_acc", p.mean_acc},
                          {"std_acc", p.std_acc ? json(*p.std_acc) : json(nullptr)},
                          {"mean_test_acc", p.mean_test_acc},
                          {"std_test_acc", p.std_test_acc ? json(*p.std_test_acc) : json(nullptr)},
                          {"mean_ingredients", p.mean_ingredients}});
    }
    return {{"x_name", c.x_name},
            {"method", to_string(c.method)},
            {"strategy", to_string(c.strategy)},
            {"runs", c.runs},
            {"seed", c.seed},
            {"points", points}};
}

AblationCurve ablation_curve_from_json(const json & j) {
    AblationCurve c;
    c.x_name = j.at("x_name").get<std::string>();
    c.method = parse_method(j.at("method").get<std::string>());
    c.strategy = parse_strategy(j.at("strategy").get<std::string>());
    c.runs = j.at("runs").get<std::int64_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    for (const auto & p : j.at("points")) {
        CurvePoint cp;
        cp.x = p.at("x").get<std::int64_t>();
        cp.mean_acc = p.at("mean_acc").get<double>();
        if (!p.at("std_acc").is_null()) cp.std_acc = p.at("std_acc").get<double>();
        cp.mean_test_acc = p.at("mean_test_acc").get<double>();
        if (!p.at("std_test_acc").is_null()) cp.std_test_acc = p.at("std_test_acc").get<double>();
        cp.mean_ingredients = p.at("mean_ingredients").get<double>();
        c.points.push_back(cp);
    }
    return c;
}

namespace {

// shortest text that reads back to the same double
std::string shortest(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, r.ptr);
}

} // namespace

std::string render_csv(const AblationCurve & c) {
    std::ostringstream os;
    os << c.x_name << ",mean_acc,std_acc,mean_test_acc,std_test_acc,mean_ingredients\n";
    for (const auto & p : c.points) {
        os << p.x << ',' << shortest(p.mean_acc) << ',';
        if (p.std_acc) os << shortest(*p.std_acc);
        os << ',' << shortest(p.mean_test_acc) << ',';
        if (p.std_test_acc) os << shortest(*p.std_test_acc);
        os << ',' << shortest(p.mean_ingredients) << '\n';
    }
    return os.str();
}

void write_text(const std::filesystem::path & path, const std::string & text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError(path.string(), "cannot open '" + path.string() + "' for writing");
    }
    out << text;
    out.close();
    if (!out) {
        throw IoError(path.string(), "write to '" + path.string() + "' failed");
    }
}

json read_json(const std::filesystem::path & path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError(path.string(), "cannot open '" + path.string() + "'");
    }
    try {
        return json::parse(in);
    } catch (const json::exception & e) {
        throw Error("invalid JSON in '" + path.string() + "': " + e.what());
    }
}

} // namespace soup
