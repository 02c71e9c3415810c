// SPDX-License-Identifier: Apache-2.0
//
// The four CLI verbs as library calls. tools/soup_main.cpp only parses flags and maps exceptions to
// exit codes.
#pragma once

#include "soup/evaluators.hpp"
#include "soup/reports.hpp"
#include "soup/soup_engine.hpp"
#include "soup/trainer.hpp"

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace soup {

class Logger {
public:
    Logger(std::ostream & sink, bool json);
    void info(const std::string & msg, const nlohmann::json & fields = nlohmann::json::object()) const;

private:
    std::ostream * sink_;
    bool json_;
};

struct TrainGridOptions {
    std::filesystem::path out_dir;
    InitMode mode = InitMode::shared;
    std::uint64_t seed = 0;
    DataParams data;
    MlpArch arch;
    GridSpec grid;
    PretrainSpec pretrain;
    double selection_fraction = 0.5;
    std::uint64_t split_seed = 0;
};

// Returns the manifest path.
std::filesystem::path cmd_train_grid(const TrainGridOptions & options, const Logger & log);

// "builtin" or "command:<path>"
struct EvaluatorSpec {
    std::string spec = "builtin";
    std::int64_t timeout_ms = 600'000;
    bool concurrency_safe = false;
};

// Everything a recipe needs from a manifest directory.
struct LoadedPopulation {
    Manifest manifest;
    std::filesystem::path manifest_path;
    std::string manifest_hash;
    std::vector<Ingredient> ingredients;
    std::unique_ptr<Evaluator> evaluator;
};

LoadedPopulation load_population(const std::filesystem::path & manifest_path, const EvaluatorSpec & evaluator,
                                 bool include_diverged);

struct SoupOptions {
    std::filesystem::path manifest;
    std::filesystem::path out;  // defaults to <manifest dir>/report-<method>-<strategy>.json
    EvaluatorSpec evaluator;
    RecipeConfig recipe;
    bool include_diverged = false;
};

// Returns the report path; the table rows are printed to out.
std::filesystem::path cmd_soup(const SoupOptions & options, std::ostream & out, const Logger & log);

struct AblateOptions {
    std::filesystem::path manifest;
    std::filesystem::path out_dir;  // defaults to the manifest directory
    EvaluatorSpec evaluator;
    std::string sweep;              // "max_ingredients" or "passes"
    std::int64_t from = 1;
    std::int64_t to = 5;
    std::optional<Method> method;   // greedy for max_ingredients, pruned for passes
    std::vector<Strategy> strategies = {Strategy::sorted, Strategy::random};
    std::int64_t runs = 10;
    std::int64_t passes = 1;        // fixed pass count when sweeping max_ingredients
    std::uint64_t seed = 0;
    bool include_diverged = false;
};

struct AblationOutput {
    AblationCurve curve;
    std::filesystem::path json_path;
    std::filesystem::path csv_path;
};

std::vector<AblationOutput> cmd_ablate(const AblateOptions & options, const Logger & log);

struct ReportOptions {
    std::vector<std::filesystem::path> reports;
    std::filesystem::path out;
    std::string format = "md";  // md or csv
};

std::filesystem::path cmd_report(const ReportOptions & options, std::ostream & out);

} // namespace soup
