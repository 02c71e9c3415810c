// SPDX-License-Identifier: Apache-2.0
//
// Soup recipes: uniform average, greedy selection and pruned removal over an abstract evaluator.
#pragma once

#include "soup/evaluator.hpp"
#include "soup/tensor_store.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace soup {

struct Ingredient {
    std::string id;
    std::shared_ptr<const TensorMap> checkpoint;
    CheckpointMeta meta;
    // cached selection-split accuracy of this model alone
    std::optional<double> val_acc;
};

// Fills missing val_acc by evaluating each ingredient on the selection split. Runs in parallel
// only when the evaluator declares itself concurrency-safe.
void cache_val_acc(std::vector<Ingredient> & ingredients, Evaluator & evaluator);

// Incremental average. running_sum holds per-tensor double accumulators in the layout of the first
// ingredient added. Copies are cheap enough to snapshot for rollback.
class SoupState {
public:
    const std::vector<std::string> & included() const { return included_; }
    std::size_t count() const { return included_.size(); }
    bool contains(const std::string & id) const { return members_.count(id) != 0; }

    // layout of the accumulator (empty until the first add)
    const std::vector<std::string> & names() const { return names_; }
    const std::vector<Shape> & shapes() const { return shapes_; }
    const std::vector<std::vector<double>> & running_sum() const { return sum_; }

private:
    friend SoupState soup_add(const SoupState &, const Ingredient &);
    friend SoupState soup_remove(const SoupState &, const std::string &);

    std::vector<std::string> included_;
    std::map<std::string, std::shared_ptr<const TensorMap>> members_;
    std::vector<std::string> names_;
    std::vector<Shape> shapes_;
    std::vector<std::vector<double>> sum_;
};

SoupState soup_add(const SoupState & state, const Ingredient & ingredient);
SoupState soup_remove(const SoupState & state, const std::string & ingredient_id);
TensorMap materialize(const SoupState & state);

enum class Method { uniform, greedy, pruned };
enum class Strategy { sorted, random };

const char * to_string(Method method);
const char * to_string(Strategy strategy);
Method parse_method(std::string_view text);
Strategy parse_strategy(std::string_view text);

struct RecipeConfig {
    Method method = Method::greedy;
    Strategy strategy = Strategy::sorted;
    std::uint64_t seed = 0;
    std::optional<std::int64_t> max_ingredients;  // greedy only, unlimited when empty
    std::int64_t passes = 1;                      // pruned only
    std::int64_t runs = 1;
    // evaluate the best individual (by cached val_acc) on the test split for the report
    bool report_best_individual = true;
};

void validate_config(const RecipeConfig & config);

std::vector<Ingredient> order_ingredients(std::vector<Ingredient> ingredients, Strategy strategy, std::uint64_t seed);

enum class Action { added, rejected, removed, kept, failed };

const char * to_string(Action action);
Action parse_action(std::string_view text);

struct HistoryEntry {
    std::int64_t step = 0;
    std::string candidate_id;
    Action action = Action::added;
    // accuracy of the evaluated candidate soup; for guarded keeps, the unchanged baseline
    double acc_after = 0.0;
    // pruned only: removal refused because it would empty the soup
    bool guard = false;
    // pass index for pruned, 0 otherwise
    std::int64_t pass = 0;

    bool operator==(const HistoryEntry &) const = default;
};

struct BestIndividual {
    std::string id;
    double val_acc = 0.0;
    double test_acc = 0.0;

    bool operator==(const BestIndividual &) const = default;
};

struct SoupReport {
    Method method = Method::uniform;
    Strategy strategy = Strategy::sorted;
    std::uint64_t seed = 0;
    std::vector<std::string> final_ids;
    std::int64_t n_ingredients = 0;
    double val_acc = 0.0;
    double test_acc = 0.0;
    std::vector<HistoryEntry> history;
    std::optional<BestIndividual> best_individual;

    bool operator==(const SoupReport &) const = default;
};

struct SoupResult {
    SoupReport report;
    TensorMap soup;
};

// Thrown when the evaluator fails mid-recipe. history ends with the failing candidate.
class RecipeError : public Error {
public:
    RecipeError(const std::string & what, std::vector<HistoryEntry> history)
        : Error(what), history_(std::move(history)) {}
    const std::vector<HistoryEntry> & history() const { return history_; }

private:
    std::vector<HistoryEntry> history_;
};

SoupResult uniform_soup(const std::vector<Ingredient> & ingredients, Evaluator & evaluator,
                        const RecipeConfig & config = {});

// Ingredients are ordered internally per config.strategy / config.seed. val_acc is cached first
// when missing.
SoupResult greedy_soup(const std::vector<Ingredient> & ingredients, const RecipeConfig & config,
                       Evaluator & evaluator);
SoupResult pruned_soup(const std::vector<Ingredient> & ingredients, const RecipeConfig & config,
                       Evaluator & evaluator);

// Dispatches on config.method.
SoupResult run_once(const std::vector<Ingredient> & ingredients, const RecipeConfig & config, Evaluator & evaluator);

struct AggregateReport {
    Method method = Method::uniform;
    Strategy strategy = Strategy::sorted;
    std::uint64_t seed = 0;
    std::int64_t runs = 1;
    double mean_val_acc = 0.0;
    double std_val_acc = 0.0;
    double mean_test_acc = 0.0;
    double std_test_acc = 0.0;
    double mean_ingredients = 0.0;
    std::optional<BestIndividual> best_individual;
    std::vector<SoupReport> reports;
};

// Random strategies execute config.runs runs with seeds seed, seed+1, ...; uniform and sorted
// recipes are deterministic and execute once. Standard deviations are sample (n-1) deviations.
AggregateReport run_recipe(const std::vector<Ingredient> & ingredients, const RecipeConfig & config,
                           Evaluator & evaluator);

} // namespace soup
