// SPDX-License-Identifier: Apache-2.0
#include "soup/soup_engine.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <thread>

namespace soup {

const char * to_string(Split split) {
    return split == Split::selection ? "selection" : "test";
}

Split parse_split(std::string_view text) {
    if (text == "selection") {
        return Split::selection;
    }
    if (text == "test") {
        return Split::test;
    }
    throw Error("unknown split '" + std::string(text) + "'");
}

const char * to_string(Method method) {
    switch (method) {
        case Method::uniform: return "uniform";
        case Method::greedy:  return "greedy";
        case Method::pruned:  return "pruned";
    }
    return "?";
}

const char * to_string(Strategy strategy) {
    return strategy == Strategy::sorted ? "sorted" : "random";
}

Method parse_method(std::string_view text) {
    if (text == "uniform") return Method::uniform;
    if (text == "greedy") return Method::greedy;
    if (text == "pruned") return Method::pruned;
    throw Error("unknown method '" + std::string(text) + "'");
}

Strategy parse_strategy(std::string_view text) {
    if (text == "sorted") return Strategy::sorted;
    if (text == "random") return Strategy::random;
    throw Error("unknown strategy '" + std::string(text) + "'");
}

const char * to_string(Action action) {
    switch (action) {
        case Action::added:    return "added";
        case Action::rejected: return "rejected";
        case Action::removed:  return "removed";
        case Action::kept:     return "kept";
        case Action::failed:   return "failed";
    }
    return "?";
}

Action parse_action(std::string_view text) {
    for (auto a : {Action::added, Action::rejected, Action::removed, Action::kept, Action::failed}) {
        if (text == to_string(a)) {
            return a;
        }
    }
    throw Error("unknown history action '" + std::string(text) + "'");
}

void validate_config(const RecipeConfig & config) {
    if (config.passes < 1) {
        throw Error("passes must be >= 1");
    }
    if (config.runs < 1) {
        throw Error("runs must be >= 1");
    }
    if (config.max_ingredients && *config.max_ingredients < 1) {
        throw Error("max_ingredients must be >= 1");
    }
}

void cache_val_acc(std::vector<Ingredient> & ingredients, Evaluator & evaluator) {
    std::vector<Ingredient *> todo;
    for (auto & ing : ingredients) {
        if (!ing.val_acc) {
            todo.push_back(&ing);
        }
    }
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            todo[i]->val_acc = evaluator.evaluate(*todo[i]->checkpoint, Split::selection);
        }
    };
    const std::size_t workers =
        evaluator.concurrency_safe() ? std::min<std::size_t>(std::max(1u, std::thread::hardware_concurrency()), todo.size())
                                     : 1;
    if (workers <= 1) {
        work(0, todo.size());
        return;
    }
    std::vector<std::jthread> threads;
    const std::size_t chunk = (todo.size() + workers - 1) / workers;
    for (std::size_t begin = 0; begin < todo.size(); begin += chunk) {
        threads.emplace_back(work, begin, std::min(todo.size(), begin + chunk));
    }
}

SoupState soup_add(const SoupState & state, const Ingredient & ingredient) {
    if (!ingredient.checkpoint) {
        throw Error("ingredient '" + ingredient.id + "' has no checkpoint");
    }
    if (state.contains(ingredient.id)) {
        throw Error("ingredient '" + ingredient.id + "' is already in the soup");
    }
    const TensorMap & map = *ingredient.checkpoint;
    SoupState next = state;
    if (next.names_.empty()) {
        for (const auto & t : map.entries()) {
            next.names_.push_back(t.name);
            next.shapes_.push_back(t.shape);
            next.sum_.emplace_back(t.data.size(), 0.0);
        }
    } else {
        if (map.size() != next.names_.size()) {
            throw ShapeError("", "ingredient '" + ingredient.id + "' has " + std::to_string(map.size()) +
                                     " tensors, soup has " + std::to_string(next.names_.size()));
        }
        for (std::size_t i = 0; i < next.names_.size(); ++i) {
            const Tensor * t = map.find(next.names_[i]);
            if (!t) {
                throw ShapeError(next.names_[i], "ingredient '" + ingredient.id + "' lacks tensor '" + next.names_[i] + "'");
            }
            if (t->shape != next.shapes_[i]) {
                throw ShapeError(t->name, "ingredient '" + ingredient.id + "' tensor '" + t->name + "' has shape " +
                                              shape_to_string(t->shape) + ", soup has " +
                                              shape_to_string(next.shapes_[i]));
            }
        }
    }
    for (std::size_t i = 0; i < next.names_.size(); ++i) {
        const auto & src = map.at(next.names_[i]).data;
        auto & acc = next.sum_[i];
        for (std::size_t j = 0; j < acc.size(); ++j) {
            acc[j] += static_cast<double>(src[j]);
        }
    }
    next.included_.push_back(ingredient.id);
    next.members_.emplace(ingredient.id, ingredient.checkpoint);
    return next;
}

SoupState soup_remove(const SoupState & state, const std::string & ingredient_id) {
    auto it = state.members_.find(ingredient_id);
    if (it == state.members_.end()) {
        throw Error("ingredient '" + ingredient_id + "' is not in the soup");
    }
    SoupState next = state;
    const TensorMap & map = *it->second;
    for (std::size_t i = 0; i < next.names_.size(); ++i) {
        const auto & src = map.at(next.names_[i]).data;
        auto & acc = next.sum_[i];
        for (std::size_t j = 0; j < acc.size(); ++j) {
            acc[j] -= static_cast<double>(src[j]);
        }
    }
    next.members_.erase(ingredient_id);
    next.included_.erase(std::find(next.included_.begin(), next.included_.end(), ingredient_id));
    return next;
}

TensorMap materialize(const SoupState & state) {
    if (state.count() == 0) {
        throw Error("cannot materialize an empty soup");
    }
    const double count = static_cast<double>(state.count());
    std::vector<Tensor> out;
    out.reserve(state.names().size());
    for (std::size_t i = 0; i < state.names().size(); ++i) {
        const auto & acc = state.running_sum()[i];
        Tensor t{state.names()[i], state.shapes()[i], std::vector<float>(acc.size())};
        for (std::size_t j = 0; j < acc.size(); ++j) {
            t.data[j] = static_cast<float>(acc[j] / count);
        }
        out.push_back(std::move(t));
    }
    return TensorMap(std::move(out));
}

std::vector<Ingredient> order_ingredients(std::vector<Ingredient> ingredients, Strategy strategy, std::uint64_t seed) {
    if (strategy == Strategy::sorted) {
        for (const auto & ing : ingredients) {
            if (!ing.val_acc) {
                throw Error("ingredient '" + ing.id + "' has no val_acc; sorted order needs every accuracy");
            }
        }
        std::stable_sort(ingredients.begin(), ingredients.end(), [](const Ingredient & a, const Ingredient & b) {
            if (*a.val_acc != *b.val_acc) {
                return *a.val_acc > *b.val_acc;
            }
            return a.id < b.id;
        });
        return ingredients;
    }
    // Fisher-Yates, high index down
    std::mt19937_64 rng(seed);
    for (std::size_t i = ingredients.size(); i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(ingredients[i - 1], ingredients[pick(rng)]);
    }
    return ingredients;
}

namespace {

void check_unique_ids(const std::vector<Ingredient> & ingredients) {
    std::vector<std::string> ids;
    for (const auto & ing : ingredients) {
        ids.push_back(ing.id);
    }
    std::sort(ids.begin(), ids.end());
    if (auto it = std::adjacent_find(ids.begin(), ids.end()); it != ids.end()) {
        throw Error("duplicate ingredient id '" + *it + "'");
    }
}

// Evaluates a candidate soup, turning any failure into a RecipeError with the history so far.
double evaluate_candidate(Evaluator & evaluator, const TensorMap & candidate, Split split,
                          std::vector<HistoryEntry> & history, HistoryEntry failed_entry) {
    double acc = 0.0;
    try {
        acc = evaluator.evaluate(candidate, split);
    } catch (const std::exception & e) {
        failed_entry.action = Action::failed;
        failed_entry.acc_after = 0.0;
        history.push_back(failed_entry);
        throw RecipeError("evaluator failed on candidate '" + failed_entry.candidate_id + "': " + e.what(), history);
    }
    if (!(acc >= 0.0 && acc <= 1.0)) {
        failed_entry.action = Action::failed;
        failed_entry.acc_after = 0.0;
        history.push_back(failed_entry);
        throw RecipeError("evaluator returned accuracy " + std::to_string(acc) + " outside [0, 1] for candidate '" +
                              failed_entry.candidate_id + "'",
                          history);
    }
    return acc;
}

std::optional<BestIndividual> best_individual(const std::vector<Ingredient> & ingredients,
                                              const RecipeConfig & config, Evaluator & evaluator) {
    if (!config.report_best_individual) {
        return std::nullopt;
    }
    const Ingredient * best = nullptr;
    for (const auto & ing : ingredients) {
        if (!best || *ing.val_acc > *best->val_acc || (*ing.val_acc == *best->val_acc && ing.id < best->id)) {
            best = &ing;
        }
    }
    return BestIndividual{best->id, *best->val_acc, evaluator.evaluate(*best->checkpoint, Split::test)};
}

std::vector<Ingredient> prepared(const std::vector<Ingredient> & ingredients, Evaluator & evaluator) {
    if (ingredients.empty()) {
        throw Error("a soup needs at least one ingredient");
    }
    check_unique_ids(ingredients);
    std::vector<Ingredient> out = ingredients;
    cache_val_acc(out, evaluator);
    return out;
}

} // namespace

SoupResult uniform_soup(const std::vector<Ingredient> & ingredients, Evaluator & evaluator, const RecipeConfig & config) {
    auto ings = prepared(ingredients, evaluator);
    SoupResult result{SoupReport{}, TensorMap{}};
    auto & report = result.report;
    report.method = Method::uniform;
    report.strategy = config.strategy;
    report.seed = config.seed;

    SoupState state;
    std::int64_t step = 0;
    for (const auto & ing : ings) {
        state = soup_add(state, ing);
        report.history.push_back({++step, ing.id, Action::added, 0.0, false, 0});
    }
    result.soup = materialize(state);
    report.val_acc = evaluator.evaluate(result.soup, Split::selection);
    report.test_acc = evaluator.evaluate(result.soup, Split::test);
    // acc_after for uniform entries is the final soup's accuracy; no intermediate soup is evaluated
    for (auto & h : report.history) {
        h.acc_after = report.val_acc;
    }
    report.final_ids = state.included();
    report.n_ingredients = static_cast<std::int64_t>(state.count());
    report.best_individual = best_individual(ings, config, evaluator);
    return result;
}

SoupResult greedy_soup(const std::vector<Ingredient> & ingredients, const RecipeConfig & config, Evaluator & evaluator) {
    validate_config(config);
    const auto ordered = order_ingredients(prepared(ingredients, evaluator), config.strategy, config.seed);

    SoupResult result{SoupReport{}, TensorMap{}};
    auto & report = result.report;
    report.method = Method::greedy;
    report.strategy = config.strategy;
    report.seed = config.seed;

    SoupState soup;
    double baseline = 0.0;
    std::int64_t step = 0;
    for (const auto & ing : ordered) {
        if (config.max_ingredients && static_cast<std::int64_t>(soup.count()) >= *config.max_ingredients) {
            break;
        }
        HistoryEntry entry{++step, ing.id, Action::added, 0.0, false, 0};
        SoupState candidate = soup_add(soup, ing);
        const double acc = evaluate_candidate(evaluator, materialize(candidate), Split::selection, report.history, entry);
        entry.acc_after = acc;
        if (acc >= baseline) {
            baseline = acc;
            soup = std::move(candidate);
        } else {
            entry.action = Action::rejected;
        }
        report.history.push_back(entry);
    }

    result.soup = materialize(soup);
    report.final_ids = soup.included();
    report.n_ingredients = static_cast<std::int64_t>(soup.count());
    report.val_acc = baseline;
    report.test_acc = evaluator.evaluate(result.soup, Split::test);
    report.best_individual = best_individual(ordered, config, evaluator);
    return result;
}

SoupResult pruned_soup(const std::vector<Ingredient> & ingredients, const RecipeConfig & config, Evaluator & evaluator) {
    validate_config(config);
    const auto ordered = order_ingredients(prepared(ingredients, evaluator), config.strategy, config.seed);

    SoupResult result{SoupReport{}, TensorMap{}};
    auto & report = result.report;
    report.method = Method::pruned;
    report.strategy = config.strategy;
    report.seed = config.seed;

    SoupState soup;
    for (const auto & ing : ordered) {
        soup = soup_add(soup, ing);
    }
    double baseline = evaluate_candidate(evaluator, materialize(soup), Split::selection, report.history,
                                         HistoryEntry{0, "<uniform>", Action::kept, 0.0, false, 0});

    std::int64_t step = 0;
    for (std::int64_t pass = 1; pass <= config.passes; ++pass) {
        for (const auto & ing : ordered) {
            if (!soup.contains(ing.id)) {
                continue;
            }
            HistoryEntry entry{++step, ing.id, Action::removed, 0.0, false, pass};
            if (soup.count() == 1) {
                entry.action = Action::kept;
                entry.guard = true;
                entry.acc_after = baseline;
                report.history.push_back(entry);
                continue;
            }
            SoupState candidate = soup_remove(soup, ing.id);
            const double acc = evaluate_candidate(evaluator, materialize(candidate), Split::selection, report.history, entry);
            entry.acc_after = acc;
            if (acc >= baseline) {
                baseline = acc;
                soup = std::move(candidate);
            } else {
                entry.action = Action::kept;
            }
            report.history.push_back(entry);
        }
    }

    result.soup = materialize(soup);
    report.final_ids = soup.included();
    report.n_ingredients = static_cast<std::int64_t>(soup.count());
    report.val_acc = baseline;
    report.test_acc = evaluator.evaluate(result.soup, Split::test);
    report.best_individual = best_individual(ordered, config, evaluator);
    return result;
}

SoupResult run_once(const std::vector<Ingredient> & ingredients, const RecipeConfig & config, Evaluator & evaluator) {
    switch (config.method) {
        case Method::uniform: return uniform_soup(ingredients, evaluator, config);
        case Method::greedy:  return greedy_soup(ingredients, config, evaluator);
        case Method::pruned:  return pruned_soup(ingredients, config, evaluator);
    }
    throw Error("unknown method");
}

AggregateReport run_recipe(const std::vector<Ingredient> & ingredients, const RecipeConfig & config,
                           Evaluator & evaluator) {
    validate_config(config);
    AggregateReport agg;
    agg.method = config.method;
    agg.strategy = config.strategy;
    agg.seed = config.seed;

    const bool deterministic = config.method == Method::uniform || config.strategy == Strategy::sorted;
    agg.runs = deterministic ? 1 : config.runs;

    // individual accuracies are evaluated once for all runs
    std::vector<Ingredient> ings = ingredients;
    cache_val_acc(ings, evaluator);

    RecipeConfig run_config = config;
    for (std::int64_t r = 0; r < agg.runs; ++r) {
        run_config.seed = config.seed + static_cast<std::uint64_t>(r);
        run_config.report_best_individual = config.report_best_individual && r == 0;
        auto report = run_once(ings, run_config, evaluator).report;
        if (r == 0) {
            agg.best_individual = report.best_individual;
        } else {
            report.best_individual = agg.best_individual;
        }
        agg.reports.push_back(std::move(report));
    }

    const double n = static_cast<double>(agg.runs);
    for (const auto & r : agg.reports) {
        agg.mean_val_acc += r.val_acc;
        agg.mean_test_acc += r.test_acc;
        agg.mean_ingredients += static_cast<double>(r.n_ingredients);
    }
    agg.mean_val_acc /= n;
    agg.mean_test_acc /= n;
    agg.mean_ingredients /= n;
    if (agg.runs > 1) {
        double sv = 0.0;
        double st = 0.0;
        for (const auto & r : agg.reports) {
            sv += (r.val_acc - agg.mean_val_acc) * (r.val_acc - agg.mean_val_acc);
            st += (r.test_acc - agg.mean_test_acc) * (r.test_acc - agg.mean_test_acc);
        }
        agg.std_val_acc = std::sqrt(sv / (n - 1.0));
        agg.std_test_acc = std::sqrt(st / (n - 1.0));
    }
    return agg;
}

} // namespace soup
