// SPDX-License-Identifier: Apache-2.0
//
// soup: train a hyperparameter grid, cook uniform/greedy/pruned soups, sweep ablations, render tables.
//
// Exit codes: 0 success, 1 operational failure, 2 invalid flags.

#include "soup/commands.hpp"

#include "CLI11.hpp"

#include <iostream>

int main(int argc, char ** argv) {
    using namespace soup;

    CLI::App app{"Model soups: checkpoint averaging over a fine-tuning grid"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string manifest;
    EvaluatorSpec evaluator;
    std::uint64_t seed = 0;
    bool json_logs = false;
    app.add_option("--manifest", manifest, "Grid manifest (manifest.json)");
    app.add_option("--evaluator", evaluator.spec, "builtin | command:<path>")->capture_default_str();
    app.add_option("--evaluator-timeout-ms", evaluator.timeout_ms, "External evaluator timeout")->capture_default_str();
    app.add_flag("--evaluator-concurrent", evaluator.concurrency_safe,
                 "External evaluator may run several invocations at once");
    app.add_option("--seed", seed, "Seed for every random choice")->capture_default_str();
    app.add_flag("--json-logs", json_logs, "Log as JSON lines on stderr");

    const std::map<std::string, Method> methods{{"uniform", Method::uniform}, {"greedy", Method::greedy},
                                                {"pruned", Method::pruned}};
    const std::map<std::string, Strategy> strategies{{"sorted", Strategy::sorted}, {"random", Strategy::random}};

    // train-grid
    TrainGridOptions tg;
    std::string mode = "shared";
    std::vector<std::int64_t> hidden = tg.arch.hidden_dims;
    auto * train_cmd = app.add_subcommand("train-grid", "Generate data and fine-tune the lr x wd grid");
    train_cmd->add_option("--out", tg.out_dir, "Output directory")->required();
    train_cmd->add_option("--mode", mode, "shared | independent")
        ->check(CLI::IsMember({"shared", "independent"}))
        ->capture_default_str();
    train_cmd->add_option("--lr", tg.grid.learning_rates, "Learning rates")->capture_default_str();
    train_cmd->add_option("--wd", tg.grid.weight_decays, "Weight decays")->capture_default_str();
    train_cmd->add_option("--momentum", tg.grid.momentum)->capture_default_str();
    train_cmd->add_option("--epochs", tg.grid.epochs)->check(CLI::NonNegativeNumber)->capture_default_str();
    train_cmd->add_option("--batch-size", tg.grid.batch_size)->check(CLI::PositiveNumber)->capture_default_str();
    train_cmd->add_option("--pretrain-epochs", tg.pretrain.epochs)->check(CLI::NonNegativeNumber)->capture_default_str();
    train_cmd->add_option("--hidden", hidden, "Hidden layer widths")->capture_default_str();
    train_cmd->add_option("--input-dim", tg.data.input_dim)->check(CLI::PositiveNumber)->capture_default_str();
    train_cmd->add_option("--classes", tg.data.classes)->check(CLI::Range(2, 1 << 20))->capture_default_str();
    train_cmd->add_option("--clusters", tg.data.clusters_per_class)->check(CLI::PositiveNumber)->capture_default_str();
    train_cmd->add_option("--n-train", tg.data.n_train)->check(CLI::PositiveNumber)->capture_default_str();
    train_cmd->add_option("--n-heldout", tg.data.n_heldout)->check(CLI::PositiveNumber)->capture_default_str();
    train_cmd->add_option("--separation", tg.data.separation, "Cluster centre scale")->capture_default_str();
    train_cmd->add_option("--spread", tg.data.spread, "Within-cluster noise")->capture_default_str();
    train_cmd->add_option("--selection-fraction", tg.selection_fraction)
        ->check(CLI::Range(0.0, 1.0))
        ->capture_default_str();
    train_cmd->add_option("--split-seed", tg.split_seed)->capture_default_str();

    // soup
    SoupOptions so;
    std::string method = "greedy";
    std::string strategy = "sorted";
    std::int64_t max_ingredients = 0;
    auto * soup_cmd = app.add_subcommand("soup", "Run one soup recipe and write a report");
    soup_cmd->add_option("--method", method)->check(CLI::IsMember({"uniform", "greedy", "pruned"}))->capture_default_str();
    soup_cmd->add_option("--strategy", strategy)->check(CLI::IsMember({"sorted", "random"}))->capture_default_str();
    soup_cmd->add_option("--runs", so.recipe.runs)->check(CLI::PositiveNumber)->capture_default_str();
    soup_cmd->add_option("--passes", so.recipe.passes)->check(CLI::PositiveNumber)->capture_default_str();
    soup_cmd->add_option("--max-ingredients", max_ingredients, "0 = unlimited")->check(CLI::NonNegativeNumber);
    soup_cmd->add_option("--out", so.out, "Report path");
    soup_cmd->add_flag("--include-diverged", so.include_diverged);

    // ablate
    AblateOptions ab;
    std::string ab_method;
    std::vector<std::string> ab_strategies = {"sorted", "random"};
    auto * ablate_cmd = app.add_subcommand("ablate", "Sweep max_ingredients or passes");
    ablate_cmd->add_option("--sweep", ab.sweep)->required()->check(CLI::IsMember({"max_ingredients", "passes"}));
    ablate_cmd->add_option("--from", ab.from)->check(CLI::PositiveNumber)->capture_default_str();
    ablate_cmd->add_option("--to", ab.to)->check(CLI::PositiveNumber)->capture_default_str();
    ablate_cmd->add_option("--method", ab_method)->check(CLI::IsMember({"greedy", "pruned"}));
    ablate_cmd->add_option("--strategy", ab_strategies)->check(CLI::IsMember({"sorted", "random"}))->capture_default_str();
    ablate_cmd->add_option("--runs", ab.runs)->check(CLI::PositiveNumber)->capture_default_str();
    ablate_cmd->add_option("--passes", ab.passes, "Pass count when sweeping max_ingredients")
        ->check(CLI::PositiveNumber);
    ablate_cmd->add_option("--out", ab.out_dir, "Output directory");
    ablate_cmd->add_flag("--include-diverged", ab.include_diverged);

    // report
    ReportOptions ro;
    auto * report_cmd = app.add_subcommand("report", "Merge soup reports into one table");
    report_cmd->add_option("reports", ro.reports, "Report JSON files")->required();
    report_cmd->add_option("--out", ro.out, "Table path");
    report_cmd->add_option("--format", ro.format)->check(CLI::IsMember({"md", "csv"}))->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp & e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp & e) {
        return app.exit(e);
    } catch (const CLI::ParseError & e) {
        app.exit(e);
        return 2;
    }

    const Logger log(std::cerr, json_logs);
    try {
        if (*train_cmd) {
            tg.mode = parse_init_mode(mode);
            tg.seed = seed;
            tg.data.seed = seed;
            tg.arch.input_dim = tg.data.input_dim;
            tg.arch.classes = tg.data.classes;
            tg.arch.hidden_dims = hidden;
            std::cout << cmd_train_grid(tg, log).string() << '\n';
        } else if (*soup_cmd || *ablate_cmd) {
            if (manifest.empty()) {
                std::cerr << "error: --manifest is required\n";
                return 2;
            }
            if (*soup_cmd) {
                so.manifest = manifest;
                so.evaluator = evaluator;
                so.recipe.method = methods.at(method);
                so.recipe.strategy = strategies.at(strategy);
                so.recipe.seed = seed;
                if (max_ingredients > 0) {
                    so.recipe.max_ingredients = max_ingredients;
                }
                const auto path = cmd_soup(so, std::cout, log);
                std::cout << path.string() << '\n';
            } else {
                ab.manifest = manifest;
                ab.evaluator = evaluator;
                ab.seed = seed;
                if (!ab_method.empty()) {
                    ab.method = methods.at(ab_method);
                }
                ab.strategies.clear();
                for (const auto & s : ab_strategies) {
                    ab.strategies.push_back(strategies.at(s));
                }
                for (const auto & output : cmd_ablate(ab, log)) {
                    std::cout << output.json_path.string() << '\n' << output.csv_path.string() << '\n';
                }
            }
        } else if (*report_cmd) {
            const auto path = cmd_report(ro, std::cout);
            std::cout << path.string() << '\n';
        }
    } catch (const std::exception & e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
