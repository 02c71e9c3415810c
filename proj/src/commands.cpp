// SPDX-License-Identifier: Apache-2.0
#include "soup/commands.hpp"

#include "soup/hashing.hpp"

#include <ostream>

namespace soup {

using json = nlohmann::json;

Logger::Logger(std::ostream & sink, bool json) : sink_(&sink), json_(json) {}

void Logger::info(const std::string & msg, const json & fields) const {
    if (json_) {
        json line = fields;
        line["level"] = "info";
        line["msg"] = msg;
        *sink_ << line.dump() << '\n';
        return;
    }
    *sink_ << msg;
    for (const auto & [k, v] : fields.items()) {
        *sink_ << ' ' << k << '=' << (v.is_string() ? v.get<std::string>() : v.dump());
    }
    *sink_ << '\n';
}

std::filesystem::path cmd_train_grid(const TrainGridOptions & o, const Logger & log) {
    if (o.out_dir.empty()) {
        throw Error("--out is required");
    }
    if (o.data.input_dim != o.arch.input_dim || o.data.classes != o.arch.classes) {
        throw Error("dataset and architecture disagree on input_dim/classes");
    }
    std::filesystem::create_directories(o.out_dir);

    const auto data = generate_dataset(o.data);
    const auto dataset_path = o.out_dir / "dataset.soupd";
    save_dataset(data, dataset_path);
    log.info("dataset written", {{"path", dataset_path.string()}, {"train", data.train.size()},
                                 {"heldout", data.heldout.size()}});

    BuiltinEvaluator evaluator(o.arch, make_splits(data.heldout, o.selection_fraction, o.split_seed));

    Manifest manifest;
    manifest.seed = o.seed;
    manifest.dataset_path = dataset_path.filename().string();
    manifest.dataset_hash = sha256_file(dataset_path);
    manifest.selection_fraction = o.selection_fraction;
    manifest.split_seed = o.split_seed;

    log.info("training grid", {{"mode", to_string(o.mode)}, {"cells", o.grid.size()}, {"seed", o.seed}});
    if (o.mode == InitMode::shared) {
        const TensorMap init = pretrain(o.arch, data.train, o.pretrain, o.seed);
        produce_grid(o.arch, data.train, o.grid, init, o.out_dir, evaluator, manifest);
    } else {
        produce_independent(o.arch, data.train, o.grid, o.out_dir, evaluator, manifest);
    }
    const auto manifest_path = o.out_dir / "manifest.json";
    log.info("manifest written", {{"path", manifest_path.string()}});
    return manifest_path;
}

namespace {

std::unique_ptr<Evaluator> make_evaluator(const EvaluatorSpec & spec, const Manifest & manifest, const Dataset & pool) {
    if (spec.spec == "builtin") {
        return std::make_unique<BuiltinEvaluator>(manifest.arch,
                                                  make_splits(pool, manifest.selection_fraction, manifest.split_seed));
    }
    const std::string prefix = "command:";
    if (spec.spec.rfind(prefix, 0) == 0 && spec.spec.size() > prefix.size()) {
        ExternalConfig cfg;
        cfg.command = spec.spec.substr(prefix.size());
        cfg.timeout = std::chrono::milliseconds(spec.timeout_ms);
        cfg.concurrency_safe = spec.concurrency_safe;
        return std::make_unique<ExternalEvaluator>(cfg);
    }
    throw Error("evaluator must be 'builtin' or 'command:<path>', got '" + spec.spec + "'");
}

} // namespace

LoadedPopulation load_population(const std::filesystem::path & manifest_path, const EvaluatorSpec & evaluator,
                                 bool include_diverged) {
    LoadedPopulation pop;
    pop.manifest_path = manifest_path;
    pop.manifest = load_manifest(manifest_path);
    pop.manifest_hash = sha256_file(manifest_path);
    const auto dir = manifest_path.parent_path();
    const auto dataset_path = dir / pop.manifest.dataset_path;
    const auto actual_hash = sha256_file(dataset_path);
    if (actual_hash != pop.manifest.dataset_hash) {
        throw Error("dataset '" + dataset_path.string() + "' hash " + actual_hash + " does not match manifest " +
                    pop.manifest.dataset_hash);
    }
    pop.evaluator = make_evaluator(evaluator, pop.manifest, load_dataset(dataset_path).heldout);

    for (const auto & cell : pop.manifest.cells) {
        if (cell.diverged && !include_diverged) {
            continue;
        }
        auto ckpt = load_checkpoint(dir / cell.path);
        require_arch(pop.manifest.arch, ckpt.map);
        pop.ingredients.push_back(
            {cell.cell, std::make_shared<const TensorMap>(std::move(ckpt.map)), std::move(ckpt.meta), std::nullopt});
    }
    if (pop.ingredients.empty()) {
        throw Error("manifest '" + manifest_path.string() + "' has no usable checkpoints");
    }
    return pop;
}

std::filesystem::path cmd_soup(const SoupOptions & o, std::ostream & out, const Logger & log) {
    validate_config(o.recipe);
    auto pop = load_population(o.manifest, o.evaluator, o.include_diverged);
    log.info("running recipe", {{"method", to_string(o.recipe.method)},
                                {"strategy", to_string(o.recipe.strategy)},
                                {"ingredients", pop.ingredients.size()},
                                {"seed", o.recipe.seed}});

    RunManifest run;
    run.config = {{"manifest", o.manifest.string()},
                  {"evaluator", o.evaluator.spec},
                  {"method", to_string(o.recipe.method)},
                  {"strategy", to_string(o.recipe.strategy)},
                  {"seed", o.recipe.seed},
                  {"runs", o.recipe.runs},
                  {"passes", o.recipe.passes},
                  {"max_ingredients", o.recipe.max_ingredients ? json(*o.recipe.max_ingredients) : json(nullptr)},
                  {"include_diverged", o.include_diverged}};
    run.environment = environment_stamp();
    run.dataset_hash = pop.manifest.dataset_hash;
    run.manifest_hash = pop.manifest_hash;
    run.result = run_recipe(pop.ingredients, o.recipe, *pop.evaluator);

    auto path = o.out;
    if (path.empty()) {
        path = o.manifest.parent_path() /
               ("report-" + std::string(to_string(o.recipe.method)) + "-" + to_string(o.recipe.strategy) + ".json");
    }
    write_text(path, to_json(run).dump(2) + "\n");
    out << render_markdown(run.rows());
    log.info("report written", {{"path", path.string()}});
    return path;
}

std::vector<AblationOutput> cmd_ablate(const AblateOptions & o, const Logger & log) {
    if (o.sweep != "max_ingredients" && o.sweep != "passes") {
        throw Error("--sweep must be max_ingredients or passes");
    }
    if (o.from < 1 || o.to < o.from) {
        throw Error("sweep range must satisfy 1 <= from <= to");
    }
    const Method method = o.method.value_or(o.sweep == "passes" ? Method::pruned : Method::greedy);
    if (o.sweep == "passes" && method != Method::pruned) {
        throw Error("a passes sweep needs --method pruned");
    }
    if (o.sweep == "max_ingredients" && method != Method::greedy) {
        throw Error("a max_ingredients sweep needs --method greedy");
    }

    auto pop = load_population(o.manifest, o.evaluator, o.include_diverged);
    cache_val_acc(pop.ingredients, *pop.evaluator);
    const auto out_dir = o.out_dir.empty() ? o.manifest.parent_path() : o.out_dir;
    std::filesystem::create_directories(out_dir);

    std::vector<AblationOutput> outputs;
    for (Strategy strategy : o.strategies) {
        AblationCurve curve;
        curve.x_name = o.sweep;
        curve.method = method;
        curve.strategy = strategy;
        curve.seed = o.seed;
        curve.runs = strategy == Strategy::random ? o.runs : 1;
        for (std::int64_t x = o.from; x <= o.to; ++x) {
            RecipeConfig cfg;
            cfg.method = method;
            cfg.strategy = strategy;
            cfg.seed = o.seed;
            cfg.runs = o.runs;
            cfg.passes = o.passes;
            cfg.report_best_individual = false;
            if (o.sweep == "passes") {
                cfg.passes = x;
            } else {
                cfg.max_ingredients = x;
            }
            curve.points.push_back(curve_point(x, run_recipe(pop.ingredients, cfg, *pop.evaluator)));
            log.info("sweep point", {{"strategy", to_string(strategy)},
                                     {o.sweep, x},
                                     {"mean_acc", curve.points.back().mean_acc},
                                     {"mean_ingredients", curve.points.back().mean_ingredients}});
        }
        const std::string stem =
            "ablation-" + o.sweep + "-" + to_string(method) + "-" + to_string(strategy);
        AblationOutput output{curve, out_dir / (stem + ".json"), out_dir / (stem + ".csv")};
        write_text(output.json_path, to_json(curve).dump(2) + "\n");
        write_text(output.csv_path, render_csv(curve));
        outputs.push_back(std::move(output));
    }
    return outputs;
}

std::filesystem::path cmd_report(const ReportOptions & o, std::ostream & out) {
    if (o.reports.empty()) {
        throw Error("report needs at least one report JSON");
    }
    if (o.format != "md" && o.format != "csv") {
        throw Error("--format must be md or csv");
    }
    std::vector<RunManifest> runs;
    for (const auto & p : o.reports) {
        runs.push_back(load_run_manifest(p));
    }
    const auto rows = merge_reports(runs);
    const std::string text = o.format == "csv" ? render_csv(rows) : render_markdown(rows);
    auto path = o.out;
    if (path.empty()) {
        path = o.reports.front().parent_path() / (o.format == "csv" ? "table.csv" : "table.md");
    }
    write_text(path, text);
    out << text;
    return path;
}

} // namespace soup
