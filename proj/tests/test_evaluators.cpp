// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "support.hpp"

#include "soup/evaluators.hpp"
#include "soup/reports.hpp"

#include <chrono>
#include <filesystem>
#include <numeric>
#include <set>

using namespace soup;
using namespace soup::testing;

namespace {

// Plain scalar forward pass: f32 weights, double sums, bias first, ReLU between layers.
std::uint32_t scalar_predict(const TensorMap & p, const MlpArch & arch, std::span<const float> x) {
    std::vector<double> a(x.begin(), x.end());
    for (std::size_t l = 0; l < arch.layer_count(); ++l) {
        const auto & w = p.at("layer" + std::to_string(l) + ".weight");
        const auto & b = p.at("layer" + std::to_string(l) + ".bias");
        const auto n_out = static_cast<std::size_t>(w.shape[0]);
        const auto n_in = static_cast<std::size_t>(w.shape[1]);
        std::vector<double> z(n_out);
        for (std::size_t o = 0; o < n_out; ++o) {
            double s = b.data[o];
            for (std::size_t i = 0; i < n_in; ++i) s += double(w.data[o * n_in + i]) * a[i];
            z[o] = (l + 1 < arch.layer_count()) ? std::max(s, 0.0) : s;
        }
        a = std::move(z);
    }
    return static_cast<std::uint32_t>(std::max_element(a.begin(), a.end()) - a.begin());
}

std::filesystem::path scratch_dir(const std::string & name) {
    const auto d = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(d);
    std::filesystem::create_directories(d);
    return d;
}

ExternalEvaluator stub(const std::string & mode, const std::filesystem::path & scratch,
                       std::chrono::milliseconds timeout = std::chrono::milliseconds(20000)) {
    ExternalConfig cfg;
    cfg.command = STUB_EVALUATOR;
    cfg.extra_args = {"--mode", mode};
    cfg.timeout = timeout;
    cfg.scratch_dir = scratch;
    return ExternalEvaluator(cfg);
}

ExternalErrorKind failure_kind(ExternalEvaluator & ev, const TensorMap & map) {
    try {
        ev.evaluate(map, Split::selection);
    } catch (const ExternalEvalError & e) {
        return e.kind();
    }
    FAIL("evaluation unexpectedly succeeded");
    return ExternalErrorKind::launch;
}

} // namespace

TEST_CASE("split indices") {
    SUBCASE("even pool splits in half and partitions it") {
        const auto [sel, test] = split_indices(10000, 0.5, 0);
        CHECK(sel.size() == 5000);
        CHECK(test.size() == 5000);
        std::set<std::size_t> all(sel.begin(), sel.end());
        all.insert(test.begin(), test.end());
        CHECK(all.size() == 10000);
        CHECK(*all.rbegin() == 9999);
    }
    SUBCASE("odd pool goes either way, by seed") {
        std::set<std::size_t> sizes;
        for (std::uint64_t s = 0; s < 32; ++s) {
            const auto [sel, test] = split_indices(7, 0.5, s);
            CHECK(sel.size() + test.size() == 7);
            sizes.insert(sel.size());
        }
        CHECK(sizes == std::set<std::size_t>{3, 4});
    }
    SUBCASE("both sides keep at least one example") {
        CHECK(split_indices(7, 0.999, 1).first.size() == 6);
        CHECK(split_indices(7, 0.001, 1).first.size() == 1);
        CHECK(split_indices(2, 0.5, 1).first.size() == 1);
    }
    SUBCASE("deterministic and seed dependent") {
        CHECK(split_indices(100, 0.3, 4) == split_indices(100, 0.3, 4));
        CHECK(split_indices(100, 0.3, 4) != split_indices(100, 0.3, 5));
    }
    SUBCASE("bad inputs") {
        CHECK_THROWS_AS(split_indices(10, 0.0, 0), Error);
        CHECK_THROWS_AS(split_indices(10, 1.0, 0), Error);
        CHECK_THROWS_AS(split_indices(1, 0.5, 0), Error);
    }
}

TEST_CASE("builtin evaluator") {
    const MlpArch arch;
    const auto data = generate_dataset(DataParams{});
    const auto splits = make_splits(data.heldout, 0.5, 0);
    BuiltinEvaluator ev(arch, splits);

    SUBCASE("matches a scalar forward pass exactly") {
        const auto p = init_mlp(arch, 12);
        std::size_t correct = 0;
        const auto & d = ev.data(Split::test);
        for (std::size_t i = 0; i < d.size(); ++i) correct += scalar_predict(p, arch, d.row(i)) == d.labels[i];
        CHECK(ev.evaluate(p, Split::test) == static_cast<double>(correct) / static_cast<double>(d.size()));
    }
    SUBCASE("all-zero weights predict class 0") {
        auto p = init_mlp(arch, 1);
        for (std::size_t e = 0; e < p.size(); ++e) {
            for (auto & v : p.data(e)) v = 0.0f;
        }
        const auto & d = ev.data(Split::selection);
        const auto zeros = std::count(d.labels.begin(), d.labels.end(), 0u);
        CHECK(ev.evaluate(p, Split::selection) == static_cast<double>(zeros) / static_cast<double>(d.size()));
    }
    SUBCASE("random init sits near chance") {
        double mean = 0;
        const int inits = 10;
        for (int s = 0; s < inits; ++s) mean += ev.evaluate(init_mlp(arch, 100 + s), Split::test) / inits;
        const double sigma = std::sqrt(0.1 * 0.9 / 2000.0);
        CHECK(std::abs(mean - 0.1) <= 4 * sigma);
    }
    SUBCASE("wrong architecture is refused") {
        const MlpArch other{16, {8}, 10};
        CHECK_THROWS_AS(BuiltinEvaluator(other, splits), Error);
    }
}

TEST_CASE("external output parsing") {
    CHECK(parse_external_output("{\"accuracy\": 0.25, \"n\": 4}\n", "") == 0.25);
    CHECK(parse_external_output("{\"accuracy\": 1, \"n\": 4}", "") == 1.0);
    auto kind = [](const std::string & out) {
        try {
            parse_external_output(out, "err");
        } catch (const ExternalEvalError & e) {
            CHECK(e.stderr_text() == "err");
            return e.kind();
        }
        return ExternalErrorKind::launch;
    };
    CHECK(kind("") == ExternalErrorKind::malformed_output);
    CHECK(kind("0.5\n") == ExternalErrorKind::malformed_output);
    CHECK(kind("{\"accuracy\": \"0.5\", \"n\": 4}") == ExternalErrorKind::malformed_output);
    CHECK(kind("{\"accuracy\": 0.5, \"n\": 2.5}") == ExternalErrorKind::malformed_output);
    CHECK(kind("{\"accuracy\": 0.5}") == ExternalErrorKind::malformed_output);
    CHECK(kind("{\"accuracy\": 0.5, \"n\": 0}") == ExternalErrorKind::malformed_output);
    CHECK(kind("{\"accuracy\": 0.5, \"n\": 1}\n{}\n") == ExternalErrorKind::malformed_output);
    CHECK(kind("{\"accuracy\": -0.1, \"n\": 1}") == ExternalErrorKind::out_of_range);
    CHECK(kind("{\"accuracy\": 1.5, \"n\": 1}") == ExternalErrorKind::out_of_range);
}

TEST_CASE("external evaluator against the stub") {
    const auto scratch = scratch_dir("soup_ext_test");
    const TensorMap map(std::vector<Tensor>{{"mask", {2}, {1.0f, 0.0f}}});

    SUBCASE("success") {
        auto ev = stub("ok", scratch);
        CHECK(ev.evaluate(map, Split::test) == 0.75);
        CHECK(ev.invocations() == 1);
    }
    SUBCASE("nonzero exit keeps stderr") {
        auto ev = stub("fail", scratch);
        try {
            ev.evaluate(map, Split::selection);
            FAIL("no error");
        } catch (const ExternalEvalError & e) {
            CHECK(e.kind() == ExternalErrorKind::exit_status);
            CHECK(e.stderr_text().find("simulated failure") != std::string::npos);
        }
    }
    SUBCASE("malformed output") {
        auto ev = stub("malformed", scratch);
        CHECK(failure_kind(ev, map) == ExternalErrorKind::malformed_output);
        auto ev2 = stub("two-lines", scratch);
        CHECK(failure_kind(ev2, map) == ExternalErrorKind::malformed_output);
        auto ev3 = stub("zero-n", scratch);
        CHECK(failure_kind(ev3, map) == ExternalErrorKind::malformed_output);
    }
    SUBCASE("out of range") {
        auto ev = stub("range", scratch);
        CHECK(failure_kind(ev, map) == ExternalErrorKind::out_of_range);
    }
    SUBCASE("timeout kills the process") {
        auto ev = stub("sleep", scratch, std::chrono::milliseconds(300));
        const auto t0 = std::chrono::steady_clock::now();
        CHECK(failure_kind(ev, map) == ExternalErrorKind::timeout);
        CHECK(std::chrono::steady_clock::now() - t0 < std::chrono::seconds(10));
    }
    SUBCASE("missing command") {
        ExternalConfig cfg;
        cfg.command = "/nonexistent/evaluator";
        cfg.scratch_dir = scratch;
        ExternalEvaluator ev(cfg);
        CHECK(failure_kind(ev, map) == ExternalErrorKind::launch);
    }
    CHECK(std::filesystem::is_empty(scratch));
    std::filesystem::remove_all(scratch);
}

TEST_CASE("greedy through the stub matches the in-process table") {
    const auto scratch = scratch_dir("soup_ext_greedy");
    std::mt19937_64 rng(31);
    const auto table = random_table(5, rng);
    write_text(scratch / "table.json", nlohmann::json{{"selection", table.selection}, {"test", table.test}}.dump());
    ExternalConfig cfg;
    cfg.command = STUB_EVALUATOR;
    cfg.extra_args = {"--mode", "table", "--table", (scratch / "table.json").string()};
    cfg.scratch_dir = scratch / "tmp";
    std::filesystem::create_directories(cfg.scratch_dir);
    ExternalEvaluator external(cfg);
    ScriptedEvaluator local(table);
    RecipeConfig rc;
    rc.strategy = Strategy::random;
    rc.seed = 3;
    const auto a = greedy_soup(one_hot_ingredients(5), rc, external).report;
    const auto b = greedy_soup(one_hot_ingredients(5), rc, local).report;
    CHECK(a == b);
    CHECK(std::filesystem::is_empty(cfg.scratch_dir));
    std::filesystem::remove_all(scratch);
}
