// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "soup/evaluator.hpp"
#include "soup/trainer.hpp"

#include <atomic>
#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

namespace soup {

struct SplitSpec {
    std::filesystem::path dataset_path;
    double selection_fraction = 0.5;
    std::uint64_t split_seed = 0;
};

struct Splits {
    Dataset selection;
    Dataset test;
};

// Shuffled partition of the pool. When fraction * size is fractional, the seed decides whether the
// selection side gets the floor or the ceiling.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t pool_size, double fraction,
                                                                             std::uint64_t seed);
Splits make_splits(const Dataset & heldout_pool, double selection_fraction, std::uint64_t split_seed);
// Partitions the held-out pool of the dataset file.
Splits make_splits(const SplitSpec & spec);

// Fraction of rows where the argmax class (lowest index on ties) equals the label.
double builtin_eval(const TensorMap & map, const MlpArch & arch, const Dataset & data);

class BuiltinEvaluator : public Evaluator {
public:
    BuiltinEvaluator(MlpArch arch, Splits splits);

    double evaluate(const TensorMap & map, Split split) override;
    bool concurrency_safe() const override { return true; }

    const MlpArch & arch() const { return arch_; }
    const Dataset & data(Split split) const { return split == Split::selection ? splits_.selection : splits_.test; }

private:
    MlpArch arch_;
    Splits splits_;
};

enum class ExternalErrorKind { launch, exit_status, malformed_output, out_of_range, timeout };

const char * to_string(ExternalErrorKind kind);

class ExternalEvalError : public Error {
public:
    ExternalEvalError(ExternalErrorKind kind, const std::string & what, std::string stderr_text)
        : Error(std::string(to_string(kind)) + ": " + what +
                (stderr_text.empty() ? std::string() : "\n--- evaluator stderr ---\n" + stderr_text)),
          kind_(kind), stderr_(std::move(stderr_text)) {}
    ExternalErrorKind kind() const { return kind_; }
    const std::string & stderr_text() const { return stderr_; }

private:
    ExternalErrorKind kind_;
    std::string stderr_;
};

struct ExternalConfig {
    std::filesystem::path command;
    std::vector<std::string> extra_args;
    std::chrono::milliseconds timeout{600'000};
    bool concurrency_safe = false;
    // directory for candidate checkpoints, system temp dir when empty
    std::filesystem::path scratch_dir;
};

// One process per evaluation:
//   <command> [extra_args...] --checkpoint <file.soupt> --split <selection|test>
// and exactly one JSON line on stdout: {"accuracy": <real in [0,1]>, "n": <positive integer>}.
class ExternalEvaluator : public Evaluator {
public:
    explicit ExternalEvaluator(ExternalConfig config);

    double evaluate(const TensorMap & map, Split split) override;
    bool concurrency_safe() const override { return config_.concurrency_safe; }

    std::int64_t invocations() const { return invocations_; }

private:
    ExternalConfig config_;
    std::atomic<std::int64_t> invocations_{0};
};

// Parses the evaluator's stdout. Throws ExternalEvalError(malformed_output | out_of_range).
double parse_external_output(const std::string & stdout_text, const std::string & stderr_text);

} // namespace soup
