// SPDX-License-Identifier: Apache-2.0
//
// Test-only helpers: a scripted evaluator whose answers come from a lookup table over ingredient
// subsets, and plain re-implementations of the greedy and pruned recipes that work on subset
// bitmasks instead of tensors.
#pragma once

#include "soup/soup_engine.hpp"
#include "soup/tensor_store.hpp"
#include "soup/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace soup::testing {

// Ingredient i carries a one-hot "mask" tensor of length k plus some payload. Any uniform average of
// a subset S has mask[i] != 0 exactly for i in S, so the subset can be read back from the soup.
inline std::vector<Ingredient> one_hot_ingredients(int k, std::uint64_t seed = 0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::vector<Ingredient> out;
    for (int i = 0; i < k; ++i) {
        Tensor mask{"mask", {k}, std::vector<float>(static_cast<std::size_t>(k), 0.0f)};
        mask.data[static_cast<std::size_t>(i)] = 1.0f;
        Tensor payload{"payload", {2, 3}, std::vector<float>(6)};
        for (auto & v : payload.data) {
            v = normal(rng);
        }
        out.push_back({"ing" + std::to_string(i),
                       std::make_shared<const TensorMap>(std::vector<Tensor>{mask, payload}), CheckpointMeta{},
                       std::nullopt});
    }
    return out;
}

inline std::uint32_t decode_mask(const TensorMap & map) {
    std::uint32_t m = 0;
    const auto & mask = map.at("mask").data;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i] != 0.0f) {
            m |= 1u << i;
        }
    }
    return m;
}

// Accuracy per subset bitmask and split. Values are multiples of 1/8 so ties are frequent and
// every value is exactly representable in JSON and binary.
struct AccuracyTable {
    int k = 0;
    std::vector<double> selection;
    std::vector<double> test;

    double at(std::uint32_t mask, Split split) const { return (split == Split::selection ? selection : test)[mask]; }
};

inline AccuracyTable random_table(int k, std::mt19937_64 & rng) {
    std::uniform_int_distribution<int> level(0, 8);
    AccuracyTable t;
    t.k = k;
    t.selection.resize(std::size_t{1} << k);
    t.test.resize(std::size_t{1} << k);
    for (std::size_t m = 0; m < t.selection.size(); ++m) {
        t.selection[m] = level(rng) / 8.0;
        t.test[m] = level(rng) / 8.0;
    }
    return t;
}

class ScriptedEvaluator : public Evaluator {
public:
    explicit ScriptedEvaluator(AccuracyTable table) : table_(std::move(table)) {}

    double evaluate(const TensorMap & map, Split split) override {
        const auto mask = decode_mask(map);
        if (mask == 0) {
            throw Error("scripted evaluator asked to score an empty soup");
        }
        ++(split == Split::selection ? selection_calls : test_calls);
        return table_.at(mask, split);
    }

    std::int64_t selection_calls = 0;
    std::int64_t test_calls = 0;

private:
    AccuracyTable table_;
};

struct OracleStep {
    int index;
    std::string action;  // added, rejected, removed, kept, kept-guard
    double acc;
};

struct OracleResult {
    std::uint32_t final_mask = 0;
    std::vector<OracleStep> steps;
};

// Sorted order computed straight from the table: descending single-model accuracy, ties by id
// "ing<i>" ascending (i < 10, so numeric order).
inline std::vector<int> oracle_sorted_order(const AccuracyTable & table) {
    std::vector<int> order(static_cast<std::size_t>(table.k));
    for (int i = 0; i < table.k; ++i) order[static_cast<std::size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        const double va = table.selection[1u << a];
        const double vb = table.selection[1u << b];
        return va != vb ? va > vb : a < b;
    });
    return order;
}

// Greedy over bitmasks: start empty with a zero baseline, try each index in order, keep it when the
// table score of the grown set is at least the baseline. cap > 0 stops once the set has cap members.
inline OracleResult greedy_oracle(const AccuracyTable & table, const std::vector<int> & order, int cap) {
    OracleResult r;
    std::uint32_t soup = 0;
    double baseline = 0;
    for (int i : order) {
        if (cap > 0 && std::popcount(soup) >= cap) break;
        const std::uint32_t next = soup | (1u << i);
        const double acc = table.selection[next];
        if (acc >= baseline) {
            baseline = acc;
            soup = next;
            r.steps.push_back({i, "added", acc});
        } else {
            r.steps.push_back({i, "rejected", acc});
        }
    }
    r.final_mask = soup;
    return r;
}

// Pruning over bitmasks: start from the full set and its score, then for each pass try dropping every
// index still present, keeping the smaller set when its score is at least the baseline.
// A removal that would empty the set is refused without a lookup.
inline OracleResult pruned_oracle(const AccuracyTable & table, const std::vector<int> & order, int passes) {
    OracleResult r;
    std::uint32_t soup = (1u << table.k) - 1;
    double baseline = table.selection[soup];
    for (int pass = 0; pass < passes; ++pass) {
        for (int i : order) {
            if (!(soup & (1u << i))) continue;
            if (std::popcount(soup) == 1) {
                r.steps.push_back({i, "kept-guard", baseline});
                continue;
            }
            const std::uint32_t next = soup & ~(1u << i);
            const double acc = table.selection[next];
            if (acc >= baseline) {
                baseline = acc;
                soup = next;
                r.steps.push_back({i, "removed", acc});
            } else {
                r.steps.push_back({i, "kept", acc});
            }
        }
    }
    r.final_mask = soup;
    return r;
}

inline std::uint32_t mask_of(const std::vector<std::string> & ids) {
    std::uint32_t m = 0;
    for (const auto & id : ids) {
        m |= 1u << std::stoi(id.substr(3));
    }
    return m;
}

// Engine history in oracle vocabulary.
inline std::vector<OracleStep> as_oracle_steps(const std::vector<HistoryEntry> & history) {
    std::vector<OracleStep> out;
    for (const auto & h : history) {
        std::string action = to_string(h.action);
        if (h.guard) action = "kept-guard";
        out.push_back({std::stoi(h.candidate_id.substr(3)), action, h.acc_after});
    }
    return out;
}

inline bool same_steps(const std::vector<OracleStep> & a, const std::vector<OracleStep> & b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].index != b[i].index || a[i].action != b[i].action || a[i].acc != b[i].acc) return false;
    }
    return true;
}

inline TensorMap random_map(std::mt19937_64 & rng, const std::vector<Shape> & shapes, float scale = 1.0f) {
    std::normal_distribution<float> normal(0.0f, scale);
    std::vector<Tensor> entries;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        Tensor t{"t" + std::to_string(i), shapes[i], std::vector<float>(static_cast<std::size_t>(element_count(shapes[i])))};
        for (auto & v : t.data) v = normal(rng);
        entries.push_back(std::move(t));
    }
    return TensorMap(std::move(entries));
}

// max over elements of |a - b| / max(|a|, |b|); 0/0 counts as 0.
inline double max_rel_error(const TensorMap & a, const TensorMap & b) {
    double worst = 0.0;
    for (const auto & t : a.entries()) {
        const auto & u = b.at(t.name).data;
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            const double x = t.data[i];
            const double y = u[i];
            const double denom = std::max(std::abs(x), std::abs(y));
            if (denom > 0) worst = std::max(worst, std::abs(x - y) / denom);
        }
    }
    return worst;
}

// distance in units in the last place between two floats of the same sign
inline std::int64_t max_ulp_distance(const TensorMap & a, const TensorMap & b) {
    std::int64_t worst = 0;
    for (const auto & t : a.entries()) {
        const auto & u = b.at(t.name).data;
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            const auto x = std::bit_cast<std::int32_t>(t.data[i]);
            const auto y = std::bit_cast<std::int32_t>(u[i]);
            worst = std::max<std::int64_t>(worst, std::abs(static_cast<std::int64_t>(x) - y));
        }
    }
    return worst;
}

// Which hidden units are active for each example of the batch, from a plain scalar forward pass.
inline std::vector<bool> relu_pattern(const TensorMap & params, const MlpArch & arch, const Dataset & data,
                                      std::span<const std::size_t> batch) {
    std::vector<bool> out;
    for (auto row : batch) {
        const auto x = data.row(row);
        std::vector<double> a(x.begin(), x.end());
        for (std::size_t l = 0; l + 1 < arch.layer_count(); ++l) {
            const auto & w = params.at(weight_name(l)).data;
            const auto & b = params.at(bias_name(l)).data;
            std::vector<double> z(b.size());
            for (std::size_t o = 0; o < z.size(); ++o) {
                double s = b[o];
                for (std::size_t i = 0; i < a.size(); ++i) s += double(w[o * a.size() + i]) * a[i];
                out.push_back(s > 0);
                z[o] = std::max(s, 0.0);
            }
            a = std::move(z);
        }
    }
    return out;
}

struct GradCheck {
    double max_rel_error = 0.0;
    std::int64_t compared = 0;
    // steps whose two probes sit on different sides of a ReLU kink, where the difference quotient
    // does not estimate the derivative
    std::int64_t kink_skipped = 0;
};

// Backprop against central differences over every parameter. Perturbations are applied to the f32
// weights, and the difference quotient divides by the step that was actually representable.
// Error per element is |a - b| / max(|a|, |b|, floor).
inline GradCheck gradient_check(const TensorMap & params, const MlpArch & arch, const Dataset & data,
                                std::span<const std::size_t> batch, double h = 1e-4, double floor = 1e-7) {
    const auto grads = loss_and_grad(params, arch, data, batch).grads;
    TensorMap probe = params;
    GradCheck out;
    for (std::size_t e = 0; e < probe.size(); ++e) {
        auto values = probe.data(e);
        for (std::size_t i = 0; i < values.size(); ++i) {
            const float orig = values[i];
            const float up = static_cast<float>(orig + h);
            const float down = static_cast<float>(orig - h);
            values[i] = up;
            const double lu = batch_loss(probe, arch, data, batch);
            const auto pu = relu_pattern(probe, arch, data, batch);
            values[i] = down;
            const double ld = batch_loss(probe, arch, data, batch);
            const auto pd = relu_pattern(probe, arch, data, batch);
            values[i] = orig;
            if (pu != pd) {
                ++out.kink_skipped;
                continue;
            }
            const double fd = (lu - ld) / (static_cast<double>(up) - static_cast<double>(down));
            const double bp = grads[e][i];
            const double denom = std::max({std::abs(fd), std::abs(bp), floor});
            out.max_rel_error = std::max(out.max_rel_error, std::abs(fd - bp) / denom);
            ++out.compared;
        }
    }
    return out;
}

} // namespace soup::testing
