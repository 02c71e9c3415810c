// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "soup/tensor_store.hpp"

#include <string>
#include <string_view>

namespace soup {

// selection drives ordering and ingredient decisions; test is only read for final reports.
enum class Split { selection, test };

const char * to_string(Split split);
Split parse_split(std::string_view text);

// Accuracy oracle over two disjoint held-out splits.
//
// The engine always maximizes the returned value. Metrics that should be minimized (loss, error rate)
// must be negated or complemented inside the evaluator; the engine never flips signs.
class Evaluator {
public:
    virtual ~Evaluator() = default;

    // Accuracy in [0, 1]. Must be a pure function of (map, split).
    virtual double evaluate(const TensorMap & map, Split split) = 0;

    // true when evaluate() may be called from several threads at once.
    virtual bool concurrency_safe() const { return false; }
};

} // namespace soup
