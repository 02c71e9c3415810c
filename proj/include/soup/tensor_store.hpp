// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container (SOUPT1) and the tensor arithmetic behind every soup.
//
// File layout, all integers little-endian:
//
//   [0, 7)        "SOUPT1\n"
//   [7, 15)       u64 header length H
//   [15, 15 + H)  UTF-8 JSON header
//                 {"meta": {...}, "tensors": [{"name", "shape", "dtype": "f32", "offset", "nbytes"}, ...]}
//   [15 + H, ..)  contiguous f32 payload, tensors in header order, offsets relative to payload start
#pragma once

#include "soup/errors.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace soup {

using Shape = std::vector<std::int64_t>;

std::int64_t element_count(const Shape & shape);
std::string shape_to_string(const Shape & shape);

struct Tensor {
    std::string name;
    Shape shape;
    std::vector<float> data;

    bool operator==(const Tensor &) const = default;
};

// Ordered named tensors: the in-memory form of one checkpoint.
// Construction validates the invariants; after that the map is treated as immutable.
class TensorMap {
public:
    TensorMap() = default;
    explicit TensorMap(std::vector<Tensor> entries);

    const std::vector<Tensor> & entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    // nullptr when absent
    const Tensor * find(std::string_view name) const;
    const Tensor & at(std::string_view name) const;

    std::int64_t parameter_count() const;

    // Mutable element access for builders (trainers, tests). Shapes stay fixed.
    std::span<float> data(std::size_t index) { return entries_[index].data; }
    std::span<const float> data(std::size_t index) const { return entries_[index].data; }

    bool operator==(const TensorMap & other) const;

private:
    std::vector<Tensor> entries_;
};

struct CheckpointMeta {
    double learning_rate = 0.1;
    double weight_decay = 0.0;
    double momentum = 0.0;
    std::int64_t epochs = 0;
    std::int64_t seed = 0;
    std::optional<double> val_acc;
    std::string tag;

    bool operator==(const CheckpointMeta &) const = default;
};

// Throws FormatError(invalid_meta) when a field is out of range.
void validate_meta(const CheckpointMeta & meta);

// Names, shapes and finiteness. Throws FormatError(non_finite) naming the tensor.
void require_finite(const TensorMap & map);

void save_checkpoint(const TensorMap & map, const CheckpointMeta & meta, const std::filesystem::path & path);

struct Checkpoint {
    TensorMap map;
    CheckpointMeta meta;
};

Checkpoint load_checkpoint(const std::filesystem::path & path);

// In-memory encode/decode of the same layout; the file functions wrap these.
std::vector<std::uint8_t> encode_checkpoint(const TensorMap & map, const CheckpointMeta & meta);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

// Same name set and same shape per name.
bool validate_compatible(const TensorMap & a, const TensorMap & b);

// Throws ShapeError naming the first tensor that does not line up.
void require_compatible(const TensorMap & reference, const TensorMap & other);

struct LinearTerm {
    double coefficient;
    const TensorMap * map;
};

// sum_j coefficient_j * map_j, accumulated in double in argument order, then rounded to f32.
// Output follows the entry order of the first term.
TensorMap linear_combine(std::span<const LinearTerm> terms);

} // namespace soup
