// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale model factory: synthetic Gaussian-mixture data, a small ReLU MLP trained with
// momentum SGD, and the hyperparameter grid that produces soup ingredients.
#pragma once

#include "soup/evaluator.hpp"
#include "soup/tensor_store.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace soup {

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

// Tensors are "layer{i}.weight" [out, in] and "layer{i}.bias" [out] for i = 0 .. hidden_dims.size().
struct MlpArch {
    std::int64_t input_dim = 32;
    std::vector<std::int64_t> hidden_dims = {64, 64};
    std::int64_t classes = 10;

    std::size_t layer_count() const { return hidden_dims.size() + 1; }
    std::int64_t in_dim(std::size_t layer) const;
    std::int64_t out_dim(std::size_t layer) const;

    bool operator==(const MlpArch &) const = default;
};

std::string weight_name(std::size_t layer);
std::string bias_name(std::size_t layer);

// Throws ShapeError naming the first tensor that does not match the architecture.
void require_arch(const MlpArch & arch, const TensorMap & map);

// He-normal weights, zero biases.
TensorMap init_mlp(const MlpArch & arch, std::uint64_t seed);

// Row-major features, one row per example.
struct Dataset {
    std::int64_t input_dim = 0;
    std::int64_t classes = 0;
    std::vector<float> features;
    std::vector<std::uint32_t> labels;

    std::size_t size() const { return labels.size(); }
    std::span<const float> row(std::size_t i) const {
        return {features.data() + i * static_cast<std::size_t>(input_dim), static_cast<std::size_t>(input_dim)};
    }
    Dataset subset(std::span<const std::size_t> indices) const;

    bool operator==(const Dataset &) const = default;
};

struct DataParams {
    std::int64_t input_dim = 32;
    std::int64_t classes = 10;
    std::int64_t clusters_per_class = 3;
    std::int64_t n_train = 12000;
    std::int64_t n_heldout = 4000;
    // standard deviation of cluster centres; larger means easier separation
    double separation = 0.6;
    // within-cluster standard deviation
    double spread = 1.0;
    std::uint64_t seed = 0;

    bool operator==(const DataParams &) const = default;
};

struct SynthDataset {
    DataParams params;
    Dataset train;
    Dataset heldout;
};

SynthDataset generate_dataset(const DataParams & params);

// SOUPD1 container: "SOUPD1\n", u64-LE header length, JSON header {n, input_dim, classes, splits, ...},
// then n*input_dim f32 features and n u32 labels, little-endian. Rows are train pool then held-out pool.
void save_dataset(const SynthDataset & data, const std::filesystem::path & path);
SynthDataset load_dataset(const std::filesystem::path & path);

// Class scores for one example; accumulation starts at the bias and adds inputs in index order.
std::vector<double> mlp_scores(const TensorMap & params, const MlpArch & arch, std::span<const float> x);

// argmax of mlp_scores, lowest index on ties.
std::uint32_t mlp_predict(const TensorMap & params, const MlpArch & arch, std::span<const float> x);

// Number of rows whose prediction matches the label.
std::size_t count_correct(const TensorMap & params, const MlpArch & arch, const Dataset & data);

struct LossGrad {
    double loss = 0.0;                       // mean cross-entropy over the batch
    std::vector<std::vector<double>> grads;  // per tensor, in params entry order
    TensorMap as_map(const TensorMap & like) const;
};

double batch_loss(const TensorMap & params, const MlpArch & arch, const Dataset & data,
                  std::span<const std::size_t> batch);
LossGrad loss_and_grad(const TensorMap & params, const MlpArch & arch, const Dataset & data,
                       std::span<const std::size_t> batch);

struct SgdResult {
    TensorMap params;
    TensorMap velocity;
};

// Coupled weight decay: v' = momentum*v + g + weight_decay*theta; theta' = theta - lr*v'.
SgdResult sgd_step(const TensorMap & params, const TensorMap & grads, const TensorMap & velocity, double lr,
                   double momentum, double weight_decay);

struct Hyperparams {
    double learning_rate = 0.05;
    double weight_decay = 1e-4;
    double momentum = 0.9;
    std::int64_t epochs = 12;
    std::int64_t batch_size = 256;
};

struct TrainResult {
    TensorMap params;
    CheckpointMeta meta;
    // loss went non-finite; params are the last finite weights
    bool diverged = false;
    // full-pass training loss of the init, then the mean mini-batch loss of each epoch
    std::vector<double> epoch_loss;
};

// Mini-batch SGD on cross-entropy with per-epoch shuffles seeded by seed.
TrainResult train(const MlpArch & arch, const Dataset & train_set, const Hyperparams & hp, const TensorMap & init,
                  std::uint64_t seed);

struct GridSpec {
    std::vector<double> learning_rates = {0.01, 0.02, 0.05, 0.1, 0.2, 0.4};
    std::vector<double> weight_decays = {1e-5, 2e-5, 5e-5, 1e-4, 2e-4, 4e-4};
    double momentum = 0.9;
    std::int64_t epochs = 12;
    std::int64_t batch_size = 256;

    std::size_t size() const { return learning_rates.size() * weight_decays.size(); }
};

struct PretrainSpec {
    std::int64_t epochs = 3;
    double learning_rate = 0.05;
    double weight_decay = 1e-4;
    double momentum = 0.9;
    std::int64_t batch_size = 256;
};

// Random init followed by a short fixed-lr training run: the shared starting point of the grid.
TensorMap pretrain(const MlpArch & arch, const Dataset & train_set, const PretrainSpec & spec, std::uint64_t seed);

std::string cell_name(double lr, double wd);

struct TrainedCell {
    std::string name;
    double learning_rate = 0.0;
    double weight_decay = 0.0;
    TrainResult result;
};

// Trains every (lr, wd) cell, row-major over learning rates. With shared_init every cell starts
// from it; without, each cell draws a fresh init from its own derived seed.
std::vector<TrainedCell> train_population(const MlpArch & arch, const Dataset & train_set, const GridSpec & grid,
                                          const TensorMap * shared_init, std::uint64_t seed);

enum class InitMode { shared, independent };
const char * to_string(InitMode mode);
InitMode parse_init_mode(std::string_view text);

struct ManifestCell {
    std::string cell;
    double lr = 0.0;
    double wd = 0.0;
    std::string path;  // relative to the manifest directory
    double val_acc = 0.0;
    bool diverged = false;
};

struct Manifest {
    InitMode mode = InitMode::shared;
    std::uint64_t seed = 0;
    std::string dataset_path;  // relative to the manifest directory
    std::string dataset_hash;
    double selection_fraction = 0.5;
    std::uint64_t split_seed = 0;
    MlpArch arch;
    GridSpec grid;
    std::vector<ManifestCell> cells;
};

void save_manifest(const Manifest & manifest, const std::filesystem::path & path);
Manifest load_manifest(const std::filesystem::path & path);

// Trains, writes one checkpoint per cell into out_dir and a manifest.json whose val_acc values come
// from evaluator on the selection split. manifest carries the dataset/split echo; cells are filled in.
std::vector<std::filesystem::path> produce_grid(const MlpArch & arch, const Dataset & train_set, const GridSpec & grid,
                                                const TensorMap & shared_init, const std::filesystem::path & out_dir,
                                                Evaluator & evaluator, Manifest manifest);
std::vector<std::filesystem::path> produce_independent(const MlpArch & arch, const Dataset & train_set,
                                                       const GridSpec & grid, const std::filesystem::path & out_dir,
                                                       Evaluator & evaluator, Manifest manifest);

} // namespace soup
