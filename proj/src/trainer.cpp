// SPDX-License-Identifier: Apache-2.0
#include "soup/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <thread>

namespace soup {

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    // splitmix64 finalizer over the combined value
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::int64_t MlpArch::in_dim(std::size_t layer) const {
    return layer == 0 ? input_dim : hidden_dims[layer - 1];
}

std::int64_t MlpArch::out_dim(std::size_t layer) const {
    return layer < hidden_dims.size() ? hidden_dims[layer] : classes;
}

std::string weight_name(std::size_t layer) {
    return "layer" + std::to_string(layer) + ".weight";
}

std::string bias_name(std::size_t layer) {
    return "layer" + std::to_string(layer) + ".bias";
}

void require_arch(const MlpArch & arch, const TensorMap & map) {
    if (map.size() != 2 * arch.layer_count()) {
        throw ShapeError("", "expected " + std::to_string(2 * arch.layer_count()) + " tensors for the MLP, got " +
                                 std::to_string(map.size()));
    }
    for (std::size_t l = 0; l < arch.layer_count(); ++l) {
        const Shape w_shape{arch.out_dim(l), arch.in_dim(l)};
        const Shape b_shape{arch.out_dim(l)};
        for (const auto & [name, shape] : {std::pair{weight_name(l), w_shape}, std::pair{bias_name(l), b_shape}}) {
            const Tensor * t = map.find(name);
            if (!t) {
                throw ShapeError(name, "missing tensor '" + name + "'");
            }
            if (t->shape != shape) {
                throw ShapeError(name, "tensor '" + name + "' has shape " + shape_to_string(t->shape) + ", expected " +
                                           shape_to_string(shape));
            }
        }
    }
}

TensorMap init_mlp(const MlpArch & arch, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<Tensor> entries;
    for (std::size_t l = 0; l < arch.layer_count(); ++l) {
        const auto out = arch.out_dim(l);
        const auto in = arch.in_dim(l);
        std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(in)));
        Tensor w{weight_name(l), {out, in}, std::vector<float>(static_cast<std::size_t>(out * in))};
        for (auto & v : w.data) {
            v = static_cast<float>(normal(rng));
        }
        entries.push_back(std::move(w));
        entries.push_back(Tensor{bias_name(l), {out}, std::vector<float>(static_cast<std::size_t>(out), 0.0f)});
    }
    return TensorMap(std::move(entries));
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
    Dataset out;
    out.input_dim = input_dim;
    out.classes = classes;
    out.features.reserve(indices.size() * static_cast<std::size_t>(input_dim));
    out.labels.reserve(indices.size());
    for (auto i : indices) {
        auto r = row(i);
        out.features.insert(out.features.end(), r.begin(), r.end());
        out.labels.push_back(labels[i]);
    }
    return out;
}

SynthDataset generate_dataset(const DataParams & p) {
    if (p.input_dim <= 0 || p.classes <= 1 || p.clusters_per_class <= 0) {
        throw Error("dataset needs input_dim >= 1, classes >= 2, clusters_per_class >= 1");
    }
    if (p.n_train < p.classes || p.n_heldout < p.classes) {
        throw Error("each pool needs at least one example per class");
    }
    if (!(p.spread >= 0.0) || !(p.separation >= 0.0) || !std::isfinite(p.spread) || !std::isfinite(p.separation)) {
        throw Error("spread and separation must be finite and non-negative");
    }
    if (p.spread == 0.0 && p.separation == 0.0) {
        throw Error("zero spread with identical cluster means makes classes indistinguishable");
    }

    std::mt19937_64 center_rng(derive_seed(p.seed, 0));
    std::normal_distribution<double> center_dist(0.0, p.separation);
    const auto n_clusters = static_cast<std::size_t>(p.classes * p.clusters_per_class);
    const auto dim = static_cast<std::size_t>(p.input_dim);
    std::vector<double> centers(n_clusters * dim);
    for (auto & c : centers) {
        c = center_dist(center_rng);
    }

    auto make_pool = [&](std::int64_t n, std::uint64_t stream) {
        std::mt19937_64 rng(derive_seed(p.seed, stream));
        std::normal_distribution<double> noise(0.0, p.spread);
        std::uniform_int_distribution<std::int64_t> pick_cluster(0, p.clusters_per_class - 1);
        std::vector<std::uint32_t> labels(static_cast<std::size_t>(n));
        for (std::size_t i = 0; i < labels.size(); ++i) {
            labels[i] = static_cast<std::uint32_t>(static_cast<std::int64_t>(i) % p.classes);
        }
        std::shuffle(labels.begin(), labels.end(), rng);
        Dataset d;
        d.input_dim = p.input_dim;
        d.classes = p.classes;
        d.labels = labels;
        d.features.resize(labels.size() * dim);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            const auto cluster = static_cast<std::size_t>(labels[i] * p.clusters_per_class + pick_cluster(rng));
            for (std::size_t j = 0; j < dim; ++j) {
                d.features[i * dim + j] = static_cast<float>(centers[cluster * dim + j] + noise(rng));
            }
        }
        return d;
    };

    SynthDataset out;
    out.params = p;
    out.train = make_pool(p.n_train, 1);
    out.heldout = make_pool(p.n_heldout, 2);
    return out;
}

namespace {

// Per-layer weights widened to double; wt is the [in][out] transpose used by the forward axpy loop.
struct Net {
    std::vector<std::size_t> in;
    std::vector<std::size_t> out;
    std::vector<std::vector<double>> w;
    std::vector<std::vector<double>> wt;
    std::vector<std::vector<double>> b;
    std::vector<std::size_t> w_index;  // entry index of each layer's weight in the source map
    std::vector<std::size_t> b_index;
};

Net make_net(const TensorMap & params, const MlpArch & arch) {
    require_arch(arch, params);
    Net net;
    for (std::size_t l = 0; l < arch.layer_count(); ++l) {
        const auto in = static_cast<std::size_t>(arch.in_dim(l));
        const auto out = static_cast<std::size_t>(arch.out_dim(l));
        net.in.push_back(in);
        net.out.push_back(out);
        const auto & w = params.at(weight_name(l)).data;
        const auto & b = params.at(bias_name(l)).data;
        net.w.emplace_back(w.begin(), w.end());
        std::vector<double> wt(in * out);
        for (std::size_t o = 0; o < out; ++o) {
            for (std::size_t j = 0; j < in; ++j) {
                wt[j * out + o] = w[o * in + j];
            }
        }
        net.wt.push_back(std::move(wt));
        net.b.emplace_back(b.begin(), b.end());
        for (std::size_t e = 0; e < params.size(); ++e) {
            if (params.entries()[e].name == weight_name(l)) net.w_index.push_back(e);
            if (params.entries()[e].name == bias_name(l)) net.b_index.push_back(e);
        }
    }
    return net;
}

// acts[0] is the input; acts[l+1] the output of layer l (post-ReLU for hidden layers, raw scores last).
void forward(const Net & net, std::span<const float> x, std::vector<std::vector<double>> & acts) {
    acts.resize(net.in.size() + 1);
    acts[0].assign(x.begin(), x.end());
    for (std::size_t l = 0; l < net.in.size(); ++l) {
        auto & out = acts[l + 1];
        out = net.b[l];
        const auto & in = acts[l];
        const std::size_t n_out = net.out[l];
        const double * wt = net.wt[l].data();
        for (std::size_t j = 0; j < net.in[l]; ++j) {
            const double xj = in[j];
            if (xj == 0.0) {
                continue;
            }
            const double * col = wt + j * n_out;
            for (std::size_t o = 0; o < n_out; ++o) {
                out[o] += xj * col[o];
            }
        }
        if (l + 1 < net.in.size()) {
            for (auto & v : out) {
                v = v > 0.0 ? v : 0.0;
            }
        }
    }
}

// log-sum-exp shifted by the max score
double cross_entropy(const std::vector<double> & scores, std::uint32_t label, std::vector<double> * probs) {
    const double m = *std::max_element(scores.begin(), scores.end());
    double z = 0.0;
    for (double s : scores) {
        z += std::exp(s - m);
    }
    const double lse = m + std::log(z);
    if (probs) {
        probs->resize(scores.size());
        for (std::size_t i = 0; i < scores.size(); ++i) {
            (*probs)[i] = std::exp(scores[i] - lse);
        }
    }
    return lse - scores[label];
}

} // namespace

std::vector<double> mlp_scores(const TensorMap & params, const MlpArch & arch, std::span<const float> x) {
    const Net net = make_net(params, arch);
    std::vector<std::vector<double>> acts;
    forward(net, x, acts);
    return acts.back();
}

std::uint32_t mlp_predict(const TensorMap & params, const MlpArch & arch, std::span<const float> x) {
    const auto scores = mlp_scores(params, arch, x);
    return static_cast<std::uint32_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

std::size_t count_correct(const TensorMap & params, const MlpArch & arch, const Dataset & data) {
    const Net net = make_net(params, arch);
    std::vector<std::vector<double>> acts;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        forward(net, data.row(i), acts);
        const auto & s = acts.back();
        const auto pred = static_cast<std::uint32_t>(std::max_element(s.begin(), s.end()) - s.begin());
        correct += pred == data.labels[i] ? 1 : 0;
    }
    return correct;
}

TensorMap LossGrad::as_map(const TensorMap & like) const {
    std::vector<Tensor> entries;
    for (std::size_t e = 0; e < like.size(); ++e) {
        const auto & t = like.entries()[e];
        Tensor g{t.name, t.shape, std::vector<float>(grads[e].size())};
        for (std::size_t i = 0; i < g.data.size(); ++i) {
            g.data[i] = static_cast<float>(grads[e][i]);
        }
        entries.push_back(std::move(g));
    }
    return TensorMap(std::move(entries));
}

double batch_loss(const TensorMap & params, const MlpArch & arch, const Dataset & data,
                  std::span<const std::size_t> batch) {
    const Net net = make_net(params, arch);
    std::vector<std::vector<double>> acts;
    double total = 0.0;
    for (auto i : batch) {
        forward(net, data.row(i), acts);
        total += cross_entropy(acts.back(), data.labels[i], nullptr);
    }
    return total / static_cast<double>(batch.size());
}

LossGrad loss_and_grad(const TensorMap & params, const MlpArch & arch, const Dataset & data,
                       std::span<const std::size_t> batch) {
    if (batch.empty()) {
        throw Error("loss_and_grad needs a non-empty batch");
    }
    const Net net = make_net(params, arch);
    const std::size_t layers = net.in.size();
    LossGrad lg;
    lg.grads.resize(params.size());
    for (std::size_t e = 0; e < params.size(); ++e) {
        lg.grads[e].assign(params.entries()[e].data.size(), 0.0);
    }

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    std::vector<std::vector<double>> acts;
    std::vector<double> delta;
    std::vector<double> prev_delta;
    for (auto i : batch) {
        forward(net, data.row(i), acts);
        lg.loss += cross_entropy(acts.back(), data.labels[i], &delta);
        delta[data.labels[i]] -= 1.0;
        for (auto & d : delta) {
            d *= inv_b;
        }
        for (std::size_t l = layers; l-- > 0;) {
            const std::size_t n_in = net.in[l];
            const std::size_t n_out = net.out[l];
            auto & gw = lg.grads[net.w_index[l]];
            auto & gb = lg.grads[net.b_index[l]];
            const auto & a = acts[l];
            for (std::size_t o = 0; o < n_out; ++o) {
                const double d = delta[o];
                gb[o] += d;
                if (d == 0.0) {
                    continue;
                }
                double * row = gw.data() + o * n_in;
                for (std::size_t j = 0; j < n_in; ++j) {
                    row[j] += d * a[j];
                }
            }
            if (l == 0) {
                break;
            }
            prev_delta.assign(n_in, 0.0);
            const double * w = net.w[l].data();
            for (std::size_t o = 0; o < n_out; ++o) {
                const double d = delta[o];
                if (d == 0.0) {
                    continue;
                }
                const double * row = w + o * n_in;
                for (std::size_t j = 0; j < n_in; ++j) {
                    prev_delta[j] += d * row[j];
                }
            }
            for (std::size_t j = 0; j < n_in; ++j) {
                if (a[j] <= 0.0) {
                    prev_delta[j] = 0.0;
                }
            }
            delta.swap(prev_delta);
        }
    }
    lg.loss *= inv_b;
    return lg;
}

SgdResult sgd_step(const TensorMap & params, const TensorMap & grads, const TensorMap & velocity, double lr,
                   double momentum, double weight_decay) {
    require_compatible(params, grads);
    require_compatible(params, velocity);
    std::vector<Tensor> new_params;
    std::vector<Tensor> new_velocity;
    for (const auto & t : params.entries()) {
        const auto & g = grads.at(t.name).data;
        const auto & v = velocity.at(t.name).data;
        Tensor p{t.name, t.shape, std::vector<float>(t.data.size())};
        Tensor nv{t.name, t.shape, std::vector<float>(t.data.size())};
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            const double theta = t.data[i];
            const double vel = momentum * v[i] + g[i] + weight_decay * theta;
            nv.data[i] = static_cast<float>(vel);
            p.data[i] = static_cast<float>(theta - lr * vel);
        }
        new_params.push_back(std::move(p));
        new_velocity.push_back(std::move(nv));
    }
    return {TensorMap(std::move(new_params)), TensorMap(std::move(new_velocity))};
}

namespace {

bool all_finite(const TensorMap & map) {
    for (const auto & t : map.entries()) {
        for (float v : t.data) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
    }
    return true;
}

TensorMap zeros_like(const TensorMap & map) {
    std::vector<Tensor> entries;
    for (const auto & t : map.entries()) {
        entries.push_back(Tensor{t.name, t.shape, std::vector<float>(t.data.size(), 0.0f)});
    }
    return TensorMap(std::move(entries));
}

} // namespace

TrainResult train(const MlpArch & arch, const Dataset & train_set, const Hyperparams & hp, const TensorMap & init,
                  std::uint64_t seed) {
    require_arch(arch, init);
    if (hp.batch_size < 1 || hp.epochs < 0) {
        throw Error("batch_size must be >= 1 and epochs >= 0");
    }
    if (train_set.size() == 0) {
        throw Error("training set is empty");
    }
    TrainResult result;
    result.params = init;
    result.meta.learning_rate = hp.learning_rate;
    result.meta.weight_decay = hp.weight_decay;
    result.meta.momentum = hp.momentum;
    result.meta.epochs = hp.epochs;
    result.meta.seed = static_cast<std::int64_t>(seed & 0x7fffffffffffffffULL);

    TensorMap velocity = zeros_like(init);
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    result.epoch_loss.push_back(batch_loss(init, arch, train_set, order));

    const auto bs = static_cast<std::size_t>(hp.batch_size);
    for (std::int64_t epoch = 0; epoch < hp.epochs; ++epoch) {
        std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            std::span<const std::size_t> batch(order.data() + start, std::min(bs, order.size() - start));
            const LossGrad lg = loss_and_grad(result.params, arch, train_set, batch);
            if (!std::isfinite(lg.loss)) {
                result.diverged = true;
                return result;
            }
            epoch_total += lg.loss * static_cast<double>(batch.size());
            auto step = sgd_step(result.params, lg.as_map(result.params), velocity, hp.learning_rate, hp.momentum,
                                 hp.weight_decay);
            if (!all_finite(step.params) || !all_finite(step.velocity)) {
                result.diverged = true;
                return result;
            }
            result.params = std::move(step.params);
            velocity = std::move(step.velocity);
        }
        result.epoch_loss.push_back(epoch_total / static_cast<double>(order.size()));
    }
    return result;
}

TensorMap pretrain(const MlpArch & arch, const Dataset & train_set, const PretrainSpec & spec, std::uint64_t seed) {
    Hyperparams hp{spec.learning_rate, spec.weight_decay, spec.momentum, spec.epochs, spec.batch_size};
    auto result = train(arch, train_set, hp, init_mlp(arch, derive_seed(seed, 0xA11)), derive_seed(seed, 0xB0B));
    if (result.diverged) {
        throw Error("pretraining diverged");
    }
    return std::move(result.params);
}

std::string cell_name(double lr, double wd) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "lr%g_wd%g", lr, wd);
    return buf;
}

std::vector<TrainedCell> train_population(const MlpArch & arch, const Dataset & train_set, const GridSpec & grid,
                                          const TensorMap * shared_init, std::uint64_t seed) {
    if (grid.size() == 0) {
        throw Error("grid has no cells");
    }
    std::vector<TrainedCell> cells;
    for (double lr : grid.learning_rates) {
        for (double wd : grid.weight_decays) {
            cells.push_back(TrainedCell{cell_name(lr, wd), lr, wd, {}});
        }
    }

    auto train_cell = [&](std::size_t index) {
        auto & cell = cells[index];
        Hyperparams hp{cell.learning_rate, cell.weight_decay, grid.momentum, grid.epochs, grid.batch_size};
        const TensorMap init = shared_init ? *shared_init : init_mlp(arch, derive_seed(seed, 1000 + index));
        cell.result = train(arch, train_set, hp, init, derive_seed(seed, index));
        cell.result.meta.tag = cell.name;
    };

    const std::size_t workers = std::min<std::size_t>(std::max(1u, std::thread::hardware_concurrency()), cells.size());
    if (workers <= 1) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            train_cell(i);
        }
        return cells;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    {
        std::vector<std::jthread> threads;
        for (std::size_t w = 0; w < workers; ++w) {
            threads.emplace_back([&, w] {
                try {
                    for (std::size_t i = next++; i < cells.size(); i = next++) {
                        train_cell(i);
                    }
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
    }
    for (auto & e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
    return cells;
}

} // namespace soup
