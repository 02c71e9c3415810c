// SPDX-License-Identifier: Apache-2.0
#include "soup/trainer.hpp"

#include "json.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace soup {

using json = nlohmann::json;

namespace {

constexpr char kDatasetMagic[] = "SOUPD1\n";
constexpr std::size_t kMagicSize = 7;

json params_to_json(const DataParams & p) {
    return {{"input_dim", p.input_dim}, {"classes", p.classes},     {"clusters_per_class", p.clusters_per_class},
            {"n_train", p.n_train},     {"n_heldout", p.n_heldout}, {"separation", p.separation},
            {"spread", p.spread},       {"seed", p.seed}};
}

DataParams params_from_json(const json & j) {
    DataParams p;
    p.input_dim = j.at("input_dim").get<std::int64_t>();
    p.classes = j.at("classes").get<std::int64_t>();
    p.clusters_per_class = j.at("clusters_per_class").get<std::int64_t>();
    p.n_train = j.at("n_train").get<std::int64_t>();
    p.n_heldout = j.at("n_heldout").get<std::int64_t>();
    p.separation = j.at("separation").get<double>();
    p.spread = j.at("spread").get<double>();
    p.seed = j.at("seed").get<std::uint64_t>();
    return p;
}

void write_file(const std::filesystem::path & path, const std::string & text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError(path.string(), "cannot open '" + path.string() + "' for writing");
    }
    out << text;
    out.close();
    if (!out) {
        throw IoError(path.string(), "write to '" + path.string() + "' failed");
    }
}

std::vector<std::uint8_t> read_file(const std::filesystem::path & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError(path.string(), "cannot open '" + path.string() + "'");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

void save_dataset(const SynthDataset & data, const std::filesystem::path & path) {
    const auto n_train = data.train.size();
    const auto n_heldout = data.heldout.size();
    const json header = {{"n", n_train + n_heldout},
                         {"input_dim", data.train.input_dim},
                         {"classes", data.train.classes},
                         {"splits",
                          json::array({{{"name", "train"}, {"offset", 0}, {"count", n_train}},
                                       {{"name", "heldout"}, {"offset", n_train}, {"count", n_heldout}}})},
                         {"generator", params_to_json(data.params)}};
    const std::string h = header.dump();
    std::string out(kDatasetMagic, kMagicSize);
    for (int i = 0; i < 8; ++i) {
        out += static_cast<char>(static_cast<std::uint64_t>(h.size()) >> (8 * i));
    }
    out += h;
    auto append = [&out](const auto & vec) {
        out.append(reinterpret_cast<const char *>(vec.data()), vec.size() * sizeof(vec[0]));
    };
    append(data.train.features);
    append(data.heldout.features);
    append(data.train.labels);
    append(data.heldout.labels);
    write_file(path, out);
}

SynthDataset load_dataset(const std::filesystem::path & path) {
    const auto bytes = read_file(path);
    auto fail = [&](FormatErrorKind kind, std::uint64_t offset, const std::string & what) {
        throw FormatError(kind, offset, path.string() + ": " + what);
    };
    if (bytes.size() < kMagicSize || std::memcmp(bytes.data(), kDatasetMagic, kMagicSize) != 0) {
        fail(FormatErrorKind::bad_magic, 0, "expected \"SOUPD1\\n\"");
    }
    if (bytes.size() < kMagicSize + 8) {
        fail(FormatErrorKind::truncated_header, kMagicSize, "missing header length");
    }
    std::uint64_t h_len = 0;
    for (int i = 0; i < 8; ++i) {
        h_len |= static_cast<std::uint64_t>(bytes[kMagicSize + i]) << (8 * i);
    }
    const std::size_t start = kMagicSize + 8;
    if (h_len > bytes.size() - start) {
        fail(FormatErrorKind::truncated_header, start, "header length exceeds file");
    }

    SynthDataset data;
    std::uint64_t n = 0;
    std::uint64_t n_train = 0;
    std::uint64_t n_heldout = 0;
    try {
        const json header = json::parse(bytes.begin() + start, bytes.begin() + start + h_len);
        n = header.at("n").get<std::uint64_t>();
        data.train.input_dim = data.heldout.input_dim = header.at("input_dim").get<std::int64_t>();
        data.train.classes = data.heldout.classes = header.at("classes").get<std::int64_t>();
        for (const auto & s : header.at("splits")) {
            const auto name = s.at("name").get<std::string>();
            if (name == "train") {
                n_train = s.at("count").get<std::uint64_t>();
            } else if (name == "heldout") {
                n_heldout = s.at("count").get<std::uint64_t>();
            }
        }
        if (header.contains("generator")) {
            data.params = params_from_json(header.at("generator"));
        }
    } catch (const json::exception & e) {
        fail(FormatErrorKind::bad_header, start, e.what());
    }
    if (n_train + n_heldout != n || data.train.input_dim <= 0) {
        fail(FormatErrorKind::bad_header, start, "split counts do not add up to n");
    }

    const auto dim = static_cast<std::uint64_t>(data.train.input_dim);
    const std::uint64_t payload = start + h_len;
    const std::uint64_t need = n * dim * sizeof(float) + n * sizeof(std::uint32_t);
    if (bytes.size() - payload < need) {
        fail(FormatErrorKind::truncated_payload, bytes.size(), "payload needs " + std::to_string(need) + " bytes");
    }
    if (bytes.size() - payload > need) {
        fail(FormatErrorKind::length_mismatch, payload + need, "trailing bytes after labels");
    }
    const std::uint8_t * p = bytes.data() + payload;
    auto take = [&p](auto & vec, std::size_t count) {
        vec.resize(count);
        std::memcpy(vec.data(), p, count * sizeof(vec[0]));
        p += count * sizeof(vec[0]);
    };
    take(data.train.features, n_train * dim);
    take(data.heldout.features, n_heldout * dim);
    take(data.train.labels, n_train);
    take(data.heldout.labels, n_heldout);
    for (float v : data.train.features) {
        if (!std::isfinite(v)) fail(FormatErrorKind::non_finite, payload, "non-finite feature");
    }
    for (float v : data.heldout.features) {
        if (!std::isfinite(v)) fail(FormatErrorKind::non_finite, payload, "non-finite feature");
    }
    for (const auto * labels : {&data.train.labels, &data.heldout.labels}) {
        for (auto l : *labels) {
            if (static_cast<std::int64_t>(l) >= data.train.classes) {
                fail(FormatErrorKind::bad_header, payload, "label " + std::to_string(l) + " out of range");
            }
        }
    }
    return data;
}

const char * to_string(InitMode mode) {
    return mode == InitMode::shared ? "shared" : "independent";
}

InitMode parse_init_mode(std::string_view text) {
    if (text == "shared") return InitMode::shared;
    if (text == "independent") return InitMode::independent;
    throw Error("unknown init mode '" + std::string(text) + "'");
}

void save_manifest(const Manifest & m, const std::filesystem::path & path) {
    json cells = json::array();
    for (const auto & c : m.cells) {
        cells.push_back({{"cell", c.cell}, {"lr", c.lr}, {"wd", c.wd}, {"path", c.path}, {"val_acc", c.val_acc},
                         {"diverged", c.diverged}});
    }
    const json j = {
        {"mode", to_string(m.mode)},
        {"seed", m.seed},
        {"dataset", m.dataset_path},
        {"dataset_hash", m.dataset_hash},
        {"selection_fraction", m.selection_fraction},
        {"split_seed", m.split_seed},
        {"arch", {{"input_dim", m.arch.input_dim}, {"hidden_dims", m.arch.hidden_dims}, {"classes", m.arch.classes}}},
        {"grid",
         {{"learning_rates", m.grid.learning_rates},
          {"weight_decays", m.grid.weight_decays},
          {"momentum", m.grid.momentum},
          {"epochs", m.grid.epochs},
          {"batch_size", m.grid.batch_size}}},
        {"cells", cells},
    };
    write_file(path, j.dump(2) + "\n");
}

Manifest load_manifest(const std::filesystem::path & path) {
    const auto bytes = read_file(path);
    try {
        const json j = json::parse(bytes.begin(), bytes.end());
        Manifest m;
        m.mode = parse_init_mode(j.at("mode").get<std::string>());
        m.seed = j.at("seed").get<std::uint64_t>();
        m.dataset_path = j.at("dataset").get<std::string>();
        m.dataset_hash = j.at("dataset_hash").get<std::string>();
        m.selection_fraction = j.at("selection_fraction").get<double>();
        m.split_seed = j.at("split_seed").get<std::uint64_t>();
        const auto & a = j.at("arch");
        m.arch.input_dim = a.at("input_dim").get<std::int64_t>();
        m.arch.hidden_dims = a.at("hidden_dims").get<std::vector<std::int64_t>>();
        m.arch.classes = a.at("classes").get<std::int64_t>();
        const auto & g = j.at("grid");
        m.grid.learning_rates = g.at("learning_rates").get<std::vector<double>>();
        m.grid.weight_decays = g.at("weight_decays").get<std::vector<double>>();
        m.grid.momentum = g.at("momentum").get<double>();
        m.grid.epochs = g.at("epochs").get<std::int64_t>();
        m.grid.batch_size = g.at("batch_size").get<std::int64_t>();
        for (const auto & c : j.at("cells")) {
            m.cells.push_back({c.at("cell").get<std::string>(), c.at("lr").get<double>(), c.at("wd").get<double>(),
                               c.at("path").get<std::string>(), c.at("val_acc").get<double>(),
                               c.at("diverged").get<bool>()});
        }
        return m;
    } catch (const json::exception & e) {
        throw Error("malformed manifest '" + path.string() + "': " + e.what());
    }
}

namespace {

std::vector<std::filesystem::path> write_population(std::vector<TrainedCell> cells,
                                                    const std::filesystem::path & out_dir, Evaluator & evaluator,
                                                    Manifest manifest) {
    std::filesystem::create_directories(out_dir);
    std::vector<std::filesystem::path> paths;
    manifest.cells.clear();
    for (auto & cell : cells) {
        const double acc = evaluator.evaluate(cell.result.params, Split::selection);
        cell.result.meta.val_acc = acc;
        const std::string file = cell.name + ".soupt";
        save_checkpoint(cell.result.params, cell.result.meta, out_dir / file);
        paths.push_back(out_dir / file);
        manifest.cells.push_back({cell.name, cell.learning_rate, cell.weight_decay, file, acc, cell.result.diverged});
    }
    save_manifest(manifest, out_dir / "manifest.json");
    return paths;
}

} // namespace

std::vector<std::filesystem::path> produce_grid(const MlpArch & arch, const Dataset & train_set, const GridSpec & grid,
                                                const TensorMap & shared_init, const std::filesystem::path & out_dir,
                                                Evaluator & evaluator, Manifest manifest) {
    manifest.mode = InitMode::shared;
    manifest.arch = arch;
    manifest.grid = grid;
    return write_population(train_population(arch, train_set, grid, &shared_init, manifest.seed), out_dir, evaluator,
                            std::move(manifest));
}

std::vector<std::filesystem::path> produce_independent(const MlpArch & arch, const Dataset & train_set,
                                                       const GridSpec & grid, const std::filesystem::path & out_dir,
                                                       Evaluator & evaluator, Manifest manifest) {
    manifest.mode = InitMode::independent;
    manifest.arch = arch;
    manifest.grid = grid;
    return write_population(train_population(arch, train_set, grid, nullptr, manifest.seed), out_dir, evaluator,
                            std::move(manifest));
}

} // namespace soup
