// SPDX-License-Identifier: Apache-2.0
#include "soup/tensor_store.hpp"

#include "json.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <unordered_set>

static_assert(std::endian::native == std::endian::little, "SOUPT1 I/O assumes a little-endian host");

namespace soup {

using json = nlohmann::json;

namespace {

constexpr char kMagic[] = "SOUPT1\n";
constexpr std::size_t kMagicSize = 7;
constexpr std::size_t kPreamble = kMagicSize + 8;

void put_u64(std::vector<std::uint8_t> & out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

std::uint64_t get_u64(const std::uint8_t * p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    }
    return v;
}

json meta_to_json(const CheckpointMeta & meta) {
    json j;
    j["learning_rate"] = meta.learning_rate;
    j["weight_decay"] = meta.weight_decay;
    j["momentum"] = meta.momentum;
    j["epochs"] = meta.epochs;
    j["seed"] = meta.seed;
    j["val_acc"] = meta.val_acc ? json(*meta.val_acc) : json(nullptr);
    j["tag"] = meta.tag;
    return j;
}

CheckpointMeta meta_from_json(const json & j, std::uint64_t offset) {
    try {
        CheckpointMeta meta;
        meta.learning_rate = j.at("learning_rate").get<double>();
        meta.weight_decay = j.at("weight_decay").get<double>();
        meta.momentum = j.at("momentum").get<double>();
        meta.epochs = j.at("epochs").get<std::int64_t>();
        meta.seed = j.at("seed").get<std::int64_t>();
        if (!j.at("val_acc").is_null()) {
            meta.val_acc = j.at("val_acc").get<double>();
        }
        meta.tag = j.at("tag").get<std::string>();
        return meta;
    } catch (const json::exception & e) {
        throw FormatError(FormatErrorKind::bad_header, offset, std::string("meta: ") + e.what());
    }
}

} // namespace

const char * to_string(FormatErrorKind kind) {
    switch (kind) {
        case FormatErrorKind::bad_magic:         return "bad magic";
        case FormatErrorKind::truncated_header:  return "truncated header";
        case FormatErrorKind::bad_header:        return "bad header";
        case FormatErrorKind::truncated_payload: return "truncated payload";
        case FormatErrorKind::length_mismatch:   return "length mismatch";
        case FormatErrorKind::unknown_dtype:     return "unknown dtype";
        case FormatErrorKind::non_finite:        return "non-finite value";
        case FormatErrorKind::invalid_meta:      return "invalid meta";
    }
    return "format error";
}

std::int64_t element_count(const Shape & shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_to_string(const Shape & shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

TensorMap::TensorMap(std::vector<Tensor> entries) : entries_(std::move(entries)) {
    std::unordered_set<std::string> seen;
    for (const auto & t : entries_) {
        if (t.name.empty()) {
            throw Error("tensor name must be non-empty");
        }
        if (!seen.insert(t.name).second) {
            throw Error("duplicate tensor name '" + t.name + "'");
        }
        for (auto d : t.shape) {
            if (d <= 0) {
                throw ShapeError(t.name, "tensor '" + t.name + "' has non-positive dimension in shape " +
                                             shape_to_string(t.shape));
            }
        }
        if (element_count(t.shape) != static_cast<std::int64_t>(t.data.size())) {
            throw ShapeError(t.name, "tensor '" + t.name + "' shape " + shape_to_string(t.shape) + " needs " +
                                         std::to_string(element_count(t.shape)) + " elements, got " +
                                         std::to_string(t.data.size()));
        }
    }
}

const Tensor * TensorMap::find(std::string_view name) const {
    for (const auto & t : entries_) {
        if (t.name == name) {
            return &t;
        }
    }
    return nullptr;
}

const Tensor & TensorMap::at(std::string_view name) const {
    const Tensor * t = find(name);
    if (!t) {
        throw ShapeError(std::string(name), "no tensor named '" + std::string(name) + "'");
    }
    return *t;
}

std::int64_t TensorMap::parameter_count() const {
    std::int64_t n = 0;
    for (const auto & t : entries_) {
        n += static_cast<std::int64_t>(t.data.size());
    }
    return n;
}

bool TensorMap::operator==(const TensorMap & other) const {
    if (entries_.size() != other.entries_.size()) {
        return false;
    }
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const auto & a = entries_[i];
        const auto & b = other.entries_[i];
        if (a.name != b.name || a.shape != b.shape || a.data.size() != b.data.size()) {
            return false;
        }
        // bitwise: NaN payloads and signed zeros count
        if (!a.data.empty() && std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) != 0) {
            return false;
        }
    }
    return true;
}

void validate_meta(const CheckpointMeta & meta) {
    auto bad = [](const std::string & what) { throw FormatError(FormatErrorKind::invalid_meta, 0, what); };
    if (!(meta.learning_rate > 0.0) || !std::isfinite(meta.learning_rate)) {
        bad("learning_rate must be > 0");
    }
    if (!(meta.weight_decay >= 0.0) || !std::isfinite(meta.weight_decay)) {
        bad("weight_decay must be >= 0");
    }
    if (!(meta.momentum >= 0.0 && meta.momentum < 1.0)) {
        bad("momentum must be in [0, 1)");
    }
    if (meta.epochs < 0) {
        bad("epochs must be >= 0");
    }
    if (meta.val_acc && !(*meta.val_acc >= 0.0 && *meta.val_acc <= 1.0)) {
        bad("val_acc must be in [0, 1]");
    }
}

void require_finite(const TensorMap & map) {
    for (const auto & t : map.entries()) {
        for (float v : t.data) {
            if (!std::isfinite(v)) {
                throw FormatError(FormatErrorKind::non_finite, 0, "tensor '" + t.name + "' contains NaN/Inf");
            }
        }
    }
}

std::vector<std::uint8_t> encode_checkpoint(const TensorMap & map, const CheckpointMeta & meta) {
    if (map.empty()) {
        throw Error("a checkpoint must contain at least one tensor");
    }
    validate_meta(meta);
    require_finite(map);

    json tensors = json::array();
    std::uint64_t offset = 0;
    for (const auto & t : map.entries()) {
        const std::uint64_t nbytes = t.data.size() * sizeof(float);
        tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"dtype", "f32"}, {"offset", offset}, {"nbytes", nbytes}});
        offset += nbytes;
    }
    const std::string header = json{{"meta", meta_to_json(meta)}, {"tensors", tensors}}.dump();

    std::vector<std::uint8_t> out;
    out.reserve(kPreamble + header.size() + offset);
    out.insert(out.end(), kMagic, kMagic + kMagicSize);
    put_u64(out, header.size());
    out.insert(out.end(), header.begin(), header.end());
    for (const auto & t : map.entries()) {
        const auto * p = reinterpret_cast<const std::uint8_t *>(t.data.data());
        out.insert(out.end(), p, p + t.data.size() * sizeof(float));
    }
    return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kMagicSize || std::memcmp(bytes.data(), kMagic, kMagicSize) != 0) {
        throw FormatError(FormatErrorKind::bad_magic, 0, "expected \"SOUPT1\\n\"");
    }
    if (bytes.size() < kPreamble) {
        throw FormatError(FormatErrorKind::truncated_header, kMagicSize, "missing header length");
    }
    const std::uint64_t header_len = get_u64(bytes.data() + kMagicSize);
    if (header_len > bytes.size() - kPreamble) {
        throw FormatError(FormatErrorKind::truncated_header, kPreamble,
                          "header declares " + std::to_string(header_len) + " bytes, " +
                              std::to_string(bytes.size() - kPreamble) + " available");
    }

    json header;
    try {
        header = json::parse(bytes.begin() + kPreamble, bytes.begin() + kPreamble + header_len);
    } catch (const json::exception & e) {
        throw FormatError(FormatErrorKind::bad_header, kPreamble, e.what());
    }
    if (!header.is_object() || !header.contains("meta") || !header.contains("tensors") ||
        !header["tensors"].is_array()) {
        throw FormatError(FormatErrorKind::bad_header, kPreamble, "header needs \"meta\" and \"tensors\"");
    }

    CheckpointMeta meta = meta_from_json(header["meta"], kPreamble);
    try {
        validate_meta(meta);
    } catch (const FormatError & e) {
        throw FormatError(FormatErrorKind::invalid_meta, kPreamble, e.what());
    }

    const std::uint64_t payload_start = kPreamble + header_len;
    const std::uint64_t payload_size = bytes.size() - payload_start;
    std::vector<Tensor> entries;
    std::uint64_t expected_offset = 0;
    for (const auto & jt : header["tensors"]) {
        std::string name;
        Shape shape;
        std::string dtype;
        std::uint64_t offset = 0;
        std::uint64_t nbytes = 0;
        try {
            name = jt.at("name").get<std::string>();
            shape = jt.at("shape").get<Shape>();
            dtype = jt.at("dtype").get<std::string>();
            offset = jt.at("offset").get<std::uint64_t>();
            nbytes = jt.at("nbytes").get<std::uint64_t>();
        } catch (const json::exception & e) {
            throw FormatError(FormatErrorKind::bad_header, kPreamble, e.what());
        }
        if (dtype != "f32") {
            throw FormatError(FormatErrorKind::unknown_dtype, kPreamble,
                              "tensor '" + name + "' has dtype '" + dtype + "'");
        }
        for (auto d : shape) {
            if (d <= 0) {
                throw FormatError(FormatErrorKind::bad_header, kPreamble,
                                  "tensor '" + name + "' has shape " + shape_to_string(shape));
            }
        }
        if (offset != expected_offset) {
            throw FormatError(FormatErrorKind::length_mismatch, payload_start + offset,
                              "tensor '" + name + "' offset " + std::to_string(offset) + ", expected " +
                                  std::to_string(expected_offset));
        }
        const auto count = static_cast<std::uint64_t>(element_count(shape));
        if (nbytes != count * sizeof(float)) {
            throw FormatError(FormatErrorKind::length_mismatch, payload_start + offset,
                              "tensor '" + name + "' declares " + std::to_string(nbytes) + " bytes for shape " +
                                  shape_to_string(shape));
        }
        if (offset + nbytes > payload_size) {
            throw FormatError(FormatErrorKind::truncated_payload, bytes.size(),
                              "tensor '" + name + "' needs bytes up to " + std::to_string(payload_start + offset + nbytes));
        }
        Tensor t{std::move(name), std::move(shape), std::vector<float>(count)};
        if (nbytes > 0) {
            std::memcpy(t.data.data(), bytes.data() + payload_start + offset, nbytes);
        }
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            if (!std::isfinite(t.data[i])) {
                throw FormatError(FormatErrorKind::non_finite, payload_start + offset + i * sizeof(float),
                                  "tensor '" + t.name + "' contains NaN/Inf");
            }
        }
        entries.push_back(std::move(t));
        expected_offset += nbytes;
    }
    if (expected_offset != payload_size) {
        throw FormatError(FormatErrorKind::length_mismatch, payload_start + expected_offset,
                          std::to_string(payload_size - expected_offset) + " trailing payload bytes");
    }
    if (entries.empty()) {
        throw FormatError(FormatErrorKind::bad_header, kPreamble, "checkpoint lists no tensors");
    }
    try {
        return {TensorMap(std::move(entries)), std::move(meta)};
    } catch (const Error & e) {
        throw FormatError(FormatErrorKind::bad_header, kPreamble, e.what());
    }
}

void save_checkpoint(const TensorMap & map, const CheckpointMeta & meta, const std::filesystem::path & path) {
    const auto bytes = encode_checkpoint(map, meta);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError(path.string(), "cannot open '" + path.string() + "' for writing");
    }
    out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.close();
    if (!out) {
        throw IoError(path.string(), "write to '" + path.string() + "' failed");
    }
}

Checkpoint load_checkpoint(const std::filesystem::path & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError(path.string(), "cannot open '" + path.string() + "'");
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_checkpoint(bytes);
    } catch (const FormatError & e) {
        throw FormatError(e.kind(), e.offset(), path.string() + ": " + e.what());
    }
}

bool validate_compatible(const TensorMap & a, const TensorMap & b) {
    if (a.size() != b.size()) {
        return false;
    }
    for (const auto & t : a.entries()) {
        const Tensor * u = b.find(t.name);
        if (!u || u->shape != t.shape) {
            return false;
        }
    }
    return true;
}

void require_compatible(const TensorMap & reference, const TensorMap & other) {
    for (const auto & t : reference.entries()) {
        const Tensor * u = other.find(t.name);
        if (!u) {
            throw ShapeError(t.name, "tensor '" + t.name + "' missing from second map");
        }
        if (u->shape != t.shape) {
            throw ShapeError(t.name, "tensor '" + t.name + "' shape " + shape_to_string(t.shape) + " vs " +
                                         shape_to_string(u->shape));
        }
    }
    for (const auto & u : other.entries()) {
        if (!reference.find(u.name)) {
            throw ShapeError(u.name, "tensor '" + u.name + "' missing from first map");
        }
    }
}

TensorMap linear_combine(std::span<const LinearTerm> terms) {
    if (terms.empty()) {
        throw Error("linear_combine needs at least one term");
    }
    const TensorMap & ref = *terms.front().map;
    for (const auto & term : terms.subspan(1)) {
        require_compatible(ref, *term.map);
    }

    std::vector<Tensor> out;
    out.reserve(ref.size());
    std::vector<double> acc;
    for (const auto & t : ref.entries()) {
        acc.assign(t.data.size(), 0.0);
        for (const auto & term : terms) {
            const auto & src = term.map->at(t.name).data;
            const double c = term.coefficient;
            for (std::size_t i = 0; i < acc.size(); ++i) {
                acc[i] += c * static_cast<double>(src[i]);
            }
        }
        Tensor r{t.name, t.shape, std::vector<float>(acc.size())};
        for (std::size_t i = 0; i < acc.size(); ++i) {
            r.data[i] = static_cast<float>(acc[i]);
        }
        out.push_back(std::move(r));
    }
    return TensorMap(std::move(out));
}

} // namespace soup
