// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "support.hpp"

#include "json.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

using namespace soup;
using nlohmann::json;

namespace {

std::vector<std::uint8_t> assemble(const std::string & magic, const std::string & header,
                                   const std::vector<std::uint8_t> & payload) {
    std::vector<std::uint8_t> out(magic.begin(), magic.end());
    std::uint64_t len = header.size();
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
    out.insert(out.end(), header.begin(), header.end());
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

std::vector<std::uint8_t> floats(std::initializer_list<float> values) {
    std::vector<std::uint8_t> out(values.size() * 4);
    std::memcpy(out.data(), std::data(values), out.size());
    return out;
}

json meta_json() {
    return {{"learning_rate", 0.1}, {"weight_decay", 0.0}, {"momentum", 0.0}, {"epochs", 0}, {"seed", 0},
            {"val_acc", nullptr}, {"tag", ""}};
}

json header(json tensors) { return {{"meta", meta_json()}, {"tensors", std::move(tensors)}}; }

FormatErrorKind decode_kind(const std::vector<std::uint8_t> & bytes) {
    try {
        decode_checkpoint(bytes);
    } catch (const FormatError & e) {
        return e.kind();
    }
    FAIL("decode unexpectedly succeeded");
    return FormatErrorKind::bad_magic;
}

TensorMap small_map() {
    return TensorMap(std::vector<Tensor>{{"a", {2, 2}, {1.0f, -2.0f, 3.5f, 0.25f}}, {"b", {3}, {0.0f, 1e-30f, -7.0f}}});
}

} // namespace

TEST_CASE("tensor map rejects bad entries") {
    CHECK_THROWS_AS(TensorMap(std::vector<Tensor>{{"", {1}, {1.0f}}}), Error);
    CHECK_THROWS_AS(TensorMap(std::vector<Tensor>{{"a", {1}, {1.0f}}, {"a", {1}, {2.0f}}}), Error);
    CHECK_THROWS_AS(TensorMap(std::vector<Tensor>{{"a", {0}, {}}}), ShapeError);
    CHECK_THROWS_AS(TensorMap(std::vector<Tensor>{{"a", {2, 2}, {1.0f}}}), ShapeError);
    const auto m = small_map();
    CHECK(m.parameter_count() == 7);
    CHECK(m.find("zz") == nullptr);
    CHECK_THROWS_AS(m.at("zz"), ShapeError);
}

TEST_CASE("encode and decode round trip") {
    CheckpointMeta meta;
    meta.learning_rate = 0.02;
    meta.weight_decay = 5e-5;
    meta.momentum = 0.9;
    meta.epochs = 12;
    meta.seed = 7;
    meta.val_acc = 0.8125;
    meta.tag = "lr0.02_wd5e-05";
    const auto map = small_map();
    const auto bytes = encode_checkpoint(map, meta);
    CHECK(std::string(bytes.begin(), bytes.begin() + 7) == "SOUPT1\n");
    const auto back = decode_checkpoint(bytes);
    CHECK(back.map == map);
    CHECK(back.meta == meta);
    CHECK(encode_checkpoint(back.map, back.meta) == bytes);
}

TEST_CASE("file round trip and missing file") {
    const auto dir = std::filesystem::temp_directory_path() / "soup_ts_test";
    std::filesystem::create_directories(dir);
    const auto path = dir / "x.soupt";
    save_checkpoint(small_map(), {}, path);
    CHECK(load_checkpoint(path).map == small_map());
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.soupt"), IoError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("saving rejects empty maps, NaN and bad meta") {
    CHECK_THROWS_AS(encode_checkpoint(TensorMap{}, {}), Error);
    const TensorMap nan_map(std::vector<Tensor>{{"w", {2}, {1.0f, std::numeric_limits<float>::quiet_NaN()}}});
    try {
        encode_checkpoint(nan_map, {});
        FAIL("NaN accepted");
    } catch (const FormatError & e) {
        CHECK(e.kind() == FormatErrorKind::non_finite);
        CHECK(std::string(e.what()).find("'w'") != std::string::npos);
    }
    const TensorMap inf_map(std::vector<Tensor>{{"w", {1}, {std::numeric_limits<float>::infinity()}}});
    CHECK_THROWS_AS(encode_checkpoint(inf_map, {}), FormatError);
    CheckpointMeta bad;
    bad.learning_rate = -1.0;
    CHECK_THROWS_AS(encode_checkpoint(small_map(), bad), FormatError);
    bad = {};
    bad.val_acc = 1.5;
    CHECK_THROWS_AS(encode_checkpoint(small_map(), bad), FormatError);
}

TEST_CASE("malformed files map to distinct errors") {
    const json one = {{"name", "w"}, {"shape", {2}}, {"dtype", "f32"}, {"offset", 0}, {"nbytes", 8}};
    const auto good = assemble("SOUPT1\n", header(json::array({one})).dump(), floats({1.0f, 2.0f}));
    CHECK(decode_checkpoint(good).map.at("w").data == std::vector<float>{1.0f, 2.0f});

    SUBCASE("bad magic") {
        CHECK(decode_kind(assemble("XOUPT1\n", header(json::array({one})).dump(), floats({1.0f, 2.0f}))) ==
              FormatErrorKind::bad_magic);
        CHECK(decode_kind({}) == FormatErrorKind::bad_magic);
    }
    SUBCASE("truncated header") {
        auto cut = good;
        cut.resize(10);
        CHECK(decode_kind(cut) == FormatErrorKind::truncated_header);
        cut = good;
        cut.resize(30);
        CHECK(decode_kind(cut) == FormatErrorKind::truncated_header);
    }
    SUBCASE("header not JSON") {
        CHECK(decode_kind(assemble("SOUPT1\n", "{nope", floats({1.0f, 2.0f}))) == FormatErrorKind::bad_header);
        CHECK(decode_kind(assemble("SOUPT1\n", header(json::array()).dump(), {})) == FormatErrorKind::bad_header);
    }
    SUBCASE("nbytes past the end") {
        json t = one;
        t["shape"] = {4};
        t["nbytes"] = 16;
        CHECK(decode_kind(assemble("SOUPT1\n", header(json::array({t})).dump(), floats({1.0f, 2.0f}))) ==
              FormatErrorKind::truncated_payload);
    }
    SUBCASE("nbytes disagrees with shape") {
        json t = one;
        t["nbytes"] = 12;
        CHECK(decode_kind(assemble("SOUPT1\n", header(json::array({t})).dump(), floats({1.0f, 2.0f, 3.0f}))) ==
              FormatErrorKind::length_mismatch);
    }
    SUBCASE("trailing bytes") {
        CHECK(decode_kind(assemble("SOUPT1\n", header(json::array({one})).dump(), floats({1.0f, 2.0f, 3.0f}))) ==
              FormatErrorKind::length_mismatch);
    }
    SUBCASE("offset gap") {
        json t = one;
        t["offset"] = 4;
        CHECK(decode_kind(assemble("SOUPT1\n", header(json::array({t})).dump(), floats({1.0f, 2.0f, 3.0f}))) ==
              FormatErrorKind::length_mismatch);
    }
    SUBCASE("unknown dtype") {
        json t = one;
        t["dtype"] = "f16";
        CHECK(decode_kind(assemble("SOUPT1\n", header(json::array({t})).dump(), floats({1.0f, 2.0f}))) ==
              FormatErrorKind::unknown_dtype);
    }
    SUBCASE("NaN payload") {
        CHECK(decode_kind(assemble("SOUPT1\n", header(json::array({one})).dump(),
                                   floats({1.0f, std::numeric_limits<float>::quiet_NaN()}))) ==
              FormatErrorKind::non_finite);
    }
    SUBCASE("invalid meta") {
        json h = header(json::array({one}));
        h["meta"]["val_acc"] = 2.0;
        CHECK(decode_kind(assemble("SOUPT1\n", h.dump(), floats({1.0f, 2.0f}))) == FormatErrorKind::invalid_meta);
    }
}

TEST_CASE("compatibility checks") {
    const auto a = small_map();
    CHECK(validate_compatible(a, a));
    const TensorMap renamed(std::vector<Tensor>{{"a", {2, 2}, {0, 0, 0, 0}}, {"c", {3}, {0, 0, 0}}});
    CHECK_FALSE(validate_compatible(a, renamed));
    const TensorMap reshaped(std::vector<Tensor>{{"a", {4}, {0, 0, 0, 0}}, {"b", {3}, {0, 0, 0}}});
    CHECK_FALSE(validate_compatible(a, reshaped));
    try {
        require_compatible(a, reshaped);
        FAIL("shape mismatch accepted");
    } catch (const ShapeError & e) {
        CHECK(e.tensor() == "a");
    }
    const TensorMap extra(std::vector<Tensor>{{"a", {2, 2}, {0, 0, 0, 0}}, {"b", {3}, {0, 0, 0}}, {"z", {1}, {0}}});
    CHECK_FALSE(validate_compatible(a, extra));
    CHECK_FALSE(validate_compatible(extra, a));
}

TEST_CASE("linear_combine") {
    const auto a = small_map();
    SUBCASE("identity term is bit-exact") {
        const LinearTerm t[] = {{1.0, &a}};
        CHECK(linear_combine(t) == a);
    }
    SUBCASE("halves of one map") {
        const LinearTerm t[] = {{0.5, &a}, {0.5, &a}};
        CHECK(linear_combine(t) == a);
    }
    SUBCASE("thirds against a scalar loop") {
        std::mt19937_64 rng(11);
        const auto x = testing::random_map(rng, {{5, 3}, {7}});
        const auto y = testing::random_map(rng, {{5, 3}, {7}});
        const auto z = testing::random_map(rng, {{5, 3}, {7}});
        const LinearTerm t[] = {{1.0 / 3, &x}, {1.0 / 3, &y}, {1.0 / 3, &z}};
        const auto out = linear_combine(t);
        for (std::size_t e = 0; e < out.size(); ++e) {
            for (std::size_t i = 0; i < out.data(e).size(); ++i) {
                const double want =
                    (double(x.data(e)[i]) + double(y.data(e)[i]) + double(z.data(e)[i])) / 3.0;
                CHECK(std::abs(out.data(e)[i] - want) <= 1e-7 * std::max(std::abs(want), 1e-30));
            }
        }
    }
    SUBCASE("frozen values") {
        // (1 + 2 + 4) / 3 = 2.333... rounds to 0x40155555 in f32
        const TensorMap p(std::vector<Tensor>{{"w", {1}, {1.0f}}}), q(std::vector<Tensor>{{"w", {1}, {2.0f}}}), r(std::vector<Tensor>{{"w", {1}, {4.0f}}});
        const LinearTerm t[] = {{1.0 / 3, &p}, {1.0 / 3, &q}, {1.0 / 3, &r}};
        CHECK(std::bit_cast<std::uint32_t>(linear_combine(t).data(0)[0]) == 0x40155555u);
    }
    SUBCASE("homogeneity") {
        std::mt19937_64 rng(3);
        const auto x = testing::random_map(rng, {{4, 4}});
        const LinearTerm once[] = {{0.25, &x}};
        const auto scaled = linear_combine(once);
        const LinearTerm twice[] = {{2.0, &scaled}};
        const LinearTerm direct[] = {{0.5, &x}};
        CHECK(linear_combine(twice) == linear_combine(direct));
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(linear_combine({}), Error);
        const TensorMap other(std::vector<Tensor>{{"a", {4}, {0, 0, 0, 0}}, {"b", {3}, {0, 0, 0}}});
        const LinearTerm t[] = {{0.5, &a}, {0.5, &other}};
        CHECK_THROWS_AS(linear_combine(t), ShapeError);
    }
}
