// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace soup {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor maps disagree on names or shapes.
class ShapeError : public Error {
public:
    ShapeError(std::string tensor, const std::string & what)
        : Error(what), tensor_(std::move(tensor)) {}
    const std::string & tensor() const { return tensor_; }

private:
    std::string tensor_;
};

class IoError : public Error {
public:
    IoError(std::string path, const std::string & what)
        : Error(what), path_(std::move(path)) {}
    const std::string & path() const { return path_; }

private:
    std::string path_;
};

enum class FormatErrorKind {
    bad_magic,
    truncated_header,
    bad_header,
    truncated_payload,
    length_mismatch,
    unknown_dtype,
    non_finite,
    invalid_meta,
};

const char * to_string(FormatErrorKind kind);

// Malformed container file. offset is the byte position where parsing failed.
class FormatError : public Error {
public:
    FormatError(FormatErrorKind kind, std::uint64_t offset, const std::string & detail)
        : Error(std::string(to_string(kind)) + " at offset " + std::to_string(offset) + ": " + detail),
          kind_(kind), offset_(offset) {}
    FormatErrorKind kind() const { return kind_; }
    std::uint64_t offset() const { return offset_; }

private:
    FormatErrorKind kind_;
    std::uint64_t offset_;
};

} // namespace soup
