// Copyright 2026 The BLO-Inst Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace bloinst {

// Values match the CLI exit codes and the C API status codes.
enum class ErrorCode : int {
    internal = 1,
    usage = 2,
    io = 3,
    divergence = 4,
    compatibility = 5,
};

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

// Argument or shape contract violated by the caller.
inline Error invalid_argument(const std::string& what) { return Error(ErrorCode::usage, what); }

inline Error io_error(const std::string& what) { return Error(ErrorCode::io, what); }

}  // namespace bloinst
