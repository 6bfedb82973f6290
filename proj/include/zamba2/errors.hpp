// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace zamba2 {

// All library errors derive from Error so callers can catch one type.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionError : Error { using Error::Error; };
struct ContractError : Error { using Error::Error; };
struct CapacityError : Error { using Error::Error; };
struct InputError : Error { using Error::Error; };
struct PolicyError : Error { using Error::Error; };
struct InvariantError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };

// Config errors always name the offending field.
struct ConfigError : Error {
    ConfigError(std::string field, const std::string & what)
        : Error("config error [" + field + "]: " + what), field_(std::move(field)) {}
    const std::string & field() const noexcept { return field_; }

private:
    std::string field_;
};

#define ZAMBA2_REQUIRE(cond, ErrType, msg)                                       \
    do {                                                                         \
        if (!(cond)) throw ErrType(std::string(msg));                            \
    } while (0)

} // namespace zamba2
