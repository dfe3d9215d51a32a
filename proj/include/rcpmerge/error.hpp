// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <stdexcept>
#include <string>

namespace rcpmerge {

/// Base class for every error raised by the library. The CLI maps the
/// concrete subclass onto a process exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Precondition or validation failure (bad config, mismatched key sets,
/// malformed checkpoint header). Exit code 2.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Filesystem failure: missing file, unwritable path, short read. Exit code 3.
class IoError : public Error {
public:
    using Error::Error;
};

/// A NaN or infinity was encountered where finite values are required. Exit code 4.
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace rcpmerge
