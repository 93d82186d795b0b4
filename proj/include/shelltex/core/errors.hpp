// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <stdexcept>
#include <string>

namespace shelltex {

/// Invalid argument value (outside the domain of an operation).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Inconsistent scene/configuration combination.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// An operation was invoked without the state it depends on.
class StateError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// File-level failures. `kind` names the failure so callers can branch on it.
class IoError : public std::runtime_error {
public:
    enum class Kind {
        MissingFile,
        MalformedManifest,
        MalformedMatrix,
        NonRigidRotation,
        DimensionMismatch,
        BadImage,
        NotACheckpoint,
        VersionMismatch,
        TruncatedCheckpoint,
        BadMesh,
        WriteFailed,
    };

    IoError(Kind kind, const std::string &what) : std::runtime_error(what), mKind(kind) {}

    Kind kind() const noexcept { return mKind; }

private:
    Kind mKind;
};

} // namespace shelltex
