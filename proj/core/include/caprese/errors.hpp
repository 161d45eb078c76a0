#pragma once

#include <stdexcept>
#include <string>

namespace caprese {

// Error taxonomy. The CLI maps these onto exit codes:
//   config/shape/domain/state/capacity -> 1, io/format -> 2,
//   numeric -> 3, dependency -> 4.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };       // dimension mismatch
struct DomainError : Error { using Error::Error; };      // value outside the op's domain
struct CapacityError : Error { using Error::Error; };    // sequence exceeds max_seq
struct ConfigError : Error { using Error::Error; };      // bad run configuration
struct StateError : Error { using Error::Error; };       // operation illegal in current state
struct FormatError : Error { using Error::Error; };      // corrupt or mismatched container
struct IoError : Error { using Error::Error; };          // filesystem failure
struct NumericError : Error { using Error::Error; };     // divergence, singularity
struct DependencyError : Error { using Error::Error; };  // missing prerequisite artifact

}  // namespace caprese
