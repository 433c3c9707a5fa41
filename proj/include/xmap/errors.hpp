#pragma once

#include <stdexcept>
#include <string>

namespace xmap {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operand shapes do not satisfy an operation's precondition.
struct ShapeError : Error {
    using Error::Error;
};

// A caller violated an operation contract (empty batch, out-of-range
// timestep, non-scalar loss, ...).
struct ContractError : Error {
    using Error::Error;
};

// A file is not in the expected on-disk format (bad magic, version,
// truncated payload, corrupt section).
struct FormatError : Error {
    using Error::Error;
};

// Filesystem-level failure; the message names the offending path.
struct IoError : Error {
    using Error::Error;
};

} // namespace xmap
