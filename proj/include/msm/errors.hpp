#pragma once

#include <stdexcept>
#include <string>

namespace msm {

// All recoverable failures are typed exceptions so callers (and the CLI exit
// code mapping) can distinguish config, data and numeric trouble.
struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

struct ShapeError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct ContractError : Error {
    using Error::Error;
};
struct RangeError : Error {
    using Error::Error;
};
struct EmptySceneError : Error {
    using Error::Error;
};
struct SpecError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct IOError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct CheckpointError : Error {
    using Error::Error;
};
struct DegenerateViewError : Error {
    using Error::Error;
};
struct DegenerateInputError : Error {
    using Error::Error;
};
struct DegenerateBatchError : Error {
    using Error::Error;
};

}  // namespace msm
