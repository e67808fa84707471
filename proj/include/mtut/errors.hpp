#pragma once

#include <stdexcept>
#include <string>

namespace mtut {

// Invalid shapes, bad arguments, malformed configs. CLI maps this to exit 2.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Filesystem / format failures. CLI maps this to exit 3.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace mtut
