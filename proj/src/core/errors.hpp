#pragma once

#include <stdexcept>
#include <string>

namespace mf {

// Error categories aligned with CLI exit codes (2/3/4).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class MissingArtifactError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace mf
