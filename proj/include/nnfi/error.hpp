#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace nnfi {

// Every failure raised by the library derives from Error so callers can map
// categories onto exit codes without string matching.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IndexError : public Error { public: using Error::Error; };
class ArgumentError : public Error { public: using Error::Error; };
class GraphError : public Error { public: using Error::Error; };
class HookError : public Error { public: using Error::Error; };
class ObserverError : public Error { public: using Error::Error; };
class DataError : public Error { public: using Error::Error; };
class IoError : public Error { public: using Error::Error; };

class ConfigError : public Error { public: using Error::Error; };

class ParseError : public ConfigError {
public:
    ParseError(std::size_t line, const std::string& what)
        : ConfigError("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

enum class LoadFailure { BadMagic, BadVersion, Truncated, MissingTensor, ShapeMismatch, Malformed };

class LoadError : public IoError {
public:
    LoadError(LoadFailure kind, const std::string& what) : IoError(what), kind_(kind) {}
    LoadFailure kind() const noexcept { return kind_; }

private:
    LoadFailure kind_;
};

} // namespace nnfi
