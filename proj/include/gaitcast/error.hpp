#pragma once

#include <stdexcept>
#include <string>

namespace gaitcast {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public Error { using Error::Error; };
class ParseError : public Error { using Error::Error; };
class DimensionError : public Error { using Error::Error; };
class RangeError : public Error { using Error::Error; };
class ArgumentError : public Error { using Error::Error; };
class LengthError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class ConditioningError : public Error { using Error::Error; };
class HistoryError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };

}  // namespace gaitcast
