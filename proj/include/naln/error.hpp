#pragma once

#include <stdexcept>
#include <string>

namespace naln {

// Base for every error raised by the library. The CLI maps these to exit
// code 2 (usage/data) and everything else to 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { public: using Error::Error; };
class ParameterError : public Error { public: using Error::Error; };
class DataError : public Error { public: using Error::Error; };
class FormatError : public Error { public: using Error::Error; };
class IndexError : public Error { public: using Error::Error; };
class ContractError : public Error { public: using Error::Error; };
class EmptySetError : public Error { public: using Error::Error; };
class EmptyOutputError : public Error { public: using Error::Error; };
class BuildError : public Error { public: using Error::Error; };
class TrainingError : public Error { public: using Error::Error; };
class MetricError : public Error { public: using Error::Error; };

}  // namespace naln
