#pragma once

#include <stdexcept>
#include <string>

namespace pivsem {

struct PivsemError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Model-syntax errors carry the offending source position.
struct ParseError : PivsemError {
  ParseError(const std::string& msg, int line_, int col_)
      : PivsemError("parse error at line " + std::to_string(line_) + ", column " +
                    std::to_string(col_) + ": " + msg),
        line(line_),
        col(col_) {}
  int line;
  int col;
};

struct SpecError : PivsemError {
  using PivsemError::PivsemError;
};

struct StageOneError : PivsemError {
  using PivsemError::PivsemError;
};

struct IdentificationError : PivsemError {
  using PivsemError::PivsemError;
};

struct EstimationError : PivsemError {
  using PivsemError::PivsemError;
};

struct InputError : PivsemError {
  using PivsemError::PivsemError;
};

}  // namespace pivsem
