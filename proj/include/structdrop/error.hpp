#pragma once

#include <stdexcept>
#include <string>

namespace structdrop {

// Operand dimensions do not agree.
struct ShapeError : std::invalid_argument
{
  using std::invalid_argument::invalid_argument;
};

// A scalar parameter lies outside its documented range.
struct ParameterError : std::invalid_argument
{
  using std::invalid_argument::invalid_argument;
};

// Call order violated (e.g. backward with a pattern other than the forward one).
struct StateError : std::logic_error
{
  using std::logic_error::logic_error;
};

// Malformed file or stream contents.
struct FormatError : std::runtime_error
{
  using std::runtime_error::runtime_error;
};

} // namespace structdrop
