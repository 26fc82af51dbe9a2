#pragma once

#include <stdexcept>
#include <string>

namespace fvhand {

// Malformed files, corrupt streams, missing data on disk.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Precondition violations on operation inputs use std::invalid_argument;
// values outside a documented range use std::out_of_range.

}  // namespace fvhand
