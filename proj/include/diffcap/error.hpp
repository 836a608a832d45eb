#pragma once

#include <stdexcept>
#include <string>

namespace diffcap {

/// Caller handed us something malformed: bad shapes, bad config values,
/// unusable files. The CLI maps this to exit code 2; everything else that
/// reaches main is a runtime failure and exits 1.
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace diffcap
