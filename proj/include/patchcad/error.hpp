#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace patchcad {

// Every failure surfaced by the library carries a stable machine-readable
// code alongside the human message; the CLI serializes both.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

}  // namespace patchcad
