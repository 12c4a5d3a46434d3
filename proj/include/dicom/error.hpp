#pragma once

#include <stdexcept>
#include <string>

namespace dicom {

// Error carrying a module-qualified code such as "data.missing_file".
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

}  // namespace dicom
