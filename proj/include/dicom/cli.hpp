#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dicom {

// Entry point shared by the `dicom` binary and the tests. Returns the process
// exit code: 0 on success, 2 on usage errors, 1 on runtime errors (a JSON
// error record with `code` and `message` goes to err).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dicom
