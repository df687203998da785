#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mcqr::csv {

/// Quotes a field when it holds a comma, quote or line break.
std::string escape(const std::string& field);
std::string join(const std::vector<std::string>& fields);
/// Splits one CSV record; doubled quotes inside quoted fields unescape.
std::vector<std::string> split(const std::string& line);

}  // namespace mcqr::csv
