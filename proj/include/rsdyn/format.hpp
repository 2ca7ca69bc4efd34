#pragma once

#include <string>

namespace rsdyn {

/// Decimal rendering with 17 significant digits; round-trips every double
/// and makes text artifacts byte-comparable across runs.
std::string fmt17(double value);

/// Quote a string for embedding in hand-written JSON.
std::string json_quote(const std::string& s);

}  // namespace rsdyn
