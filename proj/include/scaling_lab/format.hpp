#pragma once

#include <charconv>
#include <cmath>
#include <string>
#include <string_view>
#include <system_error>

namespace scaling_lab {

/// Shortest round-trip decimal form, independent of the C locale.
inline std::string format_double(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc{}) return "nan";
  return std::string(buf, end);
}

inline bool parse_double(std::string_view text, double& out) {
  if (text == "nan") {
    out = std::nan("");
    return true;
  }
  if (text == "inf") {
    out = INFINITY;
    return true;
  }
  if (text == "-inf") {
    out = -INFINITY;
    return true;
  }
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  return ec == std::errc{} && ptr == text.data() + text.size();
}

}  // namespace scaling_lab
