#pragma once

#include <charconv>
#include <string>

namespace mrw {

// Shortest round-trip decimal form; keeps emitted files byte-stable across
// runs and platforms.
inline std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace mrw
