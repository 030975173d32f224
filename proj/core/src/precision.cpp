#include "freqattack/precision.hpp"

#include <cstdlib>
#include <string>

#include "freqattack/error.hpp"

namespace freqattack {

Precision parse_precision(std::string_view text) {
  if (text == "32") return Precision::f32;
  if (text == "64") return Precision::f64;
  fail(ErrorKind::InvalidConfig, "precision must be 32 or 64, got '" + std::string(text) + "'");
}

Precision precision_from_env() {
  const char* value = std::getenv("FREQATTACK_PRECISION");
  if (value == nullptr || *value == '\0') return Precision::f32;
  return parse_precision(value);
}

std::string_view to_string(Precision p) noexcept { return p == Precision::f64 ? "64" : "32"; }

}  // namespace freqattack
