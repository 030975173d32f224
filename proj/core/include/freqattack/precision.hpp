#pragma once

#include <string_view>

namespace freqattack {

// Numeric mode. Every numeric component is a template over its scalar and is
// instantiated for float and double; this selects which one front ends use.
enum class Precision { f32, f64 };

/// Reads FREQATTACK_PRECISION ("32" or "64"); unset means f32. Any other value
/// raises InvalidConfig.
Precision precision_from_env();

Precision parse_precision(std::string_view text);
std::string_view to_string(Precision p) noexcept;

}  // namespace freqattack
