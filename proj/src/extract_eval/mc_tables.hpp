#pragma once

#include <cstdint>

namespace circle::extract_eval::detail {

/// Corners 0..7 at (0,0,0) (1,0,0) (1,1,0) (0,1,0) (0,0,1) (1,0,1) (1,1,1) (0,1,1);
/// bit c of the case index is set when corner c is inside.
extern const std::int8_t kTriTable[256][16];

}  // namespace circle::extract_eval::detail
