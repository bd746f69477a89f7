#pragma once

#include <cstdint>

namespace look {

/// Class (or sub-class) identifier, 0-based.
using Label = std::int32_t;

}  // namespace look
