#pragma once

namespace lorarank {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace lorarank
