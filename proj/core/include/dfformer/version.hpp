#pragma once

namespace dff {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace dff
