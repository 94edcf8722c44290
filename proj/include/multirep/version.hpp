#pragma once

namespace multirep {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace multirep
