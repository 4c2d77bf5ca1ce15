#pragma once

#define R2IF_VERSION_MAJOR 0
#define R2IF_VERSION_MINOR 1
#define R2IF_VERSION_PATCH 0
#define R2IF_VERSION "0.1.0"

namespace r2if {

inline const char* version() { return R2IF_VERSION; }

}  // namespace r2if
