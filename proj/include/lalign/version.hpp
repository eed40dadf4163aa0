#pragma once

namespace lalign {

inline constexpr const char* kVersion = "0.1.0";

// Bumped whenever the checkpoint layout changes.
inline constexpr int kCheckpointVersion = 1;

}  // namespace lalign
