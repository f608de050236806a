#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <span>
#include <string>

#include "lucid/error.hpp"
#include "lucid/tensor.hpp"

namespace lucid::detail {

// splitmix64 over the combined words
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = seed ^ (a * 0x9E3779B97F4A7C15ULL) ^ (b * 0xC2B2AE3D27D4EB4FULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// One HWC image as a [1,C,H,W] batch.
inline Tensor hwc_to_nchw(std::span<const float> hwc, int h, int w, int c) {
  if (hwc.size() != static_cast<std::size_t>(h) * w * c) throw ShapeError("image size does not match its shape");
  Tensor x({1, c, h, w});
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx)
      for (int k = 0; k < c; ++k)
        x[(static_cast<std::size_t>(k) * h + y) * w + xx] = hwc[(static_cast<std::size_t>(y) * w + xx) * c + k];
  return x;
}

}  // namespace lucid::detail
