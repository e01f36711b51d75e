#pragma once

// Shared utilities: seeded RNG streams, hashing, binary I/O helpers.
// Every random choice in the project flows through RandStream so that
// reruns with the same seed are byte-identical.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace molang {

inline void check(bool cond, const std::string& msg) {
  if (!cond) {
    throw std::runtime_error(msg);
  }
}

// ----------------------------------------------------------------- hashing

// FNV-1a, used for config-section hashes and seed derivation tags.
inline uint64_t fnv1a(std::string_view s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t mix_u64(uint64_t a, uint64_t b) {
  // splitmix-style finalizer over the pair
  uint64_t z = a + 0x9e3779b97f4a7c15ull + b * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Derives an independent stream seed from (seed, tag, index).
inline uint64_t derive_seed(uint64_t seed, std::string_view tag, uint64_t index = 0) {
  return mix_u64(mix_u64(seed, fnv1a(tag)), index);
}

// --------------------------------------------------------------------- rng

// SplitMix64 core with uniform/normal draws. Self-contained so results do
// not depend on libstdc++ distribution internals.
class RandStream {
 public:
  explicit RandStream(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint64_t below(uint64_t n) { return next_u64() % n; }

  // standard normal via Box-Muller (no spare cached; deterministic)
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // normal truncated to [-limit, +limit] sigma via resampling
  double truncated_normal(double stddev, double limit_sigmas) {
    for (int i = 0; i < 64; ++i) {
      double v = normal();
      if (std::fabs(v) <= limit_sigmas) return v * stddev;
    }
    return 0.0;
  }

 private:
  uint64_t state_;
};

// -------------------------------------------------------------- binary I/O

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  check(static_cast<bool>(is), "unexpected end of stream reading u32");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void write_f32(std::ostream& os, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32(os, bits);
}

inline float read_f32(std::istream& is) {
  uint32_t bits = read_u32(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline void write_f64(std::ostream& os, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u32(os, static_cast<uint32_t>(bits & 0xffffffffull));
  write_u32(os, static_cast<uint32_t>(bits >> 32));
}

inline double read_f64(std::istream& is) {
  uint64_t lo = read_u32(is);
  uint64_t hi = read_u32(is);
  uint64_t bits = lo | (hi << 32);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline std::string read_file_text(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  check(f.good(), "cannot open file: " + p.string());
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return s;
}

inline void write_file_text(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  check(f.good(), "cannot open file for writing: " + p.string());
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  check(f.good(), "write failed: " + p.string());
}

}  // namespace molang
