#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <string>

namespace optimus {

// ---- errors ----------------------------------------------------------------

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// shape/argument violations of an operation's contract
struct ContractError : Error {
    using Error::Error;
};

// bad run configuration (unsatisfiable topology, non-divisible batch, ...)
struct ConfigError : Error {
    using Error::Error;
};

// a collective that can never complete (member missing, kind/shape mismatch)
struct HangError : Error {
    using Error::Error;
};

// filesystem / serialization problems
struct IoError : Error {
    using Error::Error;
};

template <typename... Args>
std::string strcat_(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw ContractError(msg);
}

// ---- deterministic rng -----------------------------------------------------

// splitmix64: tiny, stateless-friendly, good enough for init/shuffles
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t hash_mix(uint64_t a, uint64_t b) {
    uint64_t s = a * 0x9e3779b97f4a7c15ull + b;
    return splitmix64(s);
}

inline uint64_t hash_mix(uint64_t a, uint64_t b, uint64_t c) {
    return hash_mix(hash_mix(a, b), c);
}

inline uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// uniform in (0, 1]: never returns 0 so it is safe under log()
inline double u64_to_unit(uint64_t x) {
    return (double)((x >> 11) + 1) * (1.0 / 9007199254740992.0);
}

// counter-based standard normal: element i of stream (seed, tag)
inline double normal_at(uint64_t seed, uint64_t tag, uint64_t i) {
    double u1 = u64_to_unit(hash_mix(seed, tag, 2 * i));
    double u2 = u64_to_unit(hash_mix(seed, tag, 2 * i + 1));
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

// stateful convenience wrapper over splitmix64
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {}
    uint64_t next() { return splitmix64(state_); }
    // uniform integer in [0, n)
    uint64_t next_below(uint64_t n) { return next() % n; }
    double unit() { return u64_to_unit(next()); }

  private:
    uint64_t state_;
};

// ---- bf16 emulation ----------------------------------------------------------

inline uint32_t f32_bits(float f) {
    uint32_t u;
    std::memcpy(&u, &f, 4);
    return u;
}

inline float bits_f32(uint32_t u) {
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

inline uint16_t f32_to_bf16_bits(float f) {
    uint32_t u = f32_bits(f);
    if (std::isnan(f)) return (uint16_t)((u >> 16) | 0x0040);  // keep NaN quiet
    // round to nearest even on the dropped 16 bits
    uint32_t rounded = u + 0x7fffu + ((u >> 16) & 1u);
    return (uint16_t)(rounded >> 16);
}

inline float bf16_bits_to_f32(uint16_t b) {
    return bits_f32((uint32_t)b << 16);
}

// round-trip a float through bf16 (the storage precision of distributed weights)
inline float bf16_round(float f) {
    return bf16_bits_to_f32(f32_to_bf16_bits(f));
}

}  // namespace optimus
