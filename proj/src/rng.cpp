#include "cue/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace cue {
namespace {

inline std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }

}  // namespace

std::uint64_t splitmix64(std::uint64_t& state) noexcept {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) noexcept {
  std::uint64_t s = seed ^ (0xD1B54A32D192ED03ull * (index + 1));
  splitmix64(s);
  return splitmix64(s);
}

std::uint64_t hash_string(const char* s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (; *s; ++s) {
    h ^= static_cast<unsigned char>(*s);
    h *= 0x100000001b3ull;
  }
  return h;
}

Rng::Rng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t st = seed;
  for (auto& w : s_) w = splitmix64(st);
}

std::uint64_t Rng::next_u64() noexcept {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::uniform_index(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index: empty range");
  // Rejection keeps the draw exactly uniform.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

namespace {

struct Ziggurat {
  std::uint32_t kn[128];
  double wn[128];
  double fn[128];

  Ziggurat() {
    const double m1 = 2147483648.0;
    const double vn = 9.91256303526217e-3;
    double dn = 3.442619855899, tn = dn;
    const double q = vn / std::exp(-0.5 * dn * dn);
    kn[0] = static_cast<std::uint32_t>((dn / q) * m1);
    kn[1] = 0;
    wn[0] = q / m1;
    wn[127] = dn / m1;
    fn[0] = 1.0;
    fn[127] = std::exp(-0.5 * dn * dn);
    for (int i = 126; i >= 1; --i) {
      dn = std::sqrt(-2.0 * std::log(vn / dn + std::exp(-0.5 * dn * dn)));
      kn[i + 1] = static_cast<std::uint32_t>((dn / tn) * m1);
      tn = dn;
      fn[i] = std::exp(-0.5 * dn * dn);
      wn[i] = dn / m1;
    }
  }
};

const Ziggurat& ziggurat() {
  static const Ziggurat z;
  return z;
}

constexpr double kZigguratTail = 3.442619855899;

}  // namespace

double Rng::normal() noexcept {
  const Ziggurat& z = ziggurat();
  for (;;) {
    // Layer index and value come from disjoint halves of the draw.
    const std::uint64_t u = next_u64();
    const auto hz = static_cast<std::int32_t>(static_cast<std::uint32_t>(u >> 32));
    const std::uint32_t iz = static_cast<std::uint32_t>(u) & 127u;
    const std::uint32_t mag =
        hz < 0 ? 0u - static_cast<std::uint32_t>(hz) : static_cast<std::uint32_t>(hz);
    const double x = hz * z.wn[iz];
    if (mag < z.kn[iz]) return x;
    if (iz == 0) {
      // Base strip: sample the tail beyond the last layer.
      double tx, ty;
      do {
        double u1, u2;
        do {
          u1 = uniform();
        } while (u1 <= 0.0);
        do {
          u2 = uniform();
        } while (u2 <= 0.0);
        tx = -std::log(u1) / kZigguratTail;
        ty = -std::log(u2);
      } while (ty + ty < tx * tx);
      return hz > 0 ? kZigguratTail + tx : -kZigguratTail - tx;
    }
    if (z.fn[iz] + uniform() * (z.fn[iz - 1] - z.fn[iz]) < std::exp(-0.5 * x * x)) return x;
  }
}

Tensor sample_std_normal(Rng& rng, Shape shape) {
  Tensor out(std::move(shape));
  for (auto& v : out.values()) v = rng.normal();
  return out;
}

}  // namespace cue
