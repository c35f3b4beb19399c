#include "tomolab/rng.hpp"

namespace tomolab {

namespace {
std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 33)) * 0xFF51AFD7ED558CCDULL;
  z = (z ^ (z >> 33)) * 0xC4CEB9FE1A85EC53ULL;
  return z ^ (z >> 33);
}
}  // namespace

std::uint64_t stream_key(std::initializer_list<std::uint64_t> words) {
  std::uint64_t h = 0x6A09E667F3BCC908ULL;
  for (std::uint64_t w : words) {
    h = mix64(h ^ mix64(w + 0x9E3779B97F4A7C15ULL));
  }
  return h;
}

}  // namespace tomolab
