#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace nsc {

// mt19937_64 engine with hand-rolled draw helpers. The standard
// distributions are implementation-defined, which would break bit-exact
// reproducibility of saved artifacts across toolchains; the mappings below
// are fully pinned.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // uniform in [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform_range(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller, second value cached
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // uniform index in [0, n); modulo bias is < n / 2^64, irrelevant here
    std::size_t uniform_index(std::size_t n) { return static_cast<std::size_t>(eng_() % n); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = uniform_index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// FNV-1a mix of a base seed and a tag, for independent per-task /
// per-purpose streams.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
    std::uint64_t h = 14695981039346656037ull;
    for (int i = 0; i < 8; ++i) {
        h ^= (base >> (8 * i)) & 0xffu;
        h *= 1099511628211ull;
    }
    for (unsigned char c : tag) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace nsc
