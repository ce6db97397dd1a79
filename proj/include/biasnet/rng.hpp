#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace biasnet {

/// Philox4x32-10 counter-based generator (Salmon et al., SC'11).
/// A block of four 32-bit outputs is a pure function of (counter, key).
namespace philox {

using Counter = std::array<std::uint32_t, 4>;
using Key = std::array<std::uint32_t, 2>;

inline constexpr std::uint32_t kMul0 = 0xD2511F53u;
inline constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
inline constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
inline constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

constexpr Counter round(Counter c, Key k) noexcept
{
    const std::uint64_t p0 = std::uint64_t{kMul0} * c[0];
    const std::uint64_t p1 = std::uint64_t{kMul1} * c[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
    return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
}

constexpr Counter block(Counter c, Key k) noexcept
{
    for (int r = 0; r < 10; ++r) {
        if (r) {
            k[0] += kWeyl0;
            k[1] += kWeyl1;
        }
        c = round(c, k);
    }
    return c;
}

} // namespace philox

/// 53-bit uniform in [0, 1).
constexpr double to_unit(std::uint32_t hi, std::uint32_t lo) noexcept
{
    const std::uint64_t bits = (std::uint64_t{hi} << 32) | lo;
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/// Two standard normals from one Philox block (Box-Muller).
inline std::pair<double, double> box_muller(const philox::Counter& block) noexcept
{
    const double u1 = 1.0 - to_unit(block[0], block[1]); // (0, 1]
    const double u2 = to_unit(block[2], block[3]);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    return {r * std::cos(theta), r * std::sin(theta)};
}

/// Stateless keyed draws: the value at (seed, stream, a, b) never depends on
/// evaluation order, so parallel and serial consumers agree bitwise.
struct KeyedRandom {
    std::uint64_t seed = 0;
    std::uint32_t stream = 0;

    philox::Counter block(std::uint32_t a, std::uint32_t b) const noexcept
    {
        return philox::block({a, b, stream, 0u},
                             {static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)});
    }

    double uniform(std::uint32_t a, std::uint32_t b) const noexcept
    {
        const auto blk = block(a, b);
        return to_unit(blk[0], blk[1]);
    }

    /// Standard normal for element `index` of record `record`; elements are
    /// paired two per Philox block.
    double normal(std::uint32_t record, std::uint32_t index) const noexcept
    {
        const auto [z0, z1] = box_muller(block(record, index / 2));
        return (index % 2 == 0) ? z0 : z1;
    }
};

/// Sequential stream over Philox blocks: an (algorithm, seed, stream) triple
/// fully determines every value produced.
class Rng {
public:
    static constexpr std::string_view kAlgorithm = "philox4x32-10";

    explicit Rng(std::uint64_t seed, std::uint32_t stream = 0) : seed_(seed), stream_(stream) {}

    std::string algorithm() const { return std::string(kAlgorithm); }
    std::uint64_t seed() const noexcept { return seed_; }
    std::uint32_t stream() const noexcept { return stream_; }

    std::uint32_t next_u32()
    {
        if (lane_ == 4) refill();
        return buffer_[lane_++];
    }

    std::uint64_t next_u64()
    {
        const std::uint64_t hi = next_u32();
        return (hi << 32) | next_u32();
    }

    /// Uniform in [0, 1).
    double uniform()
    {
        const auto hi = next_u32();
        return to_unit(hi, next_u32());
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal()
    {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        philox::Counter blk{next_u32(), next_u32(), next_u32(), next_u32()};
        auto [z0, z1] = box_muller(blk);
        spare_ = z1;
        has_spare_ = true;
        return z0;
    }

    /// Unbiased integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n)
    {
        if (n <= 1) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    template <typename Range>
    void shuffle(Range& range)
    {
        using std::swap;
        const auto n = static_cast<std::uint64_t>(std::size(range));
        for (std::uint64_t i = n; i > 1; --i) swap(range[i - 1], range[below(i)]);
    }

    std::vector<std::size_t> permutation(std::size_t n)
    {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        shuffle(idx);
        return idx;
    }

private:
    void refill()
    {
        buffer_ = philox::block({static_cast<std::uint32_t>(counter_), static_cast<std::uint32_t>(counter_ >> 32),
                                 stream_, 0u},
                                {static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)});
        ++counter_;
        lane_ = 0;
    }

    std::uint64_t seed_;
    std::uint32_t stream_;
    std::uint64_t counter_ = 0;
    philox::Counter buffer_{};
    int lane_ = 4;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// Well-separated seeds for derived jobs (split, level, network) from one root seed.
constexpr std::uint64_t derive_seed(std::uint64_t root, std::uint64_t tag) noexcept
{
    std::uint64_t z = root + 0x9E3779B97F4A7C15ull * (tag + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

} // namespace biasnet
