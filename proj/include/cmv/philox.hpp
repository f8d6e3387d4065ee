#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>

namespace cmv {

// Philox4x32-10 counter block cipher (Salmon et al. constants). The generator
// is stateless given (counter, key), which is what makes streams splittable:
// a stream is just a fixed key/counter prefix plus a running block index.
struct Philox4x32 {
    static constexpr uint32_t M0 = 0xD2511F53u;
    static constexpr uint32_t M1 = 0xCD9E8D57u;
    static constexpr uint32_t W0 = 0x9E3779B9u;
    static constexpr uint32_t W1 = 0xBB67AE85u;

    static std::array<uint32_t, 4> block(std::array<uint32_t, 4> ctr, std::array<uint32_t, 2> key) {
        for (int round = 0; round < 10; ++round) {
            const uint64_t p0 = uint64_t(M0) * ctr[0];
            const uint64_t p1 = uint64_t(M1) * ctr[2];
            const uint32_t hi0 = uint32_t(p0 >> 32), lo0 = uint32_t(p0);
            const uint32_t hi1 = uint32_t(p1 >> 32), lo1 = uint32_t(p1);
            ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
            key[0] += W0;
            key[1] += W1;
        }
        return ctr;
    }
};

// Stream classes partition the counter space. A particle's stream never moves
// when the particle count or the evaluation order changes.
enum class StreamClass : uint32_t {
    Common = 1,
    Private = 2,
    Initial = 3,
    Reference = 4,
    Pair = 5,
    Aux = 6,
};

// One independent N(0,1) stream keyed by (seed, replica, class, index).
// Each Philox block yields two doubles via Box-Muller.
class GaussianStream {
public:
    GaussianStream(uint64_t seed, uint32_t replica, StreamClass cls, uint32_t index)
        : key_{uint32_t(seed & 0xFFFFFFFFu), uint32_t(seed >> 32)},
          index_(index),
          tag_((uint32_t(cls) << 28) | (replica & 0x0FFFFFFFu)) {}

    double next() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const auto out = Philox4x32::block({uint32_t(block_ & 0xFFFFFFFFu), uint32_t(block_ >> 32), index_, tag_}, key_);
        ++block_;
        const uint64_t a = (uint64_t(out[0]) << 32) | out[1];
        const uint64_t b = (uint64_t(out[2]) << 32) | out[3];
        // (k + 0.5) * 2^-53 keeps both uniforms strictly inside (0,1).
        const double u1 = (double(a >> 11) + 0.5) * 0x1p-53;
        const double u2 = (double(b >> 11) + 0.5) * 0x1p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double ang = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(ang);
        have_spare_ = true;
        return r * std::cos(ang);
    }

    // Uniform in (0,1); consumes one block per draw.
    double next_uniform() {
        const auto out = Philox4x32::block({uint32_t(block_ & 0xFFFFFFFFu), uint32_t(block_ >> 32), index_, tag_}, key_);
        ++block_;
        const uint64_t a = (uint64_t(out[0]) << 32) | out[1];
        return (double(a >> 11) + 0.5) * 0x1p-53;
    }

    void fill_normal(std::span<double> out) {
        for (double& x : out) x = next();
    }

private:
    std::array<uint32_t, 2> key_;
    uint32_t index_;
    uint32_t tag_;
    uint64_t block_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace cmv
