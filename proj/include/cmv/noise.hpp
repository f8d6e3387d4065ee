#pragma once

#include "cmv/grid.hpp"
#include "cmv/philox.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace cmv {

// One realization of the product-space noise: a common Brownian increment path
// shared by all particles plus n_private independent private paths, all on one
// grid. Increments are the stored primitive; path values are prefix sums.
struct NoiseBundle {
    TimeGrid grid;
    int d_w = 0;
    int d_b = 0;
    int n_private = 0;
    uint64_t seed = 0;
    uint32_t replica_id = 0;
    std::vector<double> common;   // steps x d_b
    std::vector<double> private_; // particle-major: n_private x steps x d_w

    std::span<const double> dB(std::size_t k) const {
        return {common.data() + k * static_cast<std::size_t>(d_b), static_cast<std::size_t>(d_b)};
    }
    std::span<const double> dW(std::size_t particle, std::size_t k) const {
        const std::size_t steps = grid.steps();
        return {private_.data() + (particle * steps + k) * static_cast<std::size_t>(d_w),
                static_cast<std::size_t>(d_w)};
    }
    // Path value of the common noise at knot k (prefix sum of increments).
    std::vector<double> common_path_at(std::size_t k) const;
};

// Streams: common keyed (seed, replica, Common, 0); private path i keyed
// (seed, replica, private_class, i). Adding particles never perturbs existing
// paths. private_class defaults to Private; reference clouds that must stay
// independent of the particle systems use Reference.
NoiseBundle sample_noise_bundle(const TimeGrid& grid, int d_w, int d_b, int n_private,
                                uint64_t seed, uint32_t replica_id,
                                StreamClass private_class = StreamClass::Private);

// Sum consecutive pairs of increments: the d-dim increment path on a grid with
// 2n steps becomes the path on the n-step grid obtained by dropping every
// other knot.
std::vector<double> coarsen_increments(std::span<const double> increments, std::size_t steps,
                                       int dim);

// Grid-adapted left-point Ito integral of a matrix path against the common
// increments: eta_{k+1} = eta_k + S_k dB_k.
struct CommonIntegralPath {
    TimeGrid grid;
    int dim = 0;
    std::vector<double> values; // (steps+1) x dim, values[0] = 0

    std::span<const double> at(std::size_t k) const {
        return {values.data() + k * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
    }
};

// sigma_tilde_values: steps x (dim x d_b) row-major matrices.
CommonIntegralPath accumulate_common_integral(const TimeGrid& grid,
                                              std::span<const double> sigma_tilde_values, int dim,
                                              std::span<const double> common, int d_b);

// Isotropic convenience: per-knot scalar c_k meaning c_k * I (dim == d_b).
CommonIntegralPath accumulate_common_integral_isotropic(const TimeGrid& grid,
                                                        std::span<const double> scale_per_knot,
                                                        std::span<const double> common, int d_b);

// Binary replay dump (little-endian doubles, fixed header).
void dump_noise_bundle(const NoiseBundle& b, const std::string& path);
NoiseBundle load_noise_bundle(const std::string& path);

} // namespace cmv
