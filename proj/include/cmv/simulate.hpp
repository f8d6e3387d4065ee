#pragma once

#include "cmv/measure.hpp"
#include "cmv/model.hpp"
#include "cmv/noise.hpp"

#include <span>
#include <vector>

namespace cmv {

// x' = x + drift*h + Dp*dW + Dc*dB with row-major d x d_w and d x d_b diffusion
// blocks. Returns false when the update leaves the finite range.
bool em_step(std::span<double> x, double h, std::span<const double> drift,
             std::span<const double> diff_private, std::span<const double> dW,
             std::span<const double> diff_common, std::span<const double> dB);

// Isotropic fast path (diffusions sp*I, sc*I); identical arithmetic to em_step
// with those matrices.
inline bool em_step_isotropic(std::span<double> x, double h, std::span<const double> drift,
                              double sp, std::span<const double> dW, double sc,
                              std::span<const double> dB) {
    bool finite = true;
    for (std::size_t c = 0; c < x.size(); ++c) {
        x[c] += drift[c] * h + sp * dW[c] + sc * dB[c];
        finite = finite && std::isfinite(x[c]);
    }
    return finite;
}

// M particles sharing one common path; the knot-k block is the finite-cloud
// stand-in for the conditional law given that common path.
struct CloudTrajectory {
    TimeGrid grid;
    int dim = 1;
    std::size_t cloud_size = 0;
    uint64_t seed = 0;
    uint32_t replica_id = 0;
    std::vector<double> states; // (steps+1) x M x dim
    bool diverged = false;

    std::span<const double> at(std::size_t k) const {
        const std::size_t block = cloud_size * static_cast<std::size_t>(dim);
        return {states.data() + k * block, block};
    }
    std::span<double> at_mut(std::size_t k) {
        const std::size_t block = cloud_size * static_cast<std::size_t>(dim);
        return {states.data() + k * block, block};
    }
    EmpiricalMeasure measure_at(std::size_t k) const {
        const auto blk = at(k);
        return EmpiricalMeasure(dim, std::vector<double>(blk.begin(), blk.end()));
    }
    std::vector<double> mean_at(std::size_t k) const {
        std::vector<double> m(static_cast<std::size_t>(dim));
        block_mean(at(k), cloud_size, dim, m);
        return m;
    }
};

// The N-particle mean-field system; same storage, different role: particles
// interact through their own empirical measure.
struct TrajectorySet {
    TimeGrid grid;
    int dim = 1;
    std::size_t n_particles = 0;
    uint64_t seed = 0;
    uint32_t replica_id = 0;
    std::vector<double> states; // (steps+1) x N x dim
    bool diverged = false;

    std::span<const double> at(std::size_t k) const {
        const std::size_t block = n_particles * static_cast<std::size_t>(dim);
        return {states.data() + k * block, block};
    }
    EmpiricalMeasure measure_at(std::size_t k) const {
        const auto blk = at(k);
        return EmpiricalMeasure(dim, std::vector<double>(blk.begin(), blk.end()));
    }
    std::vector<double> mean_at(std::size_t k) const {
        std::vector<double> m(static_cast<std::size_t>(dim));
        block_mean(at(k), n_particles, dim, m);
        return m;
    }
};

// Draw M atoms from a law with per-atom Initial streams (index_offset selects
// a disjoint index range, e.g. 0x80000000 for reference-cloud initials).
std::vector<double> draw_initial_atoms(const InitialLaw& law, std::size_t n, uint64_t seed,
                                       uint32_t replica_id, uint32_t index_offset = 0);

// Self-consistent cloud approximation of the limit equation: every member
// advances against the cloud's own empirical mean, all sharing bundle's common
// increments; member j consumes bundle.dW(j).
CloudTrajectory simulate_limit_cloud(const ScenarioModel& model, const NoiseBundle& bundle,
                                     std::span<const double> initial_atoms);

// Mean-field interacting system: all particles see the same empirical mean and
// the same common increment at each knot.
TrajectorySet simulate_interacting(const ScenarioModel& model, const NoiseBundle& bundle,
                                   std::span<const double> initial_atoms);

// Degenerate variants: position block integrates deterministically, velocity
// block is an EM step.
CloudTrajectory simulate_hamiltonian_cloud(const HamiltonianModel& model,
                                           const NoiseBundle& bundle,
                                           std::span<const double> initial_atoms);
TrajectorySet simulate_hamiltonian_interacting(const HamiltonianModel& model,
                                               const NoiseBundle& bundle,
                                               std::span<const double> initial_atoms);

} // namespace cmv
