#include "cmv/simulate.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace cmv {

bool em_step(std::span<double> x, double h, std::span<const double> drift,
             std::span<const double> diff_private, std::span<const double> dW,
             std::span<const double> diff_common, std::span<const double> dB) {
    const std::size_t d = x.size();
    const std::size_t dw = dW.size(), db = dB.size();
    if (drift.size() != d || diff_private.size() != d * dw || diff_common.size() != d * db)
        throw std::invalid_argument("em_step: shape mismatch");
    bool finite = true;
    for (std::size_t r = 0; r < d; ++r) {
        double acc = x[r] + drift[r] * h;
        for (std::size_t c = 0; c < dw; ++c) acc += diff_private[r * dw + c] * dW[c];
        for (std::size_t c = 0; c < db; ++c) acc += diff_common[r * db + c] * dB[c];
        x[r] = acc;
        finite = finite && std::isfinite(acc);
    }
    return finite;
}

std::vector<double> draw_initial_atoms(const InitialLaw& law, std::size_t n, uint64_t seed,
                                       uint32_t replica_id, uint32_t index_offset) {
    std::vector<double> atoms(n * static_cast<std::size_t>(law.dim));
    for (std::size_t i = 0; i < n; ++i) {
        GaussianStream gs(seed, replica_id, StreamClass::Initial,
                          index_offset | static_cast<uint32_t>(i));
        draw_atom(law, {atoms.data() + i * static_cast<std::size_t>(law.dim),
                        static_cast<std::size_t>(law.dim)},
                  gs);
    }
    return atoms;
}

namespace {

template <typename TrajT>
void init_traj(TrajT& traj, const NoiseBundle& bundle, int dim, std::size_t count,
               std::span<const double> initial_atoms) {
    if (initial_atoms.size() != count * static_cast<std::size_t>(dim))
        throw std::invalid_argument("simulate: initial atom block has wrong size");
    traj.grid = bundle.grid;
    traj.dim = dim;
    traj.seed = bundle.seed;
    traj.replica_id = bundle.replica_id;
    traj.states.assign((bundle.grid.steps() + 1) * count * static_cast<std::size_t>(dim), 0.0);
    std::memcpy(traj.states.data(), initial_atoms.data(), initial_atoms.size() * sizeof(double));
}

} // namespace

CloudTrajectory simulate_limit_cloud(const ScenarioModel& model, const NoiseBundle& bundle,
                                     std::span<const double> initial_atoms) {
    const int d = model.dim_x;
    const std::size_t M = initial_atoms.size() / static_cast<std::size_t>(d);
    if (M < 1) throw std::invalid_argument("simulate_limit_cloud: empty cloud");
    if (bundle.n_private < static_cast<int>(M) || bundle.d_w != d || bundle.d_b != d)
        throw std::invalid_argument("simulate_limit_cloud: bundle does not fit the cloud");
    CloudTrajectory traj;
    traj.cloud_size = M;
    init_traj(traj, bundle, d, M, initial_atoms);

    const std::size_t steps = bundle.grid.steps();
    std::vector<double> mu_mean(static_cast<std::size_t>(d));
    std::vector<double> drift(static_cast<std::size_t>(d));
    for (std::size_t k = 0; k < steps && !traj.diverged; ++k) {
        const double t = bundle.grid.knots[k];
        const double h = bundle.grid.h(k);
        const auto prev = traj.at(k);
        auto next = traj.at_mut(k + 1);
        std::memcpy(next.data(), prev.data(), prev.size() * sizeof(double));
        block_mean(prev, M, d, mu_mean);
        const auto dB = bundle.dB(k);
        const double sp = model.sigma(t);
        // Case 2: the common diffusion is a functional of the cloud, one value per knot
        const double st_mu = (model.variant == Variant::Case2) ? model.sigma_tilde_mu(t, mu_mean) : 0.0;
        for (std::size_t i = 0; i < M; ++i) {
            auto xi = next.subspan(i * static_cast<std::size_t>(d), static_cast<std::size_t>(d));
            model.drift(t, xi, mu_mean, drift);
            const double sc = (model.variant == Variant::Case2) ? st_mu : model.sigma_tilde_x(t, xi);
            if (!em_step_isotropic(xi, h, drift, sp, bundle.dW(i, k), sc, dB)) traj.diverged = true;
        }
    }
    return traj;
}

TrajectorySet simulate_interacting(const ScenarioModel& model, const NoiseBundle& bundle,
                                   std::span<const double> initial_atoms) {
    const int d = model.dim_x;
    const std::size_t N = initial_atoms.size() / static_cast<std::size_t>(d);
    if (N < 1) throw std::invalid_argument("simulate_interacting: empty system");
    if (bundle.n_private < static_cast<int>(N) || bundle.d_w != d || bundle.d_b != d)
        throw std::invalid_argument("simulate_interacting: bundle does not fit the system");
    TrajectorySet traj;
    traj.n_particles = N;
    init_traj(traj, bundle, d, N, initial_atoms);

    const std::size_t steps = bundle.grid.steps();
    std::vector<double> mu_mean(static_cast<std::size_t>(d));
    std::vector<double> drift(static_cast<std::size_t>(d));
    for (std::size_t k = 0; k < steps && !traj.diverged; ++k) {
        const double t = bundle.grid.knots[k];
        const double h = bundle.grid.h(k);
        const auto prev = traj.at(k);
        auto next = traj.states.data() + (k + 1) * N * static_cast<std::size_t>(d);
        std::memcpy(next, prev.data(), prev.size() * sizeof(double));
        block_mean(prev, N, d, mu_mean);
        const auto dB = bundle.dB(k);
        const double sp = model.sigma(t);
        const double st_mu = (model.variant == Variant::Case2) ? model.sigma_tilde_mu(t, mu_mean) : 0.0;
        for (std::size_t i = 0; i < N; ++i) {
            std::span<double> xi{next + i * static_cast<std::size_t>(d), static_cast<std::size_t>(d)};
            model.drift(t, xi, mu_mean, drift);
            const double sc = (model.variant == Variant::Case2) ? st_mu : model.sigma_tilde_x(t, xi);
            if (!em_step_isotropic(xi, h, drift, sp, bundle.dW(i, k), sc, dB)) traj.diverged = true;
        }
    }
    return traj;
}

namespace {

// Shared stepper for both Hamiltonian systems; `self_mean` picks whether the
// measure argument is the cloud's own mean (limit cloud and N-system alike).
template <typename TrajT>
void run_hamiltonian(const HamiltonianModel& model, const NoiseBundle& bundle, TrajT& traj,
                     std::size_t count) {
    const int m = model.m, d = model.d, dim = model.dim_x();
    const std::size_t steps = bundle.grid.steps();
    std::vector<double> mu_mean(static_cast<std::size_t>(dim));
    std::vector<double> drift(static_cast<std::size_t>(d));
    std::vector<double> block1(static_cast<std::size_t>(m));
    for (std::size_t k = 0; k < steps && !traj.diverged; ++k) {
        const double t = bundle.grid.knots[k];
        const double h = bundle.grid.h(k);
        const auto prev = traj.at(k);
        double* next = traj.states.data() + (k + 1) * count * static_cast<std::size_t>(dim);
        std::memcpy(next, prev.data(), prev.size() * sizeof(double));
        block_mean(prev, count, dim, mu_mean);
        const auto dB = bundle.dB(k);
        const double sp = model.sigma(t);
        const double sc = model.sigma_tilde(t);
        for (std::size_t i = 0; i < count; ++i) {
            std::span<double> xi{next + i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
            // deterministic Euler on the position block: x1 += (A x1 + M x2) h
            for (int r = 0; r < m; ++r) {
                double acc = 0.0;
                for (int c = 0; c < m; ++c) acc += model.A(r, c) * xi[static_cast<std::size_t>(c)];
                for (int c = 0; c < d; ++c) acc += model.M(r, c) * xi[static_cast<std::size_t>(m + c)];
                block1[static_cast<std::size_t>(r)] = xi[static_cast<std::size_t>(r)] + acc * h;
            }
            model.drift2(t, xi, mu_mean, drift);
            auto x2 = xi.subspan(static_cast<std::size_t>(m), static_cast<std::size_t>(d));
            bool ok = em_step_isotropic(x2, h, drift, sp, bundle.dW(i, k), sc, dB);
            for (int r = 0; r < m; ++r) {
                xi[static_cast<std::size_t>(r)] = block1[static_cast<std::size_t>(r)];
                ok = ok && std::isfinite(block1[static_cast<std::size_t>(r)]);
            }
            if (!ok) traj.diverged = true;
        }
    }
}

} // namespace

CloudTrajectory simulate_hamiltonian_cloud(const HamiltonianModel& model, const NoiseBundle& bundle,
                                           std::span<const double> initial_atoms) {
    const int dim = model.dim_x();
    const std::size_t M = initial_atoms.size() / static_cast<std::size_t>(dim);
    if (M < 1) throw std::invalid_argument("simulate_hamiltonian_cloud: empty cloud");
    if (bundle.n_private < static_cast<int>(M) || bundle.d_w != model.d || bundle.d_b != model.d)
        throw std::invalid_argument("simulate_hamiltonian_cloud: bundle does not fit");
    CloudTrajectory traj;
    traj.cloud_size = M;
    init_traj(traj, bundle, dim, M, initial_atoms);
    run_hamiltonian(model, bundle, traj, M);
    return traj;
}

TrajectorySet simulate_hamiltonian_interacting(const HamiltonianModel& model,
                                               const NoiseBundle& bundle,
                                               std::span<const double> initial_atoms) {
    const int dim = model.dim_x();
    const std::size_t N = initial_atoms.size() / static_cast<std::size_t>(dim);
    if (N < 1) throw std::invalid_argument("simulate_hamiltonian_interacting: empty system");
    if (bundle.n_private < static_cast<int>(N) || bundle.d_w != model.d || bundle.d_b != model.d)
        throw std::invalid_argument("simulate_hamiltonian_interacting: bundle does not fit");
    TrajectorySet traj;
    traj.n_particles = N;
    init_traj(traj, bundle, dim, N, initial_atoms);
    run_hamiltonian(model, bundle, traj, N);
    return traj;
}

} // namespace cmv
