#pragma once

#include "cmv/model.hpp"
#include "cmv/noise.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace cmv {

// Bridge weight xi(t) = (1/kappa)(1 - e^{kappa (t - t0)}); solves the schedule
// ODE -xi' + kappa xi = 1 with xi(t0) = 0. kappa == 0 uses the analytic limit
// xi(t) = t0 - t.
struct CouplingSchedule {
    double kappa = 0.0;
    double t0 = 1.0;

    double xi(double t) const {
        if (kappa == 0.0) return t0 - t;
        return -std::expm1(kappa * (t - t0)) / kappa;
    }
    double xi0() const { return xi(0.0); }
};

CouplingSchedule xi_schedule(double kappa, double t0);

// Running Girsanov bookkeeping along one path:
//   log R_t = sum <gamma_k, dW_k> - 1/2 sum |gamma_k|^2 h_k.
struct GirsanovAccumulator {
    double log_r = 0.0;
    double half_quad = 0.0;
    std::size_t clamp_events = 0;
    double max_gamma_norm = 0.0;

    void add(std::span<const double> gamma, std::span<const double> dW, double h) {
        double dot = 0.0, sq = 0.0;
        for (std::size_t c = 0; c < gamma.size(); ++c) {
            dot += gamma[c] * dW[c];
            sq += gamma[c] * gamma[c];
        }
        log_r += dot - 0.5 * sq * h;
        half_quad += 0.5 * sq * h;
        max_gamma_norm = std::max(max_gamma_norm, std::sqrt(sq));
    }
};

// Rescale v to norm cap when it exceeds it; reports whether it did.
bool clamp_norm(std::span<double> v, double cap);

struct CoupleStepRecord {
    double t = 0.0;
    double h = 0.0;
    std::vector<double> gamma;
    std::vector<double> dw;
};

struct ReplicaCouplingRecord {
    std::vector<double> probe_gaps; // |Y - X| at the probe knots
    double terminal_gap = 0.0;      // |Y - X| at the cutoff knot
    double bridge_gap = 0.0;        // bridged quantity at the cutoff (Case 2 shift-adjusted)
    double log_r = 0.0;
    double half_quad = 0.0;
    double r = 1.0;
    double r_log_r = 0.0;
    std::size_t clamp_events = 0;
    double max_gamma_norm = 0.0;
    bool diverged = false;
    std::vector<CoupleStepRecord> steps; // populated only when record_steps
};

struct CouplingEnsemble {
    std::vector<double> probe_fracs;
    double cutoff_time = 0.0;
    std::vector<ReplicaCouplingRecord> replicas;

    // aggregates over non-diverged replicas
    double entropy_cost = 0.0; // mean of R log R at the cutoff
    double entropy_cost_stderr = 0.0;
    double mean_r = 0.0;
    double stderr_r = 0.0;
    double median_terminal_gap = 0.0;
    std::vector<double> median_probe_gaps;
    double success_rate = 0.0;
    std::size_t total_clamp_events = 0;
    std::size_t total_steps = 0;
    std::size_t diverged_replicas = 0;
};

struct CoupleOptions {
    double t0 = 1.0;
    std::size_t n_steps = 64;
    double delta_frac = 1.0 / 128.0;            // integrate to t0 (1 - delta_frac)
    std::vector<double> probe_fracs = {1.0 / 8.0, 1.0 / 32.0, 1.0 / 128.0};
    std::size_t cloud_size = 1024;
    std::size_t replicas = 1000;
    uint64_t seed = 1;
    int threads = 0;
    double gamma_max = 1e3;
    double gap_tol = 1e-2;
    bool record_steps = false;
};

// Mirror-drift bridge on shared noise for sigma_tilde(t, x): Y picks up the
// drift s*(X - Y)/xi while gamma = (1/s)(Y - X)/xi feeds the density.
CouplingEnsemble couple_case1(const ScenarioModel& model, const InitialLaw& mu0,
                              const InitialLaw& nu0, const CoupleOptions& opts);

// Two-pass engine for sigma_tilde(t, mu): pass 1 carries both clouds and their
// common-noise integrals to t0, pass 2 bridges the shifted processes toward
// the terminal-shift target.
CouplingEnsemble couple_case2(const ScenarioModel& model, const InitialLaw& mu0,
                              const InitialLaw& nu0, const CoupleOptions& opts);

// Everything about the steering control that depends only on (A, M, grid):
// matrix exponentials per knot, Simpson weights, the Gramian and its factorization.
struct HamiltonianControlContext {
    TimeGrid grid;
    double t0 = 0.0;
    std::vector<Eigen::MatrixXd> expm; // e^{-s_k A} per knot
    std::vector<double> weights;       // composite Simpson weights
    Eigen::MatrixXd Q;                 // Gramian at t0
    Eigen::LLT<Eigen::MatrixXd> Qllt;
    double condition = 0.0;
    bool ok = false;
};

HamiltonianControlContext make_control_context(const HamiltonianModel& model, const TimeGrid& grid);

struct HamiltonianControlPlan {
    Eigen::MatrixXd Q;
    std::vector<double> v;           // initial gap, m + d
    Eigen::VectorXd correction;      // integral correction V
    std::vector<double> alpha;       // (steps+1) x d
    std::vector<double> alpha_prime; // (steps+1) x d
    bool ok = false;
    double condition = 0.0;

    std::span<const double> alpha_at(std::size_t k, int d) const {
        return {alpha.data() + k * static_cast<std::size_t>(d), static_cast<std::size_t>(d)};
    }
    std::span<const double> alpha_prime_at(std::size_t k, int d) const {
        return {alpha_prime.data() + k * static_cast<std::size_t>(d), static_cast<std::size_t>(d)};
    }
};

// Steering control for the degenerate pair: alpha(s) moves the velocity gap
// along a straight line to its target while the Gramian term empties the
// position gap; exact at t0 for the continuous dynamics.
HamiltonianControlPlan hamiltonian_control(const HamiltonianModel& model,
                                           const HamiltonianControlContext& ctx,
                                           std::span<const double> v,
                                           const CommonIntegralPath* eta_mu,
                                           const CommonIntegralPath* eta_nu);
// Convenience overload building a uniform-grid context.
HamiltonianControlPlan hamiltonian_control(const HamiltonianModel& model, double t0,
                                           std::size_t n_steps, std::span<const double> v,
                                           const CommonIntegralPath* eta_mu,
                                           const CommonIntegralPath* eta_nu);

CouplingEnsemble couple_hamiltonian(const HamiltonianModel& model, const InitialLaw& mu0,
                                    const InitialLaw& nu0, const CoupleOptions& opts);

struct ParticleCoupleOptions {
    double t0 = 1.0;
    std::size_t n_steps = 128;
    std::size_t n_particles = 64;
    std::size_t ref_cloud_size = 4096;
    std::size_t replicas = 64;
    uint64_t seed = 1;
    int threads = 0;
    InitialLaw initial;                 // law of the limit-system initials
    std::vector<double> initial_offset; // interacting initials = limit initials + offset
    std::vector<std::size_t> k_list = {1, 2, 4};
};

struct EntropyCostEstimate {
    std::size_t n_particles = 0;
    double total_cost = 0.0; // mean of R log R for the N-fold density
    double total_cost_stderr = 0.0;
    double per_particle_cost = 0.0;
    double per_particle_stderr = 0.0;
    std::vector<std::size_t> k_list;
    std::vector<double> k_share; // (k/N) * total_cost
    double mean_r = 0.0;
    double stderr_r = 0.0;
    std::size_t diverged_replicas = 0;
    std::vector<double> per_replica_cost;
};

// Girsanov cost of turning N limit-drift copies (driven by a large reference
// cloud on the same common path) into the N-particle interacting system.
EntropyCostEstimate couple_particle_system(const ScenarioModel& model,
                                           const ParticleCoupleOptions& opts);

// Degenerate analog with a per-particle steering control for the initial gaps.
EntropyCostEstimate couple_particle_system_hamiltonian(const HamiltonianModel& model,
                                                       const ParticleCoupleOptions& opts);

} // namespace cmv
