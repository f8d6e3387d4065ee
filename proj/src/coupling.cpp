#include "cmv/coupling.hpp"

#include "cmv/simulate.hpp"
#include "cmv/util.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace cmv {

CouplingSchedule xi_schedule(double kappa, double t0) {
    if (!(t0 > 0.0)) throw std::invalid_argument("xi_schedule: t0 must be positive");
    if (kappa < 0.0) throw std::invalid_argument("xi_schedule: kappa must be nonnegative");
    return CouplingSchedule{kappa, t0};
}

bool clamp_norm(std::span<double> v, double cap) {
    double sq = 0.0;
    for (double c : v) sq += c * c;
    const double n = std::sqrt(sq);
    if (n <= cap) return false;
    const double f = cap / n;
    for (double& c : v) c *= f;
    return true;
}

namespace {

bool all_finite(std::span<const double> xs) {
    for (double x : xs)
        if (!std::isfinite(x)) return false;
    return true;
}

double norm2(std::span<const double> xs) {
    double s = 0.0;
    for (double x : xs) s += x * x;
    return std::sqrt(s);
}

void finalize_ensemble(CouplingEnsemble& ens, double gap_tol) {
    std::vector<double> rlogr, rs, term;
    std::vector<std::vector<double>> probes(ens.probe_fracs.size());
    std::size_t success = 0, live = 0;
    for (const auto& rec : ens.replicas) {
        ens.total_clamp_events += rec.clamp_events;
        if (rec.diverged) {
            ++ens.diverged_replicas;
            continue;
        }
        ++live;
        rlogr.push_back(rec.r_log_r);
        rs.push_back(rec.r);
        term.push_back(rec.terminal_gap);
        for (std::size_t p = 0; p < probes.size() && p < rec.probe_gaps.size(); ++p)
            probes[p].push_back(rec.probe_gaps[p]);
        if (rec.terminal_gap < gap_tol) ++success;
    }
    // jackknife of a plain mean coincides with the classical standard error
    ens.entropy_cost = mean(rlogr);
    ens.entropy_cost_stderr = stderr_mean(rlogr);
    ens.mean_r = mean(rs);
    ens.stderr_r = stderr_mean(rs);
    ens.median_terminal_gap = median(term);
    ens.median_probe_gaps.resize(probes.size());
    for (std::size_t p = 0; p < probes.size(); ++p) ens.median_probe_gaps[p] = median(probes[p]);
    ens.success_rate = (live > 0) ? static_cast<double>(success) / static_cast<double>(live) : 0.0;
}

struct PairedInitials {
    std::vector<double> cloud_mu; // M x d
    std::vector<double> cloud_nu;
    std::vector<double> x0, y0; // the coupled pair
};

PairedInitials draw_initial_structure(const InitialLaw& mu0, const InitialLaw& nu0, std::size_t M,
                                      uint64_t seed, uint32_t replica) {
    const int d = mu0.dim;
    PairedInitials out;
    out.cloud_mu.resize(M * static_cast<std::size_t>(d));
    out.cloud_nu.resize(M * static_cast<std::size_t>(d));
    out.x0.resize(static_cast<std::size_t>(d));
    out.y0.resize(static_cast<std::size_t>(d));
    for (std::size_t i = 0; i < M; ++i) {
        GaussianStream gs(seed, replica, StreamClass::Initial, static_cast<uint32_t>(i));
        draw_paired_atoms(mu0, nu0,
                          {out.cloud_mu.data() + i * static_cast<std::size_t>(d), static_cast<std::size_t>(d)},
                          {out.cloud_nu.data() + i * static_cast<std::size_t>(d), static_cast<std::size_t>(d)}, gs);
    }
    GaussianStream gp(seed, replica, StreamClass::Initial, static_cast<uint32_t>(M));
    draw_paired_atoms(mu0, nu0, out.x0, out.y0, gp);
    return out;
}

struct ProbeLayout {
    TimeGrid grid;
    std::vector<std::size_t> probe_idx;
    std::size_t cutoff_idx = 0;
};

ProbeLayout make_probe_layout(const CoupleOptions& opts) {
    for (double f : opts.probe_fracs)
        if (f + 1e-15 < opts.delta_frac)
            throw std::invalid_argument("couple: probe fraction lies beyond the integration cutoff");
    std::vector<double> cuts = opts.probe_fracs;
    cuts.push_back(opts.delta_frac);
    ProbeLayout lay;
    lay.grid = TimeGrid::coupling(opts.t0, opts.n_steps, cuts);
    for (double f : opts.probe_fracs)
        lay.probe_idx.push_back(lay.grid.knot_index(opts.t0 * (1.0 - f)));
    lay.cutoff_idx = lay.grid.knot_index(opts.t0 * (1.0 - opts.delta_frac));
    return lay;
}

} // namespace

CouplingEnsemble couple_case1(const ScenarioModel& model, const InitialLaw& mu0,
                              const InitialLaw& nu0, const CoupleOptions& opts) {
    if (model.variant != Variant::Case1)
        throw std::invalid_argument("couple_case1: scenario must have sigma_tilde(t, x)");
    if (mu0.dim != model.dim_x || nu0.dim != model.dim_x)
        throw std::invalid_argument("couple_case1: initial law dimension mismatch");
    const ProbeLayout lay = make_probe_layout(opts);
    const CouplingSchedule sched = xi_schedule(3.0 * model.K + model.K_tilde, opts.t0);
    const int d = model.dim_x;
    const std::size_t M = opts.cloud_size;

    CouplingEnsemble ens;
    ens.probe_fracs = opts.probe_fracs;
    ens.cutoff_time = lay.grid.knots[lay.cutoff_idx];
    ens.replicas.resize(opts.replicas);
    ens.total_steps = opts.replicas * lay.cutoff_idx;

    parallel_for(opts.replicas, opts.threads, [&](std::size_t r) {
        auto& rec = ens.replicas[r];
        rec.probe_gaps.assign(lay.probe_idx.size(), 0.0);
        const auto replica = static_cast<uint32_t>(r);
        const NoiseBundle bundle =
            sample_noise_bundle(lay.grid, d, d, static_cast<int>(M), opts.seed, replica);
        PairedInitials init = draw_initial_structure(mu0, nu0, M, opts.seed, replica);
        GaussianStream pair_stream(opts.seed, replica, StreamClass::Pair, 0);

        std::vector<double> X = init.x0, Y = init.y0;
        std::vector<double>&cmu = init.cloud_mu, &cnu = init.cloud_nu;
        std::vector<double> mean_mu(static_cast<std::size_t>(d)), mean_nu(static_cast<std::size_t>(d));
        std::vector<double> drift(static_cast<std::size_t>(d)), drift_y(static_cast<std::size_t>(d));
        std::vector<double> gamma(static_cast<std::size_t>(d)), dwp(static_cast<std::size_t>(d));
        GirsanovAccumulator acc;

        for (std::size_t k = 0; k < lay.cutoff_idx; ++k) {
            const double t = lay.grid.knots[k];
            const double h = lay.grid.h(k);
            const double sqh = std::sqrt(h);
            block_mean(cmu, M, d, mean_mu);
            block_mean(cnu, M, d, mean_nu);
            const double xi = sched.xi(t);
            const double sp = model.sigma(t);

            for (int c = 0; c < d; ++c)
                gamma[static_cast<std::size_t>(c)] =
                    (Y[static_cast<std::size_t>(c)] - X[static_cast<std::size_t>(c)]) / (sp * xi);
            if (clamp_norm(gamma, opts.gamma_max)) ++rec.clamp_events;
            for (int c = 0; c < d; ++c) dwp[static_cast<std::size_t>(c)] = sqh * pair_stream.next();

            model.drift(t, X, mean_mu, drift);
            // the bridge drift stays consistent with the clamped gamma, so R
            // remains the exact density of the simulated pair
            model.drift(t, Y, mean_nu, drift_y);
            for (int c = 0; c < d; ++c)
                drift_y[static_cast<std::size_t>(c)] -= sp * gamma[static_cast<std::size_t>(c)];

            const auto dB = bundle.dB(k);
            const double st_x = model.sigma_tilde_x(t, X);
            const double st_y = model.sigma_tilde_x(t, Y);
            bool ok = em_step_isotropic(X, h, drift, sp, dwp, st_x, dB);
            ok = em_step_isotropic(Y, h, drift_y, sp, dwp, st_y, dB) && ok;
            acc.add(gamma, dwp, h);
            if (opts.record_steps)
                rec.steps.push_back(CoupleStepRecord{t, h, gamma, dwp});

            for (std::size_t i = 0; i < M && ok; ++i) {
                auto xm = std::span<double>{cmu.data() + i * static_cast<std::size_t>(d), static_cast<std::size_t>(d)};
                model.drift(t, xm, mean_mu, drift);
                ok = em_step_isotropic(xm, h, drift, sp, bundle.dW(i, k), model.sigma_tilde_x(t, xm), dB) && ok;
                auto xn = std::span<double>{cnu.data() + i * static_cast<std::size_t>(d), static_cast<std::size_t>(d)};
                model.drift(t, xn, mean_nu, drift);
                ok = em_step_isotropic(xn, h, drift, sp, bundle.dW(i, k), model.sigma_tilde_x(t, xn), dB) && ok;
            }
            if (!ok) {
                rec.diverged = true;
                break;
            }
            for (std::size_t p = 0; p < lay.probe_idx.size(); ++p)
                if (lay.probe_idx[p] == k + 1) {
                    std::vector<double> gap(static_cast<std::size_t>(d));
                    for (int c = 0; c < d; ++c)
                        gap[static_cast<std::size_t>(c)] = Y[static_cast<std::size_t>(c)] - X[static_cast<std::size_t>(c)];
                    rec.probe_gaps[p] = norm2(gap);
                }
        }
        if (!rec.diverged) {
            std::vector<double> gap(static_cast<std::size_t>(d));
            for (int c = 0; c < d; ++c)
                gap[static_cast<std::size_t>(c)] = Y[static_cast<std::size_t>(c)] - X[static_cast<std::size_t>(c)];
            rec.terminal_gap = norm2(gap);
            rec.bridge_gap = rec.terminal_gap;
            rec.log_r = acc.log_r;
            rec.half_quad = acc.half_quad;
            rec.max_gamma_norm = acc.max_gamma_norm;
            rec.r = std::exp(acc.log_r);
            rec.r_log_r = rec.r * acc.log_r;
            if (!std::isfinite(rec.r) || !std::isfinite(rec.r_log_r)) rec.diverged = true;
        }
        rec.clamp_events += acc.clamp_events;
    });

    finalize_ensemble(ens, opts.gap_tol);
    return ens;
}

CouplingEnsemble couple_case2(const ScenarioModel& model, const InitialLaw& mu0,
                              const InitialLaw& nu0, const CoupleOptions& opts) {
    if (model.variant != Variant::Case2)
        throw std::invalid_argument("couple_case2: scenario must have sigma_tilde(t, mu)");
    if (mu0.dim != model.dim_x || nu0.dim != model.dim_x)
        throw std::invalid_argument("couple_case2: initial law dimension mismatch");
    const ProbeLayout lay = make_probe_layout(opts);
    const CouplingSchedule sched = xi_schedule(4.0 * model.K, opts.t0);
    const int d = model.dim_x;
    const std::size_t dd = static_cast<std::size_t>(d);
    const std::size_t M = opts.cloud_size;
    const std::size_t steps = lay.grid.steps();

    CouplingEnsemble ens;
    ens.probe_fracs = opts.probe_fracs;
    ens.cutoff_time = lay.grid.knots[lay.cutoff_idx];
    ens.replicas.resize(opts.replicas);
    ens.total_steps = opts.replicas * lay.cutoff_idx;

    parallel_for(opts.replicas, opts.threads, [&](std::size_t r) {
        auto& rec = ens.replicas[r];
        rec.probe_gaps.assign(lay.probe_idx.size(), 0.0);
        const auto replica = static_cast<uint32_t>(r);
        const NoiseBundle bundle =
            sample_noise_bundle(lay.grid, d, d, static_cast<int>(M), opts.seed, replica);
        PairedInitials init = draw_initial_structure(mu0, nu0, M, opts.seed, replica);

        // ---- pass 1: both clouds to t0; record means, sigma_tilde values, eta paths
        std::vector<double> mean_mu(steps * dd), mean_nu(steps * dd);
        std::vector<double> eta_mu((steps + 1) * dd, 0.0), eta_nu((steps + 1) * dd, 0.0);
        {
            std::vector<double>&cmu = init.cloud_mu, &cnu = init.cloud_nu;
            std::vector<double> drift(dd);
            bool ok = true;
            for (std::size_t k = 0; k < steps && ok; ++k) {
                const double t = lay.grid.knots[k];
                const double h = lay.grid.h(k);
                double* mm = mean_mu.data() + k * dd;
                double* mn = mean_nu.data() + k * dd;
                block_mean(cmu, M, d, {mm, dd});
                block_mean(cnu, M, d, {mn, dd});
                const double st_mu = model.sigma_tilde_mu(t, {mm, dd});
                const double st_nu = model.sigma_tilde_mu(t, {mn, dd});
                const auto dB = bundle.dB(k);
                for (std::size_t c = 0; c < dd; ++c) {
                    eta_mu[(k + 1) * dd + c] = eta_mu[k * dd + c] + st_mu * dB[c];
                    eta_nu[(k + 1) * dd + c] = eta_nu[k * dd + c] + st_nu * dB[c];
                }
                const double sp = model.sigma(t);
                for (std::size_t i = 0; i < M && ok; ++i) {
                    auto xm = std::span<double>{cmu.data() + i * dd, dd};
                    model.drift(t, xm, {mm, dd}, drift);
                    ok = em_step_isotropic(xm, h, drift, sp, bundle.dW(i, k), st_mu, dB) && ok;
                    auto xn = std::span<double>{cnu.data() + i * dd, dd};
                    model.drift(t, xn, {mn, dd}, drift);
                    ok = em_step_isotropic(xn, h, drift, sp, bundle.dW(i, k), st_nu, dB) && ok;
                }
            }
            if (!ok) {
                rec.diverged = true;
                return;
            }
        }

        // ---- pass 2: shifted pair bridged toward the terminal-shift target
        GaussianStream pair_stream(opts.seed, replica, StreamClass::Pair, 0);
        std::vector<double> Xh = init.x0, Yh = init.y0;
        std::vector<double> zx(dd), zy(dd), Z(dd), beta(dd), dwp(dd);
        std::vector<double> drift_x(dd), drift_y(dd);
        const double* eta_mu_end = eta_mu.data() + steps * dd;
        const double* eta_nu_end = eta_nu.data() + steps * dd;
        GirsanovAccumulator acc;
        for (std::size_t k = 0; k < lay.cutoff_idx; ++k) {
            const double t = lay.grid.knots[k];
            const double h = lay.grid.h(k);
            const double sqh = std::sqrt(h);
            const double xi = sched.xi(t);
            const double sp = model.sigma(t);
            for (std::size_t c = 0; c < dd; ++c) {
                zx[c] = Xh[c] + eta_mu[k * dd + c];
                zy[c] = Yh[c] + eta_nu[k * dd + c];
                Z[c] = (Yh[c] + eta_nu_end[c]) - (Xh[c] + eta_mu_end[c]);
                beta[c] = Z[c] / (sp * xi);
            }
            if (clamp_norm(beta, opts.gamma_max)) ++rec.clamp_events;
            for (std::size_t c = 0; c < dd; ++c) dwp[c] = sqh * pair_stream.next();
            model.drift(t, zx, {mean_mu.data() + k * dd, dd}, drift_x);
            model.drift(t, zy, {mean_nu.data() + k * dd, dd}, drift_y);
            for (std::size_t c = 0; c < dd; ++c) drift_y[c] -= sp * beta[c];
            bool ok = true;
            for (std::size_t c = 0; c < dd; ++c) {
                Xh[c] += drift_x[c] * h + sp * dwp[c];
                Yh[c] += drift_y[c] * h + sp * dwp[c];
                ok = ok && std::isfinite(Xh[c]) && std::isfinite(Yh[c]);
            }
            acc.add(beta, dwp, h);
            if (opts.record_steps) rec.steps.push_back(CoupleStepRecord{t, h, beta, dwp});
            if (!ok) {
                rec.diverged = true;
                break;
            }
            for (std::size_t p = 0; p < lay.probe_idx.size(); ++p)
                if (lay.probe_idx[p] == k + 1) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < dd; ++c) {
                        const double g = (Yh[c] + eta_nu[(k + 1) * dd + c]) - (Xh[c] + eta_mu[(k + 1) * dd + c]);
                        s += g * g;
                    }
                    rec.probe_gaps[p] = std::sqrt(s);
                }
        }
        if (!rec.diverged) {
            double greal = 0.0, gbridge = 0.0;
            for (std::size_t c = 0; c < dd; ++c) {
                const double g = (Yh[c] + eta_nu[lay.cutoff_idx * dd + c]) -
                                 (Xh[c] + eta_mu[lay.cutoff_idx * dd + c]);
                greal += g * g;
                const double zb = (Yh[c] + eta_nu_end[c]) - (Xh[c] + eta_mu_end[c]);
                gbridge += zb * zb;
            }
            rec.terminal_gap = std::sqrt(greal);
            rec.bridge_gap = std::sqrt(gbridge);
            rec.log_r = acc.log_r;
            rec.half_quad = acc.half_quad;
            rec.max_gamma_norm = acc.max_gamma_norm;
            rec.r = std::exp(acc.log_r);
            rec.r_log_r = rec.r * acc.log_r;
            if (!std::isfinite(rec.r) || !std::isfinite(rec.r_log_r)) rec.diverged = true;
        }
        rec.clamp_events += acc.clamp_events;
    });

    finalize_ensemble(ens, opts.gap_tol);
    return ens;
}

HamiltonianControlContext make_control_context(const HamiltonianModel& model, const TimeGrid& grid) {
    const std::size_t steps = grid.steps();
    if (steps % 2 != 0)
        throw std::invalid_argument("make_control_context: Simpson weights need an even step count");
    const double t0 = grid.t_end();
    const double h = grid.h(0);
    for (std::size_t k = 0; k < steps; ++k)
        if (std::fabs(grid.h(k) - h) > 1e-12 * t0)
            throw std::invalid_argument("make_control_context: grid must be uniform");

    HamiltonianControlContext ctx;
    ctx.grid = grid;
    ctx.t0 = t0;
    ctx.expm.resize(steps + 1);
    ctx.weights.assign(steps + 1, 0.0);
    for (std::size_t k = 0; k <= steps; ++k) {
        const Eigen::MatrixXd As = -grid.knots[k] * model.A;
        ctx.expm[k] = As.exp();
        const double w = (k == 0 || k == steps) ? 1.0 : ((k % 2 == 1) ? 4.0 : 2.0);
        ctx.weights[k] = w * h / 3.0;
    }
    Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(model.m, model.m);
    for (std::size_t k = 0; k <= steps; ++k) {
        const double s = grid.knots[k];
        const double f = s * (t0 - s) / (t0 * t0);
        const Eigen::MatrixXd EM = ctx.expm[k] * model.M;
        Q += ctx.weights[k] * f * (EM * EM.transpose());
    }
    ctx.Q = Q;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Q);
    const double lo = es.eigenvalues().minCoeff();
    const double hi = es.eigenvalues().maxCoeff();
    ctx.condition = (lo > 0.0) ? hi / lo : std::numeric_limits<double>::infinity();
    ctx.Qllt.compute(Q);
    ctx.ok = (lo > 0.0) && ctx.condition <= 1e12 && ctx.Qllt.info() == Eigen::Success;
    return ctx;
}

HamiltonianControlPlan hamiltonian_control(const HamiltonianModel& model,
                                           const HamiltonianControlContext& ctx,
                                           std::span<const double> v,
                                           const CommonIntegralPath* eta_mu,
                                           const CommonIntegralPath* eta_nu) {
    const int m = model.m, d = model.d;
    if (v.size() != static_cast<std::size_t>(m + d))
        throw std::invalid_argument("hamiltonian_control: gap vector must have m + d entries");
    const std::size_t steps = ctx.grid.steps();
    const double t0 = ctx.t0;
    auto eta_at = [&](const CommonIntegralPath* p, std::size_t k) -> Eigen::VectorXd {
        if (p == nullptr) return Eigen::VectorXd::Zero(d);
        if (p->dim != d || p->values.size() != (steps + 1) * static_cast<std::size_t>(d))
            throw std::invalid_argument("hamiltonian_control: eta path does not match the grid");
        Eigen::VectorXd out(d);
        const auto sp = p->at(k);
        for (int c = 0; c < d; ++c) out[c] = sp[static_cast<std::size_t>(c)];
        return out;
    };

    HamiltonianControlPlan plan;
    plan.Q = ctx.Q;
    plan.condition = ctx.condition;
    plan.ok = ctx.ok;
    plan.v.assign(v.begin(), v.end());
    if (!ctx.ok) return plan; // NOT_CONTROLLABLE_NUMERICALLY

    Eigen::VectorXd v1(m), v2(d);
    for (int c = 0; c < m; ++c) v1[c] = v[static_cast<std::size_t>(c)];
    for (int c = 0; c < d; ++c) v2[c] = v[static_cast<std::size_t>(m + c)];
    const Eigen::VectorXd deta_end = eta_at(eta_mu, steps) - eta_at(eta_nu, steps);

    Eigen::VectorXd V = Eigen::VectorXd::Zero(m);
    for (std::size_t k = 0; k <= steps; ++k) {
        const double s = ctx.grid.knots[k];
        const Eigen::VectorXd inner = ((t0 - s) / t0) * v2 + (s / t0) * deta_end +
                                      (eta_at(eta_nu, k) - eta_at(eta_mu, k));
        V += ctx.weights[k] * (ctx.expm[k] * (model.M * inner));
    }
    plan.correction = V;
    const Eigen::VectorXd sol = ctx.Qllt.solve(v1 + V);

    plan.alpha.assign((steps + 1) * static_cast<std::size_t>(d), 0.0);
    plan.alpha_prime.assign((steps + 1) * static_cast<std::size_t>(d), 0.0);
    const Eigen::VectorXd slope = (deta_end - v2) / t0;
    for (std::size_t k = 0; k <= steps; ++k) {
        const double s = ctx.grid.knots[k];
        const Eigen::MatrixXd Et = ctx.expm[k].transpose(); // e^{-s A^T}
        const double f = s * (t0 - s) / (t0 * t0);
        const double fp = (t0 - 2.0 * s) / (t0 * t0);
        const Eigen::VectorXd a = s * slope - f * (model.M.transpose() * (Et * sol));
        const Eigen::VectorXd ap =
            slope - model.M.transpose() * (fp * (Et * sol) - f * (model.A.transpose() * (Et * sol)));
        for (int c = 0; c < d; ++c) {
            plan.alpha[k * static_cast<std::size_t>(d) + static_cast<std::size_t>(c)] = a[c];
            plan.alpha_prime[k * static_cast<std::size_t>(d) + static_cast<std::size_t>(c)] = ap[c];
        }
    }
    return plan;
}

HamiltonianControlPlan hamiltonian_control(const HamiltonianModel& model, double t0,
                                           std::size_t n_steps, std::span<const double> v,
                                           const CommonIntegralPath* eta_mu,
                                           const CommonIntegralPath* eta_nu) {
    const TimeGrid grid = TimeGrid::uniform(t0, n_steps + (n_steps % 2));
    const HamiltonianControlContext ctx = make_control_context(model, grid);
    return hamiltonian_control(model, ctx, v, eta_mu, eta_nu);
}

CouplingEnsemble couple_hamiltonian(const HamiltonianModel& model, const InitialLaw& mu0,
                                    const InitialLaw& nu0, const CoupleOptions& opts) {
    const int m = model.m, d = model.d, dim = model.dim_x();
    if (mu0.dim != dim || nu0.dim != dim)
        throw std::invalid_argument("couple_hamiltonian: initial law dimension mismatch");
    if (!model.controllable)
        throw std::runtime_error("couple_hamiltonian: NOT_CONTROLLABLE (Kalman rank deficient)");
    std::size_t n = opts.n_steps + (opts.n_steps % 2);
    const TimeGrid grid = TimeGrid::uniform(opts.t0, n);
    const HamiltonianControlContext ctx = make_control_context(model, grid);
    if (!ctx.ok) throw std::runtime_error("couple_hamiltonian: NOT_CONTROLLABLE_NUMERICALLY");
    const std::size_t steps = grid.steps();
    const std::size_t M = opts.cloud_size;
    const bool need_clouds = model.a != 0.0;
    const bool have_noise = model.s > 0.0;

    CouplingEnsemble ens;
    ens.cutoff_time = opts.t0;
    ens.replicas.resize(opts.replicas);
    ens.total_steps = opts.replicas * steps;

    parallel_for(opts.replicas, opts.threads, [&](std::size_t r) {
        auto& rec = ens.replicas[r];
        const auto replica = static_cast<uint32_t>(r);
        const NoiseBundle bundle = sample_noise_bundle(
            grid, d, d, need_clouds ? static_cast<int>(M) : 0, opts.seed, replica);

        std::vector<double> mean_mu(steps * static_cast<std::size_t>(dim), 0.0);
        std::vector<double> mean_nu(steps * static_cast<std::size_t>(dim), 0.0);
        if (need_clouds) {
            PairedInitials init = draw_initial_structure(mu0, nu0, M, opts.seed, replica);
            CloudTrajectory tmu = simulate_hamiltonian_cloud(model, bundle, init.cloud_mu);
            CloudTrajectory tnu = simulate_hamiltonian_cloud(model, bundle, init.cloud_nu);
            if (tmu.diverged || tnu.diverged) {
                rec.diverged = true;
                return;
            }
            for (std::size_t k = 0; k < steps; ++k) {
                const auto mm = tmu.mean_at(k);
                const auto mn = tnu.mean_at(k);
                std::memcpy(mean_mu.data() + k * static_cast<std::size_t>(dim), mm.data(),
                            static_cast<std::size_t>(dim) * sizeof(double));
                std::memcpy(mean_nu.data() + k * static_cast<std::size_t>(dim), mn.data(),
                            static_cast<std::size_t>(dim) * sizeof(double));
            }
        }

        // sigma_tilde is constant in this registry, so both integrals coincide
        std::vector<double> st(steps);
        for (std::size_t k = 0; k < steps; ++k) st[k] = model.sigma_tilde(grid.knots[k]);
        const CommonIntegralPath eta =
            accumulate_common_integral_isotropic(grid, st, bundle.common, d);

        std::vector<double> x0(static_cast<std::size_t>(dim)), y0(static_cast<std::size_t>(dim));
        {
            GaussianStream gp(opts.seed, replica, StreamClass::Initial, static_cast<uint32_t>(M));
            draw_paired_atoms(mu0, nu0, x0, y0, gp);
        }
        std::vector<double> v(static_cast<std::size_t>(dim));
        for (int c = 0; c < dim; ++c)
            v[static_cast<std::size_t>(c)] = y0[static_cast<std::size_t>(c)] - x0[static_cast<std::size_t>(c)];
        const HamiltonianControlPlan plan = hamiltonian_control(model, ctx, v, &eta, &eta);

        GaussianStream pair_stream(opts.seed, replica, StreamClass::Pair, 0);
        std::vector<double> X = x0, Y = y0;
        std::vector<double> bX(static_cast<std::size_t>(d)), bY(static_cast<std::size_t>(d));
        std::vector<double> gamma(static_cast<std::size_t>(d)), dwp(static_cast<std::size_t>(d));
        std::vector<double> nX(static_cast<std::size_t>(m)), nY(static_cast<std::size_t>(m));
        GirsanovAccumulator acc;
        bool ok = true;
        for (std::size_t k = 0; k < steps && ok; ++k) {
            const double t = grid.knots[k];
            const double h = grid.h(k);
            const double sqh = std::sqrt(h);
            const std::span<const double> mmu{mean_mu.data() + k * static_cast<std::size_t>(dim),
                                              static_cast<std::size_t>(dim)};
            const std::span<const double> mnu{mean_nu.data() + k * static_cast<std::size_t>(dim),
                                              static_cast<std::size_t>(dim)};
            model.drift2(t, X, mmu, bX);
            model.drift2(t, Y, mnu, bY);
            const auto ap = plan.alpha_prime_at(k, d);
            if (have_noise) {
                const double sp = model.sigma(t);
                for (int c = 0; c < d; ++c)
                    gamma[static_cast<std::size_t>(c)] =
                        (bY[static_cast<std::size_t>(c)] - bX[static_cast<std::size_t>(c)] -
                         ap[static_cast<std::size_t>(c)]) /
                        sp;
                for (int c = 0; c < d; ++c) dwp[static_cast<std::size_t>(c)] = sqh * pair_stream.next();
                acc.add(gamma, dwp, h);
                if (opts.record_steps) rec.steps.push_back(CoupleStepRecord{t, h, gamma, dwp});
            } else {
                std::fill(dwp.begin(), dwp.end(), 0.0);
            }
            const auto dB = bundle.dB(k);
            const double sc = model.sigma_tilde(t);
            const double sp = model.sigma(t);
            // position blocks first (they read the velocity blocks at knot k)
            for (int rr = 0; rr < m; ++rr) {
                double accX = 0.0, accY = 0.0;
                for (int c = 0; c < m; ++c) {
                    accX += model.A(rr, c) * X[static_cast<std::size_t>(c)];
                    accY += model.A(rr, c) * Y[static_cast<std::size_t>(c)];
                }
                for (int c = 0; c < d; ++c) {
                    accX += model.M(rr, c) * X[static_cast<std::size_t>(m + c)];
                    accY += model.M(rr, c) * Y[static_cast<std::size_t>(m + c)];
                }
                nX[static_cast<std::size_t>(rr)] = X[static_cast<std::size_t>(rr)] + accX * h;
                nY[static_cast<std::size_t>(rr)] = Y[static_cast<std::size_t>(rr)] + accY * h;
            }
            for (int c = 0; c < d; ++c) {
                const std::size_t i2 = static_cast<std::size_t>(m + c);
                X[i2] += bX[static_cast<std::size_t>(c)] * h + sp * dwp[static_cast<std::size_t>(c)] +
                         sc * dB[static_cast<std::size_t>(c)];
                // Y carries X's drift plus the steering derivative
                Y[i2] += (bX[static_cast<std::size_t>(c)] + ap[static_cast<std::size_t>(c)]) * h +
                         sp * dwp[static_cast<std::size_t>(c)] + sc * dB[static_cast<std::size_t>(c)];
                ok = ok && std::isfinite(X[i2]) && std::isfinite(Y[i2]);
            }
            for (int rr = 0; rr < m; ++rr) {
                X[static_cast<std::size_t>(rr)] = nX[static_cast<std::size_t>(rr)];
                Y[static_cast<std::size_t>(rr)] = nY[static_cast<std::size_t>(rr)];
                ok = ok && std::isfinite(nX[static_cast<std::size_t>(rr)]) &&
                     std::isfinite(nY[static_cast<std::size_t>(rr)]);
            }
        }
        if (!ok) {
            rec.diverged = true;
            return;
        }
        std::vector<double> gap(static_cast<std::size_t>(dim));
        for (int c = 0; c < dim; ++c)
            gap[static_cast<std::size_t>(c)] = Y[static_cast<std::size_t>(c)] - X[static_cast<std::size_t>(c)];
        rec.terminal_gap = norm2(gap);
        rec.bridge_gap = rec.terminal_gap;
        rec.log_r = acc.log_r;
        rec.half_quad = acc.half_quad;
        rec.max_gamma_norm = acc.max_gamma_norm;
        rec.r = std::exp(acc.log_r);
        rec.r_log_r = rec.r * acc.log_r;
        if (!std::isfinite(rec.r) || !std::isfinite(rec.r_log_r)) rec.diverged = true;
    });

    finalize_ensemble(ens, opts.gap_tol);
    return ens;
}

namespace {

// Reference-cloud initials live in the upper half of the Initial index space
// so they never collide with the particle systems' initial draws.
std::vector<double> draw_reference_initials(const InitialLaw& law, std::size_t n, uint64_t seed,
                                            uint32_t replica) {
    return draw_initial_atoms(law, n, seed, replica, 0x80000000u);
}

void finalize_particle_estimate(EntropyCostEstimate& est, std::vector<double>& rlogr,
                                std::vector<double>& rs, const ParticleCoupleOptions& opts) {
    est.n_particles = opts.n_particles;
    est.per_replica_cost = rlogr;
    est.total_cost = mean(rlogr);
    est.total_cost_stderr = stderr_mean(rlogr);
    const double N = static_cast<double>(opts.n_particles);
    est.per_particle_cost = est.total_cost / N;
    est.per_particle_stderr = est.total_cost_stderr / N;
    est.k_list = opts.k_list;
    est.k_share.clear();
    for (std::size_t k : opts.k_list)
        est.k_share.push_back(static_cast<double>(k) / N * est.total_cost);
    est.mean_r = mean(rs);
    est.stderr_r = stderr_mean(rs);
}

} // namespace

EntropyCostEstimate couple_particle_system(const ScenarioModel& model,
                                           const ParticleCoupleOptions& opts) {
    const int d = model.dim_x;
    const std::size_t dd = static_cast<std::size_t>(d);
    if (opts.initial.dim != d)
        throw std::invalid_argument("couple_particle_system: initial law dimension mismatch");
    if (!opts.initial_offset.empty() && opts.initial_offset.size() != dd)
        throw std::invalid_argument("couple_particle_system: offset dimension mismatch");
    const TimeGrid grid = TimeGrid::uniform(opts.t0, opts.n_steps);
    const std::size_t steps = grid.steps();
    const std::size_t N = opts.n_particles;

    std::vector<double> rlogr(opts.replicas, 0.0), rs(opts.replicas, 0.0);
    std::vector<char> diverged(opts.replicas, 0);

    parallel_for(opts.replicas, opts.threads, [&](std::size_t r) {
        const auto replica = static_cast<uint32_t>(r);
        const NoiseBundle ref_bundle = sample_noise_bundle(grid, d, d, static_cast<int>(opts.ref_cloud_size),
                                                           opts.seed, replica, StreamClass::Reference);
        const std::vector<double> ref_init =
            draw_reference_initials(opts.initial, opts.ref_cloud_size, opts.seed, replica);
        const CloudTrajectory ref = simulate_limit_cloud(model, ref_bundle, ref_init);
        if (ref.diverged) {
            diverged[r] = 1;
            return;
        }
        const NoiseBundle bundle = sample_noise_bundle(grid, d, d, static_cast<int>(N), opts.seed, replica);

        // limit-drift copies started from the interacting system's initials
        std::vector<double> xbar(N * dd);
        for (std::size_t i = 0; i < N; ++i) {
            GaussianStream gs(opts.seed, replica, StreamClass::Initial, static_cast<uint32_t>(i));
            draw_atom(opts.initial, {xbar.data() + i * dd, dd}, gs);
            if (!opts.initial_offset.empty())
                for (std::size_t c = 0; c < dd; ++c) xbar[i * dd + c] += opts.initial_offset[c];
        }

        std::vector<double> xbar_mean(dd), drift(dd), drift_int(dd), gamma(dd);
        GirsanovAccumulator acc;
        bool ok = true;
        for (std::size_t k = 0; k < steps && ok; ++k) {
            const double t = grid.knots[k];
            const double h = grid.h(k);
            const auto mu_mean = ref.mean_at(k);
            block_mean(xbar, N, d, xbar_mean);
            const auto dB = bundle.dB(k);
            const double sp = model.sigma(t);
            const double st = (model.variant == Variant::Case2)
                                  ? model.sigma_tilde_mu(t, mu_mean)
                                  : 0.0;
            for (std::size_t i = 0; i < N && ok; ++i) {
                auto xi = std::span<double>{xbar.data() + i * dd, dd};
                model.drift(t, xi, mu_mean, drift);      // limit drift: drives the dynamics
                model.drift(t, xi, xbar_mean, drift_int); // interacting drift: enters gamma only
                for (std::size_t c = 0; c < dd; ++c) gamma[c] = (drift_int[c] - drift[c]) / sp;
                acc.add(gamma, bundle.dW(i, k), h);
                const double sc = (model.variant == Variant::Case2) ? st : model.sigma_tilde_x(t, xi);
                ok = em_step_isotropic(xi, h, drift, sp, bundle.dW(i, k), sc, dB) && ok;
            }
        }
        if (!ok || !std::isfinite(acc.log_r)) {
            diverged[r] = 1;
            return;
        }
        const double R = std::exp(acc.log_r);
        rs[r] = R;
        rlogr[r] = R * acc.log_r;
        if (!std::isfinite(rlogr[r])) diverged[r] = 1;
    });

    EntropyCostEstimate est;
    std::vector<double> live_rlogr, live_rs;
    for (std::size_t r = 0; r < opts.replicas; ++r) {
        if (diverged[r]) {
            ++est.diverged_replicas;
            continue;
        }
        live_rlogr.push_back(rlogr[r]);
        live_rs.push_back(rs[r]);
    }
    finalize_particle_estimate(est, live_rlogr, live_rs, opts);
    return est;
}

EntropyCostEstimate couple_particle_system_hamiltonian(const HamiltonianModel& model,
                                                       const ParticleCoupleOptions& opts) {
    const int m = model.m, d = model.d, dim = model.dim_x();
    const std::size_t ddim = static_cast<std::size_t>(dim), dd = static_cast<std::size_t>(d);
    if (opts.initial.dim != dim)
        throw std::invalid_argument("couple_particle_system_hamiltonian: initial law dimension mismatch");
    if (!opts.initial_offset.empty() && opts.initial_offset.size() != ddim)
        throw std::invalid_argument("couple_particle_system_hamiltonian: offset dimension mismatch");
    if (!model.controllable)
        throw std::runtime_error("couple_particle_system_hamiltonian: NOT_CONTROLLABLE");
    std::size_t n = opts.n_steps + (opts.n_steps % 2);
    const TimeGrid grid = TimeGrid::uniform(opts.t0, n);
    const HamiltonianControlContext ctx = make_control_context(model, grid);
    if (!ctx.ok)
        throw std::runtime_error("couple_particle_system_hamiltonian: NOT_CONTROLLABLE_NUMERICALLY");
    const std::size_t steps = grid.steps();
    const std::size_t N = opts.n_particles;

    // one shared plan: the initial gap is the same deterministic offset for
    // every particle (v = 0 when no offset)
    std::vector<double> v(ddim, 0.0);
    if (!opts.initial_offset.empty()) v = opts.initial_offset;
    const HamiltonianControlPlan plan = hamiltonian_control(model, ctx, v, nullptr, nullptr);

    std::vector<double> rlogr(opts.replicas, 0.0), rs(opts.replicas, 0.0);
    std::vector<char> diverged(opts.replicas, 0);

    parallel_for(opts.replicas, opts.threads, [&](std::size_t r) {
        const auto replica = static_cast<uint32_t>(r);
        const NoiseBundle ref_bundle = sample_noise_bundle(grid, d, d, static_cast<int>(opts.ref_cloud_size),
                                                           opts.seed, replica, StreamClass::Reference);
        const std::vector<double> ref_init =
            draw_reference_initials(opts.initial, opts.ref_cloud_size, opts.seed, replica);
        const CloudTrajectory ref = simulate_hamiltonian_cloud(model, ref_bundle, ref_init);
        if (ref.diverged) {
            diverged[r] = 1;
            return;
        }
        const NoiseBundle bundle = sample_noise_bundle(grid, d, d, static_cast<int>(N), opts.seed, replica);

        std::vector<double> xs(N * ddim), ys(N * ddim);
        for (std::size_t i = 0; i < N; ++i) {
            GaussianStream gs(opts.seed, replica, StreamClass::Initial, static_cast<uint32_t>(i));
            draw_atom(opts.initial, {xs.data() + i * ddim, ddim}, gs);
            for (std::size_t c = 0; c < ddim; ++c)
                ys[i * ddim + c] = xs[i * ddim + c] + (opts.initial_offset.empty() ? 0.0 : opts.initial_offset[c]);
        }

        std::vector<double> y_mean(ddim), bX(dd), bY(dd), gamma(dd), n1(static_cast<std::size_t>(m));
        GirsanovAccumulator acc;
        bool ok = true;
        for (std::size_t k = 0; k < steps && ok; ++k) {
            const double t = grid.knots[k];
            const double h = grid.h(k);
            const auto mu_mean = ref.mean_at(k);
            block_mean(ys, N, dim, y_mean);
            const auto dB = bundle.dB(k);
            const double sp = model.sigma(t);
            const double sc = model.sigma_tilde(t);
            const auto ap = plan.alpha_prime_at(k, d);
            for (std::size_t i = 0; i < N && ok; ++i) {
                auto Xi = std::span<double>{xs.data() + i * ddim, ddim};
                auto Yi = std::span<double>{ys.data() + i * ddim, ddim};
                model.drift2(t, Xi, mu_mean, bX);
                model.drift2(t, Yi, y_mean, bY);
                for (std::size_t c = 0; c < dd; ++c) gamma[c] = (bY[c] - bX[c] - ap[c]) / sp;
                acc.add(gamma, bundle.dW(i, k), h);
                // advance X (limit system)
                for (int rr = 0; rr < m; ++rr) {
                    double a1 = 0.0;
                    for (int c = 0; c < m; ++c) a1 += model.A(rr, c) * Xi[static_cast<std::size_t>(c)];
                    for (int c = 0; c < d; ++c) a1 += model.M(rr, c) * Xi[static_cast<std::size_t>(m + c)];
                    n1[static_cast<std::size_t>(rr)] = Xi[static_cast<std::size_t>(rr)] + a1 * h;
                }
                const auto dW = bundle.dW(i, k);
                for (int c = 0; c < d; ++c) {
                    Xi[static_cast<std::size_t>(m + c)] += bX[static_cast<std::size_t>(c)] * h +
                                                           sp * dW[static_cast<std::size_t>(c)] +
                                                           sc * dB[static_cast<std::size_t>(c)];
                    ok = ok && std::isfinite(Xi[static_cast<std::size_t>(m + c)]);
                }
                for (int rr = 0; rr < m; ++rr) Xi[static_cast<std::size_t>(rr)] = n1[static_cast<std::size_t>(rr)];
                // advance Y (steered copies of X's drift)
                for (int rr = 0; rr < m; ++rr) {
                    double a1 = 0.0;
                    for (int c = 0; c < m; ++c) a1 += model.A(rr, c) * Yi[static_cast<std::size_t>(c)];
                    for (int c = 0; c < d; ++c) a1 += model.M(rr, c) * Yi[static_cast<std::size_t>(m + c)];
                    n1[static_cast<std::size_t>(rr)] = Yi[static_cast<std::size_t>(rr)] + a1 * h;
                }
                for (int c = 0; c < d; ++c) {
                    Yi[static_cast<std::size_t>(m + c)] += (bX[static_cast<std::size_t>(c)] + ap[static_cast<std::size_t>(c)]) * h +
                                                           sp * dW[static_cast<std::size_t>(c)] +
                                                           sc * dB[static_cast<std::size_t>(c)];
                    ok = ok && std::isfinite(Yi[static_cast<std::size_t>(m + c)]);
                }
                for (int rr = 0; rr < m; ++rr) Yi[static_cast<std::size_t>(rr)] = n1[static_cast<std::size_t>(rr)];
            }
        }
        if (!ok || !std::isfinite(acc.log_r)) {
            diverged[r] = 1;
            return;
        }
        const double R = std::exp(acc.log_r);
        rs[r] = R;
        rlogr[r] = R * acc.log_r;
        if (!std::isfinite(rlogr[r])) diverged[r] = 1;
    });

    EntropyCostEstimate est;
    std::vector<double> live_rlogr, live_rs;
    for (std::size_t r = 0; r < opts.replicas; ++r) {
        if (diverged[r]) {
            ++est.diverged_replicas;
            continue;
        }
        live_rlogr.push_back(rlogr[r]);
        live_rs.push_back(rs[r]);
    }
    finalize_particle_estimate(est, live_rlogr, live_rs, opts);
    return est;
}

} // namespace cmv
