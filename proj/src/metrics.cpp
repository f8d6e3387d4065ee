#include "cmv/metrics.hpp"

#include "cmv/util.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace cmv {

namespace {

// Jonker-Volgenant style shortest augmenting path assignment, O(n^3).
// cost(i, j) callback avoids materializing the matrix for larger n.
std::vector<std::size_t> solve_assignment(std::size_t n,
                                          const std::function<double(std::size_t, std::size_t)>& cost) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> p(n + 1, n), way(n + 1, n);
    for (std::size_t i = 0; i < n; ++i) {
        p[n] = i;
        std::size_t j0 = n;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = n;
            for (std::size_t j = 0; j < n; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0, j) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != n);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != n);
    }
    std::vector<std::size_t> assign(n);
    for (std::size_t j = 0; j < n; ++j)
        if (p[j] != n) assign[p[j]] = j;
    return assign;
}

// Push an optimal assignment toward the lexicographically smallest one by
// applying cost-neutral transpositions until stable.
void canonicalize_ties(std::vector<std::size_t>& a,
                       const std::function<double(std::size_t, std::size_t)>& cost) {
    const std::size_t n = a.size();
    bool changed = true;
    int guard = 0;
    while (changed && guard++ < 64) {
        changed = false;
        for (std::size_t i = 0; i + 1 < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                if (a[j] >= a[i]) continue;
                const double cur = cost(i, a[i]) + cost(j, a[j]);
                const double swp = cost(i, a[j]) + cost(j, a[i]);
                if (swp <= cur + 1e-15 * (1.0 + std::fabs(cur))) {
                    std::swap(a[i], a[j]);
                    changed = true;
                }
            }
        }
    }
}

} // namespace

W2Result w2_exact(const EmpiricalMeasure& a, const EmpiricalMeasure& b) {
    if (a.dim != b.dim) throw std::invalid_argument("w2_exact: dimension mismatch");
    if (a.size() != b.size())
        throw std::invalid_argument("w2_exact: unequal atom counts (resample to a common n upstream)");
    const std::size_t n = a.size();
    auto cost = [&](std::size_t i, std::size_t j) { return sq_dist(a.atom(i), b.atom(j)); };
    W2Result r;
    r.plan.assignment = solve_assignment(n, cost);
    canonicalize_ties(r.plan.assignment, cost);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += cost(i, r.plan.assignment[i]);
    r.plan.cost = total / static_cast<double>(n);
    r.distance = std::sqrt(r.plan.cost);
    return r;
}

double w2_sorted_1d(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("w2_sorted_1d: unequal atom counts");
    std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
    std::sort(sa.begin(), sa.end());
    std::sort(sb.begin(), sb.end());
    double total = 0.0;
    for (std::size_t i = 0; i < sa.size(); ++i) {
        const double d = sa[i] - sb[i];
        total += d * d;
    }
    return std::sqrt(total / static_cast<double>(sa.size()));
}

std::vector<double> quantile_downsample_1d(std::span<const double> atoms, std::size_t n) {
    if (n == 0 || atoms.empty()) throw std::invalid_argument("quantile_downsample_1d: empty input");
    std::vector<double> sorted(atoms.begin(), atoms.end());
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> out(n);
    const double m = static_cast<double>(sorted.size());
    for (std::size_t j = 0; j < n; ++j) {
        const auto idx = static_cast<std::size_t>((static_cast<double>(j) + 0.5) * m / static_cast<double>(n));
        out[j] = sorted[std::min(idx, sorted.size() - 1)];
    }
    return out;
}

W2Result w2_modified(const EmpiricalMeasure& a, const EmpiricalMeasure& b, double t, int m_split) {
    if (!(t > 0.0)) throw std::invalid_argument("w2_modified: t must be positive");
    if (m_split <= 0 || m_split >= a.dim) throw std::invalid_argument("w2_modified: bad block split");
    auto scale = [&](const EmpiricalMeasure& m) {
        EmpiricalMeasure s = m;
        const std::size_t n = s.size();
        for (std::size_t i = 0; i < n; ++i)
            for (int c = 0; c < m_split; ++c)
                s.atoms[i * static_cast<std::size_t>(s.dim) + static_cast<std::size_t>(c)] /= t;
        return s;
    };
    return w2_exact(scale(a), scale(b));
}

SinkhornResult w2_sinkhorn(const EmpiricalMeasure& a, const EmpiricalMeasure& b, double epsilon,
                           int max_iterations, double tol) {
    if (a.dim != b.dim || a.size() != b.size())
        throw std::invalid_argument("w2_sinkhorn: shape mismatch");
    const std::size_t n = a.size();
    std::vector<double> c(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) c[i * n + j] = sq_dist(a.atom(i), b.atom(j));
    if (epsilon <= 0.0) {
        std::vector<double> copy = c;
        epsilon = 1e-2 * median(copy);
        if (epsilon <= 0.0) epsilon = 1e-12;
    }
    // log-domain Sinkhorn with uniform marginals 1/n
    const double loga = -std::log(static_cast<double>(n));
    std::vector<double> f(n, 0.0), g(n, 0.0), row(n);
    auto lse = [&](const std::vector<double>& vals) {
        const double mx = *std::max_element(vals.begin(), vals.end());
        double s = 0.0;
        for (double v : vals) s += std::exp(v - mx);
        return mx + std::log(s);
    };
    SinkhornResult res;
    res.epsilon = epsilon;
    double err = std::numeric_limits<double>::infinity();
    int it = 0;
    for (; it < max_iterations && err > tol; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) row[j] = (g[j] - c[i * n + j]) / epsilon + loga;
            f[i] = -epsilon * lse(row);
        }
        err = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t i = 0; i < n; ++i) row[i] = (f[i] - c[i * n + j]) / epsilon + loga;
            const double gj = -epsilon * lse(row);
            err = std::max(err, std::fabs(gj - g[j]));
            g[j] = gj;
        }
    }
    res.iterations = it;
    res.converged = err <= tol;
    // transport cost under the entropic plan
    double cost = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double logp = (f[i] + g[j] - c[i * n + j]) / epsilon + 2.0 * loga;
            cost += std::exp(logp) * c[i * n + j];
        }
    res.distance = std::sqrt(std::max(0.0, cost));
    return res;
}

double entropy_gaussian(std::span<const double> m0, std::span<const double> v0,
                        std::span<const double> m1, std::span<const double> v1) {
    const auto k = static_cast<Eigen::Index>(m0.size());
    if (m1.size() != m0.size() || v0.size() != m0.size() * m0.size() || v1.size() != v0.size())
        throw std::invalid_argument("entropy_gaussian: shape mismatch");
    Eigen::MatrixXd V0 = Eigen::Map<const Eigen::MatrixXd>(v0.data(), k, k);
    Eigen::MatrixXd V1 = Eigen::Map<const Eigen::MatrixXd>(v1.data(), k, k);
    Eigen::VectorXd dm(k);
    for (Eigen::Index i = 0; i < k; ++i) dm[i] = m0[static_cast<std::size_t>(i)] - m1[static_cast<std::size_t>(i)];
    const Eigen::LLT<Eigen::MatrixXd> llt0(V0);
    const Eigen::LLT<Eigen::MatrixXd> llt1(V1);
    if (llt0.info() != Eigen::Success || llt1.info() != Eigen::Success)
        throw std::invalid_argument("entropy_gaussian: covariance not SPD");
    const double tr = llt0.solve(V1).trace();
    const double quad = dm.dot(llt0.solve(dm));
    double logdet0 = 0.0, logdet1 = 0.0;
    for (Eigen::Index i = 0; i < k; ++i) {
        logdet0 += 2.0 * std::log(llt0.matrixL()(i, i));
        logdet1 += 2.0 * std::log(llt1.matrixL()(i, i));
    }
    return 0.5 * (tr - static_cast<double>(k) + quad + logdet0 - logdet1);
}

double entropy_gaussian_1d(double m0, double v0, double m1, double v1) {
    return entropy_gaussian({&m0, 1}, {&v0, 1}, {&m1, 1}, {&v1, 1});
}

double rate_Rdq(std::size_t N, const RateSpec& spec) {
    if (N == 0) throw std::invalid_argument("rate_Rdq: N must be positive");
    if (!(spec.q > 2.0)) throw std::invalid_argument("rate_Rdq: q must exceed 2");
    const double n = static_cast<double>(N);
    const double tail = std::pow(n, -(spec.q - 2.0) / spec.q);
    if (spec.d < 4) {
        if (spec.q == 4.0) throw std::invalid_argument("rate_Rdq: q = 4 excluded for d < 4");
        return std::pow(n, -0.5) + tail;
    }
    if (spec.d == 4) {
        if (spec.q == 4.0) throw std::invalid_argument("rate_Rdq: q = 4 excluded for d = 4");
        return std::pow(n, -0.5) * std::log1p(n) + tail;
    }
    const double excluded = static_cast<double>(spec.d) / static_cast<double>(spec.d - 2);
    if (spec.q == excluded) throw std::invalid_argument("rate_Rdq: q = d/(d-2) excluded for d > 4");
    return std::pow(n, -2.0 / static_cast<double>(spec.d)) + tail;
}

PowerLawFit fit_power_law(std::span<const double> ns, std::span<const double> values) {
    if (ns.size() < 4) throw std::invalid_argument("fit_power_law: need at least 4 points");
    const FitResult f = fit_loglog(ns, values);
    return {f.exponent, f.intercept, f.r2};
}

TestFunction TestFunction::bump(std::vector<double> z, double rho, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("TestFunction::bump: eps must be positive");
    if (!(rho > 0.0)) throw std::invalid_argument("TestFunction::bump: rho must be positive");
    TestFunction f;
    f.center = std::move(z);
    f.rho = rho;
    f.eps = eps;
    return f;
}

TestFunction TestFunction::constant_fn(double c) {
    if (!(c > 0.0)) throw std::invalid_argument("TestFunction::constant_fn: c must be positive");
    TestFunction f;
    f.is_constant = true;
    f.constant = c;
    return f;
}

double TestFunction::operator()(std::span<const double> x) const {
    if (is_constant) return constant;
    double s = 0.0;
    for (std::size_t c = 0; c < x.size(); ++c) {
        const double d = x[c] - center[c];
        s += d * d;
    }
    return eps + std::exp(-s / (2.0 * rho * rho));
}

double gaussian_expectation(const TestFunction& f, std::span<const double> mean, double v) {
    if (f.is_constant) return f.constant;
    const auto d = mean.size();
    // product of 1D integrals: E exp(-(x-z)^2/(2 rho^2)) = rho/sqrt(rho^2+v) * exp(-(m-z)^2/(2(rho^2+v)))
    double val = 1.0;
    for (std::size_t c = 0; c < d; ++c) {
        const double s2 = f.rho * f.rho + v;
        val *= f.rho / std::sqrt(s2) * std::exp(-(mean[c] - f.center[c]) * (mean[c] - f.center[c]) / (2.0 * s2));
    }
    return f.eps + val;
}

namespace {
std::vector<double> per_replica_cloud_means(const TestFunction& f,
                                            const std::vector<EmpiricalMeasure>& clouds,
                                            bool take_log) {
    std::vector<double> out(clouds.size());
    for (std::size_t r = 0; r < clouds.size(); ++r) {
        const auto& cl = clouds[r];
        const std::size_t n = cl.size();
        std::vector<double> vals(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double fv = f(cl.atom(i));
            vals[i] = take_log ? std::log(fv) : fv;
        }
        out[r] = mean(vals);
    }
    return out;
}
} // namespace

SemigroupEstimate estimate_semigroup(const TestFunction& f,
                                     const std::vector<EmpiricalMeasure>& clouds,
                                     SemigroupMode mode) {
    const auto vals = per_replica_cloud_means(f, clouds, mode == SemigroupMode::MeanOfLogF);
    return {mean(vals), stderr_mean(vals)};
}

SemigroupEstimate estimate_log_semigroup(const TestFunction& f,
                                         const std::vector<EmpiricalMeasure>& clouds) {
    const auto vals = per_replica_cloud_means(f, clouds, false);
    const double value = std::log(mean(vals));
    const double se = jackknife_stderr(vals, [](std::span<const double> xs) { return std::log(mean(xs)); });
    return {value, se};
}

} // namespace cmv
