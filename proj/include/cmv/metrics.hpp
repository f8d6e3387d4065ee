#pragma once

#include "cmv/measure.hpp"

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace cmv {

struct TransportPlan {
    std::vector<std::size_t> assignment; // atom i of a pairs with atom assignment[i] of b
    double cost = 0.0;                   // mean squared displacement (1/n sum |x_i - y_pi(i)|^2)
};

struct W2Result {
    double distance = 0.0;
    TransportPlan plan;
};

// Exact L2-Wasserstein distance between equal-size uniform empirical measures,
// via an O(n^3) shortest-augmenting-path assignment. Ties between optimal
// permutations are canonicalized toward the lexicographically smallest one
// reachable by cost-neutral transpositions.
W2Result w2_exact(const EmpiricalMeasure& a, const EmpiricalMeasure& b);

// 1D fast path: sorted (comonotone) matching, which is the exact optimum in
// one dimension. Accepts unequal counts only through the caller downsampling.
double w2_sorted_1d(std::span<const double> a, std::span<const double> b);

// Deterministic quantile downsample of a 1D cloud to n atoms (order statistics
// at the (j+1/2)/n quantiles). Used to bring unequal atom counts to a common n.
std::vector<double> quantile_downsample_1d(std::span<const double> atoms, std::size_t n);

// Kinetic-scaled distance: block (1) = first m coordinates scaled by 1/t.
W2Result w2_modified(const EmpiricalMeasure& a, const EmpiricalMeasure& b, double t, int m_split);

struct SinkhornResult {
    double distance = 0.0;
    double epsilon = 0.0;
    int iterations = 0;
    bool converged = false;
};

// Entropic-regularized alternative for clouds too large for the exact solver.
// epsilon defaults to 1e-2 times the median pairwise squared cost.
SinkhornResult w2_sinkhorn(const EmpiricalMeasure& a, const EmpiricalMeasure& b,
                           double epsilon = 0.0, int max_iterations = 500, double tol = 1e-9);

// Relative entropy Ent(N(m1, v1) | N(m0, v0)) in closed form. Covariances are
// row-major k x k and must be symmetric positive definite.
double entropy_gaussian(std::span<const double> m0, std::span<const double> v0,
                        std::span<const double> m1, std::span<const double> v1);
double entropy_gaussian_1d(double m0, double v0, double m1, double v1);

struct RateSpec {
    int d = 1;
    double q = 4.0; // moment order, > 2
};

// Empirical-measure convergence rate in squared W2, piecewise in the dimension:
//   d < 4 : N^{-1/2} + N^{-(q-2)/q}          (q != 4)
//   d = 4 : N^{-1/2} log(1+N) + N^{-(q-2)/q} (q != 4)
//   d > 4 : N^{-2/d} + N^{-(q-2)/q}          (q != d/(d-2))
double rate_Rdq(std::size_t N, const RateSpec& spec);

struct PowerLawFit {
    double exponent = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
};

PowerLawFit fit_power_law(std::span<const double> ns, std::span<const double> values);

// Bounded positive test functions for semigroup evaluation.
struct TestFunction {
    bool is_constant = false;
    double constant = 1.0;
    std::vector<double> center; // z
    double rho = 1.0;
    double eps = 1e-3;

    static TestFunction bump(std::vector<double> z, double rho, double eps);
    static TestFunction constant_fn(double c);

    double operator()(std::span<const double> x) const;
};

// Closed-form Gaussian expectation of a registry bump against N(mean, v*I).
double gaussian_expectation(const TestFunction& f, std::span<const double> mean, double v);

enum class SemigroupMode { MeanOfF, MeanOfLogF };

struct SemigroupEstimate {
    double value = 0.0;  // P_t f  or  P_t log f
    double stderr_ = 0.0;
};

// Monte Carlo semigroup value from per-replica terminal clouds. Averages over
// atoms within each replica (private randomness) and over replicas (common
// randomness); jackknife standard error over replicas.
SemigroupEstimate estimate_semigroup(const TestFunction& f,
                                     const std::vector<EmpiricalMeasure>& clouds,
                                     SemigroupMode mode);

// log P_t f with jackknife stderr (needed with MeanOfF for Harnack gaps).
SemigroupEstimate estimate_log_semigroup(const TestFunction& f,
                                         const std::vector<EmpiricalMeasure>& clouds);

} // namespace cmv
