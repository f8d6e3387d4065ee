#pragma once

#include "cmv/measure.hpp"
#include "cmv/philox.hpp"

#include <Eigen/Dense>

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace cmv {

enum class Variant { Case1, Case2, Hamiltonian };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

// Initial laws: point mass, isotropic Gaussian, two-point mixture. Enough for
// every experiment; each supports comonotone sampling for optimal pairing.
struct InitialLaw {
    enum class Kind { Point, Gaussian, TwoPoint };
    Kind kind = Kind::Point;
    int dim = 1;
    std::vector<double> x0;  // point location / Gaussian mean / first mixture atom
    std::vector<double> x1;  // second mixture atom
    double var = 0.0;        // isotropic Gaussian variance
    double p = 0.5;          // mixture weight on x0

    static InitialLaw point(std::vector<double> x);
    static InitialLaw gaussian(std::vector<double> mean, double var);
    static InitialLaw two_point(std::vector<double> a, std::vector<double> b, double p);

    static InitialLaw from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

// Draws one atom from each law using shared primitives (the comonotone
// coupling: identical laws produce identical draws). Valid as the optimal
// coupling for the point/Gaussian product families and in one dimension.
void draw_paired_atoms(const InitialLaw& a, const InitialLaw& b, std::span<double> out_a,
                       std::span<double> out_b, GaussianStream& gs);
void draw_atom(const InitialLaw& law, std::span<double> out, GaussianStream& gs);

// Exact squared W2 between two supported laws (analytic; used for bound shapes).
double w2_between_laws_sq(const InitialLaw& a, const InitialLaw& b);

// Non-degenerate scenario: dX = b(X, mu)dt + s dW + sigma_tilde dB with
// sigma = s*I and isotropic sigma_tilde; the interaction enters through the
// mean of mu only (closed registry, exact constants).
struct ScenarioModel {
    std::string preset_id;
    Variant variant = Variant::Case1;
    int dim_x = 1;
    int dim_w = 1;
    int dim_b = 1;
    double horizon = 1.0;

    // preset parameters
    double a = 1.0;   // mean-reversion / interaction rate
    double s = 1.0;   // private diffusion scale
    double st0 = 0.5; // common diffusion scale (constant part)
    double st1 = 0.0; // Case 2 measure-dependent amplitude
    double eps = 0.0; // cos perturbation amplitude
    double kmu = 0.0; // cos-perturbed mean-field coefficient

    // declared regularity constants
    double K = 0.0;
    double K_tilde = 0.0;
    double lambda = 1.0;

    void drift(double t, std::span<const double> x, std::span<const double> mu_mean,
               std::span<double> out) const;
    double sigma(double t) const { return s; }
    double sigma_tilde_x(double t, std::span<const double> x) const;              // Case 1
    double sigma_tilde_mu(double t, std::span<const double> mu_mean) const;       // Case 2
    double sigma_tilde(double t, std::span<const double> x, std::span<const double> mu_mean) const;
};

// Degenerate two-block scenario: position block feels the velocity block only,
// noise acts on the velocity block.
//   dX1 = (A X1 + M X2) dt
//   dX2 = b(X, mu) dt + s dW + st0 dB
struct HamiltonianModel {
    std::string preset_id;
    int m = 1; // position block dimension
    int d = 1; // velocity block dimension
    Eigen::MatrixXd A; // m x m
    Eigen::MatrixXd M; // m x d
    int ell = 0;       // smallest controllability index
    bool controllable = false;
    double horizon = 1.0;

    double a = 0.0;   // velocity-block mean-field rate: b = -a (x2 - mean2(mu))
    double s = 1.0;   // private diffusion on the velocity block
    double st0 = 0.5; // common diffusion on the velocity block

    double K = 0.0;
    double K_tilde = 0.0;

    int dim_x() const { return m + d; }
    void drift2(double t, std::span<const double> x, std::span<const double> mu_mean,
                std::span<double> out) const;
    double sigma(double t) const { return s; }
    double sigma_tilde(double t) const { return st0; }
};

using BuiltScenario = std::variant<ScenarioModel, HamiltonianModel>;

// config: {"preset": ..., "variant": ..., "params": {...}, "declared": {...}}
BuiltScenario build_scenario(const nlohmann::json& config);
nlohmann::json scenario_to_json(const BuiltScenario& sc);

struct KalmanResult {
    bool controllable = false;
    int ell = 0;
};

// Smallest l <= m with Rank[M | AM | ... | A^{l-1}M] = m, judged by singular
// values against max_dim * ||block|| * 1e-12.
KalmanResult kalman_rank(const Eigen::MatrixXd& A, const Eigen::MatrixXd& M);

enum class Condition { H, A, B, C };

std::string condition_name(Condition c);

struct SampleSpec {
    std::size_t count = 1000;
    double box = 3.0;           // sample coordinates uniformly in [-box, box]
    uint64_t seed = 1;
    std::size_t measure_atoms = 8;
    int threads = 1;
};

struct ConditionWitness {
    double t = 0.0;
    std::vector<double> x, y;
    std::string clause;
};

struct ConditionReport {
    Condition condition_id = Condition::H;
    std::size_t n_samples = 0;
    double worst_ratio = 0.0;
    bool violated = false;
    ConditionWitness witness;
};

// Ratio of asserted-LHS to asserted-RHS on one sampled tuple; <= 1 means the
// inequality holds there. 0/0 counts as 0. Sampling can refute a declared
// constant but cannot certify it.
double condition_ratio(const BuiltScenario& model, Condition which, double t,
                       const EmpiricalMeasure& mu, const EmpiricalMeasure& nu,
                       std::span<const double> x, std::span<const double> y,
                       std::string* worst_clause = nullptr);

ConditionReport check_condition(const BuiltScenario& model, Condition which,
                                const SampleSpec& spec);

} // namespace cmv
