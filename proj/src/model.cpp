#include "cmv/model.hpp"

#include "cmv/metrics.hpp"
#include "cmv/util.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <stdexcept>

namespace cmv {

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::Case1: return "case1";
        case Variant::Case2: return "case2";
        case Variant::Hamiltonian: return "hamiltonian";
    }
    return "?";
}

Variant variant_from_name(const std::string& name) {
    if (name == "case1") return Variant::Case1;
    if (name == "case2") return Variant::Case2;
    if (name == "hamiltonian") return Variant::Hamiltonian;
    throw std::invalid_argument("unknown variant: " + name);
}

InitialLaw InitialLaw::point(std::vector<double> x) {
    InitialLaw l;
    l.kind = Kind::Point;
    l.dim = static_cast<int>(x.size());
    l.x0 = std::move(x);
    return l;
}

InitialLaw InitialLaw::gaussian(std::vector<double> mean, double var) {
    if (!(var >= 0.0)) throw std::invalid_argument("InitialLaw::gaussian: negative variance");
    InitialLaw l;
    l.kind = Kind::Gaussian;
    l.dim = static_cast<int>(mean.size());
    l.x0 = std::move(mean);
    l.var = var;
    return l;
}

InitialLaw InitialLaw::two_point(std::vector<double> a, std::vector<double> b, double p) {
    if (a.size() != b.size()) throw std::invalid_argument("InitialLaw::two_point: dim mismatch");
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("InitialLaw::two_point: bad weight");
    InitialLaw l;
    l.kind = Kind::TwoPoint;
    l.dim = static_cast<int>(a.size());
    l.x0 = std::move(a);
    l.x1 = std::move(b);
    l.p = p;
    return l;
}

InitialLaw InitialLaw::from_json(const nlohmann::json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "point") return point(j.at("x").get<std::vector<double>>());
    if (kind == "gaussian")
        return gaussian(j.at("x").get<std::vector<double>>(), j.at("var").get<double>());
    if (kind == "two_point")
        return two_point(j.at("x").get<std::vector<double>>(), j.at("x2").get<std::vector<double>>(),
                         j.value("p", 0.5));
    throw std::invalid_argument("unknown initial law kind: " + kind);
}

nlohmann::json InitialLaw::to_json() const {
    nlohmann::json j;
    switch (kind) {
        case Kind::Point:
            j["kind"] = "point";
            j["x"] = x0;
            break;
        case Kind::Gaussian:
            j["kind"] = "gaussian";
            j["x"] = x0;
            j["var"] = var;
            break;
        case Kind::TwoPoint:
            j["kind"] = "two_point";
            j["x"] = x0;
            j["x2"] = x1;
            j["p"] = p;
            break;
    }
    return j;
}

namespace {
double std_normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

void map_primitive(const InitialLaw& law, std::span<const double> z, std::span<double> out) {
    switch (law.kind) {
        case InitialLaw::Kind::Point:
            for (int c = 0; c < law.dim; ++c) out[static_cast<std::size_t>(c)] = law.x0[static_cast<std::size_t>(c)];
            break;
        case InitialLaw::Kind::Gaussian: {
            const double sd = std::sqrt(law.var);
            for (int c = 0; c < law.dim; ++c)
                out[static_cast<std::size_t>(c)] = law.x0[static_cast<std::size_t>(c)] + sd * z[static_cast<std::size_t>(c)];
            break;
        }
        case InitialLaw::Kind::TwoPoint: {
            // the mixture index rides the first primitive through its quantile
            const double u = std_normal_cdf(z[0]);
            const auto& pt = (u < law.p) ? law.x0 : law.x1;
            for (int c = 0; c < law.dim; ++c) out[static_cast<std::size_t>(c)] = pt[static_cast<std::size_t>(c)];
            break;
        }
    }
}
} // namespace

void draw_paired_atoms(const InitialLaw& a, const InitialLaw& b, std::span<double> out_a,
                       std::span<double> out_b, GaussianStream& gs) {
    if (a.dim != b.dim) throw std::invalid_argument("draw_paired_atoms: dim mismatch");
    std::vector<double> z(static_cast<std::size_t>(a.dim));
    for (auto& v : z) v = gs.next();
    map_primitive(a, z, out_a);
    map_primitive(b, z, out_b);
}

void draw_atom(const InitialLaw& law, std::span<double> out, GaussianStream& gs) {
    std::vector<double> z(static_cast<std::size_t>(law.dim));
    for (auto& v : z) v = gs.next();
    map_primitive(law, z, out);
}

double w2_between_laws_sq(const InitialLaw& a, const InitialLaw& b) {
    if (a.dim != b.dim) throw std::invalid_argument("w2_between_laws_sq: dim mismatch");
    const int d = a.dim;
    auto mean_shift_sq = [&]() {
        double s = 0.0;
        for (int c = 0; c < d; ++c) {
            const double dm = a.x0[static_cast<std::size_t>(c)] - b.x0[static_cast<std::size_t>(c)];
            s += dm * dm;
        }
        return s;
    };
    using K = InitialLaw::Kind;
    if (a.kind == K::Point && b.kind == K::Point) return mean_shift_sq();
    if ((a.kind == K::Point || a.kind == K::Gaussian) && (b.kind == K::Point || b.kind == K::Gaussian)) {
        const double va = (a.kind == K::Gaussian) ? a.var : 0.0;
        const double vb = (b.kind == K::Gaussian) ? b.var : 0.0;
        const double ds = std::sqrt(va) - std::sqrt(vb);
        return mean_shift_sq() + static_cast<double>(d) * ds * ds;
    }
    if (a.kind == K::TwoPoint && b.kind == K::TwoPoint && d == 1 && a.p == b.p) {
        auto lo = [](const InitialLaw& l) { return std::min(l.x0[0], l.x1[0]); };
        auto hi = [](const InitialLaw& l) { return std::max(l.x0[0], l.x1[0]); };
        const double pl = (a.x0[0] <= a.x1[0]) ? a.p : 1.0 - a.p;
        const double pl_b = (b.x0[0] <= b.x1[0]) ? b.p : 1.0 - b.p;
        if (pl != pl_b) throw std::invalid_argument("w2_between_laws_sq: mixture weights differ");
        const double d0 = lo(a) - lo(b), d1 = hi(a) - hi(b);
        return pl * d0 * d0 + (1.0 - pl) * d1 * d1;
    }
    throw std::invalid_argument("w2_between_laws_sq: unsupported law pair");
}

void ScenarioModel::drift(double t, std::span<const double> x, std::span<const double> mu_mean,
                          std::span<double> out) const {
    (void)t;
    if (preset_id == "ou") {
        for (int c = 0; c < dim_x; ++c)
            out[static_cast<std::size_t>(c)] = -a * (x[static_cast<std::size_t>(c)] - mu_mean[static_cast<std::size_t>(c)]);
        return;
    }
    if (preset_id == "cos-perturbed") {
        for (int c = 0; c < dim_x; ++c)
            out[static_cast<std::size_t>(c)] = -a * x[static_cast<std::size_t>(c)] +
                                               eps * std::cos(x[static_cast<std::size_t>(c)]) +
                                               kmu * mu_mean[static_cast<std::size_t>(c)];
        return;
    }
    throw std::logic_error("ScenarioModel::drift: unknown preset " + preset_id);
}

double ScenarioModel::sigma_tilde_x(double t, std::span<const double> x) const {
    (void)t;
    (void)x;
    return st0;
}

double ScenarioModel::sigma_tilde_mu(double t, std::span<const double> mu_mean) const {
    (void)t;
    double avg = 0.0;
    for (int c = 0; c < dim_x; ++c) avg += mu_mean[static_cast<std::size_t>(c)];
    avg /= static_cast<double>(dim_x);
    return st0 + st1 * std::tanh(avg);
}

double ScenarioModel::sigma_tilde(double t, std::span<const double> x,
                                  std::span<const double> mu_mean) const {
    return (variant == Variant::Case2) ? sigma_tilde_mu(t, mu_mean) : sigma_tilde_x(t, x);
}

void HamiltonianModel::drift2(double t, std::span<const double> x, std::span<const double> mu_mean,
                              std::span<double> out) const {
    (void)t;
    for (int c = 0; c < d; ++c) {
        const std::size_t idx = static_cast<std::size_t>(m + c);
        out[static_cast<std::size_t>(c)] = -a * (x[idx] - mu_mean[idx]);
    }
}

namespace {

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, const char* name) {
    if (!j.is_array() || j.empty()) throw std::invalid_argument(std::string("bad matrix: ") + name);
    const auto rows = j.size();
    const auto cols = j[0].size();
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (std::size_t r = 0; r < rows; ++r) {
        if (j[r].size() != cols) throw std::invalid_argument(std::string("ragged matrix: ") + name);
        for (std::size_t c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = j[r][c].get<double>();
    }
    return m;
}

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
    nlohmann::json j = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        j.push_back(row);
    }
    return j;
}

double derive_lambda(double s) {
    if (!(s > 0.0)) throw std::invalid_argument("build_scenario: lambda would be 0 (s must be positive)");
    return std::min({s * s, 1.0 / (s * s), 1.0});
}

} // namespace

BuiltScenario build_scenario(const nlohmann::json& config) {
    const std::string preset = config.at("preset").get<std::string>();
    const nlohmann::json params = config.value("params", nlohmann::json::object());
    const nlohmann::json declared = config.value("declared", nlohmann::json::object());

    if (preset == "ou" || preset == "cos-perturbed") {
        ScenarioModel m;
        m.preset_id = preset;
        m.variant = variant_from_name(config.value("variant", std::string("case1")));
        if (m.variant == Variant::Hamiltonian)
            throw std::invalid_argument("build_scenario: preset " + preset + " is not a Hamiltonian model");
        m.dim_x = params.value("dim", 1);
        if (m.dim_x < 1) throw std::invalid_argument("build_scenario: dim must be >= 1");
        m.dim_w = m.dim_x;
        m.dim_b = m.dim_x;
        m.horizon = params.value("horizon", 1.0);
        m.a = params.value("a", 1.0);
        m.s = params.value("s", 1.0);
        m.st0 = params.value("st0", 0.5);
        m.st1 = params.value("st1", 0.0);
        if (m.a < 0.0) throw std::invalid_argument("build_scenario: a must be nonnegative");
        if (m.variant != Variant::Case2 && m.st1 != 0.0)
            throw std::invalid_argument("build_scenario: st1 requires variant case2");
        if (preset == "cos-perturbed") {
            m.eps = params.value("eps", 0.3);
            m.kmu = params.value("kmu", 0.5);
            if (m.variant == Variant::Case2)
                throw std::invalid_argument("build_scenario: cos-perturbed supports case1 only");
        }
        // analytic constants of the preset
        double K = 0.0;
        if (preset == "ou") {
            K = m.a + ((m.variant == Variant::Case2) ? m.st1 * m.st1 : 0.0);
        } else {
            K = std::max({m.a + m.eps, m.kmu, 2.0 * std::max(m.eps - m.a, 0.0) + m.kmu});
        }
        m.K = declared.value("K", K);
        m.K_tilde = declared.value("K_tilde", (m.variant == Variant::Case2) ? m.st1 * m.st1 : 0.0);
        m.lambda = declared.value("lambda", derive_lambda(m.s));
        if (!(m.lambda > 0.0 && m.lambda <= 1.0))
            throw std::invalid_argument("build_scenario: lambda must lie in (0,1]");
        if (m.K < 0.0 || m.K_tilde < 0.0)
            throw std::invalid_argument("build_scenario: K and K_tilde must be nonnegative");
        return m;
    }

    if (preset == "kinetic") {
        HamiltonianModel h;
        h.preset_id = preset;
        h.m = params.value("m", 1);
        h.d = params.value("d", 1);
        if (h.m < 1 || h.d < 1) throw std::invalid_argument("build_scenario: kinetic dims must be >= 1");
        if (params.contains("A")) h.A = matrix_from_json(params.at("A"), "A");
        else h.A = Eigen::MatrixXd::Zero(h.m, h.m);
        if (params.contains("M")) h.M = matrix_from_json(params.at("M"), "M");
        else h.M = Eigen::MatrixXd::Identity(h.m, h.d);
        if (h.A.rows() != h.m || h.A.cols() != h.m || h.M.rows() != h.m || h.M.cols() != h.d)
            throw std::invalid_argument("build_scenario: A or M has inconsistent dimensions");
        h.horizon = params.value("horizon", 1.0);
        h.a = params.value("a", 0.0);
        h.s = params.value("s", 1.0);
        h.st0 = params.value("st0", 0.5);
        if (h.s < 0.0 || h.st0 < 0.0) throw std::invalid_argument("build_scenario: negative diffusion");
        const KalmanResult kr = kalman_rank(h.A, h.M);
        h.controllable = kr.controllable;
        h.ell = kr.ell;
        h.K = declared.value("K", h.a);
        h.K_tilde = declared.value("K_tilde", 0.0);
        return h;
    }

    throw std::invalid_argument("build_scenario: unknown preset " + preset);
}

nlohmann::json scenario_to_json(const BuiltScenario& sc) {
    nlohmann::json j;
    if (std::holds_alternative<ScenarioModel>(sc)) {
        const auto& m = std::get<ScenarioModel>(sc);
        j["preset"] = m.preset_id;
        j["variant"] = variant_name(m.variant);
        j["params"] = {{"dim", m.dim_x}, {"horizon", m.horizon}, {"a", m.a},  {"s", m.s},
                       {"st0", m.st0},   {"st1", m.st1},         {"eps", m.eps}, {"kmu", m.kmu}};
        j["declared"] = {{"K", m.K}, {"K_tilde", m.K_tilde}, {"lambda", m.lambda}};
    } else {
        const auto& h = std::get<HamiltonianModel>(sc);
        j["preset"] = h.preset_id;
        j["variant"] = "hamiltonian";
        j["params"] = {{"m", h.m},     {"d", h.d},   {"A", matrix_to_json(h.A)},
                       {"M", matrix_to_json(h.M)},   {"horizon", h.horizon},
                       {"a", h.a},     {"s", h.s},   {"st0", h.st0}};
        j["declared"] = {{"K", h.K}, {"K_tilde", h.K_tilde}, {"ell", h.ell}};
    }
    return j;
}

KalmanResult kalman_rank(const Eigen::MatrixXd& A, const Eigen::MatrixXd& M) {
    const auto m = A.rows();
    if (A.cols() != m || M.rows() != m)
        throw std::invalid_argument("kalman_rank: dimension mismatch");
    const auto d = M.cols();
    Eigen::MatrixXd block(m, 0);
    Eigen::MatrixXd cur = M;
    for (int l = 1; l <= m; ++l) {
        Eigen::MatrixXd next(m, block.cols() + d);
        next << block, cur;
        block.swap(next);
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(block);
        const auto& sv = svd.singularValues();
        const double thresh = static_cast<double>(std::max(block.rows(), block.cols())) *
                              (sv.size() > 0 ? sv(0) : 0.0) * 1e-12;
        Eigen::Index rank = 0;
        for (Eigen::Index i = 0; i < sv.size(); ++i)
            if (sv(i) > thresh) ++rank;
        if (rank == m) return {true, l};
        cur = A * cur;
    }
    return {false, 0};
}

std::string condition_name(Condition c) {
    switch (c) {
        case Condition::H: return "H";
        case Condition::A: return "A";
        case Condition::B: return "B";
        case Condition::C: return "C";
    }
    return "?";
}

namespace {

// ratio of lhs/rhs with the 0/0 -> 0 convention
double clause_ratio(double lhs, double rhs) {
    if (rhs > 0.0) return lhs / rhs;
    if (lhs <= 0.0) return 0.0;
    return std::numeric_limits<double>::infinity();
}

struct ClauseSet {
    double worst = -std::numeric_limits<double>::infinity();
    std::string worst_clause;
    void add(const char* name, double lhs, double rhs) {
        const double r = clause_ratio(lhs, rhs);
        if (r > worst) {
            worst = r;
            worst_clause = name;
        }
    }
};

double hs_sq_isotropic(double delta_scalar, int dim) {
    return static_cast<double>(dim) * delta_scalar * delta_scalar;
}

} // namespace

double condition_ratio(const BuiltScenario& model, Condition which, double t,
                       const EmpiricalMeasure& mu, const EmpiricalMeasure& nu,
                       std::span<const double> x, std::span<const double> y,
                       std::string* worst_clause) {
    const double w2 = w2_exact(mu, nu).distance;
    const double w2sq = w2 * w2;
    const auto mmean = mu.mean();
    const auto nmean = nu.mean();
    const double dxy_sq = sq_dist(x, y);
    const double dxy = std::sqrt(dxy_sq);
    ClauseSet cs;

    if (std::holds_alternative<HamiltonianModel>(model)) {
        if (which != Condition::C)
            throw std::invalid_argument("condition_ratio: Hamiltonian models support condition C only");
        const auto& h = std::get<HamiltonianModel>(model);
        std::vector<double> bx(static_cast<std::size_t>(h.d)), by(static_cast<std::size_t>(h.d));
        h.drift2(t, x, mmean, bx);
        h.drift2(t, y, nmean, by);
        const double db = std::sqrt(sq_dist(bx, by));
        cs.add("b-lipschitz", db, h.K * (dxy + w2));
        cs.add("sigma_tilde-lipschitz", 0.0, h.K_tilde * w2);
        cs.add("sigma-invertible", (h.s > 0.0) ? 0.0 : 1.0, 0.0);
        cs.add("kalman-rank", h.controllable ? 0.0 : 1.0, 0.0);
        if (worst_clause) *worst_clause = cs.worst_clause;
        return cs.worst;
    }

    const auto& m = std::get<ScenarioModel>(model);
    std::vector<double> bx(static_cast<std::size_t>(m.dim_x)), by(static_cast<std::size_t>(m.dim_x));
    m.drift(t, x, mmean, bx);
    m.drift(t, y, nmean, by);
    double inner = 0.0;
    for (int c = 0; c < m.dim_x; ++c)
        inner += (bx[static_cast<std::size_t>(c)] - by[static_cast<std::size_t>(c)]) *
                 (x[static_cast<std::size_t>(c)] - y[static_cast<std::size_t>(c)]);
    const double db = std::sqrt(sq_dist(bx, by));
    const double ssq = m.s * m.s; // sigma sigma^* = s^2 I

    switch (which) {
        case Condition::H: {
            const double dst = (m.variant == Variant::Case2)
                                   ? m.sigma_tilde_mu(t, mmean) - m.sigma_tilde_mu(t, nmean)
                                   : m.sigma_tilde_x(t, x) - m.sigma_tilde_x(t, y);
            const double lhs = hs_sq_isotropic(dst, m.dim_x) + 2.0 * inner; // sigma constant
            cs.add("monotonicity", lhs, m.K * (dxy_sq + w2sq));
            break;
        }
        case Condition::A: {
            if (m.variant == Variant::Case2)
                throw std::invalid_argument("condition_ratio: condition A needs sigma_tilde(t,x)");
            cs.add("ellipticity-upper", m.lambda * ssq, 1.0);
            cs.add("ellipticity-lower", m.lambda, ssq);
            cs.add("sigma-lipschitz", 0.0, m.K * dxy_sq);
            cs.add("b-semi-lipschitz", inner, m.K * (dxy * w2 + dxy_sq));
            const double dst = m.sigma_tilde_x(t, x) - m.sigma_tilde_x(t, y);
            cs.add("sigma_tilde-lipschitz", hs_sq_isotropic(dst, m.dim_x), m.K_tilde * dxy_sq);
            break;
        }
        case Condition::B: {
            cs.add("ellipticity-upper", m.lambda * ssq, 1.0);
            cs.add("ellipticity-lower", m.lambda, ssq);
            cs.add("sigma-lipschitz", 0.0, m.K * dxy_sq);
            cs.add("b-lipschitz", db, m.K * (dxy + w2));
            const double dst = (m.variant == Variant::Case2)
                                   ? m.sigma_tilde_mu(t, mmean) - m.sigma_tilde_mu(t, nmean)
                                   : 0.0; // constant in the Case 1 registry
            cs.add("sigma_tilde-lipschitz", hs_sq_isotropic(dst, m.dim_x), m.K_tilde * w2sq);
            break;
        }
        case Condition::C:
            throw std::invalid_argument("condition_ratio: condition C needs a Hamiltonian model");
    }
    if (worst_clause) *worst_clause = cs.worst_clause;
    return cs.worst;
}

ConditionReport check_condition(const BuiltScenario& model, Condition which,
                                const SampleSpec& spec) {
    if (spec.count < 1) throw std::invalid_argument("check_condition: count must be >= 1");
    const int dim = std::holds_alternative<ScenarioModel>(model)
                        ? std::get<ScenarioModel>(model).dim_x
                        : std::get<HamiltonianModel>(model).dim_x();
    const double horizon = std::holds_alternative<ScenarioModel>(model)
                               ? std::get<ScenarioModel>(model).horizon
                               : std::get<HamiltonianModel>(model).horizon;

    struct SampleOut {
        double ratio = -std::numeric_limits<double>::infinity();
        ConditionWitness witness;
    };
    std::vector<SampleOut> outs(spec.count);

    parallel_for(spec.count, spec.threads, [&](std::size_t i) {
        GaussianStream gs(spec.seed, static_cast<uint32_t>(i), StreamClass::Aux,
                          static_cast<uint32_t>(which));
        auto urand = [&]() { return (2.0 * gs.next_uniform() - 1.0) * spec.box; };
        const double t = gs.next_uniform() * horizon;
        std::vector<double> x(static_cast<std::size_t>(dim)), y(static_cast<std::size_t>(dim));
        for (auto& v : x) v = urand();
        for (auto& v : y) v = urand();
        EmpiricalMeasure mu, nu;
        mu.dim = dim;
        nu.dim = dim;
        mu.atoms.resize(spec.measure_atoms * static_cast<std::size_t>(dim));
        nu.atoms.resize(spec.measure_atoms * static_cast<std::size_t>(dim));
        for (auto& v : mu.atoms) v = urand();
        for (auto& v : nu.atoms) v = urand();
        std::string clause;
        const double r = condition_ratio(model, which, t, mu, nu, x, y, &clause);
        outs[i].ratio = r;
        outs[i].witness = ConditionWitness{t, x, y, clause};
    });

    ConditionReport rep;
    rep.condition_id = which;
    rep.n_samples = spec.count;
    rep.worst_ratio = -std::numeric_limits<double>::infinity();
    for (const auto& o : outs)
        if (o.ratio > rep.worst_ratio) {
            rep.worst_ratio = o.ratio;
            rep.witness = o.witness;
        }
    rep.worst_ratio = std::max(rep.worst_ratio, 0.0);
    rep.violated = rep.worst_ratio > 1.0 + 1e-9;
    return rep;
}

} // namespace cmv
