#include "cmv/grid.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cmv {

TimeGrid TimeGrid::uniform(double t_end, std::size_t n) {
    if (!(t_end > 0.0) || n == 0) throw std::invalid_argument("TimeGrid::uniform: bad arguments");
    TimeGrid g;
    g.knots.resize(n + 1);
    for (std::size_t k = 0; k <= n; ++k)
        g.knots[k] = t_end * (static_cast<double>(k) / static_cast<double>(n));
    g.knots[0] = 0.0;
    g.knots[n] = t_end;
    return g;
}

TimeGrid TimeGrid::coupling(double t0, std::size_t n, const std::vector<double>& cut_fracs,
                            int levels) {
    if (!(t0 > 0.0) || n == 0) throw std::invalid_argument("TimeGrid::coupling: bad arguments");
    std::vector<double> ks;
    for (std::size_t k = 0; k < n; ++k)
        ks.push_back(t0 * (static_cast<double>(k) / static_cast<double>(n)));
    // geometric tail inside the last coarse interval
    double frac = 1.0 / static_cast<double>(n);
    for (int j = 0; j < levels; ++j) {
        frac *= 0.5;
        ks.push_back(t0 * (1.0 - frac));
    }
    for (double f : cut_fracs) {
        if (!(f >= 0.0 && f < 1.0)) throw std::invalid_argument("TimeGrid::coupling: cut fraction");
        ks.push_back(t0 * (1.0 - f));
    }
    ks.push_back(t0);
    std::sort(ks.begin(), ks.end());
    TimeGrid g;
    const double tol = t0 * 1e-12;
    for (double t : ks) {
        if (g.knots.empty() || t - g.knots.back() > tol) g.knots.push_back(t);
    }
    g.knots.front() = 0.0;
    g.knots.back() = t0;
    return g;
}

std::size_t TimeGrid::knot_index(double t) const {
    const double tol = std::max(1e-12, 1e-12 * t_end());
    auto it = std::lower_bound(knots.begin(), knots.end(), t - tol);
    if (it == knots.end() || std::fabs(*it - t) > tol)
        throw std::invalid_argument("TimeGrid::knot_index: t is not a knot");
    return static_cast<std::size_t>(it - knots.begin());
}

} // namespace cmv
