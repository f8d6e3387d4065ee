#pragma once

#include <cstddef>
#include <vector>

namespace cmv {

// Strictly increasing knots on [0, T], knots[0] == 0.
struct TimeGrid {
    std::vector<double> knots;

    double t_end() const { return knots.back(); }
    std::size_t steps() const { return knots.size() - 1; }
    double h(std::size_t k) const { return knots[k + 1] - knots[k]; }

    static TimeGrid uniform(double t_end, std::size_t n);

    // Grid for bridge couplings: n uniform coarse steps on [0, t0], then a
    // geometric tail (ratio 1/2, up to `levels` extra knots) squeezing toward
    // the singular endpoint t0. Every fraction f in cut_fracs gets an exact
    // knot at t0*(1 - f); the grid always ends at t0 itself so that measure
    // paths can be carried to the endpoint.
    static TimeGrid coupling(double t0, std::size_t n, const std::vector<double>& cut_fracs,
                             int levels = 12);

    // Index of the knot equal to t (within tight tolerance); throws if absent.
    std::size_t knot_index(double t) const;
};

} // namespace cmv
