#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace cmv {

// Uniform-weight empirical measure: n atoms in R^dim, row-major.
struct EmpiricalMeasure {
    int dim = 1;
    std::vector<double> atoms; // n x dim

    EmpiricalMeasure() = default;
    EmpiricalMeasure(int dim_, std::vector<double> atoms_) : dim(dim_), atoms(std::move(atoms_)) {
        if (dim <= 0 || atoms.size() % static_cast<std::size_t>(dim) != 0 || atoms.empty())
            throw std::invalid_argument("EmpiricalMeasure: bad atom array");
    }

    std::size_t size() const { return atoms.size() / static_cast<std::size_t>(dim); }
    std::span<const double> atom(std::size_t i) const {
        return {atoms.data() + i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
    }
    std::vector<double> mean() const {
        std::vector<double> m(static_cast<std::size_t>(dim), 0.0);
        const std::size_t n = size();
        for (std::size_t i = 0; i < n; ++i) {
            const auto a = atom(i);
            for (int c = 0; c < dim; ++c) m[static_cast<std::size_t>(c)] += a[static_cast<std::size_t>(c)];
        }
        for (auto& v : m) v /= static_cast<double>(n);
        return m;
    }
};

// Mean of a flat particle block (n x dim). The shared per-knot statistic of a
// cloud; computed once per knot and reused by every particle.
inline void block_mean(std::span<const double> states, std::size_t n, int dim,
                       std::span<double> out) {
    for (int c = 0; c < dim; ++c) out[static_cast<std::size_t>(c)] = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (int c = 0; c < dim; ++c)
            out[static_cast<std::size_t>(c)] += states[i * static_cast<std::size_t>(dim) + static_cast<std::size_t>(c)];
    for (int c = 0; c < dim; ++c) out[static_cast<std::size_t>(c)] /= static_cast<double>(n);
}

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t c = 0; c < a.size(); ++c) {
        const double d = a[c] - b[c];
        s += d * d;
    }
    return s;
}

} // namespace cmv
