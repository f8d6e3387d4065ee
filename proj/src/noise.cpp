#include "cmv/noise.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace cmv {

std::vector<double> NoiseBundle::common_path_at(std::size_t k) const {
    std::vector<double> b(static_cast<std::size_t>(d_b), 0.0);
    for (std::size_t j = 0; j < k; ++j) {
        const auto inc = dB(j);
        for (int c = 0; c < d_b; ++c) b[static_cast<std::size_t>(c)] += inc[static_cast<std::size_t>(c)];
    }
    return b;
}

NoiseBundle sample_noise_bundle(const TimeGrid& grid, int d_w, int d_b, int n_private,
                                uint64_t seed, uint32_t replica_id, StreamClass private_class) {
    if (d_w < 0 || d_b < 0 || n_private < 0)
        throw std::invalid_argument("sample_noise_bundle: negative dimension");
    NoiseBundle b;
    b.grid = grid;
    b.d_w = d_w;
    b.d_b = d_b;
    b.n_private = n_private;
    b.seed = seed;
    b.replica_id = replica_id;
    const std::size_t steps = grid.steps();

    b.common.resize(steps * static_cast<std::size_t>(d_b));
    {
        GaussianStream g(seed, replica_id, StreamClass::Common, 0);
        for (std::size_t k = 0; k < steps; ++k) {
            const double sh = std::sqrt(grid.h(k));
            for (int c = 0; c < d_b; ++c)
                b.common[k * static_cast<std::size_t>(d_b) + static_cast<std::size_t>(c)] = sh * g.next();
        }
    }

    b.private_.resize(static_cast<std::size_t>(n_private) * steps * static_cast<std::size_t>(d_w));
    for (int i = 0; i < n_private; ++i) {
        GaussianStream g(seed, replica_id, private_class, static_cast<uint32_t>(i));
        double* row = b.private_.data() + static_cast<std::size_t>(i) * steps * static_cast<std::size_t>(d_w);
        for (std::size_t k = 0; k < steps; ++k) {
            const double sh = std::sqrt(grid.h(k));
            for (int c = 0; c < d_w; ++c) row[k * static_cast<std::size_t>(d_w) + static_cast<std::size_t>(c)] = sh * g.next();
        }
    }
    return b;
}

std::vector<double> coarsen_increments(std::span<const double> increments, std::size_t steps,
                                       int dim) {
    if (steps % 2 != 0 || increments.size() != steps * static_cast<std::size_t>(dim))
        throw std::invalid_argument("coarsen_increments: size mismatch");
    std::vector<double> out((steps / 2) * static_cast<std::size_t>(dim));
    for (std::size_t k = 0; k < steps / 2; ++k)
        for (int c = 0; c < dim; ++c)
            out[k * static_cast<std::size_t>(dim) + static_cast<std::size_t>(c)] =
                increments[(2 * k) * static_cast<std::size_t>(dim) + static_cast<std::size_t>(c)] +
                increments[(2 * k + 1) * static_cast<std::size_t>(dim) + static_cast<std::size_t>(c)];
    return out;
}

CommonIntegralPath accumulate_common_integral(const TimeGrid& grid,
                                              std::span<const double> sigma_tilde_values, int dim,
                                              std::span<const double> common, int d_b) {
    const std::size_t steps = grid.steps();
    if (sigma_tilde_values.size() != steps * static_cast<std::size_t>(dim) * static_cast<std::size_t>(d_b))
        throw std::invalid_argument("accumulate_common_integral: matrix block size mismatch");
    if (common.size() != steps * static_cast<std::size_t>(d_b))
        throw std::invalid_argument("accumulate_common_integral: increment size mismatch");
    CommonIntegralPath p;
    p.grid = grid;
    p.dim = dim;
    p.values.assign((steps + 1) * static_cast<std::size_t>(dim), 0.0);
    for (std::size_t k = 0; k < steps; ++k) {
        const double* S = sigma_tilde_values.data() + k * static_cast<std::size_t>(dim) * static_cast<std::size_t>(d_b);
        const double* dB = common.data() + k * static_cast<std::size_t>(d_b);
        double* prev = p.values.data() + k * static_cast<std::size_t>(dim);
        double* next = p.values.data() + (k + 1) * static_cast<std::size_t>(dim);
        for (int r = 0; r < dim; ++r) {
            double acc = prev[r];
            for (int c = 0; c < d_b; ++c) acc += S[r * d_b + c] * dB[c];
            next[r] = acc;
        }
    }
    return p;
}

CommonIntegralPath accumulate_common_integral_isotropic(const TimeGrid& grid,
                                                        std::span<const double> scale_per_knot,
                                                        std::span<const double> common, int d_b) {
    const std::size_t steps = grid.steps();
    if (scale_per_knot.size() != steps)
        throw std::invalid_argument("accumulate_common_integral_isotropic: scale size mismatch");
    std::vector<double> mats(steps * static_cast<std::size_t>(d_b) * static_cast<std::size_t>(d_b), 0.0);
    for (std::size_t k = 0; k < steps; ++k)
        for (int r = 0; r < d_b; ++r)
            mats[(k * static_cast<std::size_t>(d_b) + static_cast<std::size_t>(r)) * static_cast<std::size_t>(d_b) +
                 static_cast<std::size_t>(r)] = scale_per_knot[k];
    return accumulate_common_integral(grid, mats, d_b, common, d_b);
}

namespace {
constexpr char kMagic[8] = {'c', 'm', 'v', 'n', 'o', 'i', 's', '1'};

template <typename T>
void put(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
template <typename T>
T get(std::ifstream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}
} // namespace

void dump_noise_bundle(const NoiseBundle& b, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("dump_noise_bundle: cannot open " + path);
    out.write(kMagic, sizeof(kMagic));
    put<uint64_t>(out, b.seed);
    put<uint32_t>(out, b.replica_id);
    put<int32_t>(out, b.d_w);
    put<int32_t>(out, b.d_b);
    put<int32_t>(out, b.n_private);
    put<uint64_t>(out, b.grid.knots.size());
    for (double t : b.grid.knots) put<double>(out, t);
    for (double v : b.common) put<double>(out, v);
    for (double v : b.private_) put<double>(out, v);
    if (!out) throw std::runtime_error("dump_noise_bundle: short write");
}

NoiseBundle load_noise_bundle(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_noise_bundle: cannot open " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("load_noise_bundle: bad header");
    NoiseBundle b;
    b.seed = get<uint64_t>(in);
    b.replica_id = get<uint32_t>(in);
    b.d_w = get<int32_t>(in);
    b.d_b = get<int32_t>(in);
    b.n_private = get<int32_t>(in);
    const auto nk = get<uint64_t>(in);
    b.grid.knots.resize(nk);
    for (auto& t : b.grid.knots) t = get<double>(in);
    const std::size_t steps = b.grid.steps();
    b.common.resize(steps * static_cast<std::size_t>(b.d_b));
    for (auto& v : b.common) v = get<double>(in);
    b.private_.resize(static_cast<std::size_t>(b.n_private) * steps * static_cast<std::size_t>(b.d_w));
    for (auto& v : b.private_) v = get<double>(in);
    if (!in) throw std::runtime_error("load_noise_bundle: truncated file");
    return b;
}

} // namespace cmv
