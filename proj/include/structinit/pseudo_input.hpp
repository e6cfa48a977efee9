#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#include "conv.hpp"
#include "linalg.hpp"
#include "random.hpp"

namespace structinit {

enum class PseudoKind { pe, gauss, uniform, pe_plus_gauss, pe_plus_uniform };

inline std::string_view to_string(PseudoKind k) {
    switch (k) {
        case PseudoKind::pe: return "pe";
        case PseudoKind::gauss: return "gauss";
        case PseudoKind::uniform: return "uniform";
        case PseudoKind::pe_plus_gauss: return "pe+gauss";
        case PseudoKind::pe_plus_uniform: return "pe+uniform";
    }
    return "?";
}

inline PseudoKind parse_pseudo_kind(std::string_view s) {
    for (auto k : {PseudoKind::pe, PseudoKind::gauss, PseudoKind::uniform, PseudoKind::pe_plus_gauss,
                   PseudoKind::pe_plus_uniform}) {
        if (s == to_string(k)) return k;
    }
    throw std::invalid_argument("unknown pseudo input kind '" + std::string(s) + "'");
}

inline bool uses_noise(PseudoKind k) { return k != PseudoKind::pe; }

/// Data-free surrogate input, N×D, with the recipe that produced it.
struct PseudoInput {
    GridShape grid;
    std::size_t dim = 0;
    DenseMatrix matrix;
    PseudoKind kind = PseudoKind::pe;
    std::uint64_t seed = 0;
};

// Gaussian pseudo input: N(0, 0.5²) truncated to [-2, 2].
inline constexpr double kGaussStd = 0.5;
inline constexpr double kGaussBound = 2.0;
// Uniform pseudo input range.
inline constexpr double kUniformBound = 1.0;

/// 2D factorized sinusoidal encoding. Channels [0, D/2) encode the row coordinate and
/// [D/2, D) the column coordinate; inside each half, channels 2t and 2t+1 hold
/// sin and cos of coord · 10000^(−4t/D).
inline PseudoInput sinusoidal_pe(const GridShape& grid, std::size_t dim) {
    if (dim == 0 || dim % 4 != 0) {
        throw std::invalid_argument("sinusoidal_pe: dim must be a positive multiple of 4, got " +
                                    std::to_string(dim));
    }
    const std::size_t freqs = dim / 4;
    const std::size_t half = dim / 2;
    std::vector<double> omega(freqs);
    for (std::size_t t = 0; t < freqs; ++t)
        omega[t] = 1.0 / std::pow(10000.0, 4.0 * static_cast<double>(t) / static_cast<double>(dim));

    PseudoInput p{grid, dim, DenseMatrix(grid.n(), dim), PseudoKind::pe, 0};
    for (std::size_t i = 0; i < grid.height; ++i) {
        for (std::size_t j = 0; j < grid.width; ++j) {
            auto row = p.matrix.row(grid.index(i, j));
            for (std::size_t t = 0; t < freqs; ++t) {
                const double a = static_cast<double>(i) * omega[t];
                const double b = static_cast<double>(j) * omega[t];
                row[2 * t] = std::sin(a);
                row[2 * t + 1] = std::cos(a);
                row[half + 2 * t] = std::sin(b);
                row[half + 2 * t + 1] = std::cos(b);
            }
        }
    }
    return p;
}

/// Random pseudo input, sampled once from `seed`. kind must be gauss or uniform.
inline PseudoInput noise_input(PseudoKind kind, const GridShape& grid, std::size_t dim, std::uint64_t seed) {
    if (kind != PseudoKind::gauss && kind != PseudoKind::uniform) {
        throw std::invalid_argument("noise_input: kind must be gauss or uniform");
    }
    if (dim == 0) throw std::invalid_argument("noise_input: dim must be positive");
    PseudoInput p{grid, dim, DenseMatrix(grid.n(), dim), kind, seed};
    Rng rng(seed);
    for (double& v : p.matrix.data()) {
        v = kind == PseudoKind::gauss ? rng.truncated_normal(0.0, kGaussStd, -kGaussBound, kGaussBound)
                                      : rng.uniform(-kUniformBound, kUniformBound);
    }
    return p;
}

/// Entrywise sum of an encoding and a noise sample.
inline PseudoInput mix_pe_noise(const PseudoInput& pe, const PseudoInput& noise) {
    if (pe.grid != noise.grid || pe.dim != noise.dim) {
        throw DimensionError("mix_pe_noise: shape mismatch " + pe.matrix.shape() + " vs " + noise.matrix.shape());
    }
    PseudoInput out{pe.grid, pe.dim, add(pe.matrix, noise.matrix), PseudoKind::pe_plus_gauss, noise.seed};
    out.kind = noise.kind == PseudoKind::uniform ? PseudoKind::pe_plus_uniform : PseudoKind::pe_plus_gauss;
    return out;
}

/// Builds any pseudo input kind. `seed` only matters for kinds with noise.
inline PseudoInput make_pseudo_input(PseudoKind kind, const GridShape& grid, std::size_t dim, std::uint64_t seed) {
    switch (kind) {
        case PseudoKind::pe: return sinusoidal_pe(grid, dim);
        case PseudoKind::gauss:
        case PseudoKind::uniform: return noise_input(kind, grid, dim, seed);
        case PseudoKind::pe_plus_gauss:
            return mix_pe_noise(sinusoidal_pe(grid, dim), noise_input(PseudoKind::gauss, grid, dim, seed));
        case PseudoKind::pe_plus_uniform:
            return mix_pe_noise(sinusoidal_pe(grid, dim), noise_input(PseudoKind::uniform, grid, dim, seed));
    }
    throw std::invalid_argument("make_pseudo_input: bad kind");
}

}  // namespace structinit
