#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <numeric>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "linalg.hpp"
#include "random.hpp"

namespace structinit {

/// Patch grid. Pixel (i, j) is vectorized to index i * width + j.
struct GridShape {
    std::size_t height = 1;
    std::size_t width = 1;

    GridShape() = default;
    GridShape(std::size_t h, std::size_t w) : height(h), width(w) {
        if (h < 1 || w < 1) {
            throw std::invalid_argument("GridShape: both sides must be >= 1, got " + std::to_string(h) +
                                        "x" + std::to_string(w));
        }
    }

    std::size_t n() const noexcept { return height * width; }
    std::size_t index(std::size_t i, std::size_t j) const noexcept { return i * width + j; }

    friend bool operator==(const GridShape&, const GridShape&) = default;
};

/// Displacement of an impulse from the filter center. Row offset first.
struct ImpulseOffset {
    int di = 0;
    int dj = 0;

    ImpulseOffset operator+(const ImpulseOffset& o) const noexcept { return {di + o.di, dj + o.dj}; }
    friend bool operator==(const ImpulseOffset&, const ImpulseOffset&) = default;
    friend auto operator<=>(const ImpulseOffset&, const ImpulseOffset&) = default;
};

inline void require_odd_filter_size(std::size_t f) {
    if (f < 1 || f % 2 == 0) {
        throw std::invalid_argument("filter size must be odd and >= 1, got " + std::to_string(f));
    }
}

inline int filter_radius(std::size_t f) { return static_cast<int>((f - 1) / 2); }

/// Square f×f filter, stored row-major.
struct Filter {
    std::size_t size = 1;
    std::vector<double> coeffs{1.0};

    Filter() = default;
    Filter(std::size_t f, std::vector<double> c) : size(f), coeffs(std::move(c)) {
        require_odd_filter_size(f);
        if (coeffs.size() != f * f) {
            throw DimensionError("Filter: expected " + std::to_string(f * f) + " coefficients, got " +
                                 std::to_string(coeffs.size()));
        }
    }

    int radius() const noexcept { return filter_radius(size); }

    /// Coefficient at displacement (di, dj) from the center.
    double at(int di, int dj) const noexcept {
        const int r = radius();
        return coeffs[static_cast<std::size_t>((di + r) * static_cast<int>(size) + (dj + r))];
    }

    friend bool operator==(const Filter&, const Filter&) = default;
};

enum class Padding {
    circular,
    /// Taps that fall outside the grid read the center pixel instead.
    zero_self_fallback,
};

inline std::string_view to_string(Padding p) {
    return p == Padding::circular ? "circular" : "zero-self";
}

inline Padding parse_padding(std::string_view s) {
    if (s == "circular") return Padding::circular;
    if (s == "zero-self" || s == "zero_self_fallback") return Padding::zero_self_fallback;
    throw std::invalid_argument("unknown padding mode '" + std::string(s) + "'");
}

/// N×N spatial-mixing matrix realizing a filter on a grid.
struct ConvMatrix {
    GridShape grid;
    DenseMatrix matrix;
    Padding padding = Padding::circular;
    std::variant<Filter, ImpulseOffset> source;

    bool is_impulse() const noexcept { return std::holds_alternative<ImpulseOffset>(source); }
};

namespace detail {

inline std::ptrdiff_t wrap(std::ptrdiff_t v, std::size_t n) {
    const auto m = static_cast<std::ptrdiff_t>(n);
    return ((v % m) + m) % m;
}

/// Column of the pixel that (i, j) reads when displaced by (di, dj).
inline std::size_t source_pixel(const GridShape& g, std::size_t i, std::size_t j, int di, int dj, Padding p) {
    const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i) + di;
    const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j) + dj;
    if (p == Padding::circular) {
        return g.index(static_cast<std::size_t>(wrap(si, g.height)), static_cast<std::size_t>(wrap(sj, g.width)));
    }
    const bool inside = si >= 0 && sj >= 0 && si < static_cast<std::ptrdiff_t>(g.height) &&
                        sj < static_cast<std::ptrdiff_t>(g.width);
    return inside ? g.index(static_cast<std::size_t>(si), static_cast<std::size_t>(sj)) : g.index(i, j);
}

}  // namespace detail

/// Same-size convolution matrix for a filter applied as cross-correlation:
/// (H·vec(x))[i, j] = Σ h[u, v] · x[i + u − r, j + v − r].
inline ConvMatrix build_conv_matrix(const Filter& filter, const GridShape& grid,
                                    Padding padding = Padding::circular) {
    require_odd_filter_size(filter.size);
    if (padding == Padding::circular && (filter.size > grid.height || filter.size > grid.width)) {
        throw std::invalid_argument("build_conv_matrix: filter size " + std::to_string(filter.size) +
                                    " exceeds grid " + std::to_string(grid.height) + "x" +
                                    std::to_string(grid.width) + " under circular padding");
    }
    const int r = filter.radius();
    ConvMatrix cm{grid, DenseMatrix(grid.n(), grid.n()), padding, filter};
    for (std::size_t i = 0; i < grid.height; ++i) {
        for (std::size_t j = 0; j < grid.width; ++j) {
            const std::size_t row = grid.index(i, j);
            for (int di = -r; di <= r; ++di)
                for (int dj = -r; dj <= r; ++dj)
                    cm.matrix(row, detail::source_pixel(grid, i, j, di, dj, padding)) += filter.at(di, dj);
        }
    }
    return cm;
}

/// One-hot matrix: row of pixel p has its 1 at the pixel displaced from p by the offset.
inline ConvMatrix impulse_conv_matrix(ImpulseOffset offset, const GridShape& grid,
                                      Padding padding = Padding::circular) {
    ConvMatrix cm{grid, DenseMatrix(grid.n(), grid.n()), padding, offset};
    for (std::size_t i = 0; i < grid.height; ++i)
        for (std::size_t j = 0; j < grid.width; ++j)
            cm.matrix(grid.index(i, j), detail::source_pixel(grid, i, j, offset.di, offset.dj, padding)) = 1.0;
    return cm;
}

/// All f² offsets in row-major order over the filter window.
inline std::vector<ImpulseOffset> all_impulse_offsets(std::size_t f) {
    require_odd_filter_size(f);
    const int r = filter_radius(f);
    std::vector<ImpulseOffset> out;
    out.reserve(f * f);
    for (int di = -r; di <= r; ++di)
        for (int dj = -r; dj <= r; ++dj) out.push_back({di, dj});
    return out;
}

/// Draws one offset per head. Distinct while heads ≤ f², then uniform with replacement.
inline std::vector<ImpulseOffset> sample_impulse_offsets(std::size_t heads, std::size_t f, std::uint64_t seed) {
    if (heads < 1) throw std::invalid_argument("sample_impulse_offsets: heads must be >= 1");
    auto pool = all_impulse_offsets(f);
    Rng rng(seed);
    for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng.below(i)]);
    std::vector<ImpulseOffset> out;
    out.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        out.push_back(h < pool.size() ? pool[h] : pool[rng.below(pool.size())]);
    }
    return out;
}

enum class FilterKind { random, box, impulse };

inline Filter impulse_filter(ImpulseOffset offset, std::size_t f) {
    require_odd_filter_size(f);
    const int r = filter_radius(f);
    if (std::abs(offset.di) > r || std::abs(offset.dj) > r) {
        throw std::invalid_argument("impulse offset (" + std::to_string(offset.di) + "," +
                                    std::to_string(offset.dj) + ") outside filter radius " + std::to_string(r));
    }
    std::vector<double> c(f * f, 0.0);
    c[static_cast<std::size_t>((offset.di + r) * static_cast<int>(f) + (offset.dj + r))] = 1.0;
    return Filter(f, std::move(c));
}

/// random: i.i.d. N(0, 1). box: all ones. impulse: one-hot at `offset`.
inline Filter make_filter(FilterKind kind, std::size_t f, std::uint64_t seed, ImpulseOffset offset = {}) {
    require_odd_filter_size(f);
    switch (kind) {
        case FilterKind::box:
            return Filter(f, std::vector<double>(f * f, 1.0));
        case FilterKind::impulse:
            return impulse_filter(offset, f);
        case FilterKind::random:
        default: {
            Rng rng(seed);
            std::vector<double> c(f * f);
            for (double& v : c) v = rng.normal();
            return Filter(f, std::move(c));
        }
    }
}

}  // namespace structinit
