#pragma once

// Channel-mixing expressibility lab.
//
// With X = Z·A (rank k) and one spatial filter per channel, channel-mixing
// weights w realize the per-basis filters H̃_j = Σ_i w_i a_ji H_i. Stacking the
// vectorized filters gives a (k·f²)×D linear system G·w = t; every target is
// reachable when G has full row rank, which needs D ≥ k·f².

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "conv.hpp"
#include "linalg.hpp"
#include "random.hpp"

namespace structinit {

enum class Prop1FilterKind { random, impulse_balanced, box };

inline std::string_view to_string(Prop1FilterKind k) {
    switch (k) {
        case Prop1FilterKind::random: return "random";
        case Prop1FilterKind::impulse_balanced: return "impulse";
        case Prop1FilterKind::box: return "box";
    }
    return "?";
}

inline Prop1FilterKind parse_prop1_filter_kind(std::string_view s) {
    if (s == "random") return Prop1FilterKind::random;
    if (s == "impulse" || s == "impulse_balanced") return Prop1FilterKind::impulse_balanced;
    if (s == "box") return Prop1FilterKind::box;
    throw std::invalid_argument("unknown filter family '" + std::string(s) + "'");
}

struct Prop1Instance {
    GridShape grid;
    std::size_t dim = 0;
    std::size_t rank = 0;
    std::size_t filter_size = 0;
    DenseMatrix basis;   // Z, n×k
    DenseMatrix mixing;  // A, k×D
    std::vector<Filter> filters;
    /// Identity of the filter on each channel. Channels with equal ids carry equal filters.
    std::vector<std::size_t> assignment;
    Prop1FilterKind kind = Prop1FilterKind::random;

    DenseMatrix embeddings() const { return matmul(basis, mixing); }
};

struct ExpressibilityReport {
    double residual = 0.0;
    std::size_t system_rank = 0;
    bool condition_holds = false;
    std::vector<double> weights;
};

/// Residual below this counts as expressible.
inline constexpr double kExpressibleResidual = 1e-8;

inline Prop1Instance build_instance(const GridShape& grid, std::size_t dim, std::size_t rank, std::size_t f,
                                    Prop1FilterKind kind, std::uint64_t seed) {
    require_odd_filter_size(f);
    if (dim < 1 || rank < 1) throw std::invalid_argument("build_instance: dim and rank must be >= 1");
    if (rank > std::min(grid.n(), dim)) {
        throw std::invalid_argument("build_instance: rank " + std::to_string(rank) + " exceeds min(n, D) = " +
                                    std::to_string(std::min(grid.n(), dim)));
    }

    Prop1Instance inst;
    inst.grid = grid;
    inst.dim = dim;
    inst.rank = rank;
    inst.filter_size = f;
    inst.kind = kind;

    Rng rng(mix_seed(seed, {0}));
    inst.basis = DenseMatrix(grid.n(), rank);
    for (double& v : inst.basis.data()) v = rng.normal();
    inst.mixing = DenseMatrix(rank, dim);
    for (double& v : inst.mixing.data()) v = rng.normal();

    const auto offsets = all_impulse_offsets(f);
    for (std::size_t c = 0; c < dim; ++c) {
        switch (kind) {
            case Prop1FilterKind::random:
                inst.filters.push_back(make_filter(FilterKind::random, f, mix_seed(seed, {1, c})));
                inst.assignment.push_back(c);
                break;
            case Prop1FilterKind::impulse_balanced: {
                const std::size_t id = c % offsets.size();
                inst.filters.push_back(impulse_filter(offsets[id], f));
                inst.assignment.push_back(id);
                break;
            }
            case Prop1FilterKind::box:
                inst.filters.push_back(make_filter(FilterKind::box, f, 0));
                inst.assignment.push_back(0);
                break;
        }
    }
    return inst;
}

/// k random N(0, 1) target filters.
inline std::vector<Filter> random_target_filters(std::size_t k, std::size_t f, std::uint64_t seed) {
    std::vector<Filter> out;
    for (std::size_t j = 0; j < k; ++j) out.push_back(make_filter(FilterKind::random, f, mix_seed(seed, {2, j})));
    return out;
}

/// G with G[(j, p), i] = a_ji · h_i[p].
inline DenseMatrix expressibility_system(const Prop1Instance& inst) {
    const std::size_t f2 = inst.filter_size * inst.filter_size;
    DenseMatrix g(inst.rank * f2, inst.dim);
    for (std::size_t i = 0; i < inst.dim; ++i)
        for (std::size_t j = 0; j < inst.rank; ++j)
            for (std::size_t p = 0; p < f2; ++p) g(j * f2 + p, i) = inst.mixing(j, i) * inst.filters[i].coeffs[p];
    return g;
}

inline ExpressibilityReport expressibility_residual(const Prop1Instance& inst, const std::vector<Filter>& targets) {
    if (targets.size() != inst.rank) {
        throw std::invalid_argument("expressibility_residual: need " + std::to_string(inst.rank) +
                                    " target filters, got " + std::to_string(targets.size()));
    }
    const std::size_t f2 = inst.filter_size * inst.filter_size;
    std::vector<double> t;
    t.reserve(inst.rank * f2);
    for (const auto& h : targets) {
        if (h.size != inst.filter_size) throw DimensionError("expressibility_residual: target filter size mismatch");
        t.insert(t.end(), h.coeffs.begin(), h.coeffs.end());
    }

    const DenseMatrix g = expressibility_system(inst);
    if (frobenius_sq(g) == 0.0) throw std::invalid_argument("expressibility_residual: system matrix is all zero");
    auto sol = least_squares(g, t);

    ExpressibilityReport report;
    report.residual = sol.residual_norm;
    report.system_rank = sol.rank;
    report.condition_holds = inst.dim >= inst.rank * f2;
    report.weights = std::move(sol.x);
    return report;
}

/// Compares Σ_i w_i H_i x_i (channel route, x_i = Σ_j a_ji z_j) with Σ_j H̃_j z_j
/// (target route) on random probe bases, using circular convolution matrices.
/// Returns the largest absolute deviation over all probes.
inline double output_equivalence_check(const Prop1Instance& inst, const std::vector<double>& w,
                                       const std::vector<Filter>& targets, std::size_t probe_images,
                                       std::uint64_t seed) {
    if (w.size() != inst.dim) throw DimensionError("output_equivalence_check: weight count differs from D");
    if (targets.size() != inst.rank) throw DimensionError("output_equivalence_check: need k target filters");
    const GridShape& grid = inst.grid;
    const std::size_t n = grid.n();

    std::vector<DenseMatrix> channel_h;
    channel_h.reserve(inst.dim);
    for (const auto& h : inst.filters) channel_h.push_back(build_conv_matrix(h, grid, Padding::circular).matrix);
    std::vector<DenseMatrix> target_h;
    for (const auto& h : targets) target_h.push_back(build_conv_matrix(h, grid, Padding::circular).matrix);

    Rng rng(seed);
    double worst = 0.0;
    for (std::size_t probe = 0; probe < probe_images; ++probe) {
        DenseMatrix z(n, inst.rank);
        for (double& v : z.data()) v = rng.normal();
        const DenseMatrix x = matmul(z, inst.mixing);  // column i is x_i

        std::vector<double> y_channel(n, 0.0);
        for (std::size_t i = 0; i < inst.dim; ++i) {
            if (w[i] == 0.0) continue;
            for (std::size_t r = 0; r < n; ++r) {
                double s = 0.0;
                for (std::size_t c = 0; c < n; ++c) s += channel_h[i](r, c) * x(c, i);
                y_channel[r] += w[i] * s;
            }
        }
        std::vector<double> y_target(n, 0.0);
        for (std::size_t j = 0; j < inst.rank; ++j) {
            for (std::size_t r = 0; r < n; ++r) {
                double s = 0.0;
                for (std::size_t c = 0; c < n; ++c) s += target_h[j](r, c) * z(c, j);
                y_target[r] += s;
            }
        }
        for (std::size_t r = 0; r < n; ++r) worst = std::max(worst, std::abs(y_channel[r] - y_target[r]));
    }
    return worst;
}

struct SweepRow {
    std::size_t dim = 0;
    std::size_t seed_index = 0;
    std::size_t threshold = 0;  // k·f²
    ExpressibilityReport report;
    double deviation = 0.0;
};

/// Residuals for D in [d_min, d_max] over `seeds` instances each.
inline std::vector<SweepRow> expressibility_sweep(const GridShape& grid, std::size_t k, std::size_t f,
                                                  std::size_t d_min, std::size_t d_max, Prop1FilterKind kind,
                                                  std::size_t seeds, std::uint64_t base_seed = 0,
                                                  std::size_t probes = 0) {
    if (d_min < 1 || d_min > d_max) throw std::invalid_argument("expressibility_sweep: bad D range");
    std::vector<SweepRow> rows;
    for (std::size_t d = d_min; d <= d_max; ++d) {
        for (std::size_t s = 0; s < seeds; ++s) {
            const std::uint64_t seed = mix_seed(base_seed, {d, s});
            const auto inst = build_instance(grid, d, k, f, kind, seed);
            const auto targets = random_target_filters(k, f, seed);
            SweepRow row{d, s, k * f * f, expressibility_residual(inst, targets), 0.0};
            if (probes > 0) row.deviation = output_equivalence_check(inst, row.report.weights, targets, probes, seed);
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

}  // namespace structinit
