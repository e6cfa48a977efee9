#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include "attention.hpp"
#include "conv.hpp"
#include "linalg.hpp"
#include "pseudo_input.hpp"
#include "random.hpp"

namespace structinit {

struct SolverConfig {
    double lr = 1e-4;
    std::size_t max_iter = 10000;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    /// Q and K start from N(0, init_std²) truncated at ±2·init_std.
    double init_std = 0.02;
    std::uint64_t seed = 0;
    /// Stop as soon as the loss falls to this value. Off by default.
    std::optional<double> early_stop_loss;

    void validate() const {
        if (!(lr > 0.0)) throw std::invalid_argument("SolverConfig: lr must be > 0");
        if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0)) throw std::invalid_argument("SolverConfig: beta1 not in (0,1)");
        if (!(adam_beta2 > 0.0 && adam_beta2 < 1.0)) throw std::invalid_argument("SolverConfig: beta2 not in (0,1)");
        if (!(adam_eps >= 0.0)) throw std::invalid_argument("SolverConfig: adam_eps must be >= 0");
        if (!(init_std >= 0.0)) throw std::invalid_argument("SolverConfig: init_std must be >= 0");
    }
};

/// Raised when the objective stops being finite.
class SolverDivergence : public std::runtime_error {
public:
    explicit SolverDivergence(std::size_t iteration)
        : std::runtime_error("non-finite loss at iteration " + std::to_string(iteration)), iteration_(iteration) {}
    std::size_t iteration() const noexcept { return iteration_; }

private:
    std::size_t iteration_;
};

struct HeadInitResult {
    AttentionHeadParams params;
    std::optional<ImpulseOffset> target_offset;
    double final_loss = 0.0;
    double argmax_match_rate = 0.0;
    std::size_t iterations_run = 0;
};

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

namespace detail {

inline void require_square_target(const DenseMatrix& x_tilde, const DenseMatrix& target) {
    if (target.rows() != target.cols() || target.rows() != x_tilde.rows()) {
        throw DimensionError("loss: target " + target.shape() + " does not match input " + x_tilde.shape());
    }
}

}  // namespace detail

/// (1/N²) ‖H − softmax(σ X̃ Q Kᵀ X̃ᵀ)‖²_F
inline double loss(const AttentionHeadParams& params, const DenseMatrix& x_tilde, const DenseMatrix& target) {
    detail::require_square_target(x_tilde, target);
    const auto map = attention_map(x_tilde, params);
    const double n = static_cast<double>(target.rows());
    return frobenius_sq(subtract(map.matrix, target)) / (n * n);
}

inline double loss(const AttentionHeadParams& params, const DenseMatrix& x_tilde, const ConvMatrix& target) {
    return loss(params, x_tilde, target.matrix);
}

struct LossAndGrad {
    double loss = 0.0;
    DenseMatrix grad_q;
    DenseMatrix grad_k;
};

/// Loss and its analytic gradient with respect to Q and K.
inline LossAndGrad loss_and_grad(const AttentionHeadParams& params, const DenseMatrix& x_tilde,
                                 const DenseMatrix& target) {
    require_compatible(x_tilde, params);
    detail::require_square_target(x_tilde, target);
    const std::size_t n = target.rows();
    const double inv_n2 = 1.0 / (static_cast<double>(n) * static_cast<double>(n));

    const DenseMatrix xq = matmul(x_tilde, params.q);
    const DenseMatrix xk = matmul(x_tilde, params.k);
    const DenseMatrix p = softmax_rows(scaled(matmul_nt(xq, xk), params.scale));

    // dL/dS through the row softmax: dS = P ∘ (dP − rowsum(dP ∘ P)), dP = 2(P − H)/N².
    LossAndGrad out;
    DenseMatrix ds(n, n);
    double sum_sq = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        auto pr = p.row(r);
        auto hr = target.row(r);
        auto dr = ds.row(r);
        double dot = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            const double res = pr[c] - hr[c];
            sum_sq += res * res;
            dr[c] = 2.0 * res * inv_n2;
            dot += dr[c] * pr[c];
        }
        for (std::size_t c = 0; c < n; ++c) dr[c] = pr[c] * (dr[c] - dot);
    }
    out.loss = sum_sq * inv_n2;

    // S = σ·XQ·XKᵀ, so dXQ = σ·dS·XK and dXK = σ·dSᵀ·XQ.
    const DenseMatrix dxq = scaled(matmul(ds, xk), params.scale);
    const DenseMatrix dxk = scaled(matmul_tn(ds, xq), params.scale);
    out.grad_q = matmul_tn(x_tilde, dxq);
    out.grad_k = matmul_tn(x_tilde, dxk);
    return out;
}

inline LossAndGrad loss_and_grad(const AttentionHeadParams& params, const DenseMatrix& x_tilde,
                                 const ConvMatrix& target) {
    return loss_and_grad(params, x_tilde, target.matrix);
}

/// Fraction of rows whose largest entry sits in the same column as the target's.
/// Ties resolve to the lowest column.
inline double argmax_match_rate(const DenseMatrix& map, const DenseMatrix& target) {
    detail::require_same_shape(map, target, "argmax_match_rate");
    if (map.rows() == 0) return 0.0;
    std::size_t hits = 0;
    for (std::size_t r = 0; r < map.rows(); ++r) {
        auto a = map.row(r);
        auto b = target.row(r);
        if (std::max_element(a.begin(), a.end()) - a.begin() == std::max_element(b.begin(), b.end()) - b.begin())
            ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(map.rows());
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Moment buffers and step count for one parameter tensor.
struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t step = 0;

    AdamState() = default;
    explicit AdamState(std::size_t size) : m(size, 0.0), v(size, 0.0) {}
};

/// One bias-corrected Adam update of `param` in place.
inline void adam_step(AdamState& state, std::span<double> param, std::span<const double> grad,
                      const SolverConfig& cfg) {
    if (param.size() != grad.size() || state.m.size() != param.size()) {
        throw DimensionError("adam_step: parameter, gradient and state sizes differ");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, t);
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, t);
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad[i];
        state.m[i] = cfg.adam_beta1 * state.m[i] + (1.0 - cfg.adam_beta1) * g;
        state.v[i] = cfg.adam_beta2 * state.v[i] + (1.0 - cfg.adam_beta2) * g * g;
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        param[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
    }
}

// ---------------------------------------------------------------------------
// Single head
// ---------------------------------------------------------------------------

/// Called once per iteration with (iteration, loss before the update).
using LossObserver = std::function<void(std::size_t, double)>;

inline DenseMatrix truncated_normal_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
    DenseMatrix m(rows, cols);
    if (stddev == 0.0) return m;
    for (double& v : m.data()) v = rng.truncated_normal(0.0, stddev, -2.0 * stddev, 2.0 * stddev);
    return m;
}

/// Fits one head's Q and K so that its attention map on the layer-normalized
/// pseudo input approximates `target`.
inline HeadInitResult solve_head(const ConvMatrix& target, const PseudoInput& pseudo, const SolverConfig& config,
                                 std::size_t heads, const LossObserver& observer = {}) {
    config.validate();
    if (target.matrix.rows() != pseudo.matrix.rows() || target.matrix.cols() != pseudo.matrix.rows()) {
        throw DimensionError("solve_head: target " + target.matrix.shape() + " does not match pseudo input " +
                             pseudo.matrix.shape());
    }
    const std::size_t dim = pseudo.matrix.cols();
    const std::size_t width = head_dim(dim, heads);
    const DenseMatrix x_tilde = layer_norm_rows(pseudo.matrix);

    Rng rng(config.seed);
    DenseMatrix q = truncated_normal_matrix(dim, width, config.init_std, rng);
    DenseMatrix k = truncated_normal_matrix(dim, width, config.init_std, rng);
    AttentionHeadParams params(std::move(q), std::move(k));

    AdamState state_q(params.q.size());
    AdamState state_k(params.k.size());
    std::size_t steps = 0;
    for (std::size_t it = 1; it <= config.max_iter; ++it) {
        const auto lg = loss_and_grad(params, x_tilde, target.matrix);
        if (!std::isfinite(lg.loss)) throw SolverDivergence(it);
        if (observer) observer(it, lg.loss);
        if (config.early_stop_loss && lg.loss <= *config.early_stop_loss) break;
        adam_step(state_q, params.q.data(), lg.grad_q.data(), config);
        adam_step(state_k, params.k.data(), lg.grad_k.data(), config);
        ++steps;
    }

    HeadInitResult result;
    const auto map = attention_map(x_tilde, params);
    const double n = static_cast<double>(target.matrix.rows());
    result.final_loss = frobenius_sq(subtract(map.matrix, target.matrix)) / (n * n);
    if (!std::isfinite(result.final_loss)) throw SolverDivergence(steps + 1);
    result.argmax_match_rate = argmax_match_rate(map.matrix, target.matrix);
    result.iterations_run = steps;
    if (target.is_impulse()) result.target_offset = std::get<ImpulseOffset>(target.source);
    result.params = std::move(params);
    return result;
}

// ---------------------------------------------------------------------------
// Whole network
// ---------------------------------------------------------------------------

enum class Sharing { same_all_layers, per_layer };

inline std::string_view to_string(Sharing s) { return s == Sharing::same_all_layers ? "same" : "per-layer"; }

inline Sharing parse_sharing(std::string_view s) {
    if (s == "same" || s == "same_all_layers") return Sharing::same_all_layers;
    if (s == "per-layer" || s == "per_layer") return Sharing::per_layer;
    throw std::invalid_argument("unknown sharing mode '" + std::string(s) + "'");
}

struct BundleSpec {
    std::size_t layers = 1;
    std::size_t heads = 3;
    std::size_t dim = 192;
    GridShape grid{8, 8};
    std::size_t filter_size = 3;
    Padding padding = Padding::circular;
    Sharing sharing = Sharing::same_all_layers;
    PseudoKind pseudo_first = PseudoKind::pe;
    PseudoKind pseudo_rest = PseudoKind::pe;

    void validate() const {
        if (layers < 1) throw std::invalid_argument("BundleSpec: layers must be >= 1");
        if (heads < 1) throw std::invalid_argument("BundleSpec: heads must be >= 1");
        head_dim(dim, heads);
        require_odd_filter_size(filter_size);
        if (padding == Padding::circular && (filter_size > grid.height || filter_size > grid.width)) {
            throw std::invalid_argument("BundleSpec: filter size exceeds grid under circular padding");
        }
        for (auto kind : {pseudo_first, pseudo_rest})
            if (kind != PseudoKind::gauss && kind != PseudoKind::uniform && dim % 4 != 0)
                throw std::invalid_argument("BundleSpec: positional encoding needs dim divisible by 4");
    }

    PseudoKind pseudo_kind(std::size_t layer) const { return layer == 0 ? pseudo_first : pseudo_rest; }

    /// Layers in the same group share one solve. Under per-layer sharing every
    /// layer is its own group. Under shared parameters the first layer is its own
    /// group unless it uses the same pseudo input kind as the rest.
    std::size_t group_of(std::size_t layer) const {
        if (sharing == Sharing::per_layer) return layer;
        return layer == 0 || pseudo_first == pseudo_rest ? 0 : 1;
    }
};

/// Solved heads of every layer, indexed [layer][head].
struct InitBundle {
    BundleSpec spec;
    SolverConfig config;
    std::vector<std::vector<HeadInitResult>> layers;
};

// Stream tags for seed derivation.
inline constexpr std::uint64_t kOffsetStream = 1;
inline constexpr std::uint64_t kPseudoStream = 2;
inline constexpr std::uint64_t kSolveStream = 3;

inline std::vector<ImpulseOffset> bundle_offsets(const BundleSpec& spec, const SolverConfig& config,
                                                 std::size_t layer) {
    const std::uint64_t slot = spec.sharing == Sharing::per_layer ? layer : 0;
    return sample_impulse_offsets(spec.heads, spec.filter_size, mix_seed(config.seed, {kOffsetStream, slot}));
}

/// The pseudo input a given layer was solved against.
inline PseudoInput bundle_pseudo_input(const BundleSpec& spec, const SolverConfig& config, std::size_t layer) {
    return make_pseudo_input(spec.pseudo_kind(layer), spec.grid, spec.dim,
                             mix_seed(config.seed, {kPseudoStream, spec.group_of(layer)}));
}

/// Solves every (layer, head). Independent solves run on up to `threads` workers
/// (0 = hardware concurrency); each has its own derived seed, so the result does
/// not depend on scheduling.
inline InitBundle solve_bundle(const BundleSpec& spec, const SolverConfig& config, unsigned threads = 1) {
    spec.validate();
    config.validate();

    struct Task {
        std::size_t group;
        std::size_t layer;  // representative layer of the group
        std::size_t head;
    };
    std::map<std::size_t, std::size_t> group_first_layer;
    for (std::size_t l = 0; l < spec.layers; ++l) group_first_layer.emplace(spec.group_of(l), l);

    std::vector<Task> tasks;
    for (const auto& [group, layer] : group_first_layer)
        for (std::size_t h = 0; h < spec.heads; ++h) tasks.push_back({group, layer, h});

    std::vector<std::optional<HeadInitResult>> solved(tasks.size());
    std::vector<std::exception_ptr> errors(tasks.size());
    auto run_task = [&](std::size_t i) {
        try {
            const Task& t = tasks[i];
            const auto offsets = bundle_offsets(spec, config, t.layer);
            const auto target = impulse_conv_matrix(offsets[t.head], spec.grid, spec.padding);
            const auto pseudo = bundle_pseudo_input(spec, config, t.layer);
            SolverConfig task_config = config;
            task_config.seed = mix_seed(config.seed, {kSolveStream, t.group, t.head});
            solved[i] = solve_head(target, pseudo, task_config, spec.heads);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };

    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = static_cast<unsigned>(std::min<std::size_t>(threads, tasks.size()));
    if (threads <= 1) {
        for (std::size_t i = 0; i < tasks.size(); ++i) run_task(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::jthread> workers;
        for (unsigned w = 0; w < threads; ++w) {
            workers.emplace_back([&] {
                for (std::size_t i = next++; i < tasks.size(); i = next++) run_task(i);
            });
        }
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    std::map<std::pair<std::size_t, std::size_t>, std::size_t> index;
    for (std::size_t i = 0; i < tasks.size(); ++i) index[{tasks[i].group, tasks[i].head}] = i;

    InitBundle bundle{spec, config, {}};
    bundle.layers.resize(spec.layers);
    for (std::size_t l = 0; l < spec.layers; ++l) {
        for (std::size_t h = 0; h < spec.heads; ++h)
            bundle.layers[l].push_back(*solved[index.at({spec.group_of(l), h})]);
    }
    return bundle;
}

}  // namespace structinit
