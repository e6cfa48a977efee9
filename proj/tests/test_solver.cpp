#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "oracles.hpp"
#include "structinit/solver.hpp"

using namespace structinit;

namespace {

struct Instance {
    DenseMatrix x_tilde;
    AttentionHeadParams params;
    ConvMatrix target;
};

Instance random_instance(Rng& rng, double param_scale = 0.3) {
    const GridShape g(2 + rng.below(3), 2 + rng.below(3));  // n ≤ 16
    const std::size_t heads = 1 + rng.below(3);
    const std::size_t dim = heads * (2 + rng.below(24 / heads - 1));  // D ≤ 24
    const std::size_t k = dim / heads;
    const auto offsets = all_impulse_offsets(3);
    Instance inst{layer_norm_rows(oracle::random_matrix(g.n(), dim, rng)),
                  AttentionHeadParams(oracle::random_matrix(dim, k, rng, param_scale),
                                      oracle::random_matrix(dim, k, rng, param_scale)),
                  impulse_conv_matrix(offsets[rng.below(offsets.size())], g,
                                      rng.below(2) ? Padding::circular : Padding::zero_self_fallback)};
    return inst;
}

/// Largest relative discrepancy between analytic and central-difference gradients
/// over `coords` sampled coordinates.
double worst_gradient_error(Instance& inst, Rng& rng, std::size_t coords) {
    const auto analytic = loss_and_grad(inst.params, inst.x_tilde, inst.target);
    auto f = [&] { return loss(inst.params, inst.x_tilde, inst.target); };
    double worst = 0.0;
    for (std::size_t c = 0; c < coords; ++c) {
        const bool use_q = rng.below(2) == 0;
        DenseMatrix& param = use_q ? inst.params.q : inst.params.k;
        const DenseMatrix& grad = use_q ? analytic.grad_q : analytic.grad_k;
        const std::size_t idx = rng.below(param.size());
        const double fd = oracle::central_difference(f, param.data()[idx], 1e-5);
        const double a = grad.data()[idx];
        const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace

TEST(Loss, ZeroProjectionsClosedForm) {
    for (std::size_t side : {2, 3, 4, 8}) {
        const GridShape g(side, side);
        const double n = static_cast<double>(g.n());
        const auto x = layer_norm_rows(sinusoidal_pe(g, 16).matrix);
        const AttentionHeadParams p(DenseMatrix(16, 8), DenseMatrix(16, 8));
        EXPECT_NEAR(loss(p, x, impulse_conv_matrix({0, 1}, g)), (n - 1) / (n * n), 1e-15);
    }
    const auto x = layer_norm_rows(sinusoidal_pe(GridShape(2, 2), 16).matrix);
    EXPECT_NEAR(loss(AttentionHeadParams(DenseMatrix(16, 8), DenseMatrix(16, 8)), x,
                     impulse_conv_matrix({1, 1}, GridShape(2, 2))),
                0.1875, 1e-15);
}

TEST(Loss, DecreasesAlongExactFitDirection) {
    // X̃ = I and Q = s·I, K = Hᵀ give logits σ·s·H: the target column gets σ·s.
    const GridShape g(3, 3);
    const auto target = impulse_conv_matrix({1, -1}, g);
    const auto x = DenseMatrix::identity(9);
    double previous = std::numeric_limits<double>::infinity();
    for (double s : {1.0, 10.0, 100.0}) {
        const AttentionHeadParams p(scaled(DenseMatrix::identity(9), s), transpose(target.matrix));
        const double l = loss(p, x, target);
        EXPECT_LT(l, previous) << "s = " << s;
        previous = l;
    }
    EXPECT_LT(previous, 1e-12);
}

TEST(Loss, ShapeMismatch) {
    const AttentionHeadParams p(DenseMatrix(8, 4), DenseMatrix(8, 4));
    EXPECT_THROW(loss(p, DenseMatrix(4, 8), DenseMatrix(5, 5)), DimensionError);
    EXPECT_THROW(loss_and_grad(p, DenseMatrix(4, 6), DenseMatrix(4, 4)), DimensionError);
}

TEST(LossAndGrad, MatchesCentralDifferences) {
    Rng rng(2024);
    for (int trial = 0; trial < 10; ++trial) {
        auto inst = random_instance(rng);
        EXPECT_LT(worst_gradient_error(inst, rng, 20), 1e-5) << "trial " << trial;
    }
}

TEST(LossAndGrad, ValueMatchesLoss) {
    Rng rng(7);
    auto inst = random_instance(rng);
    EXPECT_EQ(loss_and_grad(inst.params, inst.x_tilde, inst.target).loss, loss(inst.params, inst.x_tilde, inst.target));
}

TEST(LossAndGrad, SymmetricWhenQueriesEqualKeys) {
    // Orthonormal X̃ rows with Q = K = c·X̃ᵀ make the logits σc²·I, a symmetric map;
    // the objective is then symmetric under Q ↔ K.
    Rng rng(12);
    const std::size_t n = 6;
    const auto x = transpose(oracle::orthonormal_columns(n, n, rng));
    const DenseMatrix q = scaled(transpose(x), 1.7);
    const AttentionHeadParams p(q, q);
    const auto lg = loss_and_grad(p, x, DenseMatrix::identity(n));
    const double scale = std::sqrt(frobenius_sq(lg.grad_q));
    ASSERT_GT(scale, 0.0);
    EXPECT_LT(max_abs_diff(lg.grad_q, lg.grad_k), 1e-14 * std::max(1.0, scale));
}

TEST(LossAndGrad, ExactFitIsStationary) {
    Rng rng(13);
    auto inst = random_instance(rng);
    const auto current = attention_map(inst.x_tilde, inst.params).matrix;
    const auto lg = loss_and_grad(inst.params, inst.x_tilde, current);
    EXPECT_LT(lg.loss, 1e-16);
    EXPECT_LT(std::sqrt(frobenius_sq(lg.grad_q) + frobenius_sq(lg.grad_k)), 1e-8);
}

TEST(Adam, FirstStepMovesByLearningRateAgainstGradient) {
    SolverConfig cfg;
    cfg.lr = 1e-3;
    AdamState st(3);
    std::vector<double> w{1.0, 1.0, 1.0};
    const std::vector<double> g{0.5, -2.0, 1e-3};
    adam_step(st, w, g, cfg);
    for (std::size_t i = 0; i < 3; ++i) {
        const double expected = 1.0 - cfg.lr * g[i] / (std::abs(g[i]) + cfg.adam_eps);
        EXPECT_NEAR(w[i], expected, 1e-15);
        EXPECT_NEAR(w[i], 1.0 - cfg.lr * (g[i] > 0 ? 1.0 : -1.0), 1e-8);
    }
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    SolverConfig cfg;
    AdamState st(2);
    std::vector<double> w{0.25, -3.0};
    for (int i = 0; i < 5; ++i) adam_step(st, w, std::vector<double>{0.0, 0.0}, cfg);
    EXPECT_EQ(w, (std::vector<double>{0.25, -3.0}));
    EXPECT_EQ(st.step, 5u);
}

TEST(Adam, QuadraticDescends) {
    SolverConfig cfg;
    cfg.lr = 0.1;
    AdamState st(1);
    std::vector<double> w{1.0};
    double previous = std::abs(w[0]);
    for (int step = 1; step <= 100; ++step) {
        adam_step(st, w, std::vector<double>{2.0 * w[0]}, cfg);
        if (step <= 10) {
            EXPECT_LT(std::abs(w[0]), previous) << "step " << step;
            previous = std::abs(w[0]);
        }
    }
    EXPECT_LT(std::abs(w[0]), 0.5);
}

TEST(Adam, SizeMismatch) {
    SolverConfig cfg;
    AdamState st(2);
    std::vector<double> w{1.0, 2.0};
    EXPECT_THROW(adam_step(st, w, std::vector<double>{1.0}, cfg), DimensionError);
}

namespace {

SolverConfig fast_config(std::size_t iters = 1500) {
    SolverConfig cfg;
    cfg.lr = 1e-2;
    cfg.max_iter = iters;
    cfg.seed = 3;
    return cfg;
}

}  // namespace

TEST(SolveHead, ZeroIterationsReturnsRandomInit) {
    const GridShape g(4, 4);
    SolverConfig cfg;
    cfg.max_iter = 0;
    const auto r = solve_head(impulse_conv_matrix({0, 1}, g), sinusoidal_pe(g, 32), cfg, 2);
    const double n = 16.0;
    EXPECT_EQ(r.iterations_run, 0u);
    EXPECT_NEAR(r.final_loss, (n - 1) / (n * n), 1e-3);
    EXPECT_EQ(r.params.q.rows(), 32u);
    EXPECT_EQ(r.params.q.cols(), 16u);
    EXPECT_DOUBLE_EQ(r.params.scale, 0.25);
    for (double v : r.params.q.data()) EXPECT_LE(std::abs(v), 2.0 * cfg.init_std);
}

TEST(SolveHead, ConvergesOnSmallGridAndSharpensUnderScaling) {
    const GridShape g(4, 4);
    const auto pseudo = sinusoidal_pe(g, 32);
    for (auto padding : {Padding::circular, Padding::zero_self_fallback}) {
        const auto target = impulse_conv_matrix({-1, 1}, g, padding);
        std::vector<double> history;
        const auto r = solve_head(target, pseudo, fast_config(), 2, [&](std::size_t, double l) { history.push_back(l); });
        EXPECT_EQ(r.argmax_match_rate, 1.0);
        EXPECT_LT(r.final_loss, history.front() / 10.0);
        ASSERT_EQ(history.size(), 1500u);
        double running_min = history.front();
        for (double l : history) {
            const double next_min = std::min(running_min, l);
            EXPECT_LE(next_min, running_min);
            running_min = next_min;
        }
        EXPECT_LT(running_min, history.front());
        EXPECT_EQ(r.target_offset, (ImpulseOffset{-1, 1}));

        // Scaling the converged logits by c > 1 keeps every argmax and does not raise the loss.
        const auto x = layer_norm_rows(pseudo.matrix);
        for (double c : {1.5, 2.0, 4.0}) {
            AttentionHeadParams sharper(scaled(r.params.q, c), r.params.k);
            EXPECT_EQ(argmax_match_rate(attention_map(x, sharper).matrix, target.matrix), 1.0);
            EXPECT_LE(loss(sharper, x, target), r.final_loss);
        }
    }
}

TEST(SolveHead, DeterministicGivenSeed) {
    const GridShape g(3, 3);
    const auto target = impulse_conv_matrix({1, 0}, g);
    const auto pseudo = make_pseudo_input(PseudoKind::pe_plus_gauss, g, 16, 4);
    const auto a = solve_head(target, pseudo, fast_config(200), 2);
    const auto b = solve_head(target, pseudo, fast_config(200), 2);
    EXPECT_EQ(a.params.q, b.params.q);
    EXPECT_EQ(a.params.k, b.params.k);
    EXPECT_EQ(a.final_loss, b.final_loss);
}

TEST(SolveHead, EarlyStopping) {
    const GridShape g(3, 3);
    auto cfg = fast_config(5000);
    cfg.early_stop_loss = 1e-3;
    const auto r = solve_head(impulse_conv_matrix({0, 1}, g), sinusoidal_pe(g, 16), cfg, 1);
    EXPECT_LT(r.iterations_run, 5000u);
    EXPECT_LE(r.final_loss, 1e-3);
}

TEST(SolveHead, NonFiniteLossReportsIteration) {
    const GridShape g(2, 2);
    auto pseudo = sinusoidal_pe(g, 8);
    pseudo.matrix(0, 0) = std::numeric_limits<double>::quiet_NaN();
    try {
        solve_head(impulse_conv_matrix({0, 0}, g), pseudo, fast_config(10), 2);
        FAIL() << "expected SolverDivergence";
    } catch (const SolverDivergence& e) {
        EXPECT_EQ(e.iteration(), 1u);
    }
}

TEST(SolveHead, RejectsMismatchedShapes) {
    EXPECT_THROW(solve_head(impulse_conv_matrix({0, 0}, GridShape(3, 3)), sinusoidal_pe(GridShape(2, 2), 8), fast_config(1), 2),
                 DimensionError);
    EXPECT_THROW(solve_head(impulse_conv_matrix({0, 0}, GridShape(2, 2)), sinusoidal_pe(GridShape(2, 2), 8), fast_config(1), 3),
                 std::invalid_argument);
}

namespace {

BundleSpec small_spec() {
    BundleSpec s;
    s.layers = 12;
    s.heads = 3;
    s.dim = 24;
    s.grid = GridShape(4, 4);
    s.filter_size = 3;
    return s;
}

}  // namespace

TEST(SolveBundle, SharedParametersAreIdenticalAcrossLayers) {
    const auto b = solve_bundle(small_spec(), fast_config(40));
    ASSERT_EQ(b.layers.size(), 12u);
    for (std::size_t h = 0; h < 3; ++h) {
        EXPECT_EQ(b.layers[0][h].params.q, b.layers[11][h].params.q);
        EXPECT_EQ(b.layers[0][h].params.k, b.layers[11][h].params.k);
        EXPECT_EQ(b.layers[0][h].target_offset, b.layers[11][h].target_offset);
    }
    std::set<ImpulseOffset> offsets;
    for (const auto& r : b.layers[0]) offsets.insert(*r.target_offset);
    EXPECT_EQ(offsets.size(), 3u);
}

TEST(SolveBundle, FirstLayerSplitUnderSharing) {
    auto spec = small_spec();
    spec.layers = 3;
    spec.pseudo_first = PseudoKind::pe;
    spec.pseudo_rest = PseudoKind::gauss;
    const auto b = solve_bundle(spec, fast_config(20));
    EXPECT_NE(b.layers[0][0].params.q, b.layers[1][0].params.q);
    EXPECT_EQ(b.layers[1][0].params.q, b.layers[2][0].params.q);
    EXPECT_EQ(b.layers[0][0].target_offset, b.layers[2][0].target_offset);
}

TEST(SolveBundle, PerLayerDrawsDifferentTargets) {
    auto spec = small_spec();
    spec.layers = 4;
    spec.sharing = Sharing::per_layer;
    const auto b = solve_bundle(spec, fast_config(5));
    bool any_diff = false;
    for (std::size_t l = 1; l < 4; ++l)
        for (std::size_t h = 0; h < 3; ++h) any_diff |= b.layers[l][h].target_offset != b.layers[0][h].target_offset;
    EXPECT_TRUE(any_diff);
    for (const auto& layer : b.layers) {
        std::set<ImpulseOffset> offsets;
        for (const auto& r : layer) offsets.insert(*r.target_offset);
        EXPECT_EQ(offsets.size(), 3u);
    }
}

TEST(SolveBundle, ResultIndependentOfThreadCount) {
    auto spec = small_spec();
    spec.layers = 3;
    spec.sharing = Sharing::per_layer;
    spec.pseudo_rest = PseudoKind::pe_plus_uniform;
    const auto serial = solve_bundle(spec, fast_config(30), 1);
    const auto parallel = solve_bundle(spec, fast_config(30), 4);
    for (std::size_t l = 0; l < 3; ++l)
        for (std::size_t h = 0; h < 3; ++h) {
            EXPECT_EQ(serial.layers[l][h].params.q, parallel.layers[l][h].params.q);
            EXPECT_EQ(serial.layers[l][h].params.k, parallel.layers[l][h].params.k);
        }
}

TEST(SolveBundle, ValidatesBundleSpec) {
    auto spec = small_spec();
    spec.dim = 25;
    EXPECT_THROW(solve_bundle(spec, fast_config(1)), std::invalid_argument);
    spec = small_spec();
    spec.layers = 0;
    EXPECT_THROW(solve_bundle(spec, fast_config(1)), std::invalid_argument);
    spec = small_spec();
    spec.filter_size = 5;
    EXPECT_THROW(solve_bundle(spec, fast_config(1)), std::invalid_argument);
}
