// structinit: command-line front end for the structured attention initializer.
//
// Exit codes: 0 success, 1 validation error, 2 I/O error.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "structinit/structinit.hpp"

namespace si = structinit;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitIo = 2;

/// 17 significant digits.
std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*e", 16, v);
    return buf;
}

struct SolveInitArgs {
    std::vector<std::size_t> grid{8, 8};
    std::size_t dim = 192;
    std::size_t heads = 3;
    std::size_t layers = 1;
    std::size_t filter_size = 3;
    std::string padding = "circular";
    std::string pseudo_first = "pe";
    std::string pseudo_rest = "pe";
    std::string sharing = "same";
    std::uint64_t seed = 0;
    double lr = 1e-4;
    std::size_t max_iter = 10000;
    std::string out;
    bool f32 = false;
    unsigned threads = 0;
};

int run_solve_init(const SolveInitArgs& a) {
    si::BundleSpec spec;
    spec.layers = a.layers;
    spec.heads = a.heads;
    spec.dim = a.dim;
    spec.grid = si::GridShape(a.grid.at(0), a.grid.at(1));
    spec.filter_size = a.filter_size;
    spec.padding = si::parse_padding(a.padding);
    spec.sharing = si::parse_sharing(a.sharing);
    spec.pseudo_first = si::parse_pseudo_kind(a.pseudo_first);
    spec.pseudo_rest = si::parse_pseudo_kind(a.pseudo_rest);

    si::SolverConfig config;
    config.seed = a.seed;
    config.lr = a.lr;
    config.max_iter = a.max_iter;

    const auto bundle = si::solve_bundle(spec, config, a.threads);
    si::write_bundle(bundle, a.out, a.f32 ? si::DType::f32 : si::DType::f64);

    std::cout << "layer\thead\tdi\tdj\tfinal_loss\targmax_match_rate\titerations_run\n";
    for (std::size_t l = 0; l < bundle.layers.size(); ++l) {
        for (std::size_t h = 0; h < bundle.layers[l].size(); ++h) {
            const auto& r = bundle.layers[l][h];
            std::cout << l << '\t' << h << '\t' << r.target_offset->di << '\t' << r.target_offset->dj << '\t'
                      << num(r.final_loss) << '\t' << num(r.argmax_match_rate) << '\t' << r.iterations_run << '\n';
        }
    }
    return kExitOk;
}

struct VerifyProp1Args {
    std::vector<std::size_t> grid{4, 4};
    std::size_t k = 1;
    std::size_t f = 3;
    std::size_t d_min = 7;
    std::size_t d_max = 11;
    std::string filters = "impulse";
    std::size_t seeds = 5;
    std::uint64_t seed = 0;
    std::size_t probes = 4;
};

int run_verify_prop1(const VerifyProp1Args& a) {
    const auto rows = si::expressibility_sweep(si::GridShape(a.grid.at(0), a.grid.at(1)), a.k, a.f, a.d_min, a.d_max,
                                               si::parse_prop1_filter_kind(a.filters), a.seeds, a.seed, a.probes);
    std::cout << "D\tseed\tk_f2\tsystem_rank\tresidual\tdeviation\texpressible\n";
    for (const auto& r : rows) {
        std::cout << r.dim << '\t' << r.seed_index << '\t' << r.threshold << '\t' << r.report.system_rank << '\t'
                  << num(r.report.residual) << '\t' << num(r.deviation) << '\t'
                  << (r.report.residual < si::kExpressibleResidual ? "yes" : "no") << '\n';
    }
    return kExitOk;
}

struct AttnMapArgs {
    std::string bundle;
    std::size_t layer = 0;
    std::size_t head = 0;
    std::string pseudo;
    std::string out;
    std::string csv;
    std::string input_csv;
};

int run_attn_map(const AttnMapArgs& a) {
    const auto bundle = si::read_bundle(a.bundle);
    if (a.layer >= bundle.spec.layers || a.head >= bundle.spec.heads) {
        throw std::invalid_argument("layer/head out of range for bundle with " + std::to_string(bundle.spec.layers) +
                                    " layers and " + std::to_string(bundle.spec.heads) + " heads");
    }
    si::BundleSpec spec = bundle.spec;
    if (!a.pseudo.empty()) {
        // Same seed derivation as the solve, with the requested kind.
        const auto kind = si::parse_pseudo_kind(a.pseudo);
        spec.pseudo_first = spec.pseudo_rest = kind;
    }
    const auto pseudo = si::bundle_pseudo_input(spec, bundle.config, a.layer);
    const auto x_tilde = si::layer_norm_rows(pseudo.matrix);
    const auto& result = bundle.layers[a.layer][a.head];
    const auto map = si::attention_map(x_tilde, result.params);

    si::render_attention_pgm(map, a.out);
    if (!a.csv.empty()) si::write_csv(map.matrix, a.csv);
    if (!a.input_csv.empty()) si::write_csv(x_tilde, a.input_csv);

    std::cout << "layer\thead\tpseudo\targmax_match_rate\n";
    std::cout << a.layer << '\t' << a.head << '\t' << si::to_string(pseudo.kind) << '\t';
    if (result.target_offset) {
        const auto target = si::impulse_conv_matrix(*result.target_offset, spec.grid, spec.padding);
        std::cout << num(si::argmax_match_rate(map.matrix, target.matrix));
    } else {
        std::cout << "nan";
    }
    std::cout << '\n';
    return kExitOk;
}

int run_stable_rank(const std::string& csv) {
    const auto m = si::read_csv(csv);
    std::cout << num(si::stable_rank(m)) << '\n';
    return kExitOk;
}

struct MakeTargetArgs {
    std::vector<std::size_t> grid{8, 8};
    std::vector<int> offset{0, 0};
    std::string padding = "circular";
    std::string out;
};

int run_make_target(const MakeTargetArgs& a) {
    const auto target = si::impulse_conv_matrix({a.offset.at(0), a.offset.at(1)}, si::GridShape(a.grid.at(0), a.grid.at(1)),
                                                si::parse_padding(a.padding));
    si::write_csv(target.matrix, a.out);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Convolution-structured initialization for multi-head attention"};
    app.require_subcommand(1);

    const std::vector<std::string> pseudo_kinds{"pe", "gauss", "uniform", "pe+gauss", "pe+uniform"};

    SolveInitArgs solve;
    auto* solve_cmd = app.add_subcommand("solve-init", "Fit Q/K per head to impulse convolution targets; write a bundle");
    solve_cmd->add_option("--grid", solve.grid, "Patch grid height and width")->expected(2)->required();
    solve_cmd->add_option("--dim", solve.dim, "Embedding dimension D")->required();
    solve_cmd->add_option("--heads", solve.heads, "Heads per layer")->required();
    solve_cmd->add_option("--layers", solve.layers, "Number of layers")->capture_default_str();
    solve_cmd->add_option("--filter-size", solve.filter_size, "Impulse filter size f (odd)")->capture_default_str();
    solve_cmd->add_option("--padding", solve.padding)->check(CLI::IsMember({"circular", "zero-self"}))->capture_default_str();
    solve_cmd->add_option("--pseudo-first", solve.pseudo_first)->check(CLI::IsMember(pseudo_kinds))->capture_default_str();
    solve_cmd->add_option("--pseudo-rest", solve.pseudo_rest)->check(CLI::IsMember(pseudo_kinds))->capture_default_str();
    solve_cmd->add_option("--sharing", solve.sharing)->check(CLI::IsMember({"same", "per-layer"}))->capture_default_str();
    solve_cmd->add_option("--seed", solve.seed)->capture_default_str();
    solve_cmd->add_option("--lr", solve.lr)->capture_default_str();
    solve_cmd->add_option("--max-iter", solve.max_iter)->capture_default_str();
    solve_cmd->add_option("--out", solve.out, "Output bundle path")->required();
    solve_cmd->add_flag("--f32", solve.f32, "Store tensors as f32");
    solve_cmd->add_option("--threads", solve.threads, "Worker threads, 0 = all cores")->capture_default_str();

    VerifyProp1Args prop1;
    auto* prop1_cmd = app.add_subcommand("verify-prop1", "Channel-mixing expressibility sweep over D (TSV)");
    prop1_cmd->add_option("--grid", prop1.grid)->expected(2)->capture_default_str();
    prop1_cmd->add_option("--k", prop1.k, "Rank of the input")->capture_default_str();
    prop1_cmd->add_option("--f", prop1.f, "Filter size")->capture_default_str();
    prop1_cmd->add_option("--d-min", prop1.d_min)->capture_default_str();
    prop1_cmd->add_option("--d-max", prop1.d_max)->capture_default_str();
    prop1_cmd->add_option("--filters", prop1.filters)->check(CLI::IsMember({"random", "impulse", "box"}))->capture_default_str();
    prop1_cmd->add_option("--seeds", prop1.seeds, "Instances per D")->capture_default_str();
    prop1_cmd->add_option("--seed", prop1.seed, "Base seed")->capture_default_str();
    prop1_cmd->add_option("--probes", prop1.probes, "Probe images for the output check")->capture_default_str();

    AttnMapArgs attn;
    auto* attn_cmd = app.add_subcommand("attn-map", "Render one head's attention map as PGM");
    attn_cmd->add_option("--bundle", attn.bundle)->required();
    attn_cmd->add_option("--layer", attn.layer)->capture_default_str();
    attn_cmd->add_option("--head", attn.head)->capture_default_str();
    attn_cmd->add_option("--pseudo", attn.pseudo, "Pseudo input kind (default: the one used to solve)")
        ->check(CLI::IsMember(pseudo_kinds));
    attn_cmd->add_option("--out", attn.out, "Output PGM path")->required();
    attn_cmd->add_option("--csv", attn.csv, "Also dump the map as CSV");
    attn_cmd->add_option("--input-csv", attn.input_csv, "Also dump the normalized pseudo input as CSV");

    std::string stable_csv;
    auto* rank_cmd = app.add_subcommand("stable-rank", "Stable rank of a CSV matrix");
    rank_cmd->add_option("--csv", stable_csv)->required();

    MakeTargetArgs target;
    auto* target_cmd = app.add_subcommand("make-target", "Dump an impulse convolution matrix as CSV");
    target_cmd->add_option("--grid", target.grid)->expected(2)->required();
    target_cmd->add_option("--offset", target.offset)->expected(2)->required();
    target_cmd->add_option("--padding", target.padding)->check(CLI::IsMember({"circular", "zero-self"}))->capture_default_str();
    target_cmd->add_option("--out", target.out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return kExitValidation;
    }

    try {
        if (*solve_cmd) return run_solve_init(solve);
        if (*prop1_cmd) return run_verify_prop1(prop1);
        if (*attn_cmd) return run_attn_map(attn);
        if (*rank_cmd) return run_stable_rank(stable_csv);
        if (*target_cmd) return run_make_target(target);
    } catch (const si::IoError& e) {
        std::cerr << "I/O error: " << e.what() << '\n';
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitValidation;
    }
    return kExitValidation;
}
