#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ctrl/analysis.hpp"
#include "ctrl/gradcheck.hpp"
#include "ctrl/plot.hpp"
#include "ctrl/trainer.hpp"

namespace {

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> sets;
};

void add_config_options(CLI::App* cmd, ctrl::ExperimentConfig& cfg, CommonOpts& common) {
    cmd->add_option("--config", common.config_path, "key=value config file");
    cmd->add_option("--set", common.sets, "extra key=value overrides")->take_all();
    cmd->add_option("--seed", cfg.seed, "run seed");
    cmd->add_option("--env", cfg.env, "task family: gridworld or ising");
    cmd->add_option("--out", cfg.output_dir, "output directory");
    cmd->add_option("--steps", cfg.total_env_steps, "total environment steps");
    cmd->add_flag("--consecutive-t", cfg.consecutive_t, "consecutive view keypoints");
    cmd->add_flag("--no-action", cfg.no_action, "drop action conditioning from views");
    cmd->add_flag("--no-cluster", cfg.no_cluster, "disable the clustering loss");
    cmd->add_flag("--no-pred", cfg.no_pred, "disable the cross-cluster prediction loss");
    cmd->add_flag("--serial", cfg.serial, "single-threaded rollout collection");
}

// file first, then CLI-visible fields already bound, then --set overrides
void finalize_config(ctrl::ExperimentConfig& cfg, const CommonOpts& common, const CLI::App* cmd) {
    ctrl::ExperimentConfig file_cfg;
    if (!common.config_path.empty()) {
        ctrl::load_config_file(file_cfg, common.config_path);
        // flags given on the command line win over the file
        ctrl::ExperimentConfig defaults;
        auto keep = [&](auto member_ptr) {
            if (cfg.*member_ptr != defaults.*member_ptr) file_cfg.*member_ptr = cfg.*member_ptr;
        };
        keep(&ctrl::ExperimentConfig::seed);
        keep(&ctrl::ExperimentConfig::env);
        keep(&ctrl::ExperimentConfig::output_dir);
        keep(&ctrl::ExperimentConfig::total_env_steps);
        keep(&ctrl::ExperimentConfig::consecutive_t);
        keep(&ctrl::ExperimentConfig::no_action);
        keep(&ctrl::ExperimentConfig::no_cluster);
        keep(&ctrl::ExperimentConfig::no_pred);
        keep(&ctrl::ExperimentConfig::serial);
        cfg = file_cfg;
    }
    (void)cmd;
    for (const std::string& kv : common.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ctrl::ConfigError("--set expects key=value, got '" + kv + "'");
        ctrl::apply_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    ctrl::validate_config(cfg);
}

int run_grad_check() {
    using namespace ctrl;
    using namespace ctrl::diff;
    Rng rng(20240);
    bool all_pass = true;
    for (int trial = 0; trial < 5; ++trial) {
        ParameterStore store;
        store.add("w1", Tensor::randn({8, 6}, rng, 0.6));
        store.add("b1", Tensor::randn({8}, rng, 0.2));
        store.add("w2", Tensor::randn({4, 8}, rng, 0.6));
        store.add("b2", Tensor::randn({4}, rng, 0.2));
        Graph g(&store);
        NodeId x = g.input("x", {6});
        NodeId h = g.tanh_(g.affine(x, g.param("w1"), g.param("b1")));
        NodeId logits = g.affine(h, g.param("w2"), g.param("b2"));
        NodeId p = g.log_softmax(logits);
        Tensor target({4});
        target.data = {0.1, 0.2, 0.3, 0.4};
        NodeId loss = g.cross_entropy_rows(g.constant(target), p);
        std::map<std::string, Tensor> inputs{{"x", Tensor::randn({6}, rng, 1.0)}};
        const GradCheckReport report = grad_check(g, loss, inputs, 1e-4);
        std::cout << "trial " << trial << ": max rel err " << report.max_rel_err << " -> "
                  << (report.pass ? "pass" : "FAIL") << "\n";
        for (const auto& entry : report.entries)
            std::cout << "  " << entry.param << ": " << entry.max_rel_err << "\n";
        all_pass = all_pass && report.pass;
    }
    std::cout << (all_pass ? "grad-check: all trials passed\n" : "grad-check: FAILURES\n");
    return all_pass ? 0 : 1;
}

int run_verify_theorem(std::size_t cases) {
    using namespace ctrl;
    using namespace ctrl::diff;
    Rng rng(777);
    std::size_t held = 0, preserved = 0;
    for (std::size_t i = 0; i < cases; ++i) {
        const std::size_t C = 3 + rng.below(6);
        const std::size_t d = C + rng.below(8);
        Tensor E = Tensor::randn({C, d}, rng, 1.0);
        renormalize_centroid_rows(E);
        std::vector<double> v(d), delta(d);
        for (auto& x : v) x = rng.normal();
        // construct delta along the winning centroid until the half-plane
        // condition holds, rejecting draws that break it
        for (int attempt = 0;; ++attempt) {
            std::size_t j = 0;
            double best = -1e300;
            for (std::size_t c = 0; c < C; ++c) {
                const double s = kernels::dot(E.data.data() + c * d, v.data(), d);
                if (s > best) {
                    best = s;
                    j = c;
                }
            }
            const double alpha = rng.uniform(0.0, 3.0);
            for (std::size_t k = 0; k < d; ++k) delta[k] = alpha * E.data[j * d + k];
            if (attempt > 20) for (auto& x : delta) x = 0.0;  // zero always satisfies
            const auto check = analysis::check_perturbation_invariance(E, v, delta);
            if (!check.holds_condition) continue;
            held += 1;
            preserved += check.same_argmax ? 1 : 0;
            break;
        }
    }
    std::cout << "condition held in " << held << " cases; argmax preserved in " << preserved << "\n";
    const bool ok = held == cases && preserved == cases;
    std::cout << (ok ? "verify-theorem: PASS\n" : "verify-theorem: FAIL\n");
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cross-trajectory representation learning engine"};
    app.require_subcommand(1);

    ctrl::ExperimentConfig train_cfg;
    CommonOpts train_common;
    CLI::App* train = app.add_subcommand("train", "train on a task family");
    add_config_options(train, train_cfg, train_common);

    ctrl::ExperimentConfig eval_cfg;
    CommonOpts eval_common;
    std::string checkpoint_path;
    std::uint64_t eval_lo = 200, eval_hi = 399;
    std::size_t episodes_per_level = 1;
    CLI::App* eval_cmd = app.add_subcommand("eval", "zero-shot evaluation of a checkpoint");
    add_config_options(eval_cmd, eval_cfg, eval_common);
    eval_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    eval_cmd->add_option("--eval-lo", eval_lo, "first held-out seed");
    eval_cmd->add_option("--eval-hi", eval_hi, "last held-out seed");
    eval_cmd->add_option("--episodes-per-level", episodes_per_level, "episodes per held-out seed");

    ctrl::ExperimentConfig sweep_cfg;
    CommonOpts sweep_common;
    std::vector<std::size_t> sweep_e = {2, 4, 5, 6, 10, 50};
    std::vector<std::uint64_t> sweep_seeds = {1, 2, 3, 4, 5};
    std::string sweep_out = "sweep.csv";
    CLI::App* sweep = app.add_subcommand("sweep-ising", "cluster-count sweep on the matching task");
    add_config_options(sweep, sweep_cfg, sweep_common);
    sweep->add_option("--e-values", sweep_e, "cluster counts to sweep")->take_all();
    sweep->add_option("--seeds", sweep_seeds, "run seeds")->take_all();
    sweep->add_option("--table", sweep_out, "output csv path");

    std::string plot_csv, plot_dir = "plots";
    CLI::App* plot = app.add_subcommand("plot", "render metric curves as SVG");
    plot->add_option("--csv", plot_csv, "metrics.csv path")->required();
    plot->add_option("--out", plot_dir, "output directory");

    CLI::App* gc = app.add_subcommand("grad-check", "finite-difference audit of the autodiff core");

    std::size_t theorem_cases = 1000;
    CLI::App* vt = app.add_subcommand("verify-theorem", "directional-perturbation invariance check");
    vt->add_option("--cases", theorem_cases, "number of randomized cases");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) {
            finalize_config(train_cfg, train_common, train);
            const ctrl::RunArtifacts art = ctrl::run_train(train_cfg);
            std::cout << "run complete: " << art.epochs << " epochs\n"
                      << "metrics: " << art.metrics_path << "\n"
                      << "checkpoint: " << art.final_checkpoint_path << "\n";
            return 0;
        }
        if (eval_cmd->parsed()) {
            finalize_config(eval_cfg, eval_common, eval_cmd);
            const auto report = ctrl::eval_zero_shot(eval_cfg, checkpoint_path, eval_lo, eval_hi,
                                                     episodes_per_level);
            std::cout << "episodes: " << report.episodes << "\n"
                      << "mean return: " << report.mean_return << " +- " << report.std_return << "\n";
            return 0;
        }
        if (sweep->parsed()) {
            sweep_cfg.env = "ising";
            finalize_config(sweep_cfg, sweep_common, sweep);
            const auto result = ctrl::ising_cluster_sweep(sweep_cfg, sweep_e, sweep_seeds);
            ctrl::write_sweep_csv(result, sweep_out);
            std::cout << "sweep table written to " << sweep_out << "\n";
            for (std::size_t s = 0; s < result.seeds.size(); ++s) {
                for (std::size_t e = 0; e < result.e_values.size(); ++e) {
                    const auto& cell = result.cell(s, e);
                    std::cout << "seed " << cell.seed << " E=" << cell.num_clusters << " return "
                              << cell.mean_return << " silhouette " << cell.silhouette << "\n";
                }
            }
            return 0;
        }
        if (plot->parsed()) {
            const auto written = ctrl::emit_plots(plot_csv, plot_dir);
            for (const auto& path : written) std::cout << path << "\n";
            return 0;
        }
        if (gc->parsed()) return run_grad_check();
        if (vt->parsed()) return run_verify_theorem(theorem_cases);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
