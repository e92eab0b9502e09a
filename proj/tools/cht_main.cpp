// Command-line entry point: training, evaluation, baselines, numerical
// checks and embedding export. Run `cht --help` for the command list.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cht/baselines.hpp"
#include "cht/checks.hpp"
#include "cht/config.hpp"
#include "cht/eval.hpp"
#include "cht/learner.hpp"
#include "cht/serialize.hpp"

namespace fs = std::filesystem;
using namespace cht;

namespace {

RunConfig load_run_config(const std::string& config_path, const std::vector<std::string>& sets) {
    RunConfig cfg = config_path.empty() ? RunConfig{} : parse_config_file(config_path);
    for (const auto& kv : sets) apply_override(cfg, kv);
    return cfg;
}

std::string run_root() {
    const char* env = std::getenv("CHT_RUN_DIR");
    return env && *env ? env : "runs";
}

std::string make_run_dir(const std::string& explicit_dir, const std::string& base_name) {
    if (!explicit_dir.empty()) {
        fs::create_directories(explicit_dir);
        return explicit_dir;
    }
    const fs::path root = run_root();
    fs::create_directories(root);
    fs::path dir = root / base_name;
    for (int i = 1; fs::exists(dir); ++i) dir = root / (base_name + "-" + std::to_string(i));
    fs::create_directories(dir);
    return dir.string();
}

void check_uniform_pools(const std::vector<ClassPool>& pools) {
    for (const auto& p : pools)
        require(p.height == pools[0].height && p.width == pools[0].width && p.channels == pools[0].channels,
                "pools disagree on image shape; one generated CNN cannot serve them");
}

struct LoadedModel {
    RunConfig cfg;
    std::vector<ClassPool> train_pools, test_pools;
    Arch arch;
    GeneratorConfig gencfg;
    GeneratorState<float> state;
};

LoadedModel load_from_checkpoint(const std::string& ckpt, const std::vector<std::string>& sets) {
    LoadedModel m;
    m.cfg = parse_config_text(read_checkpoint_config(ckpt), ckpt + ".manifest");
    for (const auto& kv : sets) apply_override(m.cfg, kv);
    std::vector<ClassPool> pools = build_pools(m.cfg);
    check_uniform_pools(pools);
    auto split = split_pools(pools, m.cfg);
    m.train_pools = std::move(split.first);
    m.test_pools = std::move(split.second);
    m.arch = build_arch(m.cfg, pools[0]);
    m.gencfg = build_generator_config(m.cfg);
    m.state = init_generator<float>(m.gencfg, m.arch, m.cfg.train_seed);
    load_checkpoint(ckpt, m.state, model_fingerprint(m.cfg, m.arch));
    return m;
}

void print_table(const MetricsTable& table) {
    std::cout << protocol_name(table.mode) << " (episodes=" << table.episodes << ", runs=" << table.runs_per_episode
              << ")\n";
    for (size_t t = 0; t < table.acc.size(); ++t) {
        std::cout << "  theta_" << t << (static_cast<int>(t) >= table.trained_tasks ? " (extrapolated)" : "") << ":";
        for (size_t j = 0; j < table.acc[t].size(); ++j) {
            if (table.mode == Protocol::task_incremental)
                std::cout << " task" << j << "=" << format_g(table.acc[t][j]);
            else
                std::cout << " range0-" << t << "=" << format_g(table.acc[t][j]);
            std::cout << "+-" << format_g(table.ci95[t][j]);
        }
        std::cout << "\n";
    }
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& sets, const std::string& run_dir_arg) {
    RunConfig cfg = load_run_config(config_path, sets);
    std::vector<ClassPool> pools = build_pools(cfg);
    check_uniform_pools(pools);
    auto [train_pools, test_pools] = split_pools(pools, cfg);
    const Arch arch = build_arch(cfg, pools[0]);
    const GeneratorConfig gencfg = build_generator_config(cfg);
    const TrainConfig tcfg = build_train_config(cfg);
    require(cfg.train_way <= cfg.gen_label_vocab, "config: train.way exceeds gen.label_vocab");

    const std::string base = config_path.empty() ? "run" : fs::path(config_path).stem().string();
    const std::string dir = make_run_dir(run_dir_arg, base + "-seed" + std::to_string(cfg.train_seed));
    const std::string resolved = resolved_config_text(cfg);
    {
        std::ofstream f(dir + "/resolved.cfg");
        require(f.good(), "cannot write resolved config");
        f << resolved;
    }
    const uint64_t fp = model_fingerprint(cfg, arch);

    GeneratorState<float> state = init_generator<float>(gencfg, arch, cfg.train_seed);
    TrainHooks<float> hooks;
    hooks.on_checkpoint = [&](long step, GeneratorState<float>& st) {
        save_checkpoint(dir + "/ckpt_" + std::to_string(step), st, fp, resolved);
    };
    EvalConfig ecfg = build_eval_config(cfg);
    hooks.on_eval = [&](long, GeneratorState<float>& st) {
        auto [ti, ci] = evaluate_both(st, test_pools, ecfg, tcfg.num_tasks);
        double ti_mean = 0;
        for (double v : ti.acc.back()) ti_mean += v;
        ti_mean /= static_cast<double>(ti.acc.back().size());
        return std::make_pair(ti_mean, ci.acc.back()[0]);
    };

    std::cout << "training " << tcfg.total_steps << " steps into " << dir << "\n";
    train(state, train_pools, tcfg, dir + "/metrics.csv", hooks);
    std::cout << "done; final checkpoint ckpt_" << tcfg.total_steps << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& protocol, int t_test, long seed, int episodes, int runs,
             const std::string& out_arg, const std::vector<std::string>& sets) {
    LoadedModel m = load_from_checkpoint(ckpt, sets);
    EvalConfig ecfg = build_eval_config(m.cfg);
    if (t_test > 0) ecfg.t_test = t_test;
    if (seed >= 0) ecfg.seed = static_cast<uint64_t>(seed);
    if (episodes > 0) ecfg.episodes = episodes;
    if (runs > 0) ecfg.runs_per_episode = runs;

    const std::string out = out_arg.empty() ? ckpt + "_eval" : out_arg;
    fs::create_directories(out);

    auto [ti, ci] = evaluate_both(m.state, m.test_pools, ecfg, m.cfg.train_tasks);
    std::vector<MetricsTable> tables;
    if (protocol == "both" || protocol == "task_incremental") tables.push_back(ti);
    if (protocol == "both" || protocol == "class_incremental") tables.push_back(ci);
    write_metrics_csv(out + "/metrics.csv", tables);
    for (const auto& table : tables) {
        const std::string name = protocol_name(table.mode);
        write_metrics_svg(out + "/" + name + ".svg", table, name + " accuracy");
        print_table(table);
    }
    if (protocol == "both" || protocol == "task_incremental") {
        const BackwardTransfer bt = backward_transfer(ti);
        std::cout << "backward transfer mean delta = " << format_g(bt.mean) << "\n";
    }
    std::cout << "wrote " << out << "/metrics.csv\n";
    return 0;
}

int cmd_baseline_constpn(const std::string& config_path, const std::vector<std::string>& sets,
                         const std::string& run_dir_arg) {
    RunConfig cfg = load_run_config(config_path, sets);
    std::vector<ClassPool> pools = build_pools(cfg);
    check_uniform_pools(pools);
    auto [train_pools, test_pools] = split_pools(pools, cfg);
    const Arch arch = build_arch(cfg, pools[0]);

    ConstPNConfig pcfg;
    pcfg.eval_way = cfg.train_way;
    pcfg.way_multiplier = cfg.constpn_way_multiplier;
    pcfg.shots = cfg.train_shots;
    pcfg.query_shots = cfg.train_query_shots;
    pcfg.learning_rate = cfg.constpn_lr > 0 ? cfg.constpn_lr : cfg.train_lr;
    pcfg.lr_decay_steps = cfg.train_lr_decay_steps;
    pcfg.lr_decay_rate = cfg.train_lr_decay_rate;
    pcfg.total_steps = cfg.constpn_total_steps > 0 ? cfg.constpn_total_steps : cfg.train_total_steps;
    pcfg.seed = cfg.train_seed;

    const std::string base = config_path.empty() ? "constpn" : ("constpn-" + fs::path(config_path).stem().string());
    const std::string dir = make_run_dir(run_dir_arg, base + "-seed" + std::to_string(cfg.train_seed));
    {
        std::ofstream f(dir + "/resolved.cfg");
        f << resolved_config_text(cfg);
    }
    std::cout << "training ConstPN for " << pcfg.total_steps << " steps into " << dir << "\n";
    ConstPNState<float> st = constpn_train<float>(train_pools, arch, pcfg, dir + "/metrics.csv");
    save_bundle(dir + "/constpn_weights", arch, st.bundle());

    EvalConfig ecfg = build_eval_config(cfg);
    detail::AccAccum ti_acc, ci_acc;
    for (int e = 0; e < ecfg.episodes; ++e) {
        Rng rng = Rng::derive(ecfg.seed, 0xba5e + static_cast<uint64_t>(e));
        TaskSequence seq =
            sample_task_sequence(test_pools, ecfg.t_test, ecfg.regime, ecfg.way, ecfg.shots, ecfg.query_shots, rng);
        std::vector<std::vector<double>> ti_sum, ci_sum;
        for (int r = 0; r < ecfg.runs_per_episode; ++r) {
            TaskSequence run_seq = r == 0 ? seq : resample_sequence_samples(seq, test_pools, rng);
            const BaselineAccuracy acc = constpn_eval(st, run_seq);
            std::vector<std::vector<double>> ti(acc.task_incremental.size());
            for (size_t t = 0; t < ti.size(); ++t)
                for (size_t tau = 0; tau <= t; ++tau) ti[t].push_back(acc.task_incremental[tau]);
            std::vector<std::vector<double>> ci(acc.class_incremental.size());
            for (size_t t = 0; t < ci.size(); ++t) ci[t].push_back(acc.class_incremental[t]);
            if (r == 0) {
                ti_sum = ti;
                ci_sum = ci;
            } else {
                for (size_t t = 0; t < ti.size(); ++t)
                    for (size_t j = 0; j < ti[t].size(); ++j) ti_sum[t][j] += ti[t][j];
                for (size_t t = 0; t < ci.size(); ++t) ci_sum[t][0] += ci[t][0];
            }
        }
        for (auto& row : ti_sum)
            for (double& v : row) v /= ecfg.runs_per_episode;
        for (auto& row : ci_sum)
            for (double& v : row) v /= ecfg.runs_per_episode;
        ti_acc.add(ti_sum);
        ci_acc.add(ci_sum);
    }
    MetricsTable ti, ci;
    ti.mode = Protocol::task_incremental;
    ci.mode = Protocol::class_incremental;
    ti.trained_tasks = ci.trained_tasks = ecfg.t_test;
    ti.episodes = ci.episodes = ecfg.episodes;
    ti.runs_per_episode = ci.runs_per_episode = ecfg.runs_per_episode;
    ti_acc.reduce(ti);
    ci_acc.reduce(ci);
    write_metrics_csv(dir + "/eval_metrics.csv", {ti, ci});
    print_table(ti);
    print_table(ci);
    std::cout << "wrote " << dir << "/eval_metrics.csv\n";
    return 0;
}

int cmd_baseline_merged(const std::string& config_path, const std::vector<std::string>& sets,
                        const std::string& run_dir_arg) {
    RunConfig cfg = load_run_config(config_path, sets);
    std::vector<ClassPool> pools = build_pools(cfg);
    check_uniform_pools(pools);
    auto [train_pools, test_pools] = split_pools(pools, cfg);
    const Arch arch = build_arch(cfg, pools[0]);
    const GeneratorConfig gencfg = build_generator_config(cfg);

    TrainConfig tcfg = build_train_config(cfg);
    const int merged_way = cfg.train_tasks * cfg.train_way;
    require(merged_way <= cfg.gen_label_vocab,
            "baseline-merged: merged way " + std::to_string(merged_way) + " exceeds gen.label_vocab");
    tcfg.num_tasks = 1;
    tcfg.way = merged_way;

    const std::string base = config_path.empty() ? "merged" : ("merged-" + fs::path(config_path).stem().string());
    const std::string dir = make_run_dir(run_dir_arg, base + "-seed" + std::to_string(cfg.train_seed));
    const std::string resolved = resolved_config_text(cfg);
    {
        std::ofstream f(dir + "/resolved.cfg");
        f << resolved;
    }
    const uint64_t fp = model_fingerprint(cfg, arch);

    GeneratorState<float> state = init_generator<float>(gencfg, arch, cfg.train_seed);
    TrainHooks<float> hooks;
    hooks.on_checkpoint = [&](long step, GeneratorState<float>& st) {
        save_checkpoint(dir + "/ckpt_" + std::to_string(step), st, fp, resolved);
    };
    std::cout << "training Merged-HT (" << merged_way << "-way single task) for " << tcfg.total_steps << " steps into "
              << dir << "\n";
    train(state, train_pools, tcfg, dir + "/metrics.csv", hooks);

    EvalConfig ecfg = build_eval_config(cfg);
    std::vector<double> episode_acc;
    for (int e = 0; e < ecfg.episodes; ++e) {
        Rng rng = Rng::derive(ecfg.seed, 0x3e6d + static_cast<uint64_t>(e));
        TaskSequence seq =
            sample_task_sequence(test_pools, cfg.train_tasks, ecfg.regime, ecfg.way, ecfg.shots, ecfg.query_shots, rng);
        double acc = 0;
        for (int r = 0; r < ecfg.runs_per_episode; ++r) {
            TaskSequence run_seq = r == 0 ? seq : resample_sequence_samples(seq, test_pools, rng);
            acc += merged_ht_eval(state, run_seq);
        }
        episode_acc.push_back(acc / ecfg.runs_per_episode);
    }
    double mean = 0;
    for (double v : episode_acc) mean += v;
    mean /= static_cast<double>(episode_acc.size());
    double var = 0;
    for (double v : episode_acc) var += (v - mean) * (v - mean);
    var = episode_acc.size() > 1 ? var / static_cast<double>(episode_acc.size() - 1) : 0;
    const double ci95 = 1.96 * std::sqrt(var / static_cast<double>(episode_acc.size()));
    {
        std::ofstream f(dir + "/eval_metrics.csv");
        f << "mode,t,tau_or_range,acc,ci95\n";
        f << "class_incremental," << cfg.train_tasks - 1 << ",0-" << cfg.train_tasks - 1 << "," << format_g(mean) << ","
          << format_g(ci95) << "\n";
    }
    std::cout << "merged accuracy over tasks 0-" << cfg.train_tasks - 1 << ": " << format_g(mean) << " +- "
              << format_g(ci95) << "\n";
    return 0;
}

int cmd_check(const std::string& which, uint64_t seed) {
    bool ok = true;
    if (which == "maml") {
        const MamlReport rep = maml_check_random(20, seed);
        ok = rep.max_rel_err_w <= kMamlTolerance && rep.max_rel_err_b <= kMamlTolerance &&
             rep.prototype_alignment <= kMamlTolerance;
        std::cout << "maml one-step check over 20 random configurations (threshold " << format_g(kMamlTolerance) << ")\n"
                  << "  max relative error dW: " << format_g(rep.max_rel_err_w) << "\n"
                  << "  max relative error db: " << format_g(rep.max_rel_err_b) << "\n"
                  << "  prototype alignment:   " << format_g(rep.prototype_alignment) << "\n"
                  << (ok ? "PASS" : "FAIL") << "\n";
    } else if (which == "gradients") {
        const GradientCheckReport rep = check_unrolled_gradients(seed);
        ok = rep.ok;
        auto show = [](const std::vector<GradientCheckGroup>& groups, const char* lane, double tol) {
            double worst = 0;
            for (const auto& g : groups) worst = std::max(worst, g.max_rel);
            std::cout << "  " << lane << ": max relative error " << format_g(worst) << " (threshold " << format_g(tol)
                      << ")\n";
            for (const auto& g : groups)
                if (!g.ok) std::cout << "    FAIL " << g.name << " rel " << format_g(g.max_rel) << "\n";
        };
        std::cout << "finite-difference check on the unrolled T=2 objective\n";
        show(rep.float_groups, "float32", kGradTolFloat);
        show(rep.double_groups, "float64", kGradTolDouble);
        std::cout << "  gradient mass through previous-weights path (support ablated): "
                  << format_g(rep.recursion_grad_mass) << "\n"
                  << (ok ? "PASS" : "FAIL") << "\n";
    } else {
        const OracleCheckReport rep = check_loss_oracle(seed);
        ok = rep.ok;
        std::cout << "episode objective vs nested-loop oracle (threshold " << format_g(kOracleTolerance) << ")\n";
        for (const auto& row : rep.rows)
            std::cout << "  T=" << row.num_tasks << " impl=" << format_g(row.implementation)
                      << " oracle=" << format_g(row.oracle) << " rel=" << format_g(row.rel_err)
                      << (row.ok ? " ok" : " FAIL") << "\n";
        std::cout << (ok ? "PASS" : "FAIL") << "\n";
    }
    return ok ? 0 : 1;
}

int cmd_export(const std::string& ckpt, int t_test, long seed, const std::string& out,
               const std::vector<std::string>& sets) {
    LoadedModel m = load_from_checkpoint(ckpt, sets);
    EvalConfig ecfg = build_eval_config(m.cfg);
    if (t_test > 0) ecfg.t_test = t_test;
    Rng rng = Rng::derive(seed >= 0 ? static_cast<uint64_t>(seed) : ecfg.seed, 0xe3b);
    TaskSequence seq =
        sample_task_sequence(m.test_pools, ecfg.t_test, ecfg.regime, ecfg.way, ecfg.shots, ecfg.query_shots, rng);
    export_embeddings(m.state, seq, out);
    std::cout << "wrote " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Continual HyperTransformer laboratory"};
    app.require_subcommand(1);

    std::string config_path, run_dir, ckpt, protocol = "both", out, which_check;
    std::vector<std::string> sets;
    int t_test = 0, episodes = 0, runs = 0;
    long seed = -1;
    uint64_t check_seed = 2024;

    auto add_config_opts = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "config file path")->required();
        cmd->add_option("--set", sets, "override, e.g. --set train.total_steps=500");
        cmd->add_option("--run-dir", run_dir, "explicit output directory");
    };

    CLI::App* train_cmd = app.add_subcommand("train", "train a Continual HyperTransformer");
    add_config_opts(train_cmd);

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    eval_cmd->add_option("--ckpt", ckpt, "checkpoint stem (without .bin/.manifest)")->required();
    eval_cmd->add_option("--protocol", protocol, "both|task_incremental|class_incremental")
        ->check(CLI::IsMember({"both", "task_incremental", "class_incremental"}));
    eval_cmd->add_option("--t-test", t_test, "number of evaluation tasks (may exceed training T)");
    eval_cmd->add_option("--seed", seed, "evaluation seed");
    eval_cmd->add_option("--episodes", episodes, "episodic evaluations");
    eval_cmd->add_option("--runs", runs, "re-runs per episode");
    eval_cmd->add_option("--out", out, "output directory");
    eval_cmd->add_option("--set", sets, "config override");

    CLI::App* constpn_cmd = app.add_subcommand("baseline-constpn", "train and evaluate the ConstPN baseline");
    add_config_opts(constpn_cmd);

    CLI::App* merged_cmd = app.add_subcommand("baseline-merged", "train and evaluate the Merged-HT baseline");
    add_config_opts(merged_cmd);

    CLI::App* check_cmd = app.add_subcommand("check", "run a numerical verifier suite");
    check_cmd->add_option("which", which_check, "maml|gradients|oracles")
        ->required()
        ->check(CLI::IsMember({"maml", "gradients", "oracles"}));
    check_cmd->add_option("--seed", check_seed, "verifier seed");

    CLI::App* export_cmd = app.add_subcommand("export-embeddings", "export prototype/query embeddings to CSV");
    export_cmd->add_option("--ckpt", ckpt, "checkpoint stem")->required();
    export_cmd->add_option("--t-test", t_test, "number of tasks in the exported sequence");
    export_cmd->add_option("--seed", seed, "sequence sampling seed");
    export_cmd->add_option("--out", out, "output CSV path")->required();
    export_cmd->add_option("--set", sets, "config override");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_cmd->parsed()) return cmd_train(config_path, sets, run_dir);
        if (eval_cmd->parsed()) return cmd_eval(ckpt, protocol, t_test, seed, episodes, runs, out, sets);
        if (constpn_cmd->parsed()) return cmd_baseline_constpn(config_path, sets, run_dir);
        if (merged_cmd->parsed()) return cmd_baseline_merged(config_path, sets, run_dir);
        if (check_cmd->parsed()) return cmd_check(which_check, check_seed);
        if (export_cmd->parsed()) return cmd_export(ckpt, t_test, seed, out, sets);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
