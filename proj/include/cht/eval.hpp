#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cht/baselines.hpp"
#include "cht/learner.hpp"
#include "cht/svg_plot.hpp"

namespace cht {

enum class Protocol { task_incremental, class_incremental };

inline std::string protocol_name(Protocol p) {
    return p == Protocol::task_incremental ? "task_incremental" : "class_incremental";
}

struct EvalConfig {
    int t_test = 3;
    int way = 5;
    int shots = 1;
    int query_shots = 5;
    Regime regime = Regime::single_domain;
    int episodes = 1024;       // random episodic evaluations
    int runs_per_episode = 16; // re-runs with resampled support/query samples
    uint64_t seed = 0;
};

/// acc[t] holds, for weights theta_t, the per-task accuracies tau <= t
/// (task-incremental) or the single accuracy on merged tasks 0..t
/// (class-incremental). ci95 is the matching half-width over episode means.
struct MetricsTable {
    Protocol mode = Protocol::task_incremental;
    int trained_tasks = 0;
    std::vector<std::vector<double>> acc;
    std::vector<std::vector<double>> ci95;
    int episodes = 0;
    int runs_per_episode = 0;
};

namespace detail {

inline int argmax_row(const Tensor<double>& t, int row) {
    int best = 0;
    for (int c = 1; c < t.cols(); ++c)
        if (t(row, c) > t(row, best)) best = c;
    return best;
}

struct AccAccum {
    std::vector<std::vector<std::vector<double>>> per_episode;  // [episode][t][entry]

    void add(const std::vector<std::vector<double>>& v) { per_episode.push_back(v); }

    void reduce(MetricsTable& out) const {
        const size_t n = per_episode.size();
        out.acc.assign(per_episode[0].size(), {});
        out.ci95.assign(per_episode[0].size(), {});
        for (size_t t = 0; t < per_episode[0].size(); ++t) {
            for (size_t j = 0; j < per_episode[0][t].size(); ++j) {
                double mean = 0;
                for (size_t e = 0; e < n; ++e) mean += per_episode[e][t][j];
                mean /= static_cast<double>(n);
                double var = 0;
                for (size_t e = 0; e < n; ++e) var += (per_episode[e][t][j] - mean) * (per_episode[e][t][j] - mean);
                var = n > 1 ? var / static_cast<double>(n - 1) : 0.0;
                out.acc[t].push_back(mean);
                out.ci95[t].push_back(1.96 * std::sqrt(var / static_cast<double>(n)));
            }
        }
    }
};

}  // namespace detail

/// Per-task task-incremental accuracy of one unrolled run.
template <class R>
std::vector<std::vector<double>> sequence_ti_accuracy(const Arch& arch, const std::vector<WeightBundle<R>>& thetas,
                                                      const PrototypeBank<R>& bank, const TaskSequence& seq) {
    const int T = seq.length();
    std::vector<std::vector<double>> acc(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t)
        for (int tau = 0; tau <= t; ++tau) {
            const Episode& ep = seq.tasks[static_cast<size_t>(tau)];
            Tensor<R> qe = forward_embed(arch, thetas[static_cast<size_t>(t)], ep.query_images);
            Tensor<double> lp = task_incremental_logprobs(qe, bank, tau);
            int hits = 0;
            for (int i = 0; i < lp.rows(); ++i) hits += detail::argmax_row(lp, i) == ep.query_labels[static_cast<size_t>(i)];
            acc[static_cast<size_t>(t)].push_back(static_cast<double>(hits) / lp.rows());
        }
    return acc;
}

/// Merged-range class-incremental accuracy of one unrolled run: entry t is
/// theta_t scored jointly on tasks 0..t.
template <class R>
std::vector<std::vector<double>> sequence_ci_accuracy(const Arch& arch, const std::vector<WeightBundle<R>>& thetas,
                                                      const PrototypeBank<R>& bank, const TaskSequence& seq) {
    const int T = seq.length();
    const int K = seq.tasks[0].way();
    std::vector<std::vector<double>> acc(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) {
        PrototypeBank<R> upto;
        for (int tau = 0; tau <= t; ++tau) {
            upto.task_protos.push_back(bank.task_protos[static_cast<size_t>(tau)]);
            upto.frozen_at.push_back(bank.frozen_at[static_cast<size_t>(tau)]);
        }
        long hits = 0, total = 0;
        for (int tau = 0; tau <= t; ++tau) {
            const Episode& ep = seq.tasks[static_cast<size_t>(tau)];
            Tensor<R> qe = forward_embed(arch, thetas[static_cast<size_t>(t)], ep.query_images);
            Tensor<double> lp = class_incremental_logprobs(qe, upto);
            for (int i = 0; i < lp.rows(); ++i) {
                hits += detail::argmax_row(lp, i) == tau * K + ep.query_labels[static_cast<size_t>(i)];
                total++;
            }
        }
        acc[static_cast<size_t>(t)].push_back(static_cast<double>(hits) / static_cast<double>(total));
    }
    return acc;
}

template <class R>
PrototypeBank<R> frozen_bank(const Arch& arch, const std::vector<WeightBundle<R>>& thetas, const TaskSequence& seq) {
    PrototypeBank<R> bank;
    for (int tau = 0; tau < seq.length(); ++tau) {
        const Episode& ep = seq.tasks[static_cast<size_t>(tau)];
        bank.task_protos.push_back(
            compute_prototypes(arch, thetas[static_cast<size_t>(tau)], ep.support_images, ep.support_labels, ep.way()));
        bank.frozen_at.push_back(tau);
    }
    return bank;
}

/// Episodic evaluation on held-out pools: `episodes` sampled sequences, each
/// re-run `runs_per_episode` times with resampled support/query samples
/// (classes held fixed), reported as mean with a 95% CI over episode means.
/// T_test may exceed the training T (extrapolation).
template <class R>
std::pair<MetricsTable, MetricsTable> evaluate_both(GeneratorState<R>& st, const std::vector<ClassPool>& test_pools,
                                                    const EvalConfig& cfg, int trained_tasks) {
    require(cfg.t_test >= 1, "evaluate: t_test must be >= 1");
    require(cfg.episodes >= 1 && cfg.runs_per_episode >= 1, "evaluate: episode counts must be positive");
    detail::AccAccum ti_acc, ci_acc;

    for (int e = 0; e < cfg.episodes; ++e) {
        Rng rng = Rng::derive(cfg.seed, 0xE0A1 + static_cast<uint64_t>(e));
        TaskSequence seq = sample_task_sequence(test_pools, cfg.t_test, cfg.regime, cfg.way, cfg.shots, cfg.query_shots, rng);
        std::vector<std::vector<double>> ti_sum, ci_sum;
        for (int r = 0; r < cfg.runs_per_episode; ++r) {
            TaskSequence run_seq = r == 0 ? seq : resample_sequence_samples(seq, test_pools, rng);
            std::vector<WeightBundle<R>> thetas = unroll(st, run_seq);
            PrototypeBank<R> bank = frozen_bank(st.arch, thetas, run_seq);
            const auto ti = sequence_ti_accuracy(st.arch, thetas, bank, run_seq);
            const auto ci = sequence_ci_accuracy(st.arch, thetas, bank, run_seq);
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
            for (double& v : row) v /= cfg.runs_per_episode;
        for (auto& row : ci_sum)
            for (double& v : row) v /= cfg.runs_per_episode;
        ti_acc.add(ti_sum);
        ci_acc.add(ci_sum);
    }

    MetricsTable ti, ci;
    ti.mode = Protocol::task_incremental;
    ci.mode = Protocol::class_incremental;
    ti.trained_tasks = ci.trained_tasks = trained_tasks;
    ti.episodes = ci.episodes = cfg.episodes;
    ti.runs_per_episode = ci.runs_per_episode = cfg.runs_per_episode;
    ti_acc.reduce(ti);
    ci_acc.reduce(ci);
    return {ti, ci};
}

template <class R>
MetricsTable evaluate(GeneratorState<R>& st, const std::vector<ClassPool>& test_pools, const EvalConfig& cfg,
                      Protocol protocol, int trained_tasks) {
    auto both = evaluate_both(st, test_pools, cfg, trained_tasks);
    return protocol == Protocol::task_incremental ? both.first : both.second;
}

// ---- forgetting / backward transfer ----

struct BackwardTransfer {
    // delta[tau][t] = acc[t][tau] - acc[tau][tau] for t > tau
    std::map<std::pair<int, int>, double> delta;
    double mean = 0;
};

inline BackwardTransfer backward_transfer(const MetricsTable& table) {
    require(table.mode == Protocol::task_incremental, "backward_transfer: task-incremental table required");
    BackwardTransfer bt;
    double sum = 0;
    int n = 0;
    for (size_t t = 0; t < table.acc.size(); ++t)
        for (size_t tau = 0; tau < table.acc[t].size(); ++tau) {
            if (tau >= table.acc.size() || tau >= static_cast<size_t>(t) + 1) continue;
            if (static_cast<size_t>(t) == tau) continue;
            const double d = table.acc[t][tau] - table.acc[tau][tau];
            bt.delta[{static_cast<int>(tau), static_cast<int>(t)}] = d;
            sum += d;
            n++;
        }
    bt.mean = n > 0 ? sum / n : 0.0;
    return bt;
}

// ---- metrics table CSV (long form) ----

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsTable>& tables) {
    std::ofstream f(path);
    require(f.good(), "write_metrics_csv: cannot open " + path);
    f << "mode,t,tau_or_range,acc,ci95\n";
    for (const auto& table : tables) {
        for (size_t t = 0; t < table.acc.size(); ++t)
            for (size_t j = 0; j < table.acc[t].size(); ++j) {
                const std::string tau = table.mode == Protocol::task_incremental
                                            ? std::to_string(j)
                                            : ("0-" + std::to_string(t));
                f << protocol_name(table.mode) << "," << t << "," << tau << "," << format_g(table.acc[t][j]) << ","
                  << format_g(table.ci95[t][j]) << "\n";
            }
    }
}

inline void write_metrics_svg(const std::string& path, const MetricsTable& table, const std::string& title) {
    std::vector<PlotSeries> series;
    std::vector<std::string> xticks;
    if (table.mode == Protocol::task_incremental) {
        for (size_t t = 0; t < table.acc.size(); ++t) {
            PlotSeries s;
            s.label = "theta_" + std::to_string(t);
            s.extrapolated = static_cast<int>(t) >= table.trained_tasks;
            for (size_t tau = 0; tau < table.acc[t].size(); ++tau) {
                s.x.push_back(static_cast<double>(tau));
                s.y.push_back(table.acc[t][tau]);
            }
            series.push_back(std::move(s));
        }
        for (size_t t = 0; t < table.acc.size(); ++t) xticks.push_back(std::to_string(t));
        write_svg_chart(path, title, "task", xticks, series);
    } else {
        PlotSeries trained, extra;
        trained.label = "trained range";
        extra.label = "extrapolated range";
        extra.extrapolated = true;
        for (size_t t = 0; t < table.acc.size(); ++t) {
            PlotSeries& s = static_cast<int>(t) < table.trained_tasks ? trained : extra;
            s.x.push_back(static_cast<double>(t));
            s.y.push_back(table.acc[t][0]);
            xticks.push_back("0-" + std::to_string(t));
        }
        series.push_back(std::move(trained));
        if (!extra.x.empty()) series.push_back(std::move(extra));
        write_svg_chart(path, title, "merged task range", xticks, series);
    }
}

// ---- MAML one-step connection ----

struct MamlReport {
    double max_rel_err_w = 0;
    double max_rel_err_b = 0;
    double prototype_alignment = 0;
};

/// Verifies that one SGD step on a label-independent logits layer matches
/// the closed form: dW_k = gamma/n * sum((1[y=k] - 1/C) f(x)), db_k likewise,
/// and that dW rows are the stated combination of class prototypes.
inline MamlReport maml_one_step_check(const Tensor<double>& embeds, const std::vector<int>& labels, int num_classes,
                                      double gamma, const Tensor<double>* w0 = nullptr,
                                      const Tensor<double>* b0 = nullptr) {
    const int n = embeds.rows(), dim = embeds.cols(), C = num_classes;
    require(n >= 1 && C >= 2, "maml check: need samples and at least 2 classes");
    require(static_cast<int>(labels.size()) == n, "maml check: label count mismatch");

    Tensor<double> W = w0 ? *w0 : Tensor<double>::zeros({C, dim});
    Tensor<double> b = b0 ? *b0 : Tensor<double>::zeros({C});
    require(W.shape == Shape{C, dim} && b.shape == Shape{C}, "maml check: bad init shapes");
    for (int k = 1; k < C; ++k) {
        for (int d = 0; d < dim; ++d)
            require(W(k, d) == W(0, d), "maml check: label-dependent W init rejected");
        require(b.data[static_cast<size_t>(k)] == b.data[0], "maml check: label-dependent b init rejected");
    }

    // one autodiff SGD step on the logits layer
    Tape<double> tp;
    Var wv = tp.leaf(W);
    Var bv = tp.leaf(b);
    Var logits = tp.add_rowvec(tp.matmul_nt(tp.constant(embeds), wv), bv);
    Var loss = nll_mean_var(tp, logits, labels);
    tp.backward(loss);
    Tensor<double> dW = tp.grad(wv);
    Tensor<double> db = tp.grad(bv);
    for (auto& v : dW.data) v *= -gamma;
    for (auto& v : db.data) v *= -gamma;

    // closed form
    Tensor<double> cW = Tensor<double>::zeros({C, dim});
    Tensor<double> cb = Tensor<double>::zeros({C});
    for (int k = 0; k < C; ++k)
        for (int i = 0; i < n; ++i) {
            const double w = (labels[static_cast<size_t>(i)] == k ? 1.0 : 0.0) - 1.0 / C;
            for (int d = 0; d < dim; ++d) cW(k, d) += gamma / n * w * embeds(i, d);
            cb.data[static_cast<size_t>(k)] += gamma / n * w;
        }

    MamlReport rep;
    // balanced supports make the true db exactly zero, so the bias errors are
    // measured against the natural per-class step size gamma/C
    double scale_w = 0;
    for (double v : cW.data) scale_w = std::max(scale_w, std::abs(v));
    const double scale_b = std::max(std::abs(gamma) / C, 1e-300);
    for (long i = 0; i < dW.size(); ++i)
        rep.max_rel_err_w = std::max(rep.max_rel_err_w, std::abs(dW.data[i] - cW.data[i]) / std::max(scale_w, 1e-300));
    for (long i = 0; i < db.size(); ++i)
        rep.max_rel_err_b = std::max(rep.max_rel_err_b, std::abs(db.data[i] - cb.data[i]) / scale_b);

    // dW rows expressed through class prototypes c_k and the mean embedding
    std::vector<int> counts(static_cast<size_t>(C), 0);
    Tensor<double> proto = Tensor<double>::zeros({C, dim});
    std::vector<double> mean_embed(static_cast<size_t>(dim), 0.0);
    for (int i = 0; i < n; ++i) {
        counts[static_cast<size_t>(labels[static_cast<size_t>(i)])]++;
        for (int d = 0; d < dim; ++d) {
            proto(labels[static_cast<size_t>(i)], d) += embeds(i, d);
            mean_embed[static_cast<size_t>(d)] += embeds(i, d) / n;
        }
    }
    for (int k = 0; k < C; ++k)
        for (int d = 0; d < dim; ++d) {
            const double ck = counts[static_cast<size_t>(k)] > 0 ? proto(k, d) / counts[static_cast<size_t>(k)] : 0.0;
            const double predicted =
                gamma * (static_cast<double>(counts[static_cast<size_t>(k)]) / n * ck - mean_embed[static_cast<size_t>(d)] / C);
            rep.prototype_alignment =
                std::max(rep.prototype_alignment, std::abs(dW(k, d) - predicted) / std::max(scale_w, 1e-12));
        }
    return rep;
}

/// Random-configuration sweep used by `check maml`: worst errors over
/// `num_configs` random (K, N, embed_dim, gamma) draws plus a gamma = 0 case.
inline MamlReport maml_check_random(int num_configs, uint64_t seed) {
    MamlReport worst;
    Rng rng(seed);
    for (int c = 0; c < num_configs; ++c) {
        const int K = 2 + rng.uniform_int(5);
        const int N = 1 + rng.uniform_int(4);
        const int dim = 2 + rng.uniform_int(7);
        const double gamma = c == 0 ? 0.0 : rng.uniform(0.05, 2.0);
        const int n = K * N;
        Tensor<double> embeds = random_normal<double>(rng, {n, dim}, 1.5);
        std::vector<int> labels;
        if (c % 2 == 0) {
            for (int k = 0; k < K; ++k)
                for (int s = 0; s < N; ++s) labels.push_back(k);
        } else {
            // unbalanced supports exercise a nonzero db
            for (int i = 0; i < n; ++i) labels.push_back(rng.uniform_int(K));
        }
        const MamlReport rep = maml_one_step_check(embeds, labels, K, gamma);
        worst.max_rel_err_w = std::max(worst.max_rel_err_w, rep.max_rel_err_w);
        worst.max_rel_err_b = std::max(worst.max_rel_err_b, rep.max_rel_err_b);
        worst.prototype_alignment = std::max(worst.prototype_alignment, rep.prototype_alignment);
    }
    return worst;
}

// ---- embedding export ----

/// One row per prototype and per query embedding under each theta_t; the
/// frozen prototypes repeat at every step they are in force.
template <class R>
void export_embeddings(GeneratorState<R>& st, const TaskSequence& seq, const std::string& path) {
    std::vector<WeightBundle<R>> thetas = unroll(st, seq);
    PrototypeBank<R> bank = frozen_bank(st.arch, thetas, seq);
    std::ofstream f(path);
    require(f.good(), "export_embeddings: cannot open " + path);
    f << "kind,task,class,step";
    for (int d = 0; d < st.arch.embed_dim; ++d) f << ",e" << d;
    f << "\n";
    for (int t = 0; t < seq.length(); ++t) {
        for (int tau = 0; tau <= t; ++tau) {
            const Tensor<R>& protos = bank.task_protos[static_cast<size_t>(tau)];
            for (int k = 0; k < protos.rows(); ++k) {
                f << "prototype," << tau << "," << k << "," << t;
                for (int d = 0; d < protos.cols(); ++d) f << "," << format_g(static_cast<double>(protos(k, d)));
                f << "\n";
            }
            const Episode& ep = seq.tasks[static_cast<size_t>(tau)];
            Tensor<R> qe = forward_embed(st.arch, thetas[static_cast<size_t>(t)], ep.query_images);
            for (int i = 0; i < qe.rows(); ++i) {
                f << "query," << tau << "," << ep.query_labels[static_cast<size_t>(i)] << "," << t;
                for (int d = 0; d < qe.cols(); ++d) f << "," << format_g(static_cast<double>(qe(i, d)));
                f << "\n";
            }
        }
    }
}

struct EmbeddingRow {
    std::string kind;
    int task = 0, cls = 0, step = 0;
    std::vector<double> values;
};

inline std::vector<EmbeddingRow> read_embeddings(const std::string& path) {
    std::ifstream f(path);
    require(f.good(), "read_embeddings: cannot open " + path);
    std::string line;
    std::getline(f, line);  // header
    std::vector<EmbeddingRow> rows;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        EmbeddingRow row;
        std::istringstream is(line);
        std::string tok;
        std::getline(is, row.kind, ',');
        std::getline(is, tok, ',');
        row.task = std::stoi(tok);
        std::getline(is, tok, ',');
        row.cls = std::stoi(tok);
        std::getline(is, tok, ',');
        row.step = std::stoi(tok);
        while (std::getline(is, tok, ',')) row.values.push_back(std::stod(tok));
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace cht
