#pragma once

#include <cstdio>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "cht/episodes.hpp"
#include "cht/generator.hpp"
#include "cht/target_cnn.hpp"

namespace cht {

enum class Objective { class_incremental, task_incremental, cross_entropy };
enum class PrototypeMode { frozen, recomputed };

inline std::string objective_name(Objective o) {
    switch (o) {
        case Objective::class_incremental: return "class_incremental";
        case Objective::task_incremental: return "task_incremental";
        default: return "cross_entropy";
    }
}

inline Objective objective_from_name(const std::string& s) {
    if (s == "class_incremental") return Objective::class_incremental;
    if (s == "task_incremental") return Objective::task_incremental;
    if (s == "cross_entropy") return Objective::cross_entropy;
    fail("unknown objective: " + s);
}

struct TrainConfig {
    int num_tasks = 3;
    int way = 5;
    int shots = 1;
    int query_shots = 5;
    double learning_rate = 1e-3;
    long lr_decay_steps = 100000;
    double lr_decay_rate = 0.97;
    long total_steps = 1;
    Objective objective = Objective::class_incremental;
    PrototypeMode prototype_mode = PrototypeMode::frozen;
    Regime regime = Regime::single_domain;
    int episodes_per_step = 1;
    long checkpoint_every = 0;  // 0 = only at the end
    long eval_every = 0;        // 0 = never
    double divergence_threshold = 1e4;
    uint64_t seed = 0;
};

inline void validate_train_config(const TrainConfig& cfg) {
    require(cfg.num_tasks >= 1, "train config: num_tasks must be >= 1");
    require(cfg.way >= 1 && cfg.shots >= 1 && cfg.query_shots >= 1, "train config: episode dims must be positive");
    require(cfg.learning_rate > 0, "train config: learning_rate must be positive");
    require(cfg.total_steps >= 1, "train config: total_steps must be >= 1");
    require(cfg.lr_decay_steps >= 1 && cfg.lr_decay_rate > 0, "train config: bad lr schedule");
    require(cfg.episodes_per_step >= 1, "train config: episodes_per_step must be >= 1");
}

inline double lr_at_step(const TrainConfig& cfg, long step) {
    return cfg.learning_rate * std::pow(cfg.lr_decay_rate, static_cast<double>(step) / static_cast<double>(cfg.lr_decay_steps));
}

// ---- prototypes and predictive distributions ----

/// c_k = mean over support embeddings with label k -> [way, embed_dim]
template <class R>
Var prototypes_var(Tape<R>& tp, Var embeds, const std::vector<int>& labels, int way) {
    const int S = tp.shape(embeds)[0];
    require(static_cast<int>(labels.size()) == S, "prototypes: label count mismatch");
    std::vector<int> counts(static_cast<size_t>(way), 0);
    for (int l : labels) {
        require(l >= 0 && l < way, "prototypes: label out of range");
        counts[static_cast<size_t>(l)]++;
    }
    for (int k = 0; k < way; ++k)
        require(counts[static_cast<size_t>(k)] > 0, "prototypes: label " + std::to_string(k) + " missing in support");
    Tensor<R> avg = Tensor<R>::zeros({way, S});
    for (int i = 0; i < S; ++i) avg(labels[static_cast<size_t>(i)], i) = R(1) / static_cast<R>(counts[static_cast<size_t>(labels[static_cast<size_t>(i)])]);
    return tp.matmul(tp.constant(std::move(avg)), embeds);
}

template <class R>
Tensor<R> compute_prototypes(const Arch& arch, const WeightBundle<R>& weights, const Tensor<float>& support_images,
                             const std::vector<int>& support_labels, int way) {
    Tape<R> tp;
    tp.grad_enabled = false;
    const std::vector<Var> slices = stage_slices(tp, bundle_to_slices(arch, weights));
    Var embeds = forward_embed_vars(tp, arch, slices, tp.constant(tensor_cast<R>(support_images)));
    return tp.val(prototypes_var(tp, embeds, support_labels, way));
}

/// -||q - p||^2 logits between query rows and prototype rows
template <class R>
Var neg_sqdist_var(Tape<R>& tp, Var queries, Var protos) {
    Var cross = tp.scale(tp.matmul_nt(queries, protos), R(2));
    cross = tp.add_colvec(cross, tp.scale(tp.rowwise_sqnorm(queries), R(-1)));
    return tp.add_rowvec(cross, tp.scale(tp.rowwise_sqnorm(protos), R(-1)));
}

/// mean negative log-likelihood of targets under row-wise log-softmax
template <class R>
Var nll_mean_var(Tape<R>& tp, Var logits, const std::vector<int>& targets) {
    Var lse = tp.logsumexp_rows(logits);
    Var picked = tp.pick_cols(logits, targets);
    return tp.scale(tp.mean_all(tp.sub(picked, lse)), R(-1));
}

/// Frozen class prototypes indexed by (task, label); entry (tau, k) is row k
/// of task_protos[tau], produced by the weights recorded in frozen_at[tau].
template <class R>
struct PrototypeBank {
    std::vector<Tensor<R>> task_protos;  // each [way, embed_dim]
    std::vector<int> frozen_at;          // theta step that produced each entry

    int num_tasks() const { return static_cast<int>(task_protos.size()); }
    int way() const { return task_protos.empty() ? 0 : task_protos[0].shape[0]; }
};

namespace detail {

template <class R>
std::vector<std::vector<double>> neg_sqdist_double(const Tensor<R>& queries, const std::vector<const Tensor<R>*>& protos) {
    const int M = queries.rows(), D = queries.cols();
    int P = 0;
    for (const auto* p : protos) P += p->rows();
    std::vector<std::vector<double>> logits(static_cast<size_t>(M), std::vector<double>(static_cast<size_t>(P)));
    for (int m = 0; m < M; ++m) {
        int col = 0;
        for (const auto* p : protos) {
            for (int k = 0; k < p->rows(); ++k, ++col) {
                double s = 0;
                for (int d = 0; d < D; ++d) {
                    const double diff = static_cast<double>(queries(m, d)) - static_cast<double>((*p)(k, d));
                    s += diff * diff;
                }
                logits[static_cast<size_t>(m)][static_cast<size_t>(col)] = -s;
            }
            }
    }
    return logits;
}

inline void log_softmax_rows_inplace(std::vector<std::vector<double>>& logits) {
    for (auto& row : logits) {
        double m = row[0];
        for (double v : row) m = std::max(m, v);
        double s = 0;
        for (double v : row) s += std::exp(v - m);
        const double lse = m + std::log(s);
        for (double& v : row) v -= lse;
    }
}

inline Tensor<double> to_tensor(const std::vector<std::vector<double>>& rows) {
    Tensor<double> out = Tensor<double>::zeros({static_cast<int>(rows.size()), static_cast<int>(rows[0].size())});
    for (size_t r = 0; r < rows.size(); ++r)
        for (size_t c = 0; c < rows[r].size(); ++c) out(static_cast<int>(r), static_cast<int>(c)) = rows[r][c];
    return out;
}

}  // namespace detail

/// log p(y=k | x, tau): softmax of -l2^2 over task tau's prototypes only.
template <class R>
Tensor<double> task_incremental_logprobs(const Tensor<R>& query_embeds, const PrototypeBank<R>& bank, int task) {
    require(task >= 0 && task < bank.num_tasks(), "task_incremental_logprobs: missing prototypes for task");
    auto logits = detail::neg_sqdist_double(query_embeds, {&bank.task_protos[static_cast<size_t>(task)]});
    detail::log_softmax_rows_inplace(logits);
    return detail::to_tensor(logits);
}

/// log p(y=k, tau | x): softmax of -l2^2 over all (task, class) prototypes;
/// output columns are task-major, label-minor.
template <class R>
Tensor<double> class_incremental_logprobs(const Tensor<R>& query_embeds, const PrototypeBank<R>& bank) {
    require(bank.num_tasks() > 0, "class_incremental_logprobs: empty bank");
    std::vector<const Tensor<R>*> protos;
    for (const auto& p : bank.task_protos) protos.push_back(&p);
    auto logits = detail::neg_sqdist_double(query_embeds, protos);
    detail::log_softmax_rows_inplace(logits);
    return detail::to_tensor(logits);
}

// ---- the accumulated objective (Algorithm 1) ----

template <class R>
struct ObjectiveResult {
    Var loss;                                     // scalar on the tape
    std::vector<std::vector<double>> cell;        // [t][tau] mean NLL, tau <= t
    std::vector<std::vector<Tensor<R>>> bank_at;  // bank snapshot after each step
};

/// Called after step t's losses are accumulated; may mutate the sequence to
/// model discarded supports (continual-access discipline tests).
using StepHook = std::function<void(int, TaskSequence&)>;

/// Unrolls the generator over the sequence and accumulates
/// J = sum_t sum_{tau<=t} NLL(Q^tau under theta_t), with prototypes computed
/// once per task (frozen) or re-embedded each step (recomputed). Cells are
/// mean-reduced over query samples, then summed.
template <class R>
ObjectiveResult<R> episode_objective_vars(Tape<R>& tp, const Arch& arch, const GeneratorConfig& gcfg,
                                          const GeneratorVars& vars, TaskSequence& seq, const TrainConfig& cfg,
                                          const StepHook& hook = nullptr) {
    const int T = seq.length();
    require(T >= 1, "episode objective: empty task sequence");
    const int K = seq.tasks[0].way();
    for (const auto& ep : seq.tasks) require(ep.way() == K, "episode objective: tasks disagree on way");
    if (cfg.objective == Objective::cross_entropy)
        require(arch.embed_dim == K,
                "cross entropy objective: embed_dim (" + std::to_string(arch.embed_dim) + ") must equal way (" +
                    std::to_string(K) + ")");

    ObjectiveResult<R> res;
    res.loss = tp.constant(Tensor<R>::zeros({1}));

    std::vector<Var> prev = stage_slices(tp, bundle_to_slices(arch, zero_weights<R>(arch)));
    std::vector<Var> frozen_protos;  // one per task, generated at its own step

    for (int t = 0; t < T; ++t) {
        Var simg = tp.constant(tensor_cast<R>(seq.tasks[static_cast<size_t>(t)].support_images));
        std::vector<Var> theta = generate_weights_vars(tp, arch, gcfg, vars, simg,
                                                       seq.tasks[static_cast<size_t>(t)].support_labels, prev);
        prev = theta;

        std::vector<Var> bank;
        if (cfg.objective != Objective::cross_entropy) {
            if (cfg.prototype_mode == PrototypeMode::frozen) {
                Var sembed = forward_embed_vars(tp, arch, theta, simg);
                frozen_protos.push_back(prototypes_var(tp, sembed, seq.tasks[static_cast<size_t>(t)].support_labels, K));
                bank = frozen_protos;
            } else {
                for (int tau = 0; tau <= t; ++tau) {
                    Var img = tp.constant(tensor_cast<R>(seq.tasks[static_cast<size_t>(tau)].support_images));
                    Var e = forward_embed_vars(tp, arch, theta, img);
                    bank.push_back(prototypes_var(tp, e, seq.tasks[static_cast<size_t>(tau)].support_labels, K));
                }
            }
        }

        res.cell.emplace_back();
        for (int tau = 0; tau <= t; ++tau) {
            const Episode& ep = seq.tasks[static_cast<size_t>(tau)];
            Var qimg = tp.constant(tensor_cast<R>(ep.query_images));
            Var qembed = forward_embed_vars(tp, arch, theta, qimg);
            Var cell;
            if (cfg.objective == Objective::cross_entropy) {
                cell = nll_mean_var(tp, qembed, ep.query_labels);
            } else if (cfg.objective == Objective::task_incremental) {
                cell = nll_mean_var(tp, neg_sqdist_var(tp, qembed, bank[static_cast<size_t>(tau)]), ep.query_labels);
            } else {
                Var logits = neg_sqdist_var(tp, qembed, tp.concat_rows(bank));
                std::vector<int> targets;
                for (int y : ep.query_labels) targets.push_back(tau * K + y);
                cell = nll_mean_var(tp, logits, targets);
            }
            const double v = static_cast<double>(tp.val(cell).data[0]);
            require(std::isfinite(v), "episode objective: non-finite loss at (t=" + std::to_string(t) +
                                          ", tau=" + std::to_string(tau) + ")");
            res.cell.back().push_back(v);
            res.loss = tp.add(res.loss, cell);
        }

        res.bank_at.emplace_back();
        if (cfg.objective != Objective::cross_entropy)
            for (Var p : bank) res.bank_at.back().push_back(tp.val(p));

        if (hook) hook(t, seq);
    }
    return res;
}

struct EpisodeLoss {
    double total = 0;
    std::vector<std::vector<double>> cell;
};

template <class R>
EpisodeLoss episode_objective(GeneratorState<R>& st, TaskSequence seq, const TrainConfig& cfg) {
    Tape<R> tp;
    tp.grad_enabled = false;
    GeneratorVars vars = stage_generator(tp, st);
    ObjectiveResult<R> res = episode_objective_vars(tp, st.arch, st.cfg, vars, seq, cfg);
    return {static_cast<double>(tp.val(res.loss).data[0]), res.cell};
}

template <class R>
EpisodeLoss cross_entropy_objective(GeneratorState<R>& st, TaskSequence seq, TrainConfig cfg) {
    cfg.objective = Objective::cross_entropy;
    return episode_objective(st, std::move(seq), cfg);
}

// ---- SGD ----

/// Plain SGD over every staged parameter; untouched gradients are zero.
template <class R>
void sgd_step(GeneratorState<R>& st, Tape<R>& tp, GeneratorVars& vars, double lr, long step_index) {
    std::vector<Var> leaves;
    vars.each([&](const std::string&, Var& v) { leaves.push_back(v); });
    std::vector<Tensor<R>*> tensors;
    std::vector<std::string> names;
    st.for_each_param([&](const std::string& n, Tensor<R>& t) {
        tensors.push_back(&t);
        names.push_back(n);
    });
    require(leaves.size() == tensors.size(), "sgd_step: staged vars do not match state");
    for (size_t i = 0; i < leaves.size(); ++i) {
        if (!tp.grad_touched(leaves[i])) continue;
        const Tensor<R>& g = tp.grad(leaves[i]);
        require(g.all_finite(), "sgd: non-finite gradient in " + names[i] + " at step " + std::to_string(step_index));
        for (long j = 0; j < g.size(); ++j) tensors[i]->data[j] -= static_cast<R>(lr) * g.data[j];
    }
    st.step++;
}

// ---- episodic training loop ----

template <class R>
struct TrainHooks {
    std::function<void(long, GeneratorState<R>&)> on_checkpoint;
    // returns (task_incremental_acc, class_incremental_acc) for the metrics log
    std::function<std::pair<double, double>(long, GeneratorState<R>&)> on_eval;
};

inline std::string format_g(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

/// Episodic SGD per the training protocol: one sampled task sequence per
/// step (episodes_per_step averages several), exponential lr decay,
/// divergence guards, append-only metrics CSV.
template <class R>
void train(GeneratorState<R>& st, const std::vector<ClassPool>& pools, const TrainConfig& cfg,
           const std::string& metrics_path = "", const TrainHooks<R>& hooks = {}) {
    validate_train_config(cfg);
    Rng rng = Rng::derive(cfg.seed, 0x7124);

    std::ofstream metrics;
    if (!metrics_path.empty()) {
        metrics.open(metrics_path);
        require(metrics.good(), "train: cannot open metrics file " + metrics_path);
        metrics << "step,lr,J_total";
        for (int t = 0; t < cfg.num_tasks; ++t)
            for (int tau = 0; tau <= t; ++tau) metrics << ",J_" << t << "_" << tau;
        metrics << ",eval_acc_ti,eval_acc_ci\n";
    }

    for (long step = 0; step < cfg.total_steps; ++step) {
        const double lr = lr_at_step(cfg, step);

        Tape<R> tp;
        GeneratorVars vars = stage_generator(tp, st);
        Var total = tp.constant(Tensor<R>::zeros({1}));
        std::vector<std::vector<double>> cells;
        for (int e = 0; e < cfg.episodes_per_step; ++e) {
            TaskSequence seq =
                sample_task_sequence(pools, cfg.num_tasks, cfg.regime, cfg.way, cfg.shots, cfg.query_shots, rng);
            ObjectiveResult<R> res = episode_objective_vars(tp, st.arch, st.cfg, vars, seq, cfg);
            total = tp.add(total, res.loss);
            if (e == 0) {
                cells = res.cell;
            } else {
                for (size_t t = 0; t < cells.size(); ++t)
                    for (size_t tau = 0; tau < cells[t].size(); ++tau) cells[t][tau] += res.cell[t][tau];
            }
        }
        if (cfg.episodes_per_step > 1) {
            total = tp.scale(total, R(1) / static_cast<R>(cfg.episodes_per_step));
            for (auto& row : cells)
                for (double& v : row) v /= cfg.episodes_per_step;
        }

        const double J = static_cast<double>(tp.val(total).data[0]);
        require(std::isfinite(J), "train: non-finite loss at step " + std::to_string(step));
        require(J <= cfg.divergence_threshold,
                "train: diverged at step " + std::to_string(step) + " (loss " + format_g(J) + " > " +
                    format_g(cfg.divergence_threshold) + ")");

        tp.backward(total);
        sgd_step(st, tp, vars, lr, step);

        std::string eval_ti, eval_ci;
        if (hooks.on_eval && cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.total_steps)) {
            const auto acc = hooks.on_eval(step + 1, st);
            eval_ti = format_g(acc.first);
            eval_ci = format_g(acc.second);
        }
        if (metrics.is_open()) {
            metrics << (step + 1) << "," << format_g(lr) << "," << format_g(J);
            for (const auto& row : cells)
                for (double v : row) metrics << "," << format_g(v);
            metrics << "," << eval_ti << "," << eval_ci << "\n";
        }
        if (hooks.on_checkpoint && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)
            hooks.on_checkpoint(step + 1, st);
    }
    if (hooks.on_checkpoint && !(cfg.checkpoint_every > 0 && cfg.total_steps % cfg.checkpoint_every == 0))
        hooks.on_checkpoint(cfg.total_steps, st);
    if (metrics.is_open()) metrics.flush();
}

}  // namespace cht
