#pragma once

#include <string>
#include <vector>

#include "cht/learner.hpp"

namespace cht {

/// Constant ProtoNet: one conventionally trained embedding CNN with the same
/// architecture as the generated target network. Weights live in slice
/// layout (what forward_embed consumes); bundle() converts for IO.
template <class R>
struct ConstPNState {
    Arch arch;
    std::vector<Tensor<R>> slices;
    long step = 0;

    WeightBundle<R> bundle() const { return slices_to_bundle(arch, slices); }
};

struct ConstPNConfig {
    int eval_way = 5;        // the K the baseline will be evaluated with
    int way_multiplier = 5;  // training episodes use way_multiplier * eval_way classes
    int shots = 1;
    int query_shots = 5;
    double learning_rate = 1e-2;
    long lr_decay_steps = 100000;
    double lr_decay_rate = 0.97;
    long total_steps = 1000;
    double divergence_threshold = 1e4;
    uint64_t seed = 0;
};

template <class R>
ConstPNState<R> constpn_init(const Arch& arch, uint64_t seed) {
    ConstPNState<R> st;
    st.arch = arch;
    Rng rng = Rng::derive(seed, 0xC057);
    WeightBundle<R> w;
    for (const auto& e : shape_table(arch)) {
        if (e.name.find("conv") != std::string::npos) {
            w.tensors.push_back(random_truncated_normal<R>(rng, e.shape, std::sqrt(2.0 / (9.0 * e.shape[2]))));
        } else if (e.name.find("bn_scale") != std::string::npos) {
            w.tensors.push_back(Tensor<R>::full(e.shape, R(1)));
        } else if (e.name == "dense.w") {
            w.tensors.push_back(random_truncated_normal<R>(rng, e.shape, std::sqrt(1.0 / e.shape[0])));
        } else {
            w.tensors.push_back(Tensor<R>::zeros(e.shape));
        }
    }
    st.slices = bundle_to_slices(arch, w);
    return st;
}

/// Episodic prototypical training on way_multiplier*K-way episodes, falling
/// back to the largest feasible way with a warning.
template <class R>
ConstPNState<R> constpn_train(const std::vector<ClassPool>& pools, const Arch& arch, const ConstPNConfig& cfg,
                              const std::string& metrics_path = "") {
    require(!pools.empty(), "constpn_train: no pools");
    require(cfg.total_steps >= 1 && cfg.learning_rate > 0, "constpn_train: bad config");
    int min_classes = pools[0].num_classes();
    for (const auto& p : pools) min_classes = std::min(min_classes, p.num_classes());
    int train_way = cfg.way_multiplier * cfg.eval_way;
    if (train_way > min_classes) {
        warn("constpn: pool supports only " + std::to_string(min_classes) + "-way training, requested " +
             std::to_string(train_way) + "-way; falling back");
        train_way = min_classes;
    }
    require(train_way >= 2, "constpn_train: need at least 2 classes");

    ConstPNState<R> st = constpn_init<R>(arch, cfg.seed);
    Rng rng = Rng::derive(cfg.seed, 0x9a11);

    std::ofstream metrics;
    if (!metrics_path.empty()) {
        metrics.open(metrics_path);
        require(metrics.good(), "constpn_train: cannot open metrics file " + metrics_path);
        metrics << "step,lr,J_total\n";
    }

    for (long step = 0; step < cfg.total_steps; ++step) {
        const double lr = cfg.learning_rate * std::pow(cfg.lr_decay_rate, static_cast<double>(step) / cfg.lr_decay_steps);
        const ClassPool& pool = pools[static_cast<size_t>(pools.size() == 1 ? 0 : rng.uniform_int(static_cast<int>(pools.size())))];
        Episode ep = sample_episode(pool, train_way, cfg.shots, cfg.query_shots, rng);

        Tape<R> tp;
        std::vector<Var> slices;
        for (const auto& t : st.slices) slices.push_back(tp.leaf(t));
        Var sembed = forward_embed_vars(tp, arch, slices, tp.constant(tensor_cast<R>(ep.support_images)));
        Var protos = prototypes_var(tp, sembed, ep.support_labels, train_way);
        Var qembed = forward_embed_vars(tp, arch, slices, tp.constant(tensor_cast<R>(ep.query_images)));
        Var loss = nll_mean_var(tp, neg_sqdist_var(tp, qembed, protos), ep.query_labels);

        const double J = static_cast<double>(tp.val(loss).data[0]);
        require(std::isfinite(J), "constpn_train: non-finite loss at step " + std::to_string(step));
        require(J <= cfg.divergence_threshold, "constpn_train: diverged at step " + std::to_string(step));
        tp.backward(loss);
        for (size_t i = 0; i < slices.size(); ++i) {
            if (!tp.grad_touched(slices[i])) continue;
            const Tensor<R>& g = tp.grad(slices[i]);
            require(g.all_finite(), "constpn_train: non-finite gradient at step " + std::to_string(step));
            for (long j = 0; j < g.size(); ++j) st.slices[i].data[j] -= static_cast<R>(lr) * g.data[j];
        }
        st.step++;
        if (metrics.is_open()) metrics << (step + 1) << "," << format_g(lr) << "," << format_g(J) << "\n";
    }
    return st;
}

/// Prototype bank from the fixed CNN: every task embedded independently.
template <class R>
PrototypeBank<R> constpn_bank(const ConstPNState<R>& st, const TaskSequence& seq) {
    PrototypeBank<R> bank;
    const WeightBundle<R> w = st.bundle();
    for (int tau = 0; tau < seq.length(); ++tau) {
        const Episode& ep = seq.tasks[static_cast<size_t>(tau)];
        bank.task_protos.push_back(compute_prototypes(st.arch, w, ep.support_images, ep.support_labels, ep.way()));
        bank.frozen_at.push_back(tau);
    }
    return bank;
}

struct BaselineAccuracy {
    std::vector<double> task_incremental;   // per task
    std::vector<double> class_incremental;  // per merged range 0..t
};

/// ConstPN evaluation: stateless across tasks, so task-incremental accuracy
/// is per task and identical no matter how many tasks preceded it.
template <class R>
BaselineAccuracy constpn_eval(const ConstPNState<R>& st, const TaskSequence& seq) {
    PrototypeBank<R> bank = constpn_bank(st, seq);
    const int T = seq.length();
    const int K = seq.tasks[0].way();
    BaselineAccuracy out;

    const WeightBundle<R> w = st.bundle();
    std::vector<Tensor<R>> qembeds;
    for (const Episode& ep : seq.tasks) qembeds.push_back(forward_embed(st.arch, w, ep.query_images));

    for (int tau = 0; tau < T; ++tau) {
        const Tensor<double> lp = task_incremental_logprobs(qembeds[static_cast<size_t>(tau)], bank, tau);
        int hits = 0;
        for (int i = 0; i < lp.rows(); ++i) {
            int best = 0;
            for (int c = 1; c < lp.cols(); ++c)
                if (lp(i, c) > lp(i, best)) best = c;
            hits += best == seq.tasks[static_cast<size_t>(tau)].query_labels[static_cast<size_t>(i)];
        }
        out.task_incremental.push_back(static_cast<double>(hits) / lp.rows());
    }

    for (int t = 0; t < T; ++t) {
        PrototypeBank<R> upto;
        for (int tau = 0; tau <= t; ++tau) {
            upto.task_protos.push_back(bank.task_protos[static_cast<size_t>(tau)]);
            upto.frozen_at.push_back(tau);
        }
        long hits = 0, total = 0;
        for (int tau = 0; tau <= t; ++tau) {
            const Tensor<double> lp = class_incremental_logprobs(qembeds[static_cast<size_t>(tau)], upto);
            for (int i = 0; i < lp.rows(); ++i) {
                int best = 0;
                for (int c = 1; c < lp.cols(); ++c)
                    if (lp(i, c) > lp(i, best)) best = c;
                hits += best == tau * K + seq.tasks[static_cast<size_t>(tau)].query_labels[static_cast<size_t>(i)];
                total++;
            }
        }
        out.class_incremental.push_back(static_cast<double>(hits) / static_cast<double>(total));
    }
    return out;
}

/// All tasks concatenated into one (T*K)-way episode with labels remapped to
/// tau*K + k.
inline Episode merge_tasks(const TaskSequence& seq) {
    require(seq.length() >= 1, "merge_tasks: empty sequence");
    const int K = seq.tasks[0].way();
    Episode merged;
    merged.domain_id = seq.tasks[0].domain_id;
    const Shape img = seq.tasks[0].support_images.shape;
    long ssz = 0, qsz = 0;
    for (const Episode& ep : seq.tasks) {
        require(ep.way() == K, "merge_tasks: tasks disagree on way");
        require(ep.support_images.shape[1] == img[1] && ep.support_images.shape[2] == img[2] &&
                    ep.support_images.shape[3] == img[3],
                "merge_tasks: image shapes disagree across tasks");
        ssz += ep.support_images.size();
        qsz += ep.query_images.size();
    }
    merged.support_images = Tensor<float>::zeros({0});
    merged.support_images.shape = {0, img[1], img[2], img[3]};
    merged.support_images.data.reserve(static_cast<size_t>(ssz));
    merged.query_images.shape = {0, img[1], img[2], img[3]};
    merged.query_images.data.reserve(static_cast<size_t>(qsz));
    for (int tau = 0; tau < seq.length(); ++tau) {
        const Episode& ep = seq.tasks[static_cast<size_t>(tau)];
        merged.support_images.data.insert(merged.support_images.data.end(), ep.support_images.data.begin(),
                                          ep.support_images.data.end());
        merged.support_images.shape[0] += ep.support_images.shape[0];
        merged.query_images.data.insert(merged.query_images.data.end(), ep.query_images.data.begin(),
                                        ep.query_images.data.end());
        merged.query_images.shape[0] += ep.query_images.shape[0];
        for (int y : ep.support_labels) merged.support_labels.push_back(tau * K + y);
        for (int y : ep.query_labels) merged.query_labels.push_back(tau * K + y);
        for (const auto& id : ep.class_map) merged.class_map.push_back(id);
        for (int ci : ep.class_index) merged.class_index.push_back(ci);
        merged.support_sample_idx.insert(merged.support_sample_idx.end(), ep.support_sample_idx.begin(),
                                         ep.support_sample_idx.end());
        merged.query_sample_idx.insert(merged.query_sample_idx.end(), ep.query_sample_idx.begin(),
                                       ep.query_sample_idx.end());
    }
    return merged;
}

/// Merged-HT: one generate_weights call on the concatenated support set of a
/// state trained with T=1 on (T*K)-way episodes, scored over the merged
/// label space.
template <class R>
double merged_ht_eval(GeneratorState<R>& st, const TaskSequence& seq) {
    Episode merged = merge_tasks(seq);
    require(merged.way() <= st.cfg.label_vocab,
            "merged_ht_eval: merged way " + std::to_string(merged.way()) + " exceeds label_vocab");
    WeightBundle<R> theta = generate_weights(st, merged, zero_weights<R>(st.arch));
    PrototypeBank<R> bank;
    bank.task_protos.push_back(compute_prototypes(st.arch, theta, merged.support_images, merged.support_labels, merged.way()));
    bank.frozen_at.push_back(0);
    Tensor<R> qembed = forward_embed(st.arch, theta, merged.query_images);
    Tensor<double> lp = class_incremental_logprobs(qembed, bank);
    int hits = 0;
    for (int i = 0; i < lp.rows(); ++i) {
        int best = 0;
        for (int c = 1; c < lp.cols(); ++c)
            if (lp(i, c) > lp(i, best)) best = c;
        hits += best == merged.query_labels[static_cast<size_t>(i)];
    }
    return static_cast<double>(hits) / lp.rows();
}

}  // namespace cht
