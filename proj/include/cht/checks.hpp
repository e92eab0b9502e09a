#pragma once

// Numerical verifiers wired to `cht check`. The loss-matrix oracle here is
// deliberately scalar-loop code with no tape or Eigen on its path.

#include <string>
#include <vector>

#include "cht/eval.hpp"
#include "cht/learner.hpp"

namespace cht {

inline constexpr double kMamlTolerance = 1e-5;
inline constexpr double kOracleTolerance = 1e-5;
inline constexpr double kGradTolDouble = 1e-5;
inline constexpr double kGradTolFloat = 1e-3;
// FD entries are compared relatively only above this fraction of the largest
// gradient magnitude in the group; float32 FD noise dominates below it.
inline constexpr double kGradFloorFracFloat = 0.05;
inline constexpr double kGradFloorFracDouble = 1e-6;

namespace checks {

inline Arch tiny_arch() {
    Arch a;
    a.num_blocks = 1;
    a.channels = 2;
    a.embed_dim = 4;
    a.in_height = a.in_width = 6;
    return a;
}

inline GeneratorConfig tiny_generator_config() {
    GeneratorConfig c;
    c.feat_channels = {2};
    c.act_channels = {2};
    c.trans_layers = 1;
    c.trans_heads = 1;
    c.model_dim = 8;
    c.ff_dim = 12;
    c.label_embed_dim = 3;
    c.label_vocab = 8;
    return c;
}

// scalar-loop forward pass in double (independent verification path)
template <class R>
std::vector<std::vector<double>> plain_forward(const Arch& arch, const WeightBundle<R>& w, const Tensor<float>& images) {
    const int B = images.shape[0];
    int H = images.shape[1], W = images.shape[2], C = images.shape[3];
    std::vector<double> act(images.data.begin(), images.data.end());
    auto at = [&](int b, int y, int x, int c) { return ((static_cast<long>(b) * H + y) * W + x) * C + c; };

    for (int l = 0; l < arch.num_blocks; ++l) {
        const int cout = arch.channels;
        const Tensor<R>& kern = w.tensors[static_cast<size_t>(3 * l)];
        const Tensor<R>& scale = w.tensors[static_cast<size_t>(3 * l + 1)];
        const Tensor<R>& offset = w.tensors[static_cast<size_t>(3 * l + 2)];
        std::vector<double> conv(static_cast<size_t>(B) * H * W * cout, 0.0);
        for (int b = 0; b < B; ++b)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    for (int co = 0; co < cout; ++co) {
                        double s = 0;
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx) {
                                const int yy = y + ky - 1, xx = x + kx - 1;
                                if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                                for (int ci = 0; ci < C; ++ci)
                                    s += static_cast<double>(kern.data[static_cast<size_t>(((ky * 3 + kx) * C + ci) * cout + co)]) *
                                         act[static_cast<size_t>(at(b, yy, xx, ci))];
                            }
                        conv[(((static_cast<size_t>(b) * H + y) * W + x) * cout) + co] = s;
                    }
        const double m = static_cast<double>(B) * H * W;
        for (int co = 0; co < cout; ++co) {
            double mean = 0, var = 0;
            for (size_t i = co; i < conv.size(); i += cout) mean += conv[i];
            mean /= m;
            for (size_t i = co; i < conv.size(); i += cout) var += (conv[i] - mean) * (conv[i] - mean);
            var /= m;
            const double inv = 1.0 / std::sqrt(var + kBnEps);
            for (size_t i = co; i < conv.size(); i += cout) {
                double v = static_cast<double>(scale.data[static_cast<size_t>(co)]) * (conv[i] - mean) * inv +
                           static_cast<double>(offset.data[static_cast<size_t>(co)]);
                conv[i] = v > 0 ? v : 0;
            }
        }
        const int Ho = H / 2, Wo = W / 2;
        std::vector<double> pooled(static_cast<size_t>(B) * Ho * Wo * cout);
        for (int b = 0; b < B; ++b)
            for (int y = 0; y < Ho; ++y)
                for (int x = 0; x < Wo; ++x)
                    for (int co = 0; co < cout; ++co) {
                        auto cat = [&](int yy, int xx) {
                            return conv[(((static_cast<size_t>(b) * H + yy) * W + xx) * cout) + co];
                        };
                        pooled[(((static_cast<size_t>(b) * Ho + y) * Wo + x) * cout) + co] =
                            std::max(std::max(cat(2 * y, 2 * x), cat(2 * y, 2 * x + 1)),
                                     std::max(cat(2 * y + 1, 2 * x), cat(2 * y + 1, 2 * x + 1)));
                    }
        act = std::move(pooled);
        H = Ho;
        W = Wo;
        C = cout;
    }

    const int fd = H * W * C;
    const Tensor<R>& dw = w.tensors[static_cast<size_t>(3 * arch.num_blocks)];
    std::vector<std::vector<double>> out(static_cast<size_t>(B), std::vector<double>(static_cast<size_t>(arch.embed_dim), 0.0));
    for (int b = 0; b < B; ++b) {
        for (int f = 0; f < fd; ++f)
            for (int e = 0; e < arch.embed_dim; ++e)
                out[static_cast<size_t>(b)][static_cast<size_t>(e)] +=
                    act[static_cast<size_t>(b) * fd + f] * static_cast<double>(dw.data[static_cast<size_t>(f) * arch.embed_dim + e]);
        if (arch.dense_bias)
            for (int e = 0; e < arch.embed_dim; ++e)
                out[static_cast<size_t>(b)][static_cast<size_t>(e)] +=
                    static_cast<double>(w.tensors[static_cast<size_t>(3 * arch.num_blocks + 1)].data[static_cast<size_t>(e)]);
    }
    return out;
}

inline double plain_sqdist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

/// Nested-loop accumulation of the class-incremental objective given the
/// unrolled weights: Algorithm 1 written out longhand.
template <class R>
double plain_objective(const Arch& arch, const std::vector<WeightBundle<R>>& thetas, const TaskSequence& seq) {
    const int T = seq.length();
    const int K = seq.tasks[0].way();
    std::vector<std::vector<std::vector<double>>> bank;
    for (int tau = 0; tau < T; ++tau) {
        const auto embeds = plain_forward(arch, thetas[static_cast<size_t>(tau)], seq.tasks[static_cast<size_t>(tau)].support_images);
        std::vector<std::vector<double>> protos(static_cast<size_t>(K), std::vector<double>(embeds[0].size(), 0.0));
        std::vector<int> counts(static_cast<size_t>(K), 0);
        for (size_t i = 0; i < embeds.size(); ++i) {
            const int y = seq.tasks[static_cast<size_t>(tau)].support_labels[i];
            counts[static_cast<size_t>(y)]++;
            for (size_t d = 0; d < embeds[i].size(); ++d) protos[static_cast<size_t>(y)][d] += embeds[i][d];
        }
        for (int k = 0; k < K; ++k)
            for (double& v : protos[static_cast<size_t>(k)]) v /= counts[static_cast<size_t>(k)];
        bank.push_back(std::move(protos));
    }

    double J = 0;
    for (int t = 0; t < T; ++t)
        for (int tau = 0; tau <= t; ++tau) {
            const Episode& ep = seq.tasks[static_cast<size_t>(tau)];
            const auto qembeds = plain_forward(arch, thetas[static_cast<size_t>(t)], ep.query_images);
            double cell = 0;
            for (size_t i = 0; i < qembeds.size(); ++i) {
                std::vector<double> logits;
                for (int tp = 0; tp <= t; ++tp)
                    for (int k = 0; k < K; ++k) logits.push_back(-plain_sqdist(qembeds[i], bank[static_cast<size_t>(tp)][static_cast<size_t>(k)]));
                double mx = logits[0];
                for (double v : logits) mx = std::max(mx, v);
                double lse = 0;
                for (double v : logits) lse += std::exp(v - mx);
                lse = mx + std::log(lse);
                cell -= logits[static_cast<size_t>(tau * K + ep.query_labels[i])] - lse;
            }
            J += cell / static_cast<double>(qembeds.size());
        }
    return J;
}

}  // namespace checks

struct OracleCheckRow {
    int num_tasks = 0;
    double implementation = 0;
    double oracle = 0;
    double rel_err = 0;
    bool ok = false;
};

struct OracleCheckReport {
    std::vector<OracleCheckRow> rows;
    bool ok = true;
};

/// episode_objective against the longhand oracle for T = 1..3 on a tiny
/// model (channels=2, embed_dim=4, K=3, N=2).
inline OracleCheckReport check_loss_oracle(uint64_t seed = 2024) {
    const Arch arch = checks::tiny_arch();
    const GeneratorConfig gcfg = checks::tiny_generator_config();
    const ClassPool pool = make_synthetic_pool(8, 10, {6, 6, 1}, seed);
    OracleCheckReport rep;
    for (int T = 1; T <= 3; ++T) {
        auto st = init_generator<double>(gcfg, arch, seed + static_cast<uint64_t>(T));
        Rng rng(seed + 100 + static_cast<uint64_t>(T));
        TaskSequence seq = sample_task_sequence({pool}, T, Regime::single_domain, 3, 2, 2, rng);
        TrainConfig cfg;
        cfg.num_tasks = T;
        const EpisodeLoss impl = episode_objective(st, seq, cfg);
        const double want = checks::plain_objective(arch, unroll(st, seq), seq);
        OracleCheckRow row;
        row.num_tasks = T;
        row.implementation = impl.total;
        row.oracle = want;
        row.rel_err = std::abs(impl.total - want) / std::max(std::abs(want), 1e-12);
        row.ok = row.rel_err <= kOracleTolerance;
        rep.ok = rep.ok && row.ok;
        rep.rows.push_back(row);
    }
    return rep;
}

struct GradientCheckGroup {
    std::string name;
    double max_rel = 0;
    bool ok = true;
};

struct GradientCheckReport {
    std::vector<GradientCheckGroup> float_groups, double_groups;
    double recursion_grad_mass = 0;  // |grad| through theta_{t-1} with support tokens ablated
    bool ok = true;
};

/// Central finite differences against autodiff on the full unrolled T=2
/// objective, float32 and float64, sampling a few entries per tensor group.
/// Also confirms gradient flow through the previous-weights recursion by
/// ablating the support tokens at the final step.
inline GradientCheckReport check_unrolled_gradients(uint64_t seed = 7, int entries_per_tensor = 4) {
    const Arch arch = checks::tiny_arch();
    const GeneratorConfig gcfg = checks::tiny_generator_config();
    const ClassPool pool = make_synthetic_pool(8, 10, {6, 6, 1}, seed);
    Rng srng(seed + 5);
    const TaskSequence seq = sample_task_sequence({pool}, 2, Regime::single_domain, 3, 2, 2, srng);
    TrainConfig cfg;
    cfg.num_tasks = 2;

    GradientCheckReport rep;

    // FD oracle always runs in float64 (small h would drown in float32
    // quantization noise and large h crosses relu/maxpool kinks); the tested
    // autodiff runs at the lane's own precision on the same parameter point.
    auto objective_f64 = [&](GeneratorState<double>& s) {
        Tape<double> tp;
        tp.grad_enabled = false;
        GeneratorVars vars = stage_generator(tp, s);
        TaskSequence local = seq;
        ObjectiveResult<double> res = episode_objective_vars(tp, arch, gcfg, vars, local, cfg);
        return tp.val(res.loss).data[0];
    };

    auto lane = [&](auto real_tag, double h, double tol, double floor_frac, std::vector<GradientCheckGroup>& out) {
        using R = decltype(real_tag);
        auto st = init_generator<R>(gcfg, arch, seed);

        Tape<R> tp;
        GeneratorVars vars = stage_generator(tp, st);
        std::vector<Var> leaves;
        vars.each([&](const std::string&, Var& v) { leaves.push_back(v); });
        TaskSequence local = seq;
        ObjectiveResult<R> res = episode_objective_vars(tp, arch, gcfg, vars, local, cfg);
        tp.backward(res.loss);

        GeneratorState<double> fd_state = init_generator<double>(gcfg, arch, seed);
        std::vector<Tensor<double>*> fd_params;
        fd_state.for_each_param([&](const std::string&, Tensor<double>& t) { fd_params.push_back(&t); });
        std::vector<std::pair<std::string, Tensor<R>*>> params;
        st.for_each_param([&](const std::string& n, Tensor<R>& t) { params.emplace_back(n, &t); });
        for (size_t p = 0; p < params.size(); ++p)
            for (long i = 0; i < params[p].second->size(); ++i)
                fd_params[p]->data[i] = static_cast<double>(params[p].second->data[i]);

        double gmax = 0;
        for (size_t p = 0; p < params.size(); ++p)
            if (tp.grad_touched(leaves[p]))
                for (R g : tp.grad(leaves[p]).data) gmax = std::max(gmax, std::abs(static_cast<double>(g)));

        Rng erng(seed + 11);
        for (size_t p = 0; p < params.size(); ++p) {
            GradientCheckGroup group;
            group.name = params[p].first;
            Tensor<double>& tensor = *fd_params[p];
            const Tensor<R> autodiff =
                tp.grad_touched(leaves[p]) ? tp.grad(leaves[p]) : Tensor<R>::zeros(params[p].second->shape);
            const int samples = static_cast<int>(std::min<long>(entries_per_tensor, tensor.size()));
            for (int s = 0; s < samples; ++s) {
                const long i = erng.uniform_int(static_cast<int>(tensor.size()));
                const double orig = tensor.data[i];
                tensor.data[i] = orig + h;
                const double fp = objective_f64(fd_state);
                tensor.data[i] = orig - h;
                const double fm = objective_f64(fd_state);
                tensor.data[i] = orig;
                const double fd = (fp - fm) / (2 * h);
                const double ad = static_cast<double>(autodiff.data[i]);
                if (std::max(std::abs(fd), std::abs(ad)) < floor_frac * gmax) continue;
                group.max_rel = std::max(group.max_rel, std::abs(fd - ad) / std::max(std::abs(fd), std::abs(ad)));
            }
            group.ok = group.max_rel <= tol;
            rep.ok = rep.ok && group.ok;
            out.push_back(std::move(group));
        }
    };

    lane(float{}, 1e-5, kGradTolFloat, kGradFloorFracFloat, rep.float_groups);
    lane(double{}, 1e-5, kGradTolDouble, kGradFloorFracDouble, rep.double_groups);

    // recursion-path flow: zero the support tokens at the final step and
    // confirm gradient still reaches the step-0 generation
    {
        auto st = init_generator<float>(gcfg, arch, seed);
        Tape<float> tp;
        GeneratorVars vars = stage_generator(tp, st);
        std::vector<Var> zero = stage_slices(tp, bundle_to_slices(arch, zero_weights<float>(arch)));
        Var img0 = tp.constant(tensor_cast<float>(seq.tasks[0].support_images));
        std::vector<Var> theta0 = generate_weights_vars(tp, arch, gcfg, vars, img0, seq.tasks[0].support_labels, zero);
        Var img1 = tp.constant(tensor_cast<float>(seq.tasks[1].support_images));
        std::vector<Var> theta1 =
            generate_weights_vars(tp, arch, gcfg, vars, img1, seq.tasks[1].support_labels, theta0, /*ablate=*/true);
        std::vector<Var> flat;
        for (Var v : theta1) flat.push_back(tp.reshape(v, {1, static_cast<int>(shape_numel(tp.shape(v)))}));
        tp.backward(tp.mean_all(tp.rowwise_sqnorm(tp.concat_cols(flat))));
        for (Var v : theta0)
            if (tp.grad_touched(v))
                for (float g : tp.grad(v).data) rep.recursion_grad_mass += std::abs(static_cast<double>(g));
        rep.ok = rep.ok && rep.recursion_grad_mass > 0;
    }
    return rep;
}

}  // namespace cht
