#pragma once

#include <string>
#include <vector>

#include "cht/episodes.hpp"
#include "cht/rng.hpp"
#include "cht/tape.hpp"
#include "cht/target_cnn.hpp"
#include "cht/tensor.hpp"

namespace cht {

inline constexpr double kLnEps = 1e-5;

struct GeneratorConfig {
    std::vector<int> feat_channels{16, 16, 16, 16};  // image feature extractor
    std::vector<int> act_channels{8, 8};             // activation-feature net
    int trans_layers = 3;
    int trans_heads = 2;
    int model_dim = 64;
    int ff_dim = 128;
    int label_embed_dim = 16;
    int label_vocab = 32;  // largest supported way
};

inline void validate_config(const GeneratorConfig& cfg) {
    require(!cfg.feat_channels.empty() && !cfg.act_channels.empty(), "generator config: empty conv specs");
    for (int c : cfg.feat_channels) require(c >= 1, "generator config: feature channels must be positive");
    for (int c : cfg.act_channels) require(c >= 1, "generator config: activation channels must be positive");
    require(cfg.trans_layers >= 1 && cfg.trans_heads >= 1, "generator config: transformer dims must be positive");
    require(cfg.model_dim >= 1 && cfg.ff_dim >= 1, "generator config: transformer dims must be positive");
    require(cfg.model_dim % cfg.trans_heads == 0, "generator config: model_dim must be divisible by num_heads");
    require(cfg.label_embed_dim >= 1 && cfg.label_vocab >= 1, "generator config: label embedding dims must be positive");
}

// Parameter containers are templated on the element type so the same layout
// serves persistent tensors (T = Tensor<R>) and staged tape vars (T = Var).

template <class T>
struct ConvP {
    T kernel, bn_scale, bn_offset;

    template <class F>
    void each(const std::string& prefix, F&& f) {
        f(prefix + ".kernel", kernel);
        f(prefix + ".bn_scale", bn_scale);
        f(prefix + ".bn_offset", bn_offset);
    }
};

template <class T>
struct TransLayerP {
    T ln1_g, ln1_b, wq, wq_b, wk, wk_b, wv, wv_b, wo, wo_b;
    T ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b;

    template <class F>
    void each(const std::string& prefix, F&& f) {
        f(prefix + ".ln1_g", ln1_g);
        f(prefix + ".ln1_b", ln1_b);
        f(prefix + ".wq", wq);
        f(prefix + ".wq_b", wq_b);
        f(prefix + ".wk", wk);
        f(prefix + ".wk_b", wk_b);
        f(prefix + ".wv", wv);
        f(prefix + ".wv_b", wv_b);
        f(prefix + ".wo", wo);
        f(prefix + ".wo_b", wo_b);
        f(prefix + ".ln2_g", ln2_g);
        f(prefix + ".ln2_b", ln2_b);
        f(prefix + ".ff1_w", ff1_w);
        f(prefix + ".ff1_b", ff1_b);
        f(prefix + ".ff2_w", ff2_w);
        f(prefix + ".ff2_b", ff2_b);
    }
};

template <class T>
struct GenLayerP {
    T sample_proj_w, sample_proj_b;  // [feat+act+label, d], [d]
    T weight_proj_w;                 // [slice_width, d]; placeholder embedding doubles as its bias
    T readout_w, readout_b;          // [d, slice_width], [slice_width]

    template <class F>
    void each(const std::string& prefix, F&& f) {
        f(prefix + ".sample_proj_w", sample_proj_w);
        f(prefix + ".sample_proj_b", sample_proj_b);
        f(prefix + ".weight_proj_w", weight_proj_w);
        f(prefix + ".readout_w", readout_w);
        f(prefix + ".readout_b", readout_b);
    }
};

template <class T>
struct GeneratorParams {
    std::vector<ConvP<T>> feat_net, act_net;
    T label_embed;   // [label_vocab, label_embed_dim]
    T placeholder;   // [model_dim]
    T layer_embed;   // [num_layers, model_dim]
    T slice_pos;     // [max_slices, model_dim]
    std::vector<TransLayerP<T>> trans;
    T final_ln_g, final_ln_b;
    std::vector<GenLayerP<T>> gen_layers;

    template <class F>
    void each(F&& f) {
        for (size_t i = 0; i < feat_net.size(); ++i) feat_net[i].each("feat" + std::to_string(i), f);
        for (size_t i = 0; i < act_net.size(); ++i) act_net[i].each("act" + std::to_string(i), f);
        f("label_embed", label_embed);
        f("placeholder", placeholder);
        f("layer_embed", layer_embed);
        f("slice_pos", slice_pos);
        for (size_t i = 0; i < trans.size(); ++i) trans[i].each("trans" + std::to_string(i), f);
        f("final_ln_g", final_ln_g);
        f("final_ln_b", final_ln_b);
        for (size_t i = 0; i < gen_layers.size(); ++i) gen_layers[i].each("gen" + std::to_string(i), f);
    }
};

/// All trainable state of the weight generator a_psi.
template <class R>
struct GeneratorState {
    GeneratorConfig cfg;
    Arch arch;
    GeneratorParams<Tensor<R>> params;
    long step = 0;

    template <class F>
    void for_each_param(F&& f) {
        params.each(std::forward<F>(f));
    }
};

using GeneratorVars = GeneratorParams<Var>;

inline int max_slices(const Arch& arch) { return std::max(arch.channels, arch.embed_dim); }

inline int sample_token_input_dim(const GeneratorConfig& cfg) {
    return cfg.feat_channels.back() + cfg.act_channels.back() + cfg.label_embed_dim;
}

template <class R>
GeneratorState<R> init_generator(const GeneratorConfig& cfg, const Arch& arch, uint64_t seed) {
    validate_config(cfg);
    validate_arch(arch);
    GeneratorState<R> st;
    st.cfg = cfg;
    st.arch = arch;

    auto& p = st.params;
    int cin = arch.in_channels;
    for (int c : cfg.feat_channels) {
        p.feat_net.push_back({Tensor<R>::zeros({3, 3, cin, c}), Tensor<R>::zeros({c}), Tensor<R>::zeros({c})});
        cin = c;
    }
    cin = arch.channels;
    for (int c : cfg.act_channels) {
        p.act_net.push_back({Tensor<R>::zeros({3, 3, cin, c}), Tensor<R>::zeros({c}), Tensor<R>::zeros({c})});
        cin = c;
    }
    p.label_embed = Tensor<R>::zeros({cfg.label_vocab, cfg.label_embed_dim});
    p.placeholder = Tensor<R>::zeros({cfg.model_dim});
    p.layer_embed = Tensor<R>::zeros({num_layers(arch), cfg.model_dim});
    p.slice_pos = Tensor<R>::zeros({max_slices(arch), cfg.model_dim});
    const int d = cfg.model_dim;
    for (int i = 0; i < cfg.trans_layers; ++i)
        p.trans.push_back({Tensor<R>::zeros({d}), Tensor<R>::zeros({d}), Tensor<R>::zeros({d, d}), Tensor<R>::zeros({d}),
                           Tensor<R>::zeros({d, d}), Tensor<R>::zeros({d}), Tensor<R>::zeros({d, d}), Tensor<R>::zeros({d}),
                           Tensor<R>::zeros({d, d}), Tensor<R>::zeros({d}), Tensor<R>::zeros({d}), Tensor<R>::zeros({d}),
                           Tensor<R>::zeros({d, cfg.ff_dim}), Tensor<R>::zeros({cfg.ff_dim}),
                           Tensor<R>::zeros({cfg.ff_dim, d}), Tensor<R>::zeros({d})});
    p.final_ln_g = Tensor<R>::zeros({d});
    p.final_ln_b = Tensor<R>::zeros({d});
    const int in_dim = sample_token_input_dim(cfg);
    for (int l = 0; l < num_layers(arch); ++l)
        p.gen_layers.push_back({Tensor<R>::zeros({in_dim, d}), Tensor<R>::zeros({d}),
                                Tensor<R>::zeros({slice_width(arch, l), d}), Tensor<R>::zeros({d, slice_width(arch, l)}),
                                Tensor<R>::zeros({slice_width(arch, l)})});

    // truncated-normal init: std 0.02 for transformer/projection/embedding
    // tensors, fan-in scaled for conv kernels; norms start at identity
    Rng rng = Rng::derive(seed, 0xC417);
    st.for_each_param([&](const std::string& name, Tensor<R>& t) {
        const bool is_bias = name.size() >= 2 && name.compare(name.size() - 2, 2, "_b") == 0;
        const bool is_gain = name.size() >= 2 && name.compare(name.size() - 2, 2, "_g") == 0;
        if (name.find(".kernel") != std::string::npos) {
            const int fan_in = 9 * t.shape[2];
            t = random_truncated_normal<R>(rng, t.shape, std::sqrt(2.0 / fan_in));
        } else if (name.find("bn_scale") != std::string::npos || is_gain) {
            t = Tensor<R>::full(t.shape, R(1));
        } else if (name.find("bn_offset") != std::string::npos || is_bias) {
            t = Tensor<R>::zeros(t.shape);
        } else {
            t = random_truncated_normal<R>(rng, t.shape, 0.02);
        }
    });
    // generated conv layers start with bn_scale near 1 so ReLU units are
    // alive on the first forward passes
    for (int l = 0; l < arch.num_blocks; ++l)
        st.params.gen_layers[static_cast<size_t>(l)].readout_b.data[static_cast<size_t>(9 * layer_cin(arch, l))] = R(1);
    return st;
}

template <class R>
GeneratorVars stage_generator(Tape<R>& tp, GeneratorState<R>& st) {
    std::vector<Tensor<R>*> tensors;
    st.for_each_param([&](const std::string&, Tensor<R>& t) { tensors.push_back(&t); });

    GeneratorVars vars;
    vars.feat_net.resize(st.params.feat_net.size());
    vars.act_net.resize(st.params.act_net.size());
    vars.trans.resize(st.params.trans.size());
    vars.gen_layers.resize(st.params.gen_layers.size());
    std::vector<Var*> slots;
    vars.each([&](const std::string&, Var& v) { slots.push_back(&v); });

    require(slots.size() == tensors.size(), "stage_generator: param walk mismatch");
    for (size_t i = 0; i < slots.size(); ++i) *slots[i] = tp.leaf(*tensors[i]);
    return vars;
}

// ---- forward pieces ----

template <class R>
Var global_avg_pool(Tape<R>& tp, Var x) {
    const Shape s = tp.shape(x);
    require(s.size() == 4, "global_avg_pool: expected [B,H,W,C]");
    const int B = s[0], HW = s[1] * s[2], C = s[3];
    Tensor<R> avg = Tensor<R>::zeros({B, B * HW});
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < HW; ++i) avg.data[static_cast<size_t>(b) * B * HW + b * HW + i] = R(1) / static_cast<R>(HW);
    return tp.matmul(tp.constant(std::move(avg)), tp.reshape(x, {B * HW, C}));
}

/// conv -> bn -> relu (-> optional pool) stack over trainable ConvP layers,
/// ending in global average pooling.
template <class R>
Var conv_feature_net(Tape<R>& tp, const std::vector<ConvP<Var>>& layers, Var x, bool pool) {
    for (const auto& layer : layers) {
        const Shape s = tp.shape(x);
        const int B = s[0], H = s[1], W = s[2], cin = s[3];
        const int cout = tp.shape(layer.kernel)[3];
        require(tp.shape(layer.kernel)[2] == cin, "conv_feature_net: channel mismatch");
        Var col = tp.im2col3x3(x);
        Var y = tp.reshape(tp.matmul(col, tp.reshape(layer.kernel, {9 * cin, cout})), {B, H, W, cout});
        y = tp.batchnorm(y, layer.bn_scale, layer.bn_offset, static_cast<R>(kBnEps));
        y = tp.relu(y);
        if (pool && H >= 2 && W >= 2) y = tp.maxpool2(y);
        x = y;
    }
    return global_avg_pool(tp, x);
}

template <class R>
Var transformer_encoder(Tape<R>& tp, const GeneratorConfig& cfg, const GeneratorVars& vars, Var tokens) {
    const int d = cfg.model_dim;
    const int dh = d / cfg.trans_heads;
    Var x = tokens;
    for (const auto& layer : vars.trans) {
        Var h = tp.layernorm(x, layer.ln1_g, layer.ln1_b, static_cast<R>(kLnEps));
        Var q = tp.add_rowvec(tp.matmul(h, layer.wq), layer.wq_b);
        Var k = tp.add_rowvec(tp.matmul(h, layer.wk), layer.wk_b);
        Var v = tp.add_rowvec(tp.matmul(h, layer.wv), layer.wv_b);
        std::vector<Var> heads;
        for (int i = 0; i < cfg.trans_heads; ++i) {
            Var qi = tp.slice_cols(q, i * dh, (i + 1) * dh);
            Var ki = tp.slice_cols(k, i * dh, (i + 1) * dh);
            Var vi = tp.slice_cols(v, i * dh, (i + 1) * dh);
            Var scores = tp.scale(tp.matmul_nt(qi, ki), static_cast<R>(1.0 / std::sqrt(static_cast<double>(dh))));
            heads.push_back(tp.matmul(tp.softmax_rows(scores), vi));
        }
        Var attn = tp.add_rowvec(tp.matmul(tp.concat_cols(heads), layer.wo), layer.wo_b);
        x = tp.add(x, attn);
        Var h2 = tp.layernorm(x, layer.ln2_g, layer.ln2_b, static_cast<R>(kLnEps));
        Var f = tp.gelu(tp.add_rowvec(tp.matmul(h2, layer.ff1_w), layer.ff1_b));
        f = tp.add_rowvec(tp.matmul(f, layer.ff2_w), layer.ff2_b);
        x = tp.add(x, f);
    }
    return tp.layernorm(x, vars.final_ln_g, vars.final_ln_b, static_cast<R>(kLnEps));
}

struct TokenBatchVars {
    Var sample_tokens;  // [K*N, model_dim]
    Var weight_tokens;  // [num_slices(layer), model_dim]
};

/// Token assembly for one generated layer. Sample tokens mix shared image
/// features, activation features of the partially built CNN (zeros for layer
/// 0) and label embeddings; they carry no sample-order positional signal.
/// Weight tokens are the previous weight slices projected into model space
/// plus placeholder/layer/slice embeddings, so zero previous weights reduce
/// to pure placeholders.
template <class R>
TokenBatchVars encode_support_tokens(Tape<R>& tp, const Arch& arch, const GeneratorConfig& cfg, const GeneratorVars& vars,
                                     Var img_feat, Var act_feat, const std::vector<int>& labels, Var prev_layer_slices,
                                     int layer) {
    for (int l : labels) require(l >= 0 && l < cfg.label_vocab, "encode_support: label exceeds label_vocab");
    const auto& gl = vars.gen_layers[static_cast<size_t>(layer)];

    Var lab = tp.gather_rows(vars.label_embed, labels);
    Var sample_in = tp.concat_cols({img_feat, act_feat, lab});
    Var sample_tokens = tp.add_rowvec(tp.matmul(sample_in, gl.sample_proj_w), gl.sample_proj_b);

    const int slices = slice_count(arch, layer);
    Var wt = tp.matmul(prev_layer_slices, gl.weight_proj_w);
    wt = tp.add_rowvec(wt, vars.placeholder);
    std::vector<int> pos(static_cast<size_t>(slices));
    for (int i = 0; i < slices; ++i) pos[static_cast<size_t>(i)] = i;
    wt = tp.add(wt, tp.gather_rows(vars.slice_pos, pos));
    std::vector<int> lrow{layer};
    wt = tp.add_rowvec(wt, tp.reshape(tp.gather_rows(vars.layer_embed, lrow), {cfg.model_dim}));
    return {sample_tokens, wt};
}

/// One pass of the weight generator: layers are produced in order and the
/// activations feeding layer l+1 come from the freshly generated layers <= l.
/// Returns the new weights in slice form, one Var per layer.
template <class R>
std::vector<Var> generate_weights_vars(Tape<R>& tp, const Arch& arch, const GeneratorConfig& cfg, const GeneratorVars& vars,
                                       Var support_images, const std::vector<int>& support_labels,
                                       const std::vector<Var>& prev_slices, bool ablate_sample_tokens = false) {
    require(!support_labels.empty(), "generate_weights: empty support set");
    require(static_cast<int>(prev_slices.size()) == num_layers(arch), "generate_weights: prev weights layer count mismatch");
    const int S = static_cast<int>(support_labels.size());
    require(tp.shape(support_images)[0] == S, "generate_weights: image/label count mismatch");

    Var img_feat = conv_feature_net(tp, vars.feat_net, support_images, /*pool=*/true);
    const int act_dim = cfg.act_channels.back();
    Var zero_act = tp.constant(Tensor<R>::zeros({S, act_dim}));

    std::vector<Var> new_slices;
    Var act = support_images;
    for (int l = 0; l < num_layers(arch); ++l) {
        Var act_feat = l == 0 ? zero_act : conv_feature_net(tp, vars.act_net, act, /*pool=*/false);
        TokenBatchVars tokens = encode_support_tokens(tp, arch, cfg, vars, img_feat, act_feat, support_labels,
                                                      prev_slices[static_cast<size_t>(l)], l);
        Var sample_tokens = tokens.sample_tokens;
        if (ablate_sample_tokens) sample_tokens = tp.constant(Tensor<R>::zeros(tp.shape(sample_tokens)));
        Var x = tp.concat_rows({sample_tokens, tokens.weight_tokens});
        x = transformer_encoder(tp, cfg, vars, x);
        Var out_tokens = tp.slice_rows(x, S, S + slice_count(arch, l));
        const auto& gl = vars.gen_layers[static_cast<size_t>(l)];
        Var slices = tp.add_rowvec(tp.matmul(out_tokens, gl.readout_w), gl.readout_b);
        require(tp.val(slices).all_finite(), "generate_weights: non-finite values at layer " + std::to_string(l));
        new_slices.push_back(slices);
        if (l < arch.num_blocks) act = conv_block_forward(tp, arch, l, slices, act);
    }
    return new_slices;
}

/// theta_t for t = 0..T-1 with theta_-1 = 0; step t sees only task t's
/// support plus the previously generated weights.
template <class R>
std::vector<std::vector<Var>> unroll_vars(Tape<R>& tp, const Arch& arch, const GeneratorConfig& cfg,
                                          const GeneratorVars& vars, const TaskSequence& tasks) {
    require(tasks.length() >= 1, "unroll: need at least one task");
    std::vector<Var> prev = stage_slices(tp, bundle_to_slices(arch, zero_weights<R>(arch)));
    std::vector<std::vector<Var>> thetas;
    for (const Episode& ep : tasks.tasks) {
        Var images = tp.constant(tensor_cast<R>(ep.support_images));
        prev = generate_weights_vars(tp, arch, cfg, vars, images, ep.support_labels, prev);
        thetas.push_back(prev);
    }
    return thetas;
}

// ---- concrete wrappers (evaluation path) ----

template <class R>
std::vector<Tensor<R>> slice_values(const Tape<R>& tp, const std::vector<Var>& slices) {
    std::vector<Tensor<R>> out;
    for (Var v : slices) out.push_back(tp.val(v));
    return out;
}

template <class R>
WeightBundle<R> generate_weights(GeneratorState<R>& st, const Episode& support_episode, const WeightBundle<R>& prev) {
    Tape<R> tp;
    tp.grad_enabled = false;
    GeneratorVars vars = stage_generator(tp, st);
    std::vector<Var> prev_slices = stage_slices(tp, bundle_to_slices(st.arch, prev));
    Var images = tp.constant(tensor_cast<R>(support_episode.support_images));
    std::vector<Var> out = generate_weights_vars(tp, st.arch, st.cfg, vars, images, support_episode.support_labels, prev_slices);
    return slices_to_bundle(st.arch, slice_values(tp, out));
}

template <class R>
std::vector<WeightBundle<R>> unroll(GeneratorState<R>& st, const TaskSequence& tasks) {
    Tape<R> tp;
    tp.grad_enabled = false;
    GeneratorVars vars = stage_generator(tp, st);
    std::vector<std::vector<Var>> thetas = unroll_vars(tp, st.arch, st.cfg, vars, tasks);
    std::vector<WeightBundle<R>> out;
    for (const auto& th : thetas) out.push_back(slices_to_bundle(st.arch, slice_values(tp, th)));
    return out;
}

/// Standalone view of the per-layer token batch; activation features are
/// computed with the partially built prev_weights CNN (inside generation the
/// freshly generated prefix is used instead).
template <class R>
struct TokenBatch {
    Tensor<R> sample_tokens;
    Tensor<R> weight_tokens;
};

template <class R>
TokenBatch<R> encode_support(GeneratorState<R>& st, const Episode& support_episode, const WeightBundle<R>& prev,
                             int layer_index) {
    require(layer_index >= 0 && layer_index < num_layers(st.arch), "encode_support: layer index out of range");
    Tape<R> tp;
    tp.grad_enabled = false;
    GeneratorVars vars = stage_generator(tp, st);
    std::vector<Var> prev_slices = stage_slices(tp, bundle_to_slices(st.arch, prev));
    Var images = tp.constant(tensor_cast<R>(support_episode.support_images));
    const int S = static_cast<int>(support_episode.support_labels.size());

    Var img_feat = conv_feature_net(tp, vars.feat_net, images, true);
    Var act_feat;
    if (layer_index == 0) {
        act_feat = tp.constant(Tensor<R>::zeros({S, st.cfg.act_channels.back()}));
    } else {
        Var act = images;
        for (int l = 0; l < layer_index; ++l) act = conv_block_forward(tp, st.arch, l, prev_slices[static_cast<size_t>(l)], act);
        act_feat = conv_feature_net(tp, vars.act_net, act, false);
    }
    TokenBatchVars tb = encode_support_tokens(tp, st.arch, st.cfg, vars, img_feat, act_feat, support_episode.support_labels,
                                              prev_slices[static_cast<size_t>(layer_index)], layer_index);
    return {tp.val(tb.sample_tokens), tp.val(tb.weight_tokens)};
}

}  // namespace cht
