#pragma once

#include <string>
#include <vector>

#include "cht/tape.hpp"
#include "cht/tensor.hpp"

namespace cht {

inline constexpr double kBnEps = 1e-5;

/// Generated CNN: num_blocks x (3x3 conv -> batch norm -> ReLU -> 2x2 max
/// pool) followed by one dense layer producing the embedding.
struct Arch {
    int num_blocks = 4;
    int channels = 8;
    int embed_dim = 20;
    int in_height = 28;
    int in_width = 28;
    int in_channels = 1;
    bool dense_bias = true;
};

/// Spatial sizes entering block 0..num_blocks (last entry feeds the dense
/// layer). Pooling floors odd sizes.
inline std::vector<std::pair<int, int>> spatial_chain(const Arch& arch) {
    std::vector<std::pair<int, int>> sizes{{arch.in_height, arch.in_width}};
    int h = arch.in_height, w = arch.in_width;
    for (int b = 0; b < arch.num_blocks; ++b) {
        h /= 2;
        w /= 2;
        sizes.emplace_back(h, w);
    }
    return sizes;
}

inline void validate_arch(const Arch& arch) {
    require(arch.num_blocks >= 1, "arch: num_blocks must be >= 1");
    require(arch.channels >= 1 && arch.embed_dim >= 1, "arch: channels/embed_dim must be >= 1");
    require(arch.in_channels >= 1, "arch: input channels must be >= 1");
    const auto chain = spatial_chain(arch);
    require(chain.back().first >= 1 && chain.back().second >= 1,
            "arch: invalid spatial reduction, " + std::to_string(arch.in_height) + "x" + std::to_string(arch.in_width) +
                " input collapses below 1x1 after " + std::to_string(arch.num_blocks) + " poolings");
}

inline int flat_dim(const Arch& arch) {
    const auto chain = spatial_chain(arch);
    return chain.back().first * chain.back().second * arch.channels;
}

struct NamedShape {
    std::string name;
    Shape shape;
};

/// Deterministic parameter layout: block0..blockN-1 (conv, bn_scale,
/// bn_offset), then dense W and optionally dense b.
inline std::vector<NamedShape> shape_table(const Arch& arch) {
    validate_arch(arch);
    std::vector<NamedShape> table;
    for (int b = 0; b < arch.num_blocks; ++b) {
        const int cin = b == 0 ? arch.in_channels : arch.channels;
        const std::string p = "block" + std::to_string(b) + ".";
        table.push_back({p + "conv", {3, 3, cin, arch.channels}});
        table.push_back({p + "bn_scale", {arch.channels}});
        table.push_back({p + "bn_offset", {arch.channels}});
    }
    table.push_back({"dense.w", {flat_dim(arch), arch.embed_dim}});
    if (arch.dense_bias) table.push_back({"dense.b", {arch.embed_dim}});
    return table;
}

inline long param_count(const Arch& arch) {
    long n = 0;
    for (const auto& e : shape_table(arch)) n += shape_numel(e.shape);
    return n;
}

/// Target-CNN parameters, tensors in shape_table order.
template <class R>
struct WeightBundle {
    std::vector<Tensor<R>> tensors;
};

template <class R>
WeightBundle<R> zero_weights(const Arch& arch) {
    WeightBundle<R> w;
    for (const auto& e : shape_table(arch)) w.tensors.push_back(Tensor<R>::zeros(e.shape));
    return w;
}

template <class R>
void validate_bundle(const Arch& arch, const WeightBundle<R>& w) {
    const auto table = shape_table(arch);
    require(w.tensors.size() == table.size(), "weight bundle: expected " + std::to_string(table.size()) + " tensors, got " +
                                                  std::to_string(w.tensors.size()));
    for (size_t i = 0; i < table.size(); ++i)
        require(w.tensors[i].shape == table[i].shape, "weight bundle: tensor " + table[i].name + " has shape " +
                                                          shape_str(w.tensors[i].shape) + ", expected " +
                                                          shape_str(table[i].shape));
    for (size_t i = 0; i < table.size(); ++i)
        require(w.tensors[i].all_finite(), "weight bundle: tensor " + table[i].name + " has non-finite entries");
}

// ---- slice-matrix form ----
//
// The generator emits one row per output channel: conv layer l is a
// [c_out, 9*c_in + 2] matrix (kernel slice + bn scale + bn offset), the dense
// layer an [embed_dim, flat_dim (+1)] matrix (weight row + optional bias).
// forward_embed consumes this form directly; conversion to/from the bundle
// layout is pure data movement.

inline int num_layers(const Arch& arch) { return arch.num_blocks + 1; }

inline int layer_cin(const Arch& arch, int layer) {
    return layer == 0 ? arch.in_channels : arch.channels;
}

inline int slice_count(const Arch& arch, int layer) {
    return layer < arch.num_blocks ? arch.channels : arch.embed_dim;
}

inline int slice_width(const Arch& arch, int layer) {
    if (layer < arch.num_blocks) return 9 * layer_cin(arch, layer) + 2;
    return flat_dim(arch) + (arch.dense_bias ? 1 : 0);
}

template <class R>
std::vector<Tensor<R>> bundle_to_slices(const Arch& arch, const WeightBundle<R>& w) {
    validate_bundle(arch, w);
    std::vector<Tensor<R>> slices;
    for (int l = 0; l < arch.num_blocks; ++l) {
        const int cin = layer_cin(arch, l), cout = arch.channels;
        const Tensor<R>& k = w.tensors[static_cast<size_t>(3 * l)];
        const Tensor<R>& sc = w.tensors[static_cast<size_t>(3 * l + 1)];
        const Tensor<R>& of = w.tensors[static_cast<size_t>(3 * l + 2)];
        Tensor<R> s = Tensor<R>::zeros({cout, 9 * cin + 2});
        for (int tap = 0; tap < 9; ++tap)
            for (int ci = 0; ci < cin; ++ci)
                for (int co = 0; co < cout; ++co)
                    s(co, tap * cin + ci) = k.data[static_cast<size_t>((tap * cin + ci) * cout + co)];
        for (int co = 0; co < cout; ++co) {
            s(co, 9 * cin) = sc.data[static_cast<size_t>(co)];
            s(co, 9 * cin + 1) = of.data[static_cast<size_t>(co)];
        }
        slices.push_back(std::move(s));
    }
    const int fd = flat_dim(arch);
    const Tensor<R>& dw = w.tensors[static_cast<size_t>(3 * arch.num_blocks)];
    Tensor<R> d = Tensor<R>::zeros({arch.embed_dim, slice_width(arch, arch.num_blocks)});
    for (int f = 0; f < fd; ++f)
        for (int e = 0; e < arch.embed_dim; ++e) d(e, f) = dw.data[static_cast<size_t>(f) * arch.embed_dim + e];
    if (arch.dense_bias) {
        const Tensor<R>& db = w.tensors[static_cast<size_t>(3 * arch.num_blocks + 1)];
        for (int e = 0; e < arch.embed_dim; ++e) d(e, fd) = db.data[static_cast<size_t>(e)];
    }
    slices.push_back(std::move(d));
    return slices;
}

template <class R>
WeightBundle<R> slices_to_bundle(const Arch& arch, const std::vector<Tensor<R>>& slices) {
    require(static_cast<int>(slices.size()) == num_layers(arch), "slices_to_bundle: layer count mismatch");
    WeightBundle<R> w = zero_weights<R>(arch);
    for (int l = 0; l < arch.num_blocks; ++l) {
        const int cin = layer_cin(arch, l), cout = arch.channels;
        const Tensor<R>& s = slices[static_cast<size_t>(l)];
        require(s.shape == Shape{cout, 9 * cin + 2}, "slices_to_bundle: bad slice shape for block " + std::to_string(l));
        Tensor<R>& k = w.tensors[static_cast<size_t>(3 * l)];
        Tensor<R>& sc = w.tensors[static_cast<size_t>(3 * l + 1)];
        Tensor<R>& of = w.tensors[static_cast<size_t>(3 * l + 2)];
        for (int tap = 0; tap < 9; ++tap)
            for (int ci = 0; ci < cin; ++ci)
                for (int co = 0; co < cout; ++co)
                    k.data[static_cast<size_t>((tap * cin + ci) * cout + co)] = s(co, tap * cin + ci);
        for (int co = 0; co < cout; ++co) {
            sc.data[static_cast<size_t>(co)] = s(co, 9 * cin);
            of.data[static_cast<size_t>(co)] = s(co, 9 * cin + 1);
        }
    }
    const int fd = flat_dim(arch);
    const Tensor<R>& d = slices[static_cast<size_t>(arch.num_blocks)];
    require(d.shape == Shape{arch.embed_dim, slice_width(arch, arch.num_blocks)}, "slices_to_bundle: bad dense slice shape");
    Tensor<R>& dw = w.tensors[static_cast<size_t>(3 * arch.num_blocks)];
    for (int f = 0; f < fd; ++f)
        for (int e = 0; e < arch.embed_dim; ++e) dw.data[static_cast<size_t>(f) * arch.embed_dim + e] = d(e, f);
    if (arch.dense_bias) {
        Tensor<R>& db = w.tensors[static_cast<size_t>(3 * arch.num_blocks + 1)];
        for (int e = 0; e < arch.embed_dim; ++e) db.data[static_cast<size_t>(e)] = d(e, fd);
    }
    return w;
}

/// One conv block in slice form: conv -> batch norm (current-batch stats) ->
/// ReLU -> 2x2 max pool.
template <class R>
Var conv_block_forward(Tape<R>& tp, const Arch& arch, int layer, Var slices, Var x) {
    const Shape& xs = tp.shape(x);
    require(xs.size() == 4, "conv_block_forward: expected [B,H,W,C]");
    const int B = xs[0], H = xs[1], W = xs[2], cin = xs[3];
    require(cin == layer_cin(arch, layer), "conv_block_forward: channel mismatch at block " + std::to_string(layer));
    const int cout = arch.channels;
    Var col = tp.im2col3x3(x);
    Var kmat = tp.slice_cols(slices, 0, 9 * cin);
    Var y = tp.reshape(tp.matmul_nt(col, kmat), {B, H, W, cout});
    Var sc = tp.reshape(tp.slice_cols(slices, 9 * cin, 9 * cin + 1), {cout});
    Var of = tp.reshape(tp.slice_cols(slices, 9 * cin + 1, 9 * cin + 2), {cout});
    y = tp.batchnorm(y, sc, of, static_cast<R>(kBnEps));
    y = tp.relu(y);
    return tp.maxpool2(y);
}

/// Functional forward pass under externally supplied weights (slice form).
/// Differentiable w.r.t. both the weights and the images.
template <class R>
Var forward_embed_vars(Tape<R>& tp, const Arch& arch, const std::vector<Var>& layer_slices, Var images) {
    require(static_cast<int>(layer_slices.size()) == num_layers(arch), "forward_embed: slice count mismatch");
    const Shape s = tp.shape(images);  // copy: pushing nodes may reallocate the tape
    require(s.size() == 4 && s[1] == arch.in_height && s[2] == arch.in_width && s[3] == arch.in_channels,
            "forward_embed: image batch shape " + shape_str(s) + " does not match arch input");
    require(s[0] >= 1, "forward_embed: empty batch");
    for (int l = 0; l < num_layers(arch); ++l)
        require(tp.shape(layer_slices[static_cast<size_t>(l)]) == Shape{slice_count(arch, l), slice_width(arch, l)},
                "forward_embed: slice shape mismatch at layer " + std::to_string(l));

    Var x = images;
    for (int l = 0; l < arch.num_blocks; ++l) x = conv_block_forward(tp, arch, l, layer_slices[static_cast<size_t>(l)], x);

    const int B = s[0], fd = flat_dim(arch);
    Var flat = tp.reshape(x, {B, fd});
    Var dense = layer_slices[static_cast<size_t>(arch.num_blocks)];
    Var w = arch.dense_bias ? tp.slice_cols(dense, 0, fd) : dense;
    Var y = tp.matmul_nt(flat, w);
    if (arch.dense_bias) y = tp.add_rowvec(y, tp.reshape(tp.slice_cols(dense, fd, fd + 1), {arch.embed_dim}));
    return y;
}

template <class R>
std::vector<Var> stage_slices(Tape<R>& tp, const std::vector<Tensor<R>>& slices) {
    std::vector<Var> vars;
    for (const auto& s : slices) vars.push_back(tp.constant(s));
    return vars;
}

/// Evaluation-path wrapper over a scratch tape.
template <class R>
Tensor<R> forward_embed(const Arch& arch, const WeightBundle<R>& weights, const Tensor<float>& images) {
    Tape<R> tp;
    tp.grad_enabled = false;
    const std::vector<Var> slices = stage_slices(tp, bundle_to_slices(arch, weights));
    Var out = forward_embed_vars(tp, arch, slices, tp.constant(tensor_cast<R>(images)));
    return tp.val(out);
}

}  // namespace cht
