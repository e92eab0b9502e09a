#pragma once

// Brute-force reference implementations, deliberately independent of the
// library's tape/Eigen path: scalar loops in double precision only.

#include <cmath>
#include <vector>

#include "cht/target_cnn.hpp"
#include "cht/tensor.hpp"

namespace chtest {

using Grid = std::vector<std::vector<std::vector<std::vector<double>>>>;  // [B][H][W][C]

template <class R>
inline Grid to_grid(const cht::Tensor<R>& images) {
    const int B = images.shape[0], H = images.shape[1], W = images.shape[2], C = images.shape[3];
    Grid g(B, std::vector<std::vector<std::vector<double>>>(H, std::vector<std::vector<double>>(W, std::vector<double>(C))));
    long i = 0;
    for (int b = 0; b < B; ++b)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                for (int c = 0; c < C; ++c) g[b][y][x][c] = static_cast<double>(images.data[i++]);
    return g;
}

template <class R>
std::vector<std::vector<double>> naive_forward_embed(const cht::Arch& arch, const cht::WeightBundle<R>& w,
                                                     const cht::Tensor<float>& images) {
    Grid act = to_grid(images);
    const int B = static_cast<int>(act.size());

    for (int l = 0; l < arch.num_blocks; ++l) {
        const int H = static_cast<int>(act[0].size());
        const int W = static_cast<int>(act[0][0].size());
        const int cin = static_cast<int>(act[0][0][0].size());
        const int cout = arch.channels;
        const cht::Tensor<R>& k = w.tensors[3 * l];
        const cht::Tensor<R>& scale = w.tensors[3 * l + 1];
        const cht::Tensor<R>& offset = w.tensors[3 * l + 2];

        Grid conv(B, std::vector<std::vector<std::vector<double>>>(H, std::vector<std::vector<double>>(W, std::vector<double>(cout, 0.0))));
        for (int b = 0; b < B; ++b)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    for (int co = 0; co < cout; ++co) {
                        double s = 0;
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx) {
                                const int yy = y + ky - 1, xx = x + kx - 1;
                                if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                                for (int ci = 0; ci < cin; ++ci)
                                    s += static_cast<double>(k.data[((ky * 3 + kx) * cin + ci) * cout + co]) * act[b][yy][xx][ci];
                            }
                        conv[b][y][x][co] = s;
                    }

        // batch norm over (B,H,W) per channel
        const double m = static_cast<double>(B) * H * W;
        for (int co = 0; co < cout; ++co) {
            double mean = 0;
            for (int b = 0; b < B; ++b)
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x) mean += conv[b][y][x][co];
            mean /= m;
            double var = 0;
            for (int b = 0; b < B; ++b)
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x) var += (conv[b][y][x][co] - mean) * (conv[b][y][x][co] - mean);
            var /= m;
            const double inv = 1.0 / std::sqrt(var + cht::kBnEps);
            for (int b = 0; b < B; ++b)
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x) {
                        double v = static_cast<double>(scale.data[co]) * (conv[b][y][x][co] - mean) * inv +
                                   static_cast<double>(offset.data[co]);
                        conv[b][y][x][co] = v > 0 ? v : 0;  // ReLU
                    }
        }

        // 2x2 max pool, floor semantics
        const int Ho = H / 2, Wo = W / 2;
        Grid pooled(B, std::vector<std::vector<std::vector<double>>>(Ho, std::vector<std::vector<double>>(Wo, std::vector<double>(cout))));
        for (int b = 0; b < B; ++b)
            for (int y = 0; y < Ho; ++y)
                for (int x = 0; x < Wo; ++x)
                    for (int co = 0; co < cout; ++co)
                        pooled[b][y][x][co] = std::max(std::max(conv[b][2 * y][2 * x][co], conv[b][2 * y][2 * x + 1][co]),
                                                       std::max(conv[b][2 * y + 1][2 * x][co], conv[b][2 * y + 1][2 * x + 1][co]));
        act = std::move(pooled);
    }

    const int Hf = static_cast<int>(act[0].size());
    const int Wf = static_cast<int>(act[0][0].size());
    const int Cf = static_cast<int>(act[0][0][0].size());
    const cht::Tensor<R>& dw = w.tensors[3 * arch.num_blocks];
    std::vector<std::vector<double>> out(B, std::vector<double>(arch.embed_dim, 0.0));
    for (int b = 0; b < B; ++b) {
        int f = 0;
        for (int y = 0; y < Hf; ++y)
            for (int x = 0; x < Wf; ++x)
                for (int c = 0; c < Cf; ++c, ++f)
                    for (int e = 0; e < arch.embed_dim; ++e)
                        out[b][e] += act[b][y][x][c] * static_cast<double>(dw.data[static_cast<size_t>(f) * arch.embed_dim + e]);
        if (arch.dense_bias)
            for (int e = 0; e < arch.embed_dim; ++e)
                out[b][e] += static_cast<double>(w.tensors[3 * arch.num_blocks + 1].data[e]);
    }
    return out;
}

inline std::vector<std::vector<double>> naive_prototypes(const std::vector<std::vector<double>>& embeds,
                                                         const std::vector<int>& labels, int way) {
    const size_t dim = embeds[0].size();
    std::vector<std::vector<double>> proto(way, std::vector<double>(dim, 0.0));
    std::vector<int> counts(way, 0);
    for (size_t i = 0; i < embeds.size(); ++i) {
        counts[labels[i]]++;
        for (size_t d = 0; d < dim; ++d) proto[labels[i]][d] += embeds[i][d];
    }
    for (int k = 0; k < way; ++k) {
        cht::require(counts[k] > 0, "naive_prototypes: label missing in support");
        for (size_t d = 0; d < dim; ++d) proto[k][d] /= counts[k];
    }
    return proto;
}

inline double naive_sqdist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

inline std::vector<double> naive_log_softmax(const std::vector<double>& logits) {
    double m = logits[0];
    for (double v : logits) m = std::max(m, v);
    double s = 0;
    for (double v : logits) s += std::exp(v - m);
    const double lse = m + std::log(s);
    std::vector<double> out(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

}  // namespace chtest
