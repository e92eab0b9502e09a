#pragma once

#include <algorithm>
#include <functional>
#include <span>
#include <utility>

#include "cht/tensor.hpp"

namespace cht {

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/// Reverse-mode autodiff over an append-only tape. Creation order is the
/// topological order, so backward() is a single reverse sweep. Gradients are
/// allocated lazily; nodes whose grad buffer is never touched are off the
/// path to the loss and their backward closure is skipped.
///
/// With grad_enabled = false the tape records values only (evaluation mode):
/// no closures, no backward caches.
template <class R>
class Tape {
public:
    bool grad_enabled = true;

    Var constant(Tensor<R> v) { return push(std::move(v), false, {}); }

    Var leaf(Tensor<R> v) { return push(std::move(v), grad_enabled, {}); }

    const Tensor<R>& val(Var v) const { return nodes_[check(v)].value; }
    const Shape& shape(Var v) const { return nodes_[check(v)].value.shape; }
    bool needs_grad(Var v) const { return nodes_[check(v)].requires_grad; }

    /// gradient buffer, zero-initialized on first access
    Tensor<R>& grad(Var v) {
        Node& n = nodes_[check(v)];
        if (n.grad.empty()) n.grad = Tensor<R>::zeros(n.value.shape);
        return n.grad;
    }

    bool grad_touched(Var v) const { return !nodes_[check(v)].grad.empty(); }

    size_t num_nodes() const { return nodes_.size(); }

    void backward(Var loss) {
        require(loss.valid() && val(loss).size() == 1, "backward: loss must be a scalar var");
        require(needs_grad(loss), "backward: loss does not depend on any leaf");
        grad(loss).data[0] = R(1);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
            n.backward(*this);
        }
    }

    // ---- elementwise ----

    Var add(Var a, Var b) {
        require(shape(a) == shape(b), "add: shape mismatch " + shape_str(shape(a)) + " vs " + shape_str(shape(b)));
        Tensor<R> out = val(a);
        const Tensor<R>& vb = val(b);
        for (long i = 0; i < out.size(); ++i) out.data[i] += vb.data[i];
        return push(std::move(out), any_grad({a, b}), [a, b](Tape& t, Var o) {
            t.accumulate(a, t.grad(o));
            t.accumulate(b, t.grad(o));
        });
    }

    Var sub(Var a, Var b) { return add(a, scale(b, R(-1))); }

    Var mul(Var a, Var b) {
        require(shape(a) == shape(b), "mul: shape mismatch");
        Tensor<R> out = val(a);
        const Tensor<R>& vb = val(b);
        for (long i = 0; i < out.size(); ++i) out.data[i] *= vb.data[i];
        return push(std::move(out), any_grad({a, b}), [a, b](Tape& t, Var o) {
            const Tensor<R>& g = t.grad(o);
            if (t.needs_grad(a)) {
                Tensor<R>& ga = t.grad(a);
                const Tensor<R>& vb2 = t.val(b);
                for (long i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * vb2.data[i];
            }
            if (t.needs_grad(b)) {
                Tensor<R>& gb = t.grad(b);
                const Tensor<R>& va = t.val(a);
                for (long i = 0; i < g.size(); ++i) gb.data[i] += g.data[i] * va.data[i];
            }
        });
    }

    Var scale(Var a, R s) {
        Tensor<R> out = val(a);
        for (auto& v : out.data) v *= s;
        return push(std::move(out), any_grad({a}), [a, s](Tape& t, Var o) {
            const Tensor<R>& g = t.grad(o);
            Tensor<R>& ga = t.grad(a);
            for (long i = 0; i < g.size(); ++i) ga.data[i] += s * g.data[i];
        });
    }

    Var add_scalar(Var a, R s) {
        Tensor<R> out = val(a);
        for (auto& v : out.data) v += s;
        return push(std::move(out), any_grad({a}), [a](Tape& t, Var o) { t.accumulate(a, t.grad(o)); });
    }

    Var relu(Var a) {
        Tensor<R> out = val(a);
        for (auto& v : out.data) v = v > R(0) ? v : R(0);
        return push(std::move(out), any_grad({a}), [a](Tape& t, Var o) {
            const Tensor<R>& g = t.grad(o);
            const Tensor<R>& x = t.val(a);
            Tensor<R>& ga = t.grad(a);
            for (long i = 0; i < g.size(); ++i)
                if (x.data[i] > R(0)) ga.data[i] += g.data[i];
        });
    }

    Var gelu(Var a) {
        Tensor<R> out = val(a);
        for (auto& v : out.data) {
            const double x = static_cast<double>(v);
            v = static_cast<R>(x * 0.5 * (1.0 + std::erf(x * 0.70710678118654752440)));
        }
        return push(std::move(out), any_grad({a}), [a](Tape& t, Var o) {
            const Tensor<R>& g = t.grad(o);
            const Tensor<R>& x = t.val(a);
            Tensor<R>& ga = t.grad(a);
            for (long i = 0; i < g.size(); ++i) {
                const double xi = static_cast<double>(x.data[i]);
                const double cdf = 0.5 * (1.0 + std::erf(xi * 0.70710678118654752440));
                const double pdf = std::exp(-0.5 * xi * xi) * 0.39894228040143267794;
                ga.data[i] += g.data[i] * static_cast<R>(cdf + xi * pdf);
            }
        });
    }

    // ---- broadcasting adds ----

    /// a[M,N] + v[N] broadcast over rows; v may be shaped [N] or [1,N]
    Var add_rowvec(Var a, Var v) {
        const int M = val(a).rows(), N = val(a).cols();
        require(val(v).size() == N, "add_rowvec: vector length mismatch");
        Tensor<R> out = val(a);
        const Tensor<R>& vv = val(v);
        for (int r = 0; r < M; ++r)
            for (int c = 0; c < N; ++c) out.data[static_cast<size_t>(r) * N + c] += vv.data[static_cast<size_t>(c)];
        return push(std::move(out), any_grad({a, v}), [a, v, M, N](Tape& t, Var o) {
            const Tensor<R>& g = t.grad(o);
            t.accumulate(a, g);
            if (t.needs_grad(v)) {
                Tensor<R>& gv = t.grad(v);
                for (int r = 0; r < M; ++r)
                    for (int c = 0; c < N; ++c) gv.data[static_cast<size_t>(c)] += g.data[static_cast<size_t>(r) * N + c];
            }
        });
    }

    /// a[M,N] + u[M,1] broadcast over columns
    Var add_colvec(Var a, Var u) {
        const int M = val(a).rows(), N = val(a).cols();
        require(val(u).size() == M, "add_colvec: vector length mismatch");
        Tensor<R> out = val(a);
        const Tensor<R>& vu = val(u);
        for (int r = 0; r < M; ++r)
            for (int c = 0; c < N; ++c) out.data[static_cast<size_t>(r) * N + c] += vu.data[static_cast<size_t>(r)];
        return push(std::move(out), any_grad({a, u}), [a, u, M, N](Tape& t, Var o) {
            const Tensor<R>& g = t.grad(o);
            t.accumulate(a, g);
            if (t.needs_grad(u)) {
                Tensor<R>& gu = t.grad(u);
                for (int r = 0; r < M; ++r)
                    for (int c = 0; c < N; ++c) gu.data[static_cast<size_t>(r)] += g.data[static_cast<size_t>(r) * N + c];
            }
        });
    }

    // ---- matrix products ----

    Var matmul(Var a, Var b) {
        const int M = val(a).rows(), K = val(a).cols();
        require(val(b).rows() == K, "matmul: inner dim mismatch");
        const int N = val(b).cols();
        Tensor<R> out = Tensor<R>::zeros({M, N});
        mat_view(out, M, N).noalias() = mat_view(val(a), M, K) * mat_view(val(b), K, N);
        return push(std::move(out), any_grad({a, b}), [a, b, M, K, N](Tape& t, Var o) {
            const Tensor<R>& g = t.grad(o);
            auto gm = mat_view(g, M, N);
            if (t.needs_grad(a))
                mat_view(t.grad(a), M, K).noalias() += gm * mat_view(t.val(b), K, N).transpose();
            if (t.needs_grad(b))
                mat_view(t.grad(b), K, N).noalias() += mat_view(t.val(a), M, K).transpose() * gm;
        });
    }

    /// a[M,K] * b[N,K]^T -> [M,N]
    Var matmul_nt(Var a, Var b) {
        const int M = val(a).rows(), K = val(a).cols();
        require(val(b).cols() == K, "matmul_nt: inner dim mismatch");
        const int N = val(b).rows();
        Tensor<R> out = Tensor<R>::zeros({M, N});
        mat_view(out, M, N).noalias() = mat_view(val(a), M, K) * mat_view(val(b), N, K).transpose();
        return push(std::move(out), any_grad({a, b}), [a, b, M, K, N](Tape& t, Var o) {
            const Tensor<R>& g = t.grad(o);
            auto gm = mat_view(g, M, N);
            if (t.needs_grad(a))
                mat_view(t.grad(a), M, K).noalias() += gm * mat_view(t.val(b), N, K);
            if (t.needs_grad(b))
                mat_view(t.grad(b), N, K).noalias() += gm.transpose() * mat_view(t.val(a), M, K);
        });
    }

    // ---- rows/cols plumbing ----

    Var reshape(Var a, Shape s) {
        require(shape_numel(s) == val(a).size(), "reshape: element count mismatch");
        Tensor<R> out = val(a);
        out.shape = std::move(s);
        return push(std::move(out), any_grad({a}), [a](Tape& t, Var o) {
            Tensor<R> g = t.grad(o);
            g.shape = t.val(a).shape;
            t.accumulate(a, g);
        });
    }

    Var concat_rows(const std::vector<Var>& parts) {
        require(!parts.empty(), "concat_rows: empty input");
        const int N = val(parts[0]).cols();
        int M = 0;
        for (Var p : parts) {
            require(val(p).cols() == N, "concat_rows: column mismatch");
            M += val(p).rows();
        }
        Tensor<R> out = Tensor<R>::zeros({M, N});
        long off = 0;
        for (Var p : parts) {
            const Tensor<R>& vp = val(p);
            std::copy(vp.data.begin(), vp.data.end(), out.data.begin() + off);
            off += vp.size();
        }
        bool rg = false;
        for (Var p : parts) rg = rg || needs_grad(p);
        return push(std::move(out), grad_enabled && rg, [parts](Tape& t, Var o) {
            const Tensor<R>& g = t.grad(o);
            long off2 = 0;
            for (Var p : parts) {
                const long n = t.val(p).size();
                if (t.needs_grad(p)) {
                    Tensor<R>& gp = t.grad(p);
                    for (long i = 0; i < n; ++i) gp.data[i] += g.data[off2 + i];
                }
                off2 += n;
            }
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        require(!parts.empty(), "concat_cols: empty input");
        const int M = val(parts[0]).rows();
        int N = 0;
        std::vector<int> widths;
        for (Var p : parts) {
            require(val(p).rows() == M, "concat_cols: row mismatch");
            widths.push_back(val(p).cols());
            N += widths.back();
        }
        Tensor<R> out = Tensor<R>::zeros({M, N});
        int c0 = 0;
        for (size_t k = 0; k < parts.size(); ++k) {
            const Tensor<R>& vp = val(parts[k]);
            for (int r = 0; r < M; ++r)
                for (int c = 0; c < widths[k]; ++c)
                    out.data[static_cast<size_t>(r) * N + c0 + c] = vp.data[static_cast<size_t>(r) * widths[k] + c];
            c0 += widths[k];
        }
        bool rg = false;
        for (Var p : parts) rg = rg || needs_grad(p);
        return push(std::move(out), grad_enabled && rg, [parts, widths, M, N](Tape& t, Var o) {
            const Tensor<R>& g = t.grad(o);
            int c02 = 0;
            for (size_t k = 0; k < parts.size(); ++k) {
                if (t.needs_grad(parts[k])) {
                    Tensor<R>& gp = t.grad(parts[k]);
                    for (int r = 0; r < M; ++r)
                        for (int c = 0; c < widths[k]; ++c)
                            gp.data[static_cast<size_t>(r) * widths[k] + c] += g.data[static_cast<size_t>(r) * N + c02 + c];
                }
                c02 += widths[k];
            }
        });
    }

    Var slice_rows(Var a, int r0, int r1) {
        const int M = val(a).rows(), N = val(a).cols();
        require(0 <= r0 && r0 < r1 && r1 <= M, "slice_rows: bad range");
        Tensor<R> out = Tensor<R>::zeros({r1 - r0, N});
        std::copy(val(a).data.begin() + static_cast<long>(r0) * N, val(a).data.begin() + static_cast<long>(r1) * N,
                  out.data.begin());
        return push(std::move(out), any_grad({a}), [a, r0, N](Tape& t, Var o) {
            const Tensor<R>& g = t.grad(o);
            Tensor<R>& ga = t.grad(a);
            for (long i = 0; i < g.size(); ++i) ga.data[static_cast<long>(r0) * N + i] += g.data[i];
        });
    }

    Var slice_cols(Var a, int c0, int c1) {
        const int M = val(a).rows(), N = val(a).cols();
        require(0 <= c0 && c0 < c1 && c1 <= N, "slice_cols: bad range");
        const int W = c1 - c0;
        Tensor<R> out = Tensor<R>::zeros({M, W});
        for (int r = 0; r < M; ++r)
            for (int c = 0; c < W; ++c) out.data[static_cast<size_t>(r) * W + c] = val(a).data[static_cast<size_t>(r) * N + c0 + c];
        return push(std::move(out), any_grad({a}), [a, c0, N, W, M](Tape& t, Var o) {
            const Tensor<R>& g = t.grad(o);
            Tensor<R>& ga = t.grad(a);
            for (int r = 0; r < M; ++r)
                for (int c = 0; c < W; ++c) ga.data[static_cast<size_t>(r) * N + c0 + c] += g.data[static_cast<size_t>(r) * W + c];
        });
    }

    /// out[i,:] = a[idx[i],:]; repeated indices accumulate in backward
    Var gather_rows(Var a, std::vector<int> idx) {
        const int N = val(a).cols(), M = val(a).rows();
        for (int i : idx) require(0 <= i && i < M, "gather_rows: index out of range");
        Tensor<R> out = Tensor<R>::zeros({static_cast<int>(idx.size()), N});
        for (size_t r = 0; r < idx.size(); ++r)
            std::copy(val(a).data.begin() + static_cast<long>(idx[r]) * N,
                      val(a).data.begin() + static_cast<long>(idx[r] + 1) * N, out.data.begin() + static_cast<long>(r) * N);
        return push(std::move(out), any_grad({a}), [a, idx = std::move(idx), N](Tape& t, Var o) {
            const Tensor<R>& g = t.grad(o);
            Tensor<R>& ga = t.grad(a);
            for (size_t r = 0; r < idx.size(); ++r)
                for (int c = 0; c < N; ++c) ga.data[static_cast<long>(idx[r]) * N + c] += g.data[static_cast<long>(r) * N + c];
        });
    }

    /// out[m,0] = a[m, idx[m]]
    Var pick_cols(Var a, std::vector<int> idx) {
        const int M = val(a).rows(), N = val(a).cols();
        require(static_cast<int>(idx.size()) == M, "pick_cols: one index per row required");
        for (int i : idx) require(0 <= i && i < N, "pick_cols: index out of range");
        Tensor<R> out = Tensor<R>::zeros({M, 1});
        for (int r = 0; r < M; ++r) out.data[static_cast<size_t>(r)] = val(a).data[static_cast<size_t>(r) * N + idx[static_cast<size_t>(r)]];
        return push(std::move(out), any_grad({a}), [a, idx = std::move(idx), N](Tape& t, Var o) {
            const Tensor<R>& g = t.grad(o);
            Tensor<R>& ga = t.grad(a);
            for (size_t r = 0; r < idx.size(); ++r) ga.data[r * N + idx[r]] += g.data[r];
        });
    }

    // ---- reductions / row ops ----

    Var sum_all(Var a) {
        double s = 0;
        for (R v : val(a).data) s += static_cast<double>(v);
        Tensor<R> out = Tensor<R>::full({1}, static_cast<R>(s));
        return push(std::move(out), any_grad({a}), [a](Tape& t, Var o) {
            const R g = t.grad(o).data[0];
            Tensor<R>& ga = t.grad(a);
            for (auto& v : ga.data) v += g;
        });
    }

    Var mean_all(Var a) {
        const long n = val(a).size();
        double s = 0;
        for (R v : val(a).data) s += static_cast<double>(v);
        Tensor<R> out = Tensor<R>::full({1}, static_cast<R>(s / static_cast<double>(n)));
        return push(std::move(out), any_grad({a}), [a, n](Tape& t, Var o) {
            const R g = t.grad(o).data[0] / static_cast<R>(n);
            Tensor<R>& ga = t.grad(a);
            for (auto& v : ga.data) v += g;
        });
    }

    /// out[m,0] = sum_j a[m,j]^2
    Var rowwise_sqnorm(Var a) {
        const int M = val(a).rows(), N = val(a).cols();
        Tensor<R> out = Tensor<R>::zeros({M, 1});
        for (int r = 0; r < M; ++r) {
            double s = 0;
            for (int c = 0; c < N; ++c) {
                const double v = static_cast<double>(val(a).data[static_cast<size_t>(r) * N + c]);
                s += v * v;
            }
            out.data[static_cast<size_t>(r)] = static_cast<R>(s);
        }
        return push(std::move(out), any_grad({a}), [a, M, N](Tape& t, Var o) {
            const Tensor<R>& g = t.grad(o);
            const Tensor<R>& x = t.val(a);
            Tensor<R>& ga = t.grad(a);
            for (int r = 0; r < M; ++r)
                for (int c = 0; c < N; ++c)
                    ga.data[static_cast<size_t>(r) * N + c] += R(2) * g.data[static_cast<size_t>(r)] * x.data[static_cast<size_t>(r) * N + c];
        });
    }

    Var softmax_rows(Var a) {
        const int M = val(a).rows(), N = val(a).cols();
        Tensor<R> out = val(a);
        for (int r = 0; r < M; ++r) {
            R* row = out.data.data() + static_cast<size_t>(r) * N;
            double m = static_cast<double>(*std::max_element(row, row + N));
            double s = 0;
            for (int c = 0; c < N; ++c) s += std::exp(static_cast<double>(row[c]) - m);
            for (int c = 0; c < N; ++c) row[c] = static_cast<R>(std::exp(static_cast<double>(row[c]) - m) / s);
        }
        return push(std::move(out), any_grad({a}), [a, M, N](Tape& t, Var o) {
            const Tensor<R>& g = t.grad(o);
            const Tensor<R>& y = t.val(o);
            Tensor<R>& ga = t.grad(a);
            for (int r = 0; r < M; ++r) {
                double dot = 0;
                for (int c = 0; c < N; ++c)
                    dot += static_cast<double>(g.data[static_cast<size_t>(r) * N + c]) * static_cast<double>(y.data[static_cast<size_t>(r) * N + c]);
                for (int c = 0; c < N; ++c) {
                    const size_t i = static_cast<size_t>(r) * N + c;
                    ga.data[i] += static_cast<R>((static_cast<double>(g.data[i]) - dot) * static_cast<double>(y.data[i]));
                }
            }
        });
    }

    /// stable log-sum-exp per row -> [M,1]
    Var logsumexp_rows(Var a) {
        const int M = val(a).rows(), N = val(a).cols();
        Tensor<R> out = Tensor<R>::zeros({M, 1});
        for (int r = 0; r < M; ++r) {
            const R* row = val(a).data.data() + static_cast<size_t>(r) * N;
            double m = static_cast<double>(*std::max_element(row, row + N));
            double s = 0;
            for (int c = 0; c < N; ++c) s += std::exp(static_cast<double>(row[c]) - m);
            out.data[static_cast<size_t>(r)] = static_cast<R>(m + std::log(s));
        }
        return push(std::move(out), any_grad({a}), [a, M, N](Tape& t, Var o) {
            const Tensor<R>& g = t.grad(o);
            const Tensor<R>& x = t.val(a);
            const Tensor<R>& l = t.val(o);
            Tensor<R>& ga = t.grad(a);
            for (int r = 0; r < M; ++r)
                for (int c = 0; c < N; ++c) {
                    const size_t i = static_cast<size_t>(r) * N + c;
                    ga.data[i] += g.data[static_cast<size_t>(r)] *
                                  static_cast<R>(std::exp(static_cast<double>(x.data[i]) - static_cast<double>(l.data[static_cast<size_t>(r)])));
                }
        });
    }

    // ---- image ops (NHWC) ----

    /// 3x3 patches with zero padding -> [B*H*W, 9*C]
    Var im2col3x3(Var x) {
        const Shape& s = shape(x);
        require(s.size() == 4, "im2col3x3: expected [B,H,W,C]");
        const int B = s[0], H = s[1], W = s[2], C = s[3];
        Tensor<R> out = Tensor<R>::zeros({B * H * W, 9 * C});
        const Tensor<R>& vx = val(x);
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    R* dst = out.data.data() + (static_cast<size_t>(b) * H * W + static_cast<size_t>(i) * W + j) * 9 * C;
                    for (int di = -1; di <= 1; ++di)
                        for (int dj = -1; dj <= 1; ++dj) {
                            const int ii = i + di, jj = j + dj;
                            if (ii >= 0 && ii < H && jj >= 0 && jj < W) {
                                const R* src = vx.data.data() + ((static_cast<size_t>(b) * H + ii) * W + jj) * C;
                                std::copy(src, src + C, dst);
                            }
                            dst += C;
                        }
                }
        return push(std::move(out), any_grad({x}), [x, B, H, W, C](Tape& t, Var o) {
            const Tensor<R>& g = t.grad(o);
            Tensor<R>& gx = t.grad(x);
            for (int b = 0; b < B; ++b)
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                        const R* src = g.data.data() + (static_cast<size_t>(b) * H * W + static_cast<size_t>(i) * W + j) * 9 * C;
                        for (int di = -1; di <= 1; ++di)
                            for (int dj = -1; dj <= 1; ++dj) {
                                const int ii = i + di, jj = j + dj;
                                if (ii >= 0 && ii < H && jj >= 0 && jj < W) {
                                    R* dst = gx.data.data() + ((static_cast<size_t>(b) * H + ii) * W + jj) * C;
                                    for (int c = 0; c < C; ++c) dst[c] += src[c];
                                }
                                src += C;
                            }
                    }
        });
    }

    /// 2x2 max pooling with floor semantics (odd trailing row/col dropped)
    Var maxpool2(Var x) {
        const Shape& s = shape(x);
        require(s.size() == 4, "maxpool2: expected [B,H,W,C]");
        const int B = s[0], H = s[1], W = s[2], C = s[3];
        const int Ho = H / 2, Wo = W / 2;
        require(Ho >= 1 && Wo >= 1, "maxpool2: spatial size too small");
        Tensor<R> out = Tensor<R>::zeros({B, Ho, Wo, C});
        std::vector<int> arg(static_cast<size_t>(out.size()));
        const Tensor<R>& vx = val(x);
        auto at = [&](int b, int i, int j, int c) -> long {
            return ((static_cast<long>(b) * H + i) * W + j) * C + c;
        };
        long k = 0;
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < Ho; ++i)
                for (int j = 0; j < Wo; ++j)
                    for (int c = 0; c < C; ++c, ++k) {
                        long best = at(b, 2 * i, 2 * j, c);
                        R bv = vx.data[static_cast<size_t>(best)];
                        for (int di = 0; di < 2; ++di)
                            for (int dj = 0; dj < 2; ++dj) {
                                const long idx = at(b, 2 * i + di, 2 * j + dj, c);
                                if (vx.data[static_cast<size_t>(idx)] > bv) {
                                    bv = vx.data[static_cast<size_t>(idx)];
                                    best = idx;
                                }
                            }
                        out.data[static_cast<size_t>(k)] = bv;
                        arg[static_cast<size_t>(k)] = static_cast<int>(best);
                    }
        return push(std::move(out), any_grad({x}), [x, arg = std::move(arg)](Tape& t, Var o) {
            const Tensor<R>& g = t.grad(o);
            Tensor<R>& gx = t.grad(x);
            for (long i = 0; i < g.size(); ++i) gx.data[static_cast<size_t>(arg[static_cast<size_t>(i)])] += g.data[i];
        });
    }

    /// batch norm over (B,H,W) per channel using current-batch statistics
    Var batchnorm(Var x, Var bn_scale, Var bn_offset, R eps) {
        const Shape& s = shape(x);
        require(s.size() == 4, "batchnorm: expected [B,H,W,C]");
        const int C = s[3];
        const long m = val(x).size() / C;
        require(val(bn_scale).size() == C && val(bn_offset).size() == C, "batchnorm: scale/offset length mismatch");
        std::vector<double> mean(static_cast<size_t>(C), 0), inv_std(static_cast<size_t>(C), 0);
        const Tensor<R>& vx = val(x);
        for (long i = 0; i < vx.size(); ++i) mean[static_cast<size_t>(i % C)] += static_cast<double>(vx.data[i]);
        for (int c = 0; c < C; ++c) mean[static_cast<size_t>(c)] /= static_cast<double>(m);
        for (long i = 0; i < vx.size(); ++i) {
            const double d = static_cast<double>(vx.data[i]) - mean[static_cast<size_t>(i % C)];
            inv_std[static_cast<size_t>(i % C)] += d * d;
        }
        for (int c = 0; c < C; ++c)
            inv_std[static_cast<size_t>(c)] = 1.0 / std::sqrt(inv_std[static_cast<size_t>(c)] / static_cast<double>(m) + static_cast<double>(eps));
        Tensor<R> out = vx;
        const Tensor<R>& sc = val(bn_scale);
        const Tensor<R>& of = val(bn_offset);
        for (long i = 0; i < out.size(); ++i) {
            const int c = static_cast<int>(i % C);
            const double xh = (static_cast<double>(vx.data[i]) - mean[static_cast<size_t>(c)]) * inv_std[static_cast<size_t>(c)];
            out.data[i] = static_cast<R>(static_cast<double>(sc.data[static_cast<size_t>(c)]) * xh + static_cast<double>(of.data[static_cast<size_t>(c)]));
        }
        return push(std::move(out), any_grad({x, bn_scale, bn_offset}),
                    [x, bn_scale, bn_offset, C, m, mean = std::move(mean), inv_std = std::move(inv_std)](Tape& t, Var o) {
            const Tensor<R>& g = t.grad(o);
            const Tensor<R>& vx2 = t.val(x);
            const Tensor<R>& sc2 = t.val(bn_scale);
            std::vector<double> sum_g(static_cast<size_t>(C), 0), sum_gx(static_cast<size_t>(C), 0);
            for (long i = 0; i < g.size(); ++i) {
                const int c = static_cast<int>(i % C);
                const double xh = (static_cast<double>(vx2.data[i]) - mean[static_cast<size_t>(c)]) * inv_std[static_cast<size_t>(c)];
                sum_g[static_cast<size_t>(c)] += static_cast<double>(g.data[i]);
                sum_gx[static_cast<size_t>(c)] += static_cast<double>(g.data[i]) * xh;
            }
            if (t.needs_grad(bn_scale)) {
                Tensor<R>& gs = t.grad(bn_scale);
                for (int c = 0; c < C; ++c) gs.data[static_cast<size_t>(c)] += static_cast<R>(sum_gx[static_cast<size_t>(c)]);
            }
            if (t.needs_grad(bn_offset)) {
                Tensor<R>& go = t.grad(bn_offset);
                for (int c = 0; c < C; ++c) go.data[static_cast<size_t>(c)] += static_cast<R>(sum_g[static_cast<size_t>(c)]);
            }
            if (t.needs_grad(x)) {
                Tensor<R>& gx = t.grad(x);
                const double dm = static_cast<double>(m);
                for (long i = 0; i < g.size(); ++i) {
                    const int c = static_cast<int>(i % C);
                    const double xh = (static_cast<double>(vx2.data[i]) - mean[static_cast<size_t>(c)]) * inv_std[static_cast<size_t>(c)];
                    const double dxh = static_cast<double>(g.data[i]) * static_cast<double>(sc2.data[static_cast<size_t>(c)]);
                    const double sum_dxh = sum_g[static_cast<size_t>(c)] * static_cast<double>(sc2.data[static_cast<size_t>(c)]);
                    const double sum_dxh_xh = sum_gx[static_cast<size_t>(c)] * static_cast<double>(sc2.data[static_cast<size_t>(c)]);
                    gx.data[i] += static_cast<R>(inv_std[static_cast<size_t>(c)] / dm * (dm * dxh - sum_dxh - xh * sum_dxh_xh));
                }
            }
        });
    }

    /// layer norm per row of [M,D]
    Var layernorm(Var x, Var gain, Var bias, R eps) {
        const int M = val(x).rows(), D = val(x).cols();
        require(val(gain).size() == D && val(bias).size() == D, "layernorm: gain/bias length mismatch");
        std::vector<double> mean(static_cast<size_t>(M)), inv_std(static_cast<size_t>(M));
        const Tensor<R>& vx = val(x);
        for (int r = 0; r < M; ++r) {
            double s = 0;
            for (int c = 0; c < D; ++c) s += static_cast<double>(vx.data[static_cast<size_t>(r) * D + c]);
            mean[static_cast<size_t>(r)] = s / D;
            double v = 0;
            for (int c = 0; c < D; ++c) {
                const double d = static_cast<double>(vx.data[static_cast<size_t>(r) * D + c]) - mean[static_cast<size_t>(r)];
                v += d * d;
            }
            inv_std[static_cast<size_t>(r)] = 1.0 / std::sqrt(v / D + static_cast<double>(eps));
        }
        Tensor<R> out = vx;
        const Tensor<R>& gn = val(gain);
        const Tensor<R>& bs = val(bias);
        for (int r = 0; r < M; ++r)
            for (int c = 0; c < D; ++c) {
                const size_t i = static_cast<size_t>(r) * D + c;
                const double xh = (static_cast<double>(vx.data[i]) - mean[static_cast<size_t>(r)]) * inv_std[static_cast<size_t>(r)];
                out.data[i] = static_cast<R>(static_cast<double>(gn.data[static_cast<size_t>(c)]) * xh + static_cast<double>(bs.data[static_cast<size_t>(c)]));
            }
        return push(std::move(out), any_grad({x, gain, bias}),
                    [x, gain, bias, M, D, mean = std::move(mean), inv_std = std::move(inv_std)](Tape& t, Var o) {
            const Tensor<R>& g = t.grad(o);
            const Tensor<R>& vx2 = t.val(x);
            const Tensor<R>& gn2 = t.val(gain);
            for (int r = 0; r < M; ++r) {
                double sum_dxh = 0, sum_dxh_xh = 0;
                for (int c = 0; c < D; ++c) {
                    const size_t i = static_cast<size_t>(r) * D + c;
                    const double xh = (static_cast<double>(vx2.data[i]) - mean[static_cast<size_t>(r)]) * inv_std[static_cast<size_t>(r)];
                    const double dxh = static_cast<double>(g.data[i]) * static_cast<double>(gn2.data[static_cast<size_t>(c)]);
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                }
                for (int c = 0; c < D; ++c) {
                    const size_t i = static_cast<size_t>(r) * D + c;
                    const double xh = (static_cast<double>(vx2.data[i]) - mean[static_cast<size_t>(r)]) * inv_std[static_cast<size_t>(r)];
                    const double dxh = static_cast<double>(g.data[i]) * static_cast<double>(gn2.data[static_cast<size_t>(c)]);
                    if (t.needs_grad(x))
                        t.grad(x).data[i] += static_cast<R>(inv_std[static_cast<size_t>(r)] / D * (D * dxh - sum_dxh - xh * sum_dxh_xh));
                    if (t.needs_grad(gain)) t.grad(gain).data[static_cast<size_t>(c)] += g.data[i] * static_cast<R>(xh);
                    if (t.needs_grad(bias)) t.grad(bias).data[static_cast<size_t>(c)] += g.data[i];
                }
            }
        });
    }

private:
    struct Node {
        Tensor<R> value;
        Tensor<R> grad;
        std::function<void(Tape&)> backward;
        bool requires_grad = false;
    };

    std::vector<Node> nodes_;

    size_t check(Var v) const {
        require(v.valid() && static_cast<size_t>(v.id) < nodes_.size(), "tape: invalid var");
        return static_cast<size_t>(v.id);
    }

    bool any_grad(std::initializer_list<Var> vs) const {
        if (!grad_enabled) return false;
        for (Var v : vs)
            if (needs_grad(v)) return true;
        return false;
    }

    template <class F>
    Var push(Tensor<R> value, bool requires_grad, F&& bw) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        Var out{static_cast<int>(nodes_.size())};
        if constexpr (!std::is_same_v<std::decay_t<F>, std::nullptr_t>) {
            if (requires_grad) {
                n.backward = [f = std::forward<F>(bw), out](Tape& t) { f(t, out); };
            }
        }
        nodes_.push_back(std::move(n));
        return out;
    }

    Var push(Tensor<R> value, bool requires_grad, std::nullptr_t) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    void accumulate(Var v, const Tensor<R>& g) {
        if (!needs_grad(v)) return;
        Tensor<R>& gv = grad(v);
        for (long i = 0; i < g.size(); ++i) gv.data[i] += g.data[i];
    }
};

}  // namespace cht
