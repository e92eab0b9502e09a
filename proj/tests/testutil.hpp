#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cht/rng.hpp"
#include "cht/tensor.hpp"

namespace chtest {

// Central finite differences. f must rebuild its computation from the given
// tensors on every call and return the scalar objective value.
template <class R>
std::vector<cht::Tensor<R>> fd_grads(const std::function<double(const std::vector<cht::Tensor<R>>&)>& f,
                                     std::vector<cht::Tensor<R>> inputs, double h) {
    std::vector<cht::Tensor<R>> grads;
    for (size_t n = 0; n < inputs.size(); ++n) {
        cht::Tensor<R> g = cht::Tensor<R>::zeros(inputs[n].shape);
        for (long i = 0; i < inputs[n].size(); ++i) {
            const R orig = inputs[n].data[i];
            inputs[n].data[i] = static_cast<R>(orig + h);
            const double fp = f(inputs);
            inputs[n].data[i] = static_cast<R>(orig - h);
            const double fm = f(inputs);
            inputs[n].data[i] = orig;
            g.data[i] = static_cast<R>((fp - fm) / (2.0 * h));
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

struct GradCompare {
    double max_rel = 0.0;   // |a-b| / max(|b|, atol/rtol)
    double max_abs = 0.0;
    bool ok = true;
};

// allclose-style comparison: pass iff |a-b| <= atol + rtol*max(|a|,|b|)
template <class R>
GradCompare compare_grads(const cht::Tensor<R>& autodiff, const cht::Tensor<R>& fd, double rtol, double atol) {
    GradCompare res;
    cht::require(autodiff.shape == fd.shape, "compare_grads: shape mismatch");
    for (long i = 0; i < autodiff.size(); ++i) {
        const double a = static_cast<double>(autodiff.data[i]);
        const double b = static_cast<double>(fd.data[i]);
        const double diff = std::abs(a - b);
        const double mag = std::max(std::abs(a), std::abs(b));
        res.max_abs = std::max(res.max_abs, diff);
        res.max_rel = std::max(res.max_rel, diff / std::max(mag, atol / rtol));
        if (diff > atol + rtol * mag) res.ok = false;
    }
    return res;
}

}  // namespace chtest
