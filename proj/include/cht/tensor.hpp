#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cht {

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

inline void require(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

using Shape = std::vector<int>;

inline long shape_numel(const Shape& s) {
    long n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

/// Dense row-major tensor. Rank is dynamic; most of the code uses rank-2
/// [rows, cols] views plus rank-4 [B,H,W,C] image batches.
template <class R>
struct Tensor {
    Shape shape;
    std::vector<R> data;

    Tensor() = default;
    Tensor(Shape s, std::vector<R> d) : shape(std::move(s)), data(std::move(d)) {
        require(shape_numel(shape) == static_cast<long>(data.size()), "tensor: shape/data mismatch");
    }

    static Tensor zeros(Shape s) {
        Tensor t;
        t.shape = std::move(s);
        t.data.assign(shape_numel(t.shape), R(0));
        return t;
    }

    static Tensor full(Shape s, R v) {
        Tensor t = zeros(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    long size() const { return static_cast<long>(data.size()); }
    bool empty() const { return data.empty(); }

    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape.size()); }

    // rank-2 accessors
    int rows() const { return shape[0]; }
    int cols() const {
        long c = 1;
        for (size_t i = 1; i < shape.size(); ++i) c *= shape[i];
        return static_cast<int>(c);
    }

    R& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    R operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

    bool all_finite() const {
        for (R v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

template <class R>
using MatX = Eigen::Matrix<R, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class R>
Eigen::Map<MatX<R>> mat_view(Tensor<R>& t, long rows, long cols) {
    require(rows * cols == t.size(), "mat_view: element count mismatch");
    return Eigen::Map<MatX<R>>(t.data.data(), rows, cols);
}

template <class R>
Eigen::Map<const MatX<R>> mat_view(const Tensor<R>& t, long rows, long cols) {
    require(rows * cols == t.size(), "mat_view: element count mismatch");
    return Eigen::Map<const MatX<R>>(t.data.data(), rows, cols);
}

// 2D view using the tensor's own leading dimension
template <class R>
Eigen::Map<MatX<R>> mat2(Tensor<R>& t) {
    return mat_view(t, t.rows(), t.cols());
}

template <class R>
Eigen::Map<const MatX<R>> mat2(const Tensor<R>& t) {
    return mat_view(t, t.rows(), t.cols());
}

template <class To, class From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
    Tensor<To> out;
    out.shape = t.shape;
    out.data.resize(t.data.size());
    for (size_t i = 0; i < t.data.size(); ++i) out.data[i] = static_cast<To>(t.data[i]);
    return out;
}

template <class R>
double max_abs_diff(const Tensor<R>& a, const Tensor<R>& b) {
    require(a.shape == b.shape, "max_abs_diff: shape mismatch");
    double m = 0;
    for (long i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
    return m;
}

}  // namespace cht
