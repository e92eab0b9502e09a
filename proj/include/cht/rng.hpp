#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "cht/tensor.hpp"

namespace cht {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Deterministic RNG. All sampling goes through explicit methods instead of
/// std:: distributions so that streams are reproducible across platforms.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    /// uniform in [0,1)
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// unbiased integer in [0,n)
    int uniform_int(int n) {
        require(n > 0, "uniform_int: n must be positive");
        const uint64_t un = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t x = gen_();
        while (x >= limit) x = gen_();
        return static_cast<int>(x % un);
    }

    /// standard normal via Box-Muller with a cached spare
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    /// normal truncated to two standard deviations, then scaled
    double truncated_normal(double stddev) {
        double v = normal();
        while (std::abs(v) > 2.0) v = normal();
        return v * stddev;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(uniform_int(i + 1))]);
        }
    }

    /// k distinct indices from [0,n), in random order
    std::vector<int> choose(int n, int k) {
        require(k >= 0 && k <= n, "choose: need 0 <= k <= n");
        std::vector<int> idx(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
        for (int i = 0; i < k; ++i) {
            const int j = i + uniform_int(n - i);
            std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        }
        idx.resize(static_cast<size_t>(k));
        return idx;
    }

    /// independent substream; identical (seed, salt) gives an identical stream
    static Rng derive(uint64_t seed, uint64_t salt) {
        return Rng(splitmix64(seed ^ splitmix64(salt)));
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

template <class R>
Tensor<R> random_normal(Rng& rng, Shape shape, double stddev) {
    Tensor<R> t = Tensor<R>::zeros(std::move(shape));
    for (auto& v : t.data) v = static_cast<R>(rng.normal() * stddev);
    return t;
}

template <class R>
Tensor<R> random_truncated_normal(Rng& rng, Shape shape, double stddev) {
    Tensor<R> t = Tensor<R>::zeros(std::move(shape));
    for (auto& v : t.data) v = static_cast<R>(rng.truncated_normal(stddev));
    return t;
}

template <class R>
Tensor<R> random_uniform(Rng& rng, Shape shape, double lo, double hi) {
    Tensor<R> t = Tensor<R>::zeros(std::move(shape));
    for (auto& v : t.data) v = static_cast<R>(rng.uniform(lo, hi));
    return t;
}

}  // namespace cht
