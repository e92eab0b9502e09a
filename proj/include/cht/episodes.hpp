#pragma once

#include <algorithm>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "cht/io_image.hpp"
#include "cht/rng.hpp"
#include "cht/tensor.hpp"

namespace cht {

/// Warning sink for non-fatal sampling fallbacks; tests may replace it.
inline std::function<void(const std::string&)>& warn_handler() {
    static std::function<void(const std::string&)> h = [](const std::string& msg) {
        std::cerr << "[warn] " << msg << "\n";
    };
    return h;
}

inline void warn(const std::string& msg) { warn_handler()(msg); }

// ---- pools ----

struct ClassRecord {
    std::string class_id;
    Tensor<float> samples;  // [n, H, W, C]
    int count() const { return samples.shape[0]; }
};

/// Immutable after construction. All images share H,W,C and live in [0,1]
/// unless per-pool mean/std normalization was requested.
struct ClassPool {
    std::string domain_id;
    std::vector<ClassRecord> classes;
    int height = 0, width = 0, channels = 0;

    int num_classes() const { return static_cast<int>(classes.size()); }
    Shape image_shape() const { return {height, width, channels}; }

    Tensor<float> image(int class_idx, int sample_idx) const {
        const ClassRecord& rec = classes[static_cast<size_t>(class_idx)];
        require(sample_idx >= 0 && sample_idx < rec.count(), "pool: sample index out of range");
        Tensor<float> img = Tensor<float>::zeros({height, width, channels});
        const long sz = img.size();
        std::copy(rec.samples.data.begin() + sample_idx * sz, rec.samples.data.begin() + (sample_idx + 1) * sz,
                  img.data.begin());
        return img;
    }
};

enum class PoolFormat { png, npy };

inline ClassPool load_pool(const std::string& root, PoolFormat format) {
    namespace fs = std::filesystem;
    require(fs::is_directory(root), "load_pool: missing directory " + root);

    ClassPool pool;
    pool.domain_id = fs::path(root).filename().string();

    std::vector<std::string> entries;
    for (const auto& e : fs::directory_iterator(root)) entries.push_back(e.path().string());
    std::sort(entries.begin(), entries.end());  // class order deterministic

    for (const auto& entry : entries) {
        if (format == PoolFormat::npy) {
            if (fs::path(entry).extension() != ".npy") continue;
            Tensor<float> arr = npy_read(entry);
            if (arr.rank() == 3) arr.shape.push_back(1);  // [n,H,W] -> [n,H,W,1]
            require(arr.rank() == 4, "load_pool: " + entry + " must have shape [n,H,W,C]");
            ClassRecord rec;
            rec.class_id = fs::path(entry).stem().string();
            rec.samples = std::move(arr);
            require(rec.count() >= 1, "load_pool: class " + rec.class_id + " has no samples");
            pool.classes.push_back(std::move(rec));
        } else {
            if (!fs::is_directory(entry)) continue;
            std::vector<std::string> files;
            for (const auto& f : fs::directory_iterator(entry))
                if (f.path().extension() == ".png") files.push_back(f.path().string());
            std::sort(files.begin(), files.end());
            require(!files.empty(), "load_pool: class " + fs::path(entry).filename().string() + " has no samples");
            ClassRecord rec;
            rec.class_id = fs::path(entry).filename().string();
            for (size_t i = 0; i < files.size(); ++i) {
                Tensor<float> img = read_png(files[i]);
                if (i == 0)
                    rec.samples = Tensor<float>::zeros({static_cast<int>(files.size()), img.shape[0], img.shape[1], img.shape[2]});
                require(img.shape[0] == rec.samples.shape[1] && img.shape[1] == rec.samples.shape[2] &&
                            img.shape[2] == rec.samples.shape[3],
                        "load_pool: inconsistent image shape in " + files[i]);
                std::copy(img.data.begin(), img.data.end(), rec.samples.data.begin() + static_cast<long>(i) * img.size());
            }
            pool.classes.push_back(std::move(rec));
        }
    }
    require(!pool.classes.empty(), "load_pool: no classes found under " + root);

    pool.height = pool.classes[0].samples.shape[1];
    pool.width = pool.classes[0].samples.shape[2];
    pool.channels = pool.classes[0].samples.shape[3];
    for (const auto& rec : pool.classes) {
        require(rec.samples.shape[1] == pool.height && rec.samples.shape[2] == pool.width &&
                    rec.samples.shape[3] == pool.channels,
                "load_pool: class " + rec.class_id + " disagrees on image shape");
        for (float v : rec.samples.data)
            require(v >= -1e-6f && v <= 1.0f + 1e-6f, "load_pool: class " + rec.class_id + " has values outside [0,1]");
    }
    return pool;
}

/// Shift all images to zero mean / unit variance per channel, computed over
/// the whole pool.
inline void normalize_pool_meanstd(ClassPool& pool) {
    const int C = pool.channels;
    std::vector<double> mean(static_cast<size_t>(C), 0), var(static_cast<size_t>(C), 0);
    long m = 0;
    for (const auto& rec : pool.classes) {
        for (long i = 0; i < rec.samples.size(); ++i) mean[static_cast<size_t>(i % C)] += rec.samples.data[i];
        m += rec.samples.size() / C;
    }
    for (int c = 0; c < C; ++c) mean[static_cast<size_t>(c)] /= static_cast<double>(m);
    for (const auto& rec : pool.classes)
        for (long i = 0; i < rec.samples.size(); ++i) {
            const double d = rec.samples.data[i] - mean[static_cast<size_t>(i % C)];
            var[static_cast<size_t>(i % C)] += d * d;
        }
    for (int c = 0; c < C; ++c) var[static_cast<size_t>(c)] = std::sqrt(var[static_cast<size_t>(c)] / static_cast<double>(m) + 1e-8);
    for (auto& rec : pool.classes)
        for (long i = 0; i < rec.samples.size(); ++i) {
            const int c = static_cast<int>(i % C);
            rec.samples.data[i] = static_cast<float>((rec.samples.data[i] - mean[static_cast<size_t>(c)]) / var[static_cast<size_t>(c)]);
        }
}

/// Separable class templates (gaussian blobs + a sinusoidal grating) with
/// per-sample toroidal shift, amplitude jitter and pixel noise. Deterministic
/// in (seed, class, sample).
inline ClassPool make_synthetic_pool(int num_classes, int samples_per_class, const Shape& image_shape, uint64_t seed,
                                     double noise = 0.25, int max_shift = 2) {
    require(num_classes >= 1, "make_synthetic_pool: num_classes must be >= 1");
    require(samples_per_class >= 2, "make_synthetic_pool: samples_per_class must be >= 2");
    require(image_shape.size() == 3, "make_synthetic_pool: image shape must be [H,W,C]");
    const int H = image_shape[0], W = image_shape[1], C = image_shape[2];
    require(H >= 4 && W >= 4 && C >= 1, "make_synthetic_pool: image too small");

    ClassPool pool;
    pool.domain_id = "synthetic-" + std::to_string(seed);
    pool.height = H;
    pool.width = W;
    pool.channels = C;

    for (int cls = 0; cls < num_classes; ++cls) {
        Rng crng = Rng::derive(seed, 0x10000 + static_cast<uint64_t>(cls));
        const int nblobs = 1 + crng.uniform_int(2);
        struct Blob {
            double cx, cy, sx, sy, amp;
        };
        std::vector<Blob> blobs;
        for (int b = 0; b < nblobs; ++b)
            blobs.push_back({crng.uniform(0.15, 0.85), crng.uniform(0.15, 0.85), crng.uniform(0.08, 0.2),
                             crng.uniform(0.08, 0.2), crng.uniform(0.6, 1.0)});
        const double angle = crng.uniform(0.0, 3.14159265358979323846);
        const double freq = crng.uniform(1.5, 4.0);
        const double phase = crng.uniform(0.0, 6.28318530717958647692);
        const double gamp = crng.uniform(0.3, 0.6);

        Tensor<float> tmpl = Tensor<float>::zeros({H, W});
        double tmin = 1e30, tmax = -1e30;
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                const double y = (i + 0.5) / H, x = (j + 0.5) / W;
                double v = 0;
                for (const auto& b : blobs) {
                    const double dx = (x - b.cx) / b.sx, dy = (y - b.cy) / b.sy;
                    v += b.amp * std::exp(-0.5 * (dx * dx + dy * dy));
                }
                v += gamp * 0.5 * (1.0 + std::sin(6.28318530717958647692 * freq * (x * std::cos(angle) + y * std::sin(angle)) + phase));
                tmpl(i, j) = static_cast<float>(v);
                tmin = std::min(tmin, v);
                tmax = std::max(tmax, v);
            }
        for (auto& v : tmpl.data) v = static_cast<float>((v - tmin) / (tmax - tmin + 1e-9));

        ClassRecord rec;
        rec.class_id = "class" + std::string(cls < 10 ? "00" : cls < 100 ? "0" : "") + std::to_string(cls);
        rec.samples = Tensor<float>::zeros({samples_per_class, H, W, C});
        for (int s = 0; s < samples_per_class; ++s) {
            Rng srng = Rng::derive(seed, 0x20000000ULL + static_cast<uint64_t>(cls) * 100003ULL + static_cast<uint64_t>(s));
            const int di = max_shift > 0 ? srng.uniform_int(2 * max_shift + 1) - max_shift : 0;
            const int dj = max_shift > 0 ? srng.uniform_int(2 * max_shift + 1) - max_shift : 0;
            const double amp = srng.uniform(0.8, 1.2);
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    const int si = ((i + di) % H + H) % H;
                    const int sj = ((j + dj) % W + W) % W;
                    const double base = amp * tmpl(si, sj);
                    for (int c = 0; c < C; ++c) {
                        double v = base + noise * srng.normal();
                        v = std::min(1.0, std::max(0.0, v));
                        rec.samples.data[((static_cast<long>(s) * H + i) * W + j) * C + c] = static_cast<float>(v);
                    }
                }
        }
        pool.classes.push_back(std::move(rec));
    }
    return pool;
}

/// Class-level disjoint split; the held-out side gets round(ratio * n)
/// classes, at least 1 on each side when n >= 2.
inline std::pair<ClassPool, ClassPool> split_pool_by_class(const ClassPool& pool, double holdout_ratio, uint64_t seed) {
    require(holdout_ratio > 0.0 && holdout_ratio < 1.0, "split_pool_by_class: ratio must be in (0,1)");
    const int n = pool.num_classes();
    int ntest = static_cast<int>(std::lround(holdout_ratio * n));
    if (n >= 2) ntest = std::max(1, std::min(n - 1, ntest));
    Rng rng = Rng::derive(seed, 0x5b1e7);
    std::vector<int> idx = rng.choose(n, n);
    std::vector<int> test_idx(idx.begin(), idx.begin() + ntest);
    std::sort(test_idx.begin(), test_idx.end());
    std::vector<bool> is_test(static_cast<size_t>(n), false);
    for (int i : test_idx) is_test[static_cast<size_t>(i)] = true;

    ClassPool train = pool, test = pool;
    train.classes.clear();
    test.classes.clear();
    for (int i = 0; i < n; ++i)
        (is_test[static_cast<size_t>(i)] ? test : train).classes.push_back(pool.classes[static_cast<size_t>(i)]);
    return {train, test};
}

// ---- episodes ----

struct Episode {
    Tensor<float> support_images;  // [K*N, H, W, C]
    std::vector<int> support_labels;
    Tensor<float> query_images;  // [K*Nq, H, W, C]
    std::vector<int> query_labels;
    std::vector<std::string> class_map;  // label -> class_id
    std::vector<int> class_index;        // label -> class index within its pool
    std::vector<std::vector<int>> support_sample_idx;  // per label
    std::vector<std::vector<int>> query_sample_idx;
    std::string domain_id;

    int way() const { return static_cast<int>(class_map.size()); }
    int shots() const { return static_cast<int>(support_labels.size()) / way(); }
    int query_shots() const { return static_cast<int>(query_labels.size()) / way(); }
};

enum class Regime { same_classes, single_domain, multi_domain };

inline std::string regime_name(Regime r) {
    switch (r) {
        case Regime::same_classes: return "same_classes";
        case Regime::single_domain: return "single_domain";
        default: return "multi_domain";
    }
}

inline Regime regime_from_name(const std::string& s) {
    if (s == "same_classes") return Regime::same_classes;
    if (s == "single_domain") return Regime::single_domain;
    if (s == "multi_domain") return Regime::multi_domain;
    fail("unknown regime: " + s);
}

struct TaskSequence {
    std::vector<Episode> tasks;
    Regime regime = Regime::single_domain;
    int length() const { return static_cast<int>(tasks.size()); }
};

namespace detail {

inline void stack_images(const ClassPool& pool, const std::vector<std::pair<int, int>>& picks, Tensor<float>& out) {
    const long sz = static_cast<long>(pool.height) * pool.width * pool.channels;
    out = Tensor<float>::zeros({static_cast<int>(picks.size()), pool.height, pool.width, pool.channels});
    for (size_t i = 0; i < picks.size(); ++i) {
        const ClassRecord& rec = pool.classes[static_cast<size_t>(picks[i].first)];
        std::copy(rec.samples.data.begin() + picks[i].second * sz, rec.samples.data.begin() + (picks[i].second + 1) * sz,
                  out.data.begin() + static_cast<long>(i) * sz);
    }
}

/// Build an episode for an already-chosen ordered class list (label k is
/// classes[k]). Sample indices are drawn disjointly between support and query.
inline Episode episode_for_classes(const ClassPool& pool, const std::vector<int>& classes, int shots, int query_shots,
                                   Rng& rng) {
    const int way = static_cast<int>(classes.size());
    Episode ep;
    ep.domain_id = pool.domain_id;
    ep.class_index = classes;
    for (int k = 0; k < way; ++k) ep.class_map.push_back(pool.classes[static_cast<size_t>(classes[static_cast<size_t>(k)])].class_id);

    std::vector<std::pair<int, int>> sup, qry;
    ep.support_sample_idx.resize(static_cast<size_t>(way));
    ep.query_sample_idx.resize(static_cast<size_t>(way));
    for (int k = 0; k < way; ++k) {
        const int ci = classes[static_cast<size_t>(k)];
        const int count = pool.classes[static_cast<size_t>(ci)].count();
        require(count >= shots + query_shots,
                "sample_episode: class " + pool.classes[static_cast<size_t>(ci)].class_id + " has " + std::to_string(count) +
                    " samples, needs " + std::to_string(shots + query_shots));
        std::vector<int> pick = rng.choose(count, shots + query_shots);
        for (int s = 0; s < shots; ++s) {
            sup.emplace_back(ci, pick[static_cast<size_t>(s)]);
            ep.support_sample_idx[static_cast<size_t>(k)].push_back(pick[static_cast<size_t>(s)]);
            ep.support_labels.push_back(k);
        }
        for (int q = 0; q < query_shots; ++q) {
            qry.emplace_back(ci, pick[static_cast<size_t>(shots + q)]);
            ep.query_sample_idx[static_cast<size_t>(k)].push_back(pick[static_cast<size_t>(shots + q)]);
            ep.query_labels.push_back(k);
        }
    }
    stack_images(pool, sup, ep.support_images);
    stack_images(pool, qry, ep.query_images);
    return ep;
}

}  // namespace detail

/// K-way N-shot episode with a fresh random class-to-label permutation.
inline Episode sample_episode(const ClassPool& pool, int way, int shots, int query_shots, Rng& rng) {
    require(way >= 1 && shots >= 1 && query_shots >= 1, "sample_episode: way/shots must be positive");
    require(pool.num_classes() >= way,
            "sample_episode: pool has " + std::to_string(pool.num_classes()) + " classes, needs " + std::to_string(way));
    const std::vector<int> classes = rng.choose(pool.num_classes(), way);
    return detail::episode_for_classes(pool, classes, shots, query_shots, rng);
}

inline TaskSequence sample_task_sequence(const std::vector<ClassPool>& pools, int num_tasks, Regime regime, int way,
                                         int shots, int query_shots, Rng& rng) {
    require(!pools.empty(), "sample_task_sequence: no pools");
    require(num_tasks >= 1, "sample_task_sequence: need at least one task");
    TaskSequence seq;
    seq.regime = regime;

    if (regime == Regime::multi_domain) {
        if (pools.size() < 2) warn("multi_domain regime requested with fewer than 2 pools");
        for (int t = 0; t < num_tasks; ++t) {
            const ClassPool& pool = pools[static_cast<size_t>(rng.uniform_int(static_cast<int>(pools.size())))];
            seq.tasks.push_back(sample_episode(pool, way, shots, query_shots, rng));
        }
        return seq;
    }

    const ClassPool& pool = pools.size() == 1 ? pools[0] : pools[static_cast<size_t>(rng.uniform_int(static_cast<int>(pools.size())))];

    if (regime == Regime::single_domain) {
        for (int t = 0; t < num_tasks; ++t) seq.tasks.push_back(sample_episode(pool, way, shots, query_shots, rng));
        return seq;
    }

    // same_classes: one class set and label assignment shared by all tasks;
    // support samples drawn disjointly across tasks when the pool permits.
    require(pool.num_classes() >= way, "sample_task_sequence: pool too small for requested way");
    const std::vector<int> classes = rng.choose(pool.num_classes(), way);
    bool disjoint = true;
    for (int ci : classes)
        disjoint = disjoint && pool.classes[static_cast<size_t>(ci)].count() >= num_tasks * shots + query_shots;
    if (!disjoint)
        warn("same_classes: pool too small for disjoint supports across " + std::to_string(num_tasks) +
             " tasks; falling back to independent draws");

    if (!disjoint) {
        for (int t = 0; t < num_tasks; ++t) {
            Episode ep = detail::episode_for_classes(pool, classes, shots, query_shots, rng);
            seq.tasks.push_back(std::move(ep));
        }
        return seq;
    }

    // per class: one permutation; task t's support takes slots [t*N, (t+1)*N),
    // queries come from the slots no task uses for support
    std::vector<std::vector<int>> perms;
    for (int ci : classes) {
        const int count = pool.classes[static_cast<size_t>(ci)].count();
        perms.push_back(rng.choose(count, count));
    }
    for (int t = 0; t < num_tasks; ++t) {
        Episode ep;
        ep.domain_id = pool.domain_id;
        ep.class_index = classes;
        for (int ci : classes) ep.class_map.push_back(pool.classes[static_cast<size_t>(ci)].class_id);
        ep.support_sample_idx.resize(static_cast<size_t>(way));
        ep.query_sample_idx.resize(static_cast<size_t>(way));
        std::vector<std::pair<int, int>> sup, qry;
        for (int k = 0; k < way; ++k) {
            const int ci = classes[static_cast<size_t>(k)];
            const auto& perm = perms[static_cast<size_t>(k)];
            for (int s = 0; s < shots; ++s) {
                const int idx = perm[static_cast<size_t>(t * shots + s)];
                sup.emplace_back(ci, idx);
                ep.support_sample_idx[static_cast<size_t>(k)].push_back(idx);
                ep.support_labels.push_back(k);
            }
            const int tail = static_cast<int>(perm.size()) - num_tasks * shots;
            std::vector<int> qpick = rng.choose(tail, query_shots);
            for (int q : qpick) {
                const int idx = perm[static_cast<size_t>(num_tasks * shots + q)];
                qry.emplace_back(ci, idx);
                ep.query_sample_idx[static_cast<size_t>(k)].push_back(idx);
                ep.query_labels.push_back(k);
            }
        }
        detail::stack_images(pool, sup, ep.support_images);
        detail::stack_images(pool, qry, ep.query_images);
        seq.tasks.push_back(std::move(ep));
    }
    return seq;
}

/// Redraw support/query samples for the same classes and label assignment
/// (evaluation re-runs). The pool must be the one the sequence came from.
inline TaskSequence resample_sequence_samples(const TaskSequence& seq, const std::vector<ClassPool>& pools, Rng& rng) {
    TaskSequence out;
    out.regime = seq.regime;
    for (const Episode& ep : seq.tasks) {
        const ClassPool* pool = nullptr;
        for (const auto& p : pools)
            if (p.domain_id == ep.domain_id) pool = &p;
        require(pool != nullptr, "resample_sequence_samples: pool " + ep.domain_id + " not found");
        out.tasks.push_back(detail::episode_for_classes(*pool, ep.class_index, ep.shots(), ep.query_shots(), rng));
    }
    return out;
}

}  // namespace cht
