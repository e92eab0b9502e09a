#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "cht/episodes.hpp"

using namespace cht;

namespace {

bool episodes_equal(const Episode& a, const Episode& b) {
    return a.support_images.data == b.support_images.data && a.query_images.data == b.query_images.data &&
           a.support_labels == b.support_labels && a.query_labels == b.query_labels && a.class_map == b.class_map;
}

}  // namespace

TEST_CASE("synthetic pool is deterministic and seed-sensitive", "[episodes]") {
    const Shape img{12, 12, 1};
    ClassPool a = make_synthetic_pool(5, 10, img, 7);
    ClassPool b = make_synthetic_pool(5, 10, img, 7);
    ClassPool c = make_synthetic_pool(5, 10, img, 8);

    REQUIRE(a.num_classes() == 5);
    for (const auto& rec : a.classes) CHECK(rec.count() == 10);
    for (int k = 0; k < 5; ++k) CHECK(a.classes[k].samples.data == b.classes[k].samples.data);

    bool any_diff = false;
    for (int k = 0; k < 5 && !any_diff; ++k) any_diff = a.classes[k].samples.data != c.classes[k].samples.data;
    CHECK(any_diff);

    for (const auto& rec : a.classes)
        for (float v : rec.samples.data) REQUIRE((v >= 0.0f && v <= 1.0f));

    // degenerate single-class pool is valid
    ClassPool one = make_synthetic_pool(1, 2, img, 3);
    CHECK(one.num_classes() == 1);

    CHECK_THROWS(make_synthetic_pool(0, 10, img, 1));
    CHECK_THROWS(make_synthetic_pool(3, 1, img, 1));
}

TEST_CASE("episode invariants hold over many samples", "[episodes]") {
    ClassPool pool = make_synthetic_pool(8, 12, {8, 8, 1}, 11);
    Rng rng(123);
    const int K = 4, N = 2, Nq = 3;
    for (int trial = 0; trial < 1000; ++trial) {
        Episode ep = sample_episode(pool, K, N, Nq, rng);
        REQUIRE(ep.support_labels.size() == static_cast<size_t>(K * N));
        REQUIRE(ep.query_labels.size() == static_cast<size_t>(K * Nq));
        std::vector<int> sc(K, 0), qc(K, 0);
        for (int l : ep.support_labels) sc[l]++;
        for (int l : ep.query_labels) qc[l]++;
        for (int k = 0; k < K; ++k) {
            REQUIRE(sc[k] == N);
            REQUIRE(qc[k] == Nq);
            std::set<int> s(ep.support_sample_idx[k].begin(), ep.support_sample_idx[k].end());
            for (int q : ep.query_sample_idx[k]) REQUIRE(s.count(q) == 0);
        }
        // labels map to distinct classes
        std::set<std::string> ids(ep.class_map.begin(), ep.class_map.end());
        REQUIRE(ids.size() == static_cast<size_t>(K));
    }
}

TEST_CASE("label assignment is uniform over episodes", "[episodes]") {
    ClassPool pool = make_synthetic_pool(8, 8, {8, 8, 1}, 5);
    Rng rng(99);
    const int K = 4, trials = 4000;
    std::map<std::pair<int, int>, int> counts;  // (class index, label)
    std::vector<int> appearances(8, 0);
    for (int t = 0; t < trials; ++t) {
        Episode ep = sample_episode(pool, K, 1, 1, rng);
        for (int k = 0; k < K; ++k) {
            counts[{ep.class_index[k], k}]++;
            appearances[ep.class_index[k]]++;
        }
    }
    for (int cls = 0; cls < 8; ++cls) {
        const double expected = appearances[cls] / static_cast<double>(K);
        const double sigma = std::sqrt(appearances[cls] * (1.0 / K) * (1.0 - 1.0 / K));
        for (int k = 0; k < K; ++k) {
            const double got = counts[{cls, k}];
            INFO("class " << cls << " label " << k << " got " << got << " expected " << expected);
            CHECK(std::abs(got - expected) < 5.0 * sigma + 5.0);
        }
    }
}

TEST_CASE("task sequences are deterministic given a seed", "[episodes]") {
    std::vector<ClassPool> pools{make_synthetic_pool(10, 10, {8, 8, 1}, 1), make_synthetic_pool(10, 10, {8, 8, 1}, 2)};
    for (Regime r : {Regime::same_classes, Regime::single_domain, Regime::multi_domain}) {
        Rng r1(42), r2(42);
        TaskSequence a = sample_task_sequence(pools, 3, r, 4, 2, 3, r1);
        TaskSequence b = sample_task_sequence(pools, 3, r, 4, 2, 3, r2);
        REQUIRE(a.length() == 3);
        for (int t = 0; t < 3; ++t) CHECK(episodes_equal(a.tasks[t], b.tasks[t]));
    }
}

TEST_CASE("same_classes regime shares the class map and draws disjoint supports", "[episodes]") {
    ClassPool pool = make_synthetic_pool(6, 20, {8, 8, 1}, 3);
    Rng rng(7);
    const int T = 4, K = 5, N = 1;
    TaskSequence seq = sample_task_sequence({pool}, T, Regime::same_classes, K, N, 5, rng);
    for (int t = 1; t < T; ++t) CHECK(seq.tasks[t].class_map == seq.tasks[0].class_map);
    // supports disjoint across tasks (20 >= 4*1 + 5)
    for (int k = 0; k < K; ++k) {
        std::set<int> seen;
        for (int t = 0; t < T; ++t)
            for (int idx : seq.tasks[t].support_sample_idx[k]) {
                CHECK(seen.count(idx) == 0);
                seen.insert(idx);
            }
    }
}

TEST_CASE("same_classes falls back with a warning when the pool is small", "[episodes]") {
    ClassPool pool = make_synthetic_pool(6, 5, {8, 8, 1}, 3);  // 5 < T*N + Nq
    std::vector<std::string> warnings;
    auto old = warn_handler();
    warn_handler() = [&](const std::string& m) { warnings.push_back(m); };
    Rng rng(7);
    TaskSequence seq = sample_task_sequence({pool}, 4, Regime::same_classes, 3, 1, 3, rng);
    warn_handler() = old;
    CHECK(seq.length() == 4);
    CHECK_FALSE(warnings.empty());
}

TEST_CASE("multi_domain keeps each task within one pool", "[episodes]") {
    std::vector<ClassPool> pools{make_synthetic_pool(6, 8, {8, 8, 1}, 10), make_synthetic_pool(6, 8, {8, 8, 1}, 20)};
    Rng rng(77);
    bool saw_both = false;
    for (int trial = 0; trial < 20 && !saw_both; ++trial) {
        TaskSequence seq = sample_task_sequence(pools, 2, Regime::multi_domain, 3, 1, 2, rng);
        for (const auto& ep : seq.tasks) {
            CHECK((ep.domain_id == pools[0].domain_id || ep.domain_id == pools[1].domain_id));
        }
        saw_both = seq.tasks[0].domain_id != seq.tasks[1].domain_id;
    }
    CHECK(saw_both);
}

TEST_CASE("sampling failures raise descriptive errors", "[episodes]") {
    ClassPool pool = make_synthetic_pool(3, 3, {8, 8, 1}, 1);
    Rng rng(1);
    CHECK_THROWS(sample_episode(pool, 5, 1, 1, rng));   // not enough classes
    CHECK_THROWS(sample_episode(pool, 2, 2, 2, rng));   // not enough samples
    CHECK_NOTHROW(sample_episode(pool, 3, 1, 2, rng));  // exactly enough
}

TEST_CASE("npy pool round-trips through the on-disk layout", "[episodes]") {
    namespace fs = std::filesystem;
    const fs::path root = fs::temp_directory_path() / "cht_test_pool_npy";
    fs::remove_all(root);
    fs::create_directories(root);

    ClassPool pool = make_synthetic_pool(4, 6, {8, 8, 1}, 9);
    for (const auto& rec : pool.classes) npy_write((root / (rec.class_id + ".npy")).string(), rec.samples);

    ClassPool loaded = load_pool(root.string(), PoolFormat::npy);
    REQUIRE(loaded.num_classes() == 4);
    CHECK(loaded.height == 8);
    // class order lexicographic; samples byte-identical
    for (int k = 0; k < 4; ++k) {
        CHECK(loaded.classes[k].class_id == pool.classes[k].class_id);
        CHECK(loaded.classes[k].samples.data == pool.classes[k].samples.data);
    }
    CHECK_THROWS(load_pool((root / "missing").string(), PoolFormat::npy));
    fs::remove_all(root);
}

TEST_CASE("split_pool_by_class yields disjoint class-level splits", "[episodes]") {
    ClassPool pool = make_synthetic_pool(10, 5, {8, 8, 1}, 4);
    auto [train, test] = split_pool_by_class(pool, 0.2, 17);
    CHECK(train.num_classes() == 8);
    CHECK(test.num_classes() == 2);
    std::set<std::string> train_ids, test_ids;
    for (const auto& r : train.classes) train_ids.insert(r.class_id);
    for (const auto& r : test.classes) test_ids.insert(r.class_id);
    for (const auto& id : test_ids) CHECK(train_ids.count(id) == 0);

    auto [train2, test2] = split_pool_by_class(pool, 0.2, 17);
    CHECK(train2.classes[0].class_id == train.classes[0].class_id);
}

TEST_CASE("resampling keeps classes but redraws samples", "[episodes]") {
    ClassPool pool = make_synthetic_pool(8, 12, {8, 8, 1}, 6);
    Rng rng(5);
    TaskSequence seq = sample_task_sequence({pool}, 2, Regime::single_domain, 3, 2, 3, rng);
    TaskSequence re = resample_sequence_samples(seq, {pool}, rng);
    for (int t = 0; t < 2; ++t) {
        CHECK(re.tasks[t].class_map == seq.tasks[t].class_map);
        CHECK(re.tasks[t].shots() == seq.tasks[t].shots());
    }
}
