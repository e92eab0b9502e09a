#include <catch2/catch_amalgamated.hpp>

#include "cht/rng.hpp"
#include "cht/tape.hpp"
#include "testutil.hpp"

using cht::Rng;
using cht::Shape;
using cht::Tape;
using cht::Tensor;
using cht::Var;

namespace {

// Wires op(leaves...) into a weighted-sum scalar so every output element gets
// a distinct gradient signal, then compares tape gradients to central FD.
void check_op(const std::string& name,
              const std::vector<Shape>& in_shapes,
              const std::function<Var(Tape<double>&, const std::vector<Var>&)>& op,
              uint64_t seed, double input_scale = 1.0) {
    Rng rng(seed);
    std::vector<Tensor<double>> inputs;
    for (const auto& s : in_shapes) inputs.push_back(cht::random_normal<double>(rng, s, input_scale));

    Tape<double> probe;
    std::vector<Var> pv;
    for (auto& t : inputs) pv.push_back(probe.leaf(t));
    const Shape out_shape = probe.shape(op(probe, pv));
    const Tensor<double> w = cht::random_normal<double>(rng, out_shape, 1.0);

    auto eval = [&](const std::vector<Tensor<double>>& xs) {
        Tape<double> tp;
        std::vector<Var> vs;
        for (const auto& x : xs) vs.push_back(tp.leaf(x));
        Var out = op(tp, vs);
        Var loss = tp.sum_all(tp.mul(out, tp.constant(w)));
        return static_cast<double>(tp.val(loss).data[0]);
    };

    Tape<double> tp;
    std::vector<Var> vs;
    for (const auto& x : inputs) vs.push_back(tp.leaf(x));
    Var out = op(tp, vs);
    Var loss = tp.sum_all(tp.mul(out, tp.constant(w)));
    tp.backward(loss);

    const auto fd = chtest::fd_grads<double>(eval, inputs, 1e-5);
    for (size_t i = 0; i < inputs.size(); ++i) {
        INFO(name << " input " << i);
        const auto cmp = chtest::compare_grads(tp.grad(vs[i]), fd[i], 1e-6, 1e-8);
        CHECK(cmp.ok);
    }
}

}  // namespace

TEST_CASE("elementwise ops match finite differences", "[tape]") {
    check_op("add", {{3, 4}, {3, 4}}, [](auto& t, const auto& v) { return t.add(v[0], v[1]); }, 1);
    check_op("sub", {{3, 4}, {3, 4}}, [](auto& t, const auto& v) { return t.sub(v[0], v[1]); }, 2);
    check_op("mul", {{3, 4}, {3, 4}}, [](auto& t, const auto& v) { return t.mul(v[0], v[1]); }, 3);
    check_op("scale", {{3, 4}}, [](auto& t, const auto& v) { return t.scale(v[0], -2.5); }, 4);
    check_op("relu", {{5, 7}}, [](auto& t, const auto& v) { return t.relu(v[0]); }, 5);
    check_op("gelu", {{5, 7}}, [](auto& t, const auto& v) { return t.gelu(v[0]); }, 6);
    check_op("add_scalar", {{2, 3}}, [](auto& t, const auto& v) { return t.add_scalar(v[0], 0.7); }, 7);
}

TEST_CASE("broadcast adds match finite differences", "[tape]") {
    check_op("add_rowvec", {{4, 6}, {6}}, [](auto& t, const auto& v) { return t.add_rowvec(v[0], v[1]); }, 10);
    check_op("add_colvec", {{4, 6}, {4, 1}}, [](auto& t, const auto& v) { return t.add_colvec(v[0], v[1]); }, 11);
}

TEST_CASE("matrix products match finite differences", "[tape]") {
    check_op("matmul", {{3, 5}, {5, 4}}, [](auto& t, const auto& v) { return t.matmul(v[0], v[1]); }, 20);
    check_op("matmul_nt", {{3, 5}, {4, 5}}, [](auto& t, const auto& v) { return t.matmul_nt(v[0], v[1]); }, 21);
}

TEST_CASE("reductions and row ops match finite differences", "[tape]") {
    check_op("sum_all", {{4, 3}}, [](auto& t, const auto& v) { return t.sum_all(v[0]); }, 30);
    check_op("mean_all", {{4, 3}}, [](auto& t, const auto& v) { return t.mean_all(v[0]); }, 31);
    check_op("rowwise_sqnorm", {{4, 3}}, [](auto& t, const auto& v) { return t.rowwise_sqnorm(v[0]); }, 32);
    check_op("softmax_rows", {{4, 5}}, [](auto& t, const auto& v) { return t.softmax_rows(v[0]); }, 33);
    check_op("logsumexp_rows", {{4, 5}}, [](auto& t, const auto& v) { return t.logsumexp_rows(v[0]); }, 34);
    check_op("pick_cols", {{4, 5}}, [](auto& t, const auto& v) { return t.pick_cols(v[0], {1, 0, 3, 2}); }, 35);
}

TEST_CASE("plumbing ops match finite differences", "[tape]") {
    check_op("reshape", {{4, 6}}, [](auto& t, const auto& v) { return t.reshape(v[0], {2, 12}); }, 40);
    check_op("concat_rows", {{2, 4}, {3, 4}},
             [](auto& t, const auto& v) { return t.concat_rows({v[0], v[1]}); }, 41);
    check_op("concat_cols", {{3, 2}, {3, 5}},
             [](auto& t, const auto& v) { return t.concat_cols({v[0], v[1]}); }, 42);
    check_op("slice_rows", {{5, 4}}, [](auto& t, const auto& v) { return t.slice_rows(v[0], 1, 4); }, 43);
    check_op("slice_cols", {{4, 6}}, [](auto& t, const auto& v) { return t.slice_cols(v[0], 2, 5); }, 44);
    check_op("gather_rows", {{5, 3}}, [](auto& t, const auto& v) { return t.gather_rows(v[0], {0, 2, 2, 4}); }, 45);
}

TEST_CASE("image ops match finite differences", "[tape]") {
    check_op("im2col3x3", {{2, 4, 5, 3}}, [](auto& t, const auto& v) { return t.im2col3x3(v[0]); }, 50);
    check_op("maxpool2", {{2, 5, 6, 3}}, [](auto& t, const auto& v) { return t.maxpool2(v[0]); }, 51);
    check_op("batchnorm", {{3, 4, 4, 2}, {2}, {2}},
             [](auto& t, const auto& v) { return t.batchnorm(v[0], v[1], v[2], 1e-5); }, 52);
    check_op("layernorm", {{4, 6}, {6}, {6}},
             [](auto& t, const auto& v) { return t.layernorm(v[0], v[1], v[2], 1e-5); }, 53);
}

TEST_CASE("batchnorm normalizes per channel", "[tape]") {
    Rng rng(99);
    Tape<double> tp;
    Var x = tp.leaf(cht::random_normal<double>(rng, {4, 3, 3, 5}, 2.0));
    Var y = tp.batchnorm(x, tp.constant(Tensor<double>::full({5}, 1.0)),
                         tp.constant(Tensor<double>::zeros({5})), 1e-5);
    const auto& v = tp.val(y);
    const int C = 5;
    const long m = v.size() / C;
    for (int c = 0; c < C; ++c) {
        double mean = 0, var = 0;
        for (long i = c; i < v.size(); i += C) mean += v.data[i];
        mean /= static_cast<double>(m);
        for (long i = c; i < v.size(); i += C) var += (v.data[i] - mean) * (v.data[i] - mean);
        var /= static_cast<double>(m);
        CHECK(std::abs(mean) < 1e-4);
        CHECK(std::abs(var - 1.0) < 1e-3);
    }
}

TEST_CASE("maxpool floors odd spatial dims", "[tape]") {
    Tape<float> tp;
    Tensor<float> x = Tensor<float>::zeros({1, 7, 7, 1});
    for (long i = 0; i < x.size(); ++i) x.data[i] = static_cast<float>(i);
    Var y = tp.maxpool2(tp.constant(x));
    CHECK(tp.shape(y) == Shape{1, 3, 3, 1});
}

TEST_CASE("grad-disabled tape records values only", "[tape]") {
    Tape<float> tp;
    tp.grad_enabled = false;
    Var a = tp.leaf(Tensor<float>::full({2, 2}, 3.0f));
    Var b = tp.mul(a, a);
    CHECK(tp.val(b).data[0] == 9.0f);
    CHECK_FALSE(tp.needs_grad(b));
    CHECK_THROWS(tp.backward(tp.sum_all(b)));
}

TEST_CASE("gradients accumulate across reused vars", "[tape]") {
    Tape<double> tp;
    Var a = tp.leaf(Tensor<double>::full({1}, 3.0));
    Var y = tp.add(tp.mul(a, a), a);  // y = a^2 + a, dy/da = 2a + 1 = 7
    tp.backward(y);
    CHECK(tp.grad(a).data[0] == Catch::Approx(7.0));
}

TEST_CASE("rng determinism and basic stats", "[rng]") {
    Rng a(1234), b(1234);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng r(7);
    double mean = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) mean += r.normal();
    mean /= n;
    CHECK(std::abs(mean) < 0.05);

    auto picks = r.choose(10, 4);
    CHECK(picks.size() == 4);
    std::sort(picks.begin(), picks.end());
    CHECK(std::unique(picks.begin(), picks.end()) == picks.end());

    // derived substreams reproduce
    Rng d1 = Rng::derive(42, 7), d2 = Rng::derive(42, 7);
    CHECK(d1.next_u64() == d2.next_u64());
}
