#include <catch2/catch_amalgamated.hpp>

#include "cht/rng.hpp"
#include "cht/target_cnn.hpp"
#include "oracles.hpp"
#include "testutil.hpp"

using namespace cht;

namespace {

template <class R>
WeightBundle<R> random_bundle(const Arch& arch, uint64_t seed, double scale = 0.3) {
    Rng rng(seed);
    WeightBundle<R> w;
    for (const auto& e : shape_table(arch)) w.tensors.push_back(random_normal<R>(rng, e.shape, scale));
    return w;
}

}  // namespace

TEST_CASE("shape_table matches the 20-way omniglot configuration", "[target_cnn]") {
    Arch arch;  // defaults: 4 blocks, 8 channels, 20-dim embedding, 28x28x1
    const auto table = shape_table(arch);
    REQUIRE(table.size() == 4 * 3 + 2);
    CHECK(table[0].name == "block0.conv");
    CHECK(table[0].shape == Shape{3, 3, 1, 8});
    for (int b = 1; b < 4; ++b) CHECK(table[3 * b].shape == Shape{3, 3, 8, 8});
    // 28 -> 14 -> 7 -> 3 -> 1, so the dense layer sees 8 features
    CHECK(table[12].name == "dense.w");
    CHECK(table[12].shape == Shape{8, 20});
    CHECK(table[13].shape == Shape{20});

    const auto chain = spatial_chain(arch);
    CHECK(chain == std::vector<std::pair<int, int>>{{28, 28}, {14, 14}, {7, 7}, {3, 3}, {1, 1}});
}

TEST_CASE("shape_table covers large and degenerate configurations", "[target_cnn]") {
    Arch tiered;
    tiered.channels = 64;
    tiered.embed_dim = 40;
    tiered.in_height = tiered.in_width = 84;
    const auto table = shape_table(tiered);
    CHECK(table[table.size() - 2].shape.back() == 40);

    Arch tiny;
    tiny.num_blocks = 1;
    tiny.channels = 1;
    tiny.embed_dim = 1;
    tiny.in_height = tiny.in_width = 4;
    const auto small = shape_table(tiny);
    CHECK(small.size() == 5);
    CHECK(small[3].shape == Shape{4, 1});  // 2x2x1 flattened

    Arch bad;
    bad.in_height = bad.in_width = 8;  // 8 -> 4 -> 2 -> 1 -> 0
    CHECK_THROWS(shape_table(bad));
}

TEST_CASE("zero weights give a finite constant embedding", "[target_cnn]") {
    Arch arch;
    arch.num_blocks = 2;
    arch.channels = 3;
    arch.embed_dim = 4;
    arch.in_height = arch.in_width = 8;
    const auto w = zero_weights<float>(arch);
    double sum_abs = 0;
    for (const auto& t : w.tensors)
        for (float v : t.data) sum_abs += std::abs(v);
    CHECK(sum_abs == 0.0);

    Rng rng(1);
    Tensor<float> images = random_uniform<float>(rng, {5, 8, 8, 1}, 0.0, 1.0);
    Tensor<float> out = forward_embed(arch, w, images);
    REQUIRE(out.shape == Shape{5, 4});
    for (float v : out.data) {
        REQUIRE(std::isfinite(v));
        CHECK(v == 0.0f);  // constant across inputs, offset only
    }
}

TEST_CASE("forward matches the naive loop oracle", "[target_cnn]") {
    Arch arch;
    arch.num_blocks = 2;
    arch.channels = 3;
    arch.embed_dim = 5;
    arch.in_height = 9;  // odd size exercises pool flooring
    arch.in_width = 9;
    Rng rng(33);
    Tensor<float> images = random_uniform<float>(rng, {4, 9, 9, 1}, 0.0, 1.0);

    const auto wd = random_bundle<double>(arch, 77);
    Tensor<double> out = forward_embed(arch, wd, images);
    const auto oracle = chtest::naive_forward_embed(arch, wd, images);
    for (int b = 0; b < 4; ++b)
        for (int e = 0; e < 5; ++e) CHECK(std::abs(out(b, e) - oracle[b][e]) < 1e-10);

    const auto wf = random_bundle<float>(arch, 77);
    Tensor<float> outf = forward_embed(arch, wf, images);
    const auto oraclef = chtest::naive_forward_embed(arch, wf, images);
    for (int b = 0; b < 4; ++b)
        for (int e = 0; e < 5; ++e) CHECK(std::abs(outf(b, e) - oraclef[b][e]) < 1e-4);
}

TEST_CASE("duplicated batch rows embed identically", "[target_cnn]") {
    Arch arch;
    arch.num_blocks = 2;
    arch.channels = 4;
    arch.embed_dim = 6;
    arch.in_height = arch.in_width = 8;
    Rng rng(5);
    Tensor<float> one = random_uniform<float>(rng, {1, 8, 8, 1}, 0.0, 1.0);
    Tensor<float> two = Tensor<float>::zeros({2, 8, 8, 1});
    std::copy(one.data.begin(), one.data.end(), two.data.begin());
    std::copy(one.data.begin(), one.data.end(), two.data.begin() + one.size());

    const auto w = random_bundle<float>(arch, 6);
    Tensor<float> out = forward_embed(arch, w, two);
    for (int e = 0; e < 6; ++e) CHECK(out(0, e) == out(1, e));
}

TEST_CASE("batch scaling is absorbed by batch norm", "[target_cnn]") {
    Arch arch;
    arch.num_blocks = 2;
    arch.channels = 4;
    arch.embed_dim = 3;
    arch.in_height = arch.in_width = 8;
    Rng rng(8);
    Tensor<float> images = random_uniform<float>(rng, {6, 8, 8, 1}, 0.1, 1.0);
    Tensor<float> scaled = images;
    for (auto& v : scaled.data) v *= 2.5f;

    const auto w = random_bundle<double>(arch, 12);
    Tensor<double> a = forward_embed(arch, w, images);
    Tensor<double> b = forward_embed(arch, w, scaled);
    for (long i = 0; i < a.size(); ++i) CHECK(std::abs(a.data[i] - b.data[i]) < 1e-3);
}

TEST_CASE("forward rejects malformed bundles", "[target_cnn]") {
    Arch arch;
    arch.num_blocks = 1;
    arch.channels = 2;
    arch.embed_dim = 2;
    arch.in_height = arch.in_width = 4;
    auto w = zero_weights<float>(arch);
    Rng rng(2);
    Tensor<float> images = random_uniform<float>(rng, {2, 4, 4, 1}, 0.0, 1.0);

    auto bad_shape = w;
    bad_shape.tensors[0] = Tensor<float>::zeros({3, 3, 2, 2});
    CHECK_THROWS(forward_embed(arch, bad_shape, images));

    auto bad_value = w;
    bad_value.tensors[0].data[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS(forward_embed(arch, bad_value, images));

    Tensor<float> bad_images = random_uniform<float>(rng, {2, 5, 4, 1}, 0.0, 1.0);
    CHECK_THROWS(forward_embed(arch, w, bad_images));
}

TEST_CASE("slice conversion round-trips the bundle exactly", "[target_cnn]") {
    Arch arch;
    arch.num_blocks = 3;
    arch.channels = 4;
    arch.embed_dim = 5;
    arch.in_height = arch.in_width = 16;
    const auto w = random_bundle<float>(arch, 21);
    const auto slices = bundle_to_slices(arch, w);
    REQUIRE(static_cast<int>(slices.size()) == num_layers(arch));
    for (int l = 0; l < num_layers(arch); ++l)
        CHECK(slices[l].shape == Shape{slice_count(arch, l), slice_width(arch, l)});
    const auto back = slices_to_bundle(arch, slices);
    for (size_t i = 0; i < w.tensors.size(); ++i) CHECK(back.tensors[i].data == w.tensors[i].data);
}

TEST_CASE("autodiff matches finite differences through the whole stack", "[target_cnn]") {
    Arch arch;
    arch.num_blocks = 2;
    arch.channels = 2;
    arch.embed_dim = 3;
    arch.in_height = arch.in_width = 8;
    Rng rng(3);
    Tensor<float> images = random_uniform<float>(rng, {4, 8, 8, 1}, 0.0, 1.0);

    auto run = [&](auto real_tag, double h, double rtol, double atol) {
        using R = decltype(real_tag);
        const auto w = random_bundle<R>(arch, 55);
        std::vector<Tensor<R>> inputs = bundle_to_slices(arch, w);
        Rng wrng(9);
        const Tensor<R> mix = random_normal<R>(wrng, {4, 3}, 1.0);

        auto eval = [&](const std::vector<Tensor<R>>& xs) {
            Tape<R> tp;
            std::vector<Var> vars;
            for (const auto& x : xs) vars.push_back(tp.leaf(x));
            Var out = forward_embed_vars(tp, arch, vars, tp.constant(tensor_cast<R>(images)));
            return static_cast<double>(tp.val(tp.mean_all(tp.mul(out, tp.constant(mix)))).data[0]);
        };

        Tape<R> tp;
        std::vector<Var> vars;
        for (const auto& x : inputs) vars.push_back(tp.leaf(x));
        Var out = forward_embed_vars(tp, arch, vars, tp.constant(tensor_cast<R>(images)));
        tp.backward(tp.mean_all(tp.mul(out, tp.constant(mix))));

        const auto fd = chtest::fd_grads<R>(eval, inputs, h);
        for (size_t i = 0; i < inputs.size(); ++i) {
            const auto cmp = chtest::compare_grads(tp.grad(vars[i]), fd[i], rtol, atol);
            INFO("layer " << i << " max_rel " << cmp.max_rel);
            CHECK(cmp.ok);
        }
    };

    run(double{}, 1e-5, 1e-6, 1e-10);
    run(float{}, 1e-3, 1e-3, 5e-4);
}
