#include <catch2/catch_amalgamated.hpp>

#include "cht/generator.hpp"
#include "testutil.hpp"

using namespace cht;

namespace {

Arch tiny_arch() {
    Arch a;
    a.num_blocks = 1;
    a.channels = 2;
    a.embed_dim = 2;
    a.in_height = a.in_width = 6;
    return a;
}

GeneratorConfig tiny_cfg() {
    GeneratorConfig c;
    c.feat_channels = {2};
    c.act_channels = {2};
    c.trans_layers = 1;
    c.trans_heads = 1;
    c.model_dim = 8;
    c.ff_dim = 12;
    c.label_embed_dim = 3;
    c.label_vocab = 6;
    return c;
}

template <class R>
bool states_equal(GeneratorState<R>& a, GeneratorState<R>& b) {
    std::vector<Tensor<R>*> ta, tb;
    a.for_each_param([&](const std::string&, Tensor<R>& t) { ta.push_back(&t); });
    b.for_each_param([&](const std::string&, Tensor<R>& t) { tb.push_back(&t); });
    if (ta.size() != tb.size()) return false;
    for (size_t i = 0; i < ta.size(); ++i)
        if (ta[i]->data != tb[i]->data) return false;
    return true;
}

template <class R>
bool bundles_equal(const WeightBundle<R>& a, const WeightBundle<R>& b) {
    for (size_t i = 0; i < a.tensors.size(); ++i)
        if (a.tensors[i].data != b.tensors[i].data) return false;
    return true;
}

ClassPool tiny_pool(uint64_t seed = 2) { return make_synthetic_pool(6, 8, {6, 6, 1}, seed); }

}  // namespace

TEST_CASE("generator init is deterministic and seed-sensitive", "[generator]") {
    Arch arch = tiny_arch();
    GeneratorConfig cfg = tiny_cfg();
    auto a = init_generator<float>(cfg, arch, 7);
    auto b = init_generator<float>(cfg, arch, 7);
    auto c = init_generator<float>(cfg, arch, 8);
    CHECK(states_equal(a, b));
    CHECK_FALSE(states_equal(a, c));

    // omniglot-style configuration constructs: 3-layer 2-head transformer
    GeneratorConfig omni;
    Arch oarch;
    auto st = init_generator<float>(omni, oarch, 1);
    CHECK(st.params.trans.size() == 3);

    GeneratorConfig bad = tiny_cfg();
    bad.model_dim = 9;  // not divisible by heads=1? make heads=2
    bad.trans_heads = 2;
    CHECK_THROWS(init_generator<float>(bad, arch, 1));
}

TEST_CASE("zero previous weights reduce weight tokens to placeholders", "[generator]") {
    Arch arch = tiny_arch();
    GeneratorConfig cfg = tiny_cfg();
    auto st = init_generator<float>(cfg, arch, 3);
    Rng rng(4);
    Episode ep = sample_episode(tiny_pool(), 5, 1, 1, rng);

    for (int layer = 0; layer < num_layers(arch); ++layer) {
        TokenBatch<float> tb = encode_support(st, ep, zero_weights<float>(arch), layer);
        CHECK(tb.sample_tokens.shape == Shape{5, cfg.model_dim});
        const int slices = slice_count(arch, layer);
        REQUIRE(tb.weight_tokens.shape == Shape{slices, cfg.model_dim});
        // expected: 0-projection + placeholder + slice position + layer embedding
        for (int i = 0; i < slices; ++i)
            for (int d = 0; d < cfg.model_dim; ++d) {
                const float expected = (0.0f + st.params.placeholder.data[d] + st.params.slice_pos(i, d)) +
                                       st.params.layer_embed(layer, d);
                CHECK(tb.weight_tokens(i, d) == expected);
            }
    }
}

TEST_CASE("token count is support size plus weight slices", "[generator]") {
    Arch arch = tiny_arch();
    arch.channels = 8;  // 8 output slices on the conv layer
    GeneratorConfig cfg = tiny_cfg();
    auto st = init_generator<float>(cfg, arch, 3);
    Rng rng(4);
    Episode ep = sample_episode(tiny_pool(), 5, 1, 1, rng);
    TokenBatch<float> tb = encode_support(st, ep, zero_weights<float>(arch), 0);
    CHECK(tb.sample_tokens.shape[0] + tb.weight_tokens.shape[0] == 13);
}

TEST_CASE("generation is deterministic and shape-conformant", "[generator]") {
    Arch arch = tiny_arch();
    GeneratorConfig cfg = tiny_cfg();
    auto st = init_generator<float>(cfg, arch, 11);
    Rng rng(5);
    Episode ep = sample_episode(tiny_pool(), 4, 2, 2, rng);

    WeightBundle<float> w1 = generate_weights(st, ep, zero_weights<float>(arch));
    WeightBundle<float> w2 = generate_weights(st, ep, zero_weights<float>(arch));
    CHECK(bundles_equal(w1, w2));
    CHECK_NOTHROW(validate_bundle(arch, w1));

    // output actually depends on the support set
    Episode ep2 = sample_episode(tiny_pool(), 4, 2, 2, rng);
    WeightBundle<float> w3 = generate_weights(st, ep2, zero_weights<float>(arch));
    CHECK_FALSE(bundles_equal(w1, w3));
}

TEST_CASE("generated weights are invariant to support order", "[generator]") {
    Arch arch = tiny_arch();
    GeneratorConfig cfg = tiny_cfg();
    auto st = init_generator<float>(cfg, arch, 13);
    Rng rng(6);
    Episode ep = sample_episode(tiny_pool(), 3, 2, 1, rng);

    // reverse the support set
    Episode rev = ep;
    const int S = static_cast<int>(ep.support_labels.size());
    const long sz = static_cast<long>(ep.support_images.size()) / S;
    for (int i = 0; i < S; ++i) {
        rev.support_labels[i] = ep.support_labels[S - 1 - i];
        std::copy(ep.support_images.data.begin() + (S - 1 - i) * sz, ep.support_images.data.begin() + (S - i) * sz,
                  rev.support_images.data.begin() + i * sz);
    }

    WeightBundle<float> a = generate_weights(st, ep, zero_weights<float>(arch));
    WeightBundle<float> b = generate_weights(st, rev, zero_weights<float>(arch));
    for (size_t i = 0; i < a.tensors.size(); ++i) CHECK(max_abs_diff(a.tensors[i], b.tensors[i]) <= 1e-5);
}

TEST_CASE("unroll recursion matches stepwise regeneration", "[generator]") {
    Arch arch = tiny_arch();
    GeneratorConfig cfg = tiny_cfg();
    auto st = init_generator<float>(cfg, arch, 17);
    Rng rng(7);
    TaskSequence seq = sample_task_sequence({tiny_pool()}, 3, Regime::single_domain, 3, 1, 2, rng);

    auto thetas = unroll(st, seq);
    REQUIRE(thetas.size() == 3);

    // T=1 reduces to a single generate_weights call on zero placeholders
    TaskSequence first;
    first.regime = seq.regime;
    first.tasks = {seq.tasks[0]};
    auto single = unroll(st, first);
    CHECK(bundles_equal(single[0], thetas[0]));
    CHECK(bundles_equal(generate_weights(st, seq.tasks[0], zero_weights<float>(arch)), thetas[0]));

    // theta_1 is reproducible from (S1, theta_0)
    CHECK(bundles_equal(generate_weights(st, seq.tasks[1], thetas[0]), thetas[1]));

    // recurrence: the same state handles longer sequences than any training T
    TaskSequence longer = sample_task_sequence({tiny_pool()}, 5, Regime::single_domain, 3, 1, 2, rng);
    CHECK_NOTHROW(unroll(st, longer));
}

TEST_CASE("gradients flow through the previous-weights path", "[generator]") {
    Arch arch = tiny_arch();
    GeneratorConfig cfg = tiny_cfg();
    auto st = init_generator<float>(cfg, arch, 19);
    Rng rng(8);
    TaskSequence seq = sample_task_sequence({tiny_pool()}, 2, Regime::single_domain, 3, 1, 2, rng);

    Tape<float> tp;
    GeneratorVars vars = stage_generator(tp, st);
    std::vector<Var> zero = stage_slices(tp, bundle_to_slices(arch, zero_weights<float>(arch)));
    Var img0 = tp.constant(tensor_cast<float>(seq.tasks[0].support_images));
    std::vector<Var> theta0 = generate_weights_vars(tp, arch, cfg, vars, img0, seq.tasks[0].support_labels, zero);
    Var img1 = tp.constant(tensor_cast<float>(seq.tasks[1].support_images));
    // ablate the support-token path at the final step: remaining gradient can
    // only arrive through the previous-weights tokens
    std::vector<Var> theta1 =
        generate_weights_vars(tp, arch, cfg, vars, img1, seq.tasks[1].support_labels, theta0, /*ablate=*/true);

    std::vector<Var> all;
    for (Var v : theta1) all.push_back(tp.reshape(v, {1, static_cast<int>(shape_numel(tp.shape(v)))}));
    Var loss = tp.mean_all(tp.rowwise_sqnorm(tp.concat_cols(all)));
    tp.backward(loss);

    double theta0_grad = 0;
    for (Var v : theta0)
        if (tp.grad_touched(v))
            for (float g : tp.grad(v).data) theta0_grad += std::abs(g);
    CHECK(theta0_grad > 0.0);

    // and psi still receives gradient through that path (step-0 generation)
    double psi_grad = 0;
    vars.each([&](const std::string&, Var& v) {
        if (tp.grad_touched(v))
            for (float g : tp.grad(v).data) psi_grad += std::abs(g);
    });
    CHECK(psi_grad > 0.0);
}

TEST_CASE("generator autodiff matches finite differences at tiny scale", "[generator]") {
    Arch arch = tiny_arch();
    GeneratorConfig cfg = tiny_cfg();
    Rng rng(9);
    Episode ep = sample_episode(tiny_pool(), 3, 1, 1, rng);

    auto run = [&](auto real_tag, double h, double rtol, double atol) {
        using R = decltype(real_tag);
        auto st = init_generator<R>(cfg, arch, 23);
        std::vector<Tensor<R>> inputs;
        std::vector<std::string> names;
        st.for_each_param([&](const std::string& n, Tensor<R>& t) {
            inputs.push_back(t);
            names.push_back(n);
        });

        Rng wrng(10);
        std::vector<Tensor<R>> mixers;
        for (int l = 0; l < num_layers(arch); ++l)
            mixers.push_back(random_normal<R>(wrng, {slice_count(arch, l), slice_width(arch, l)}, 1.0));

        auto eval = [&](const std::vector<Tensor<R>>& xs) {
            GeneratorState<R> s2 = st;
            size_t i = 0;
            s2.for_each_param([&](const std::string&, Tensor<R>& t) { t = xs[i++]; });
            Tape<R> tp;
            GeneratorVars vars = stage_generator(tp, s2);
            std::vector<Var> zero = stage_slices(tp, bundle_to_slices(arch, zero_weights<R>(arch)));
            Var img = tp.constant(tensor_cast<R>(ep.support_images));
            std::vector<Var> theta = generate_weights_vars(tp, arch, cfg, vars, img, ep.support_labels, zero);
            Var loss = tp.constant(Tensor<R>::zeros({1}));
            for (int l = 0; l < num_layers(arch); ++l)
                loss = tp.add(loss, tp.mean_all(tp.mul(theta[static_cast<size_t>(l)], tp.constant(mixers[static_cast<size_t>(l)]))));
            return static_cast<double>(tp.val(loss).data[0]);
        };

        Tape<R> tp;
        GeneratorVars vars = stage_generator(tp, st);
        std::vector<Var> leaf_vars;
        vars.each([&](const std::string&, Var& v) { leaf_vars.push_back(v); });
        std::vector<Var> zero = stage_slices(tp, bundle_to_slices(arch, zero_weights<R>(arch)));
        Var img = tp.constant(tensor_cast<R>(ep.support_images));
        std::vector<Var> theta = generate_weights_vars(tp, arch, cfg, vars, img, ep.support_labels, zero);
        Var loss = tp.constant(Tensor<R>::zeros({1}));
        for (int l = 0; l < num_layers(arch); ++l)
            loss = tp.add(loss, tp.mean_all(tp.mul(theta[static_cast<size_t>(l)], tp.constant(mixers[static_cast<size_t>(l)]))));
        tp.backward(loss);

        const auto fd = chtest::fd_grads<R>(eval, inputs, h);
        for (size_t i = 0; i < inputs.size(); ++i) {
            Tensor<R> g = tp.grad_touched(leaf_vars[i]) ? tp.grad(leaf_vars[i]) : Tensor<R>::zeros(inputs[i].shape);
            const auto cmp = chtest::compare_grads(g, fd[i], rtol, atol);
            INFO(names[i] << " max_rel " << cmp.max_rel << " max_abs " << cmp.max_abs);
            CHECK(cmp.ok);
        }
    };

    run(double{}, 1e-5, 1e-5, 1e-9);
    // float32 FD picks up ReLU-kink noise on top of roundoff; the absolute
    // floor keeps the relative gate meaningful for the large entries
    run(float{}, 5e-3, 1e-3, 5e-3);
}
