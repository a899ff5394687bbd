#include <doctest.h>

#include <bladapt/losses.hpp>
#include <bladapt/nn.hpp>
#include <bladapt/rng.hpp>

#include <set>

#include "oracles.hpp"

using namespace bladapt;

namespace {

template <typename T>
Tensor<T> rand_image(Rng& rng, Shape shape, double lo = 0.05, double hi = 0.95) {
    std::vector<T> v(static_cast<std::size_t>(numel_of(shape)));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return make_tensor<T>(std::move(shape), std::move(v));
}

} // namespace

TEST_CASE("he_uniform_fill respects the fan-in bound") {
    Rng rng(31, "test/he");
    std::vector<double> w(4096);
    const Index fan_in = 3 * 3 * 3;
    he_uniform_fill(w, fan_in, rng);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    double lo = 0.0, hi = 0.0;
    for (double x : w) {
        CHECK(std::abs(x) <= bound);
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    CHECK(lo < -0.8 * bound);
    CHECK(hi > 0.8 * bound);
}

TEST_CASE("network shapes at multiple resolutions") {
    auto model = Model<float>::make(5, true);
    Rng img_rng(1, "img");
    for (Index hw : {Index(16), Index(64)}) {
        auto y = rand_image<float>(img_rng, {2, 3, hw, hw});
        Tape<float> tape;
        auto feats = model.encoder.forward(tape, y, BatchNormMode::TrainNoUpdate);
        CHECK(feats.bottleneck->shape == Shape{2, 64, hw / 16, hw / 16});
        CHECK(feats.skips[0]->shape == Shape{2, 8, hw, hw});
        CHECK(feats.skips[1]->shape == Shape{2, 16, hw / 2, hw / 2});
        CHECK(feats.skips[2]->shape == Shape{2, 32, hw / 4, hw / 4});
        CHECK(feats.skips[3]->shape == Shape{2, 64, hw / 8, hw / 8});
        auto x = model.decoder.forward(tape, feats, BatchNormMode::TrainNoUpdate);
        CHECK(x->shape == Shape{2, 3, hw, hw});
        for (float v : x->values) {
            CHECK(v > 0.0f);
            CHECK(v < 1.0f);
        }
        auto g = model.denoiser.forward(tape, x);
        CHECK(g->shape == Shape{2, 3, hw, hw});
    }
}

TEST_CASE("model parameter names are unique and counted") {
    auto model = Model<float>::make(9, true);
    const auto state = model.state_tensors();
    std::set<std::string> names;
    for (const auto& t : state) {
        CHECK(!t->name.empty());
        CHECK(names.insert(t->name).second);
    }
    CHECK(model.encoder.learnables().size() == 20);
    CHECK(model.decoder.learnables().size() == 22);
    CHECK(model.denoiser.learnables().size() == 10);
    CHECK(model.meta_init.size() == 22);
    // encoder 30 state + decoder 32 + denoiser 10 + meta 22
    CHECK(state.size() == 94);
}

TEST_CASE("meta_init snapshots the decoder learnables") {
    auto model = Model<double>::make(3, true);
    auto dec = model.decoder.learnables();
    REQUIRE(model.meta_init.size() == dec.size());
    for (std::size_t i = 0; i < dec.size(); ++i) {
        CHECK(model.meta_init[i]->shape == dec[i]->shape);
        CHECK(model.meta_init[i]->values == dec[i]->values);
        CHECK(model.meta_init[i]->name.rfind("meta_init.", 0) == 0);
        CHECK(model.meta_init[i]->requires_grad);
    }
    CHECK(Model<double>::make(3, false).meta_init.empty());
}

TEST_CASE("parameter override substitutes values without touching the leaf") {
    Rng rng(41, "test/ov");
    auto conv = Conv2d<double>::make("c", 2, 3, 3, 1, 1, rng);
    auto x = rand_image<double>(rng, {1, 2, 5, 5});
    auto alt = make_tensor<double>(conv.w->shape,
                                   std::vector<double>(conv.w->values.size(), 0.01));
    Tape<double> tape;
    ParamOverride<double> ov{{conv.w.get(), alt}};
    auto out_ov = conv.forward(tape, x, &ov);
    const auto saved = conv.w->values;
    conv.w->values = alt->values;
    auto out_direct = conv.forward(tape, x, nullptr);
    conv.w->values = saved;
    CHECK(out_ov->values == out_direct->values);
}

TEST_CASE("displacement override routes gradients to the meta copy") {
    Rng rng(42, "test/disp");
    auto conv = Conv2d<double>::make("c", 2, 2, 3, 1, 1, rng);
    auto x = rand_image<double>(rng, {1, 2, 4, 4});
    auto meta = make_tensor<double>(conv.w->shape, conv.w->values, true, "meta.w");
    const auto base_w = conv.w->values;

    Tape<double> t_direct;
    auto loss_direct = t_direct.mean(conv.forward(t_direct, x, nullptr));
    auto g_direct = t_direct.backward(loss_direct, {"c.w"});

    Tape<double> t_meta;
    auto W = t_meta.add(conv.w, t_meta.sub(meta, t_meta.detach(meta)));
    ParamOverride<double> ov{{conv.w.get(), W}};
    auto loss_meta = t_meta.mean(conv.forward(t_meta, x, &ov));
    auto g_meta = t_meta.backward(loss_meta, {"meta.w"});

    // Identical value, and the meta gradient equals the direct w gradient.
    CHECK(loss_meta->values[0] == loss_direct->values[0]);
    REQUIRE(g_meta["meta.w"].size() == g_direct["c.w"].size());
    for (std::size_t i = 0; i < g_direct["c.w"].size(); ++i)
        CHECK(g_meta["meta.w"][i] == doctest::Approx(g_direct["c.w"][i]).epsilon(1e-12));
    CHECK(conv.w->values == base_w);
}

TEST_CASE("supervised loss equals the direct mean squared error") {
    Rng rng(51, "test/sup");
    auto a = rand_image<double>(rng, {2, 3, 4, 4});
    auto b = rand_image<double>(rng, {2, 3, 4, 4});
    Tape<double> tape;
    auto loss = supervised_loss(tape, a, b);
    CHECK(loss->values[0] ==
          doctest::Approx(oracles::mse_direct(a->values, b->values)).epsilon(1e-12));
}

TEST_CASE("unsupervised loss matches a scalar recomputation") {
    Rng rng(52, "test/unsup");
    const Index N = 2, H = 6, W = 5;
    auto x = rand_image<double>(rng, {N, 3, H, W});
    auto y = rand_image<double>(rng, {N, 3, H, W});
    SmoothnessContext<double> ctx;
    ctx.lambda = 0.2;
    ctx.sigma = 0.1;
    Tape<double> tape;
    auto loss = unsupervised_loss(tape, x, y, ctx);
    const double ref = oracles::unsupervised_direct(x->values, y->values, N, H, W, 0.2, 0.1);
    CHECK(loss->values[0] == doctest::Approx(ref).epsilon(1e-10));
    CHECK_THROWS_AS(unsupervised_loss(tape, x, rand_image<double>(rng, {N, 3, H, W + 1}), ctx),
                    DimensionError);
}

TEST_CASE("rgb_to_yuv on reference colors") {
    auto img = make_tensor<double>({1, 3, 1, 2}, {1.0, 1.0,   // R: white, red
                                                  1.0, 0.0,   // G
                                                  1.0, 0.0}); // B
    auto yuv = rgb_to_yuv(img);
    CHECK(yuv->values[0] == doctest::Approx(1.0));            // Y(white)
    CHECK(yuv->values[2] == doctest::Approx(0.0).epsilon(1e-9));  // U(white)
    CHECK(yuv->values[4] == doctest::Approx(0.0).epsilon(1e-9));  // V(white)
    CHECK(yuv->values[1] == doctest::Approx(0.299));          // Y(red)
    CHECK(yuv->values[3] == doctest::Approx(-0.168736));      // U(red)
    CHECK(yuv->values[5] == doctest::Approx(0.5));            // V(red)
    CHECK_THROWS_AS(rgb_to_yuv(make_tensor<double>({1, 1, 1, 1}, {0.5})), DimensionError);
}

TEST_CASE("split-group denoising objective") {
    Rng rng(53, "test/dn");
    auto za = rand_image<double>(rng, {1, 3, 4, 4});
    auto ga = rand_image<double>(rng, {1, 3, 4, 4});
    auto zb = rand_image<double>(rng, {1, 3, 4, 4});
    auto gb = rand_image<double>(rng, {1, 3, 4, 4});
    Tape<double> tape;
    const double la = oracles::mse_direct(za->values, ga->values);
    const double lb = oracles::mse_direct(zb->values, gb->values);
    CHECK(adaptive_denoise_loss(tape, &za, &ga, &zb, &gb)->values[0] ==
          doctest::Approx(la + lb).epsilon(1e-12));
    CHECK(adaptive_denoise_loss<double>(tape, &za, &ga, nullptr, nullptr)->values[0] ==
          doctest::Approx(la).epsilon(1e-12));
    CHECK(adaptive_denoise_loss<double>(tape, nullptr, nullptr, &zb, &gb)->values[0] ==
          doctest::Approx(lb).epsilon(1e-12));
    CHECK_THROWS_AS(adaptive_denoise_loss<double>(tape, nullptr, nullptr, nullptr, nullptr),
                    ConfigError);
    CHECK_THROWS_AS(adaptive_denoise_loss<double>(tape, &za, nullptr, &zb, &gb),
                    DimensionError);
}

TEST_CASE("trained residual estimator reacts more to noisy inputs") {
    Rng rng(54, "test/toy");
    const Index N = 2, H = 8, W = 8;
    auto denoiser = Denoiser<double>::make(Rng(54, "toy/init"));
    auto params = denoiser.learnables();
    const auto wrt = names_of(params);

    auto clean = rand_image<double>(rng, {N, 3, H, W}, 0.3, 0.7);
    std::vector<double> nv = clean->values;
    for (auto& v : nv) v += rng.normal(0.0, 0.1);
    auto noisy = make_tensor<double>({N, 3, H, W}, nv);

    // Teach the residual branch to reproduce the injected noise.
    std::map<std::string, std::vector<double>> m1, m2;
    for (const auto& p : params) {
        m1[p->name].assign(p->values.size(), 0.0);
        m2[p->name].assign(p->values.size(), 0.0);
    }
    for (int step = 1; step <= 300; ++step) {
        Tape<double> tape;
        auto pred_noise = denoiser.forward(tape, noisy);
        auto target = tape.sub(noisy, clean);
        auto zero = zeros<double>({N, 3, H, W});
        auto pred_clean = denoiser.forward(tape, clean);
        auto la = mse_loss(tape, pred_noise, target);
        auto lb = mse_loss(tape, pred_clean, zero);
        auto g = tape.backward(tape.add(la, lb), wrt);
        for (auto& p : params) {
            auto& g1 = m1[p->name];
            auto& g2 = m2[p->name];
            for (std::size_t i = 0; i < p->values.size(); ++i) {
                g1[i] = 0.9 * g1[i] + 0.1 * g[p->name][i];
                g2[i] = 0.999 * g2[i] + 0.001 * g[p->name][i] * g[p->name][i];
                const double mh = g1[i] / (1.0 - std::pow(0.9, step));
                const double vh = g2[i] / (1.0 - std::pow(0.999, step));
                p->values[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
            }
        }
    }

    Tape<double> tape;
    auto rn = denoiser.forward(tape, noisy);
    auto rc = denoiser.forward(tape, clean);
    double mn = 0.0, mc = 0.0;
    for (double v : rn->values) mn += std::abs(v);
    for (double v : rc->values) mc += std::abs(v);
    CHECK(mn > 2.0 * mc);
}
