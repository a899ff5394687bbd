#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "bladapt/bilevel.hpp"
#include "bladapt/phases.hpp"
#include "bladapt/rng.hpp"
#include "bladapt/tensor.hpp"

namespace bladapt {

struct GradCheck {
    std::string op;
    double max_rel_err = 0.0;
    std::size_t checked = 0;
};

// |a-b| / max(1, |a|, |b|): relative for large gradients, absolute for small.
inline double guarded_rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

template <typename T>
double eval_loss(const LossFn<T>& fn) {
    Tape<T> tape;
    return static_cast<double>(fn(tape)->values[0]);
}

// Central differences against the tape gradient, one coordinate at a time.
template <typename T>
GradCheck check_per_coordinate(std::string op, const std::vector<Tensor<T>>& params,
                               const LossFn<T>& fn, double h = 1e-5) {
    GradMap<T> g;
    {
        Tape<T> tape;
        g = tape.backward(fn(tape), names_of(params));
    }
    GradCheck res{std::move(op), 0.0, 0};
    for (const auto& p : params) {
        const auto& ga = g[p->name];
        for (std::size_t i = 0; i < p->values.size(); ++i) {
            const T saved = p->values[i];
            p->values[i] = saved + static_cast<T>(h);
            const double lp = eval_loss(fn);
            p->values[i] = saved - static_cast<T>(h);
            const double lm = eval_loss(fn);
            p->values[i] = saved;
            const double gn = (lp - lm) / (2.0 * h);
            res.max_rel_err =
                std::max(res.max_rel_err, guarded_rel_err(static_cast<double>(ga[i]), gn));
            ++res.checked;
        }
    }
    return res;
}

// Central differences along random unit directions, for parameter sets too
// large to sweep coordinate-wise. Compares <grad, d> with the directional
// difference quotient.
template <typename T>
GradCheck check_directional(std::string op, const std::vector<Tensor<T>>& params,
                            const LossFn<T>& fn, int probes, Rng rng, double h = 1e-5) {
    GradMap<T> g;
    {
        Tape<T> tape;
        g = tape.backward(fn(tape), names_of(params));
    }
    GradCheck res{std::move(op), 0.0, 0};
    for (int k = 0; k < probes; ++k) {
        GradMap<T> dir;
        double norm2 = 0.0;
        for (const auto& p : params) {
            auto& d = dir[p->name];
            d.resize(p->values.size());
            for (auto& x : d) {
                x = static_cast<T>(rng.normal());
                norm2 += static_cast<double>(x) * static_cast<double>(x);
            }
        }
        const double inv = 1.0 / std::sqrt(norm2);
        double analytic = 0.0;
        for (const auto& p : params) {
            auto& d = dir[p->name];
            const auto& ga = g[p->name];
            for (std::size_t i = 0; i < d.size(); ++i) {
                d[i] = static_cast<T>(static_cast<double>(d[i]) * inv);
                analytic += static_cast<double>(ga[i]) * static_cast<double>(d[i]);
            }
        }
        auto snap = snapshot_values(params);
        auto shift = [&](double s) {
            for (const auto& p : params) {
                const auto& d = dir[p->name];
                for (std::size_t i = 0; i < d.size(); ++i)
                    p->values[i] += static_cast<T>(s) * d[i];
            }
        };
        shift(h);
        const double lp = eval_loss(fn);
        restore_values(params, snap);
        shift(-h);
        const double lm = eval_loss(fn);
        restore_values(params, snap);
        const double numeric = (lp - lm) / (2.0 * h);
        res.max_rel_err = std::max(res.max_rel_err, guarded_rel_err(analytic, numeric));
        ++res.checked;
    }
    return res;
}

namespace gcdetail {

inline Tensor<double> rand_tensor(Rng& rng, Shape shape, const std::string& name, double lo,
                                  double hi, bool grad = true) {
    std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return make_tensor<double>(std::move(shape), std::move(v), grad, name);
}

// Pushes every value at least `margin` away from each kink so central
// differences never straddle a non-smooth point.
inline void away_from(Tensor<double>& t, std::initializer_list<double> kinks, double margin) {
    for (auto& v : t->values)
        for (double k : kinks)
            if (std::abs(v - k) < margin) v = k + (v >= k ? margin : -margin);
}

// Distinct values with pairwise gaps >= 1/(n+1), shuffled: safe for maxpool
// argmax stability and for the |x_i - x_j| kinks of the smoothness term.
inline Tensor<double> distinct_tensor(Rng& rng, Shape shape, const std::string& name) {
    const std::size_t n = static_cast<std::size_t>(numel_of(shape));
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i)
        v[i] = static_cast<double>(i + 1) / static_cast<double>(n + 1);
    for (std::size_t i = n; i > 1; --i)
        std::swap(v[i - 1], v[static_cast<std::size_t>(rng.below(i))]);
    return make_tensor<double>(std::move(shape), std::move(v), true, name);
}

// Scalarizes an arbitrary output with fixed non-uniform weights so layout
// mistakes in the backward pass cannot cancel out.
inline Tensor<double> weighted_sum(Tape<double>& tape, const Tensor<double>& out) {
    std::vector<double> w(out->values.size());
    for (std::size_t i = 0; i < w.size(); ++i)
        w[i] = 1.5 + std::sin(0.7 * static_cast<double>(i) + 0.3);
    auto wt = make_tensor<double>(out->shape, std::move(w));
    return tape.sum(tape.mul(out, wt));
}

} // namespace gcdetail

// The standard verification suite: coordinate-exhaustive checks for every
// primitive on small fixtures, directional probes for the full pipelines.
inline std::vector<GradCheck> run_standard_gradchecks(std::uint64_t seed = 7) {
    using gcdetail::away_from;
    using gcdetail::distinct_tensor;
    using gcdetail::rand_tensor;
    using gcdetail::weighted_sum;
    std::vector<GradCheck> out;
    Rng rng(seed, "gradcheck");

    auto binary = [&](const std::string& op, auto applier, double blo = -1.0, double bhi = 1.0,
                      std::initializer_list<double> bkinks = {}) {
        auto a = rand_tensor(rng, {2, 3}, "a", -1.0, 1.0);
        auto b = rand_tensor(rng, {2, 3}, "b", blo, bhi);
        if (bkinks.size()) away_from(b, bkinks, 0.1);
        LossFn<double> fn = [=](Tape<double>& t) { return weighted_sum(t, applier(t, a, b)); };
        out.push_back(check_per_coordinate<double>(op, {a, b}, fn));
    };
    binary("add", [](Tape<double>& t, auto& a, auto& b) { return t.add(a, b); });
    binary("sub", [](Tape<double>& t, auto& a, auto& b) { return t.sub(a, b); });
    binary("mul", [](Tape<double>& t, auto& a, auto& b) { return t.mul(a, b); });
    binary("div/strict",
           [](Tape<double>& t, auto& a, auto& b) { return t.div(a, b, 1e-8, DivPolicy::Strict); },
           -1.0, 1.0, {0.0});
    binary("div/clamp",
           [](Tape<double>& t, auto& a, auto& b) { return t.div(a, b, 0.5, DivPolicy::Clamp); },
           -1.0, 1.0, {0.5});

    auto unary = [&](const std::string& op, auto applier, double lo, double hi,
                     std::initializer_list<double> kinks = {}) {
        auto a = rand_tensor(rng, {3, 4}, "a", lo, hi);
        if (kinks.size()) away_from(a, kinks, 0.05);
        LossFn<double> fn = [=](Tape<double>& t) { return weighted_sum(t, applier(t, a)); };
        out.push_back(check_per_coordinate<double>(op, {a}, fn));
    };
    unary("add_scalar", [](Tape<double>& t, auto& a) { return t.add_scalar(a, 0.37); }, -1, 1);
    unary("mul_scalar", [](Tape<double>& t, auto& a) { return t.mul_scalar(a, -1.3); }, -1, 1);
    unary("relu", [](Tape<double>& t, auto& a) { return t.relu(a); }, -1, 1, {0.0});
    unary("leaky_relu", [](Tape<double>& t, auto& a) { return t.leaky_relu(a, 0.2); }, -1, 1,
          {0.0});
    unary("sigmoid", [](Tape<double>& t, auto& a) { return t.sigmoid(a); }, -3, 3);
    unary("abs", [](Tape<double>& t, auto& a) { return t.abs(a); }, -1, 1, {0.0});
    unary("clamp", [](Tape<double>& t, auto& a) { return t.clamp(a, -0.5, 0.5); }, -1, 1,
          {-0.5, 0.5});
    unary("sum", [](Tape<double>& t, auto& a) { return t.sum(a); }, -1, 1);
    unary("mean", [](Tape<double>& t, auto& a) { return t.mean(a); }, -1, 1);

    {
        auto a = rand_tensor(rng, {2, 2, 3, 3}, "a", -1.0, 1.0);
        auto b = rand_tensor(rng, {2, 3, 3, 3}, "b", -1.0, 1.0);
        LossFn<double> fn = [=](Tape<double>& t) {
            return weighted_sum(t, t.concat_channels(a, b));
        };
        out.push_back(check_per_coordinate<double>("concat_channels", {a, b}, fn));
    }
    for (int axis : {2, 3}) {
        auto a = rand_tensor(rng, {1, 2, 4, 5}, "a", -1.0, 1.0);
        LossFn<double> fn = [=](Tape<double>& t) {
            return weighted_sum(t, t.spatial_diff(a, axis));
        };
        out.push_back(check_per_coordinate<double>(
            axis == 2 ? "spatial_diff/h" : "spatial_diff/w", {a}, fn));
    }
    {
        auto a = distinct_tensor(rng, {1, 2, 4, 4}, "a");
        LossFn<double> fn = [=](Tape<double>& t) { return weighted_sum(t, t.maxpool2d(a, 2)); };
        out.push_back(check_per_coordinate<double>("maxpool2d", {a}, fn));
    }
    {
        auto a = rand_tensor(rng, {1, 2, 3, 3}, "a", -1.0, 1.0);
        LossFn<double> fn = [=](Tape<double>& t) {
            return weighted_sum(t, t.upsample_nearest(a, 2));
        };
        out.push_back(check_per_coordinate<double>("upsample_nearest", {a}, fn));
    }
    {
        auto x = rand_tensor(rng, {2, 3, 5, 5}, "x", -1.0, 1.0);
        auto w = rand_tensor(rng, {4, 3, 3, 3}, "w", -0.5, 0.5);
        auto b = rand_tensor(rng, {4}, "b", -0.5, 0.5);
        LossFn<double> fn = [=](Tape<double>& t) {
            return weighted_sum(t, t.conv2d(x, w, b, 1, 1));
        };
        out.push_back(check_per_coordinate<double>("conv2d/s1p1", {x, w, b}, fn));
    }
    {
        auto x = rand_tensor(rng, {1, 3, 6, 6}, "x", -1.0, 1.0);
        auto w = rand_tensor(rng, {2, 3, 2, 2}, "w", -0.5, 0.5);
        auto b = rand_tensor(rng, {2}, "b", -0.5, 0.5);
        LossFn<double> fn = [=](Tape<double>& t) {
            return weighted_sum(t, t.conv2d(x, w, b, 2, 0));
        };
        out.push_back(check_per_coordinate<double>("conv2d/s2p0", {x, w, b}, fn));
    }
    for (bool train : {true, false}) {
        auto x = rand_tensor(rng, {2, 3, 4, 4}, "x", -1.0, 1.0);
        auto gamma = rand_tensor(rng, {3}, "gamma", 0.5, 1.5);
        auto beta = rand_tensor(rng, {3}, "beta", -0.5, 0.5);
        auto rm = std::make_shared<std::vector<double>>(3, 0.3);
        auto rv = std::make_shared<std::vector<double>>(3, 0.8);
        const BatchNormMode mode = train ? BatchNormMode::TrainNoUpdate : BatchNormMode::Eval;
        LossFn<double> fn = [=](Tape<double>& t) {
            return weighted_sum(t, t.batchnorm2d(x, gamma, beta, *rm, *rv, mode, 0.1, 1e-5));
        };
        out.push_back(check_per_coordinate<double>(
            train ? "batchnorm2d/train" : "batchnorm2d/eval", {x, gamma, beta}, fn));
    }
    {
        auto y = rand_tensor(rng, {1, 3, 4, 4}, "y", 0.05, 0.95);
        auto x = rand_tensor(rng, {1, 3, 4, 4}, "x", 0.3, 0.9);
        LossFn<double> fn = [=](Tape<double>& t) {
            return weighted_sum(t, reflectance<double>(t, y, x));
        };
        out.push_back(check_per_coordinate<double>("reflectance", {y, x}, fn));
    }
    {
        auto z = rand_tensor(rng, {1, 3, 4, 4}, "z", 0.0, 1.0);
        auto zg = rand_tensor(rng, {1, 3, 4, 4}, "zg", 0.0, 1.0, false);
        LossFn<double> fn = [=](Tape<double>& t) { return supervised_loss(t, z, zg); };
        out.push_back(check_per_coordinate<double>("losses/supervised", {z}, fn));
    }
    {
        auto x = distinct_tensor(rng, {1, 3, 6, 6}, "x");
        auto y = rand_tensor(rng, {1, 3, 6, 6}, "y", 0.0, 1.0, false);
        SmoothnessContext<double> ctx;
        LossFn<double> fn = [=](Tape<double>& t) { return unsupervised_loss(t, x, y, ctx); };
        out.push_back(check_per_coordinate<double>("losses/unsupervised", {x}, fn));
    }
    {
        auto za = rand_tensor(rng, {1, 3, 3, 3}, "za", 0.0, 1.0);
        auto ga = rand_tensor(rng, {1, 3, 3, 3}, "ga", 0.0, 1.0, false);
        auto zb = rand_tensor(rng, {2, 3, 3, 3}, "zb", 0.0, 1.0);
        auto gb = rand_tensor(rng, {2, 3, 3, 3}, "gb", 0.0, 1.0, false);
        LossFn<double> fn = [=](Tape<double>& t) {
            return adaptive_denoise_loss<double>(t, &za, &ga, &zb, &gb);
        };
        out.push_back(check_per_coordinate<double>("losses/denoise_pair", {za, zb}, fn));
    }
    {
        auto den = Denoiser<double>::make(Rng(seed, "gradcheck/denoiser"));
        auto z = rand_tensor(rng, {1, 3, 8, 8}, "z", 0.1, 0.9);
        auto target = rand_tensor(rng, {1, 3, 8, 8}, "target", 0.1, 0.9, false);
        auto params = den.learnables();
        params.push_back(z);
        LossFn<double> fn = [=](Tape<double>& t) {
            return mse_loss(t, denoise(t, den, z).output, target);
        };
        out.push_back(check_per_coordinate<double>("denoiser/net", params, fn));
    }

    // full pipelines, directional
    {
        auto model = Model<double>::make(mix64(seed ^ 0x9e3779b9ull), true);
        Batch<double> batch;
        batch.low = rand_tensor(rng, {2, 3, 16, 16}, "", 0.02, 0.4, false);
        batch.gt = rand_tensor(rng, {2, 3, 16, 16}, "", 0.1, 1.0, false);
        SmoothnessContext<double> ctx;
        auto uv = model.encoder.learnables();
        auto v = model.decoder.learnables();
        uv.insert(uv.end(), v.begin(), v.end());
        const ForwardModes modes(BatchNormMode::TrainNoUpdate);

        auto sup = make_brightening_loss(&model, batch, modes, ctx);
        out.push_back(check_directional<double>("pipeline/supervised", uv, sup, 6,
                                                Rng(seed, "gradcheck/dir1")));

        Batch<double> unp;
        unp.low = batch.low;
        auto unsup = make_brightening_loss(&model, unp, modes, ctx);
        out.push_back(check_directional<double>("pipeline/unsupervised", uv, unsup, 6,
                                                Rng(seed, "gradcheck/dir2")));

        LossFn<double> den_fn = [&model, batch, modes](Tape<double>& t) {
            auto x = estimate_illumination(t, model.encoder, model.decoder, batch.low, modes);
            auto z = t.detach(reflectance<double>(t, batch.low, x));
            auto d = denoise(t, model.denoiser, z);
            return mse_loss(t, d.output, batch.gt);
        };
        out.push_back(check_directional<double>("pipeline/denoise", model.denoiser.learnables(),
                                                den_fn, 4, Rng(seed, "gradcheck/dir3")));

        // The production displacement re-detaches at the current values, so
        // the loss is constant in the meta parameters and only the gradient
        // route exists. Freezing the subtrahend at the starting values turns
        // it into the function that construct linearizes, with an identical
        // gradient at the unperturbed point, which finite differences can see.
        const auto vals = model.decoder.learnables();
        std::vector<Tensor<double>> base;
        for (const auto& m : model.meta_init)
            base.push_back(make_tensor<double>(m->shape, m->values));
        OverrideBuilder<double> ovb = [vals, meta = model.meta_init,
                                       base](Tape<double>& t) {
            ParamOverride<double> ov;
            for (std::size_t i = 0; i < vals.size(); ++i)
                ov[vals[i].get()] = t.add(vals[i], t.sub(meta[i], base[i]));
            return ov;
        };
        auto meta_fn = make_brightening_loss(&model, batch, modes, ctx, ovb);
        out.push_back(check_directional<double>("pipeline/meta_init", model.meta_init, meta_fn, 4,
                                                Rng(seed, "gradcheck/dir4")));
    }
    return out;
}

// Scalar quadratic bilevel family used by the diagnostic oracle: F = (v-1)^2,
// f = (v-u)^2, evaluated at v = u. The one-step hypergradient has the closed
// form 4*xi*(u-1); the requested probe scale eps is translated into the
// norm-relative constant the solver actually consumes.
struct OracleRow {
    double u = 0, xi = 0, eps = 0;
    double approx = 0, exact = 0, gap = 0;
};

inline std::vector<OracleRow> run_bilevel_oracle() {
    const double a = 1.0;
    std::vector<OracleRow> rows;
    for (double uval : {-2.0, -0.5, 0.5, 2.0, 3.0})
        for (double xi : {0.0, 0.25, 0.5, 1.0})
            for (double eps : {1e-6, 1e-4, 1e-2, 1e-1}) {
                auto u = make_tensor<double>({1}, {uval}, true, "u");
                auto v = make_tensor<double>({1}, {uval}, true, "v");
                auto av = make_tensor<double>({1}, {a});
                LossFn<double> f = [=](Tape<double>& t) {
                    auto d = t.sub(v, u);
                    return t.mul(d, d);
                };
                LossFn<double> F = [=](Tape<double>& t) {
                    auto d = t.sub(v, av);
                    return t.mul(d, d);
                };
                const double gnorm = std::abs(2.0 * (uval - a));
                auto res = bl_hypergradient<double>({u}, {v}, F, f, xi, eps * gnorm);
                OracleRow r;
                r.u = uval;
                r.xi = xi;
                r.eps = eps;
                r.approx = res.grad["u"][0];
                r.exact = 4.0 * xi * (uval - a);
                r.gap = std::abs(r.approx - r.exact);
                rows.push_back(r);
            }
    return rows;
}

} // namespace bladapt
