#pragma once

#include <cmath>
#include <functional>
#include <limits>

#include "bladapt/nn.hpp"
#include "bladapt/tensor.hpp"

namespace bladapt {

// A loss evaluator builds a scalar loss node on a caller-provided fresh tape,
// reading whatever parameter values are current at call time. The bilevel
// routines re-invoke it at perturbed parameters.
template <typename T>
using LossFn = std::function<Tensor<T>(Tape<T>&)>;

template <typename T>
bool all_finite(const GradMap<T>& g) {
    for (const auto& [name, vec] : g)
        for (T v : vec)
            if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

// Scales gradients in place so their global L2 norm does not exceed max_norm.
// Returns the pre-clip norm.
template <typename T>
T clip_gradients(GradMap<T>& g, T max_norm) {
    const T norm = grad_l2_norm(g);
    if (norm > max_norm && norm > T(0)) {
        const T s = max_norm / norm;
        for (auto& [name, vec] : g)
            for (auto& v : vec) v *= s;
    }
    return norm;
}

template <typename T>
struct AdamState {
    std::map<std::string, std::vector<T>> m;
    std::map<std::string, std::vector<T>> v;
    std::int64_t step = 0;
};

// Standard bias-corrected ADAM. Parameters without an entry in grads are
// skipped; frozen parameters with one are a contract violation.
template <typename T>
void adam_update(const std::vector<Tensor<T>>& params, const GradMap<T>& grads,
                 AdamState<T>& state, T lr, T beta1, T beta2, T eps = T(1e-8)) {
    state.step += 1;
    const double bc1 = 1.0 - std::pow(static_cast<double>(beta1), static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(static_cast<double>(beta2), static_cast<double>(state.step));
    for (const auto& p : params) {
        auto git = grads.find(p->name);
        if (git == grads.end()) continue;
        if (p->frozen)
            throw FrozenViolationError("adam_update: parameter '" + p->name + "' is frozen");
        const auto& g = git->second;
        if (g.size() != p->values.size())
            throw DimensionError("adam_update: gradient size mismatch for '" + p->name + "'");
        auto& m = state.m[p->name];
        auto& v = state.v[p->name];
        if (m.empty()) m.assign(g.size(), T(0));
        if (v.empty()) v.assign(g.size(), T(0));
        for (std::size_t i = 0; i < g.size(); ++i) {
            m[i] = beta1 * m[i] + (T(1) - beta1) * g[i];
            v[i] = beta2 * v[i] + (T(1) - beta2) * g[i] * g[i];
            const double mhat = static_cast<double>(m[i]) / bc1;
            const double vhat = static_cast<double>(v[i]) / bc2;
            p->values[i] -= static_cast<T>(static_cast<double>(lr) * mhat /
                                           (std::sqrt(vhat) + static_cast<double>(eps)));
        }
    }
}

// One inner gradient step: returns v' = v - xi * grad(f) as fresh values
// without touching v itself. Implemented literally as gradient-then-axpy so
// it decomposes bitwise into those two calls.
template <typename T>
GradMap<T> lower_step(const std::vector<Tensor<T>>& v, const LossFn<T>& f, T xi) {
    Tape<T> tape;
    for (const auto& p : v) tape.watch(p);
    Tensor<T> loss = f(tape);
    GradMap<T> g = tape.backward(loss, names_of(v));
    if (!all_finite(g))
        throw NumericError("lower_step: non-finite gradient (diverged step)");
    GradMap<T> out;
    for (const auto& p : v) {
        const auto& gv = g[p->name];
        auto& nv = out[p->name];
        nv = p->values;
        for (std::size_t i = 0; i < nv.size(); ++i) nv[i] -= xi * gv[i];
    }
    return out;
}

template <typename T>
void assign_values(const std::vector<Tensor<T>>& params, const GradMap<T>& values) {
    for (const auto& p : params) {
        auto it = values.find(p->name);
        if (it == values.end())
            throw UnknownParameterError("assign_values: no values for '" + p->name + "'");
        if (it->second.size() != p->values.size())
            throw DimensionError("assign_values: size mismatch for '" + p->name + "'");
        p->values = it->second;
    }
}

// Central-difference approximation of the mixed second-order term:
//   [grad_u f(u, v + eps*g) - grad_u f(u, v - eps*g)] / (2 eps)
// v is perturbed in place and restored bit-exactly before returning.
template <typename T>
GradMap<T> finite_difference_mvp(const std::vector<Tensor<T>>& u, const std::vector<Tensor<T>>& v,
                                 const GradMap<T>& g, const LossFn<T>& f, T eps) {
    if (!(eps > T(0)))
        throw NumericError("finite_difference_mvp: eps must be positive");
    if (eps < T(16) * std::numeric_limits<T>::epsilon())
        throw NumericError("finite_difference_mvp: eps " +
                           std::to_string(static_cast<double>(eps)) +
                           " is below the float-resolution guard");
    double gnorm2 = 0.0;
    for (const auto& p : v) {
        auto it = g.find(p->name);
        if (it == g.end())
            throw UnknownParameterError("finite_difference_mvp: direction missing '" + p->name +
                                        "'");
        if (it->second.size() != p->values.size())
            throw DimensionError("finite_difference_mvp: direction size mismatch for '" +
                                 p->name + "'");
        for (T x : it->second) gnorm2 += static_cast<double>(x) * static_cast<double>(x);
    }
    const auto names_u = names_of(u);
    if (gnorm2 == 0.0) {
        GradMap<T> zero;
        for (const auto& p : u) zero[p->name].assign(p->values.size(), T(0));
        return zero;
    }

    auto snap = snapshot_values(v);
    auto perturb = [&](T sign) {
        for (const auto& p : v) {
            const auto& dir = g.at(p->name);
            for (std::size_t i = 0; i < p->values.size(); ++i)
                p->values[i] += sign * eps * dir[i];
        }
    };

    perturb(T(1));
    GradMap<T> plus;
    {
        Tape<T> tape;
        for (const auto& p : u) tape.watch(p);
        plus = tape.backward(f(tape), names_u);
    }
    restore_values(v, snap);

    perturb(T(-1));
    GradMap<T> minus;
    {
        Tape<T> tape;
        for (const auto& p : u) tape.watch(p);
        minus = tape.backward(f(tape), names_u);
    }
    restore_values(v, snap);

    GradMap<T> out;
    const T denom = T(2) * eps;
    for (const auto& name : names_u) {
        auto& o = out[name];
        const auto& pl = plus[name];
        const auto& mi = minus[name];
        o.resize(pl.size());
        for (std::size_t i = 0; i < pl.size(); ++i) o[i] = (pl[i] - mi[i]) / denom;
    }
    return out;
}

template <typename T>
struct HypergradResult {
    GradMap<T> grad;    // gradient wrt the upper-level parameters
    T upper_loss = 0;   // F at (u, v')
    T lower_loss = 0;   // f at (u, v)
};

// One-step hypergradient:
//   v' = v - xi * grad_v f ;  g = grad_{v'} F(u, v')
//   grad_u = grad_u F(u, v') - xi * [grad_u f(u, v+eps g) - grad_u f(u, v-eps g)] / (2 eps)
// with eps = fd_scale / ||g||_2. v is restored to its entry values; u is
// never written.
template <typename T>
HypergradResult<T> bl_hypergradient(const std::vector<Tensor<T>>& u,
                                    const std::vector<Tensor<T>>& v, const LossFn<T>& F_loss,
                                    const LossFn<T>& f_loss, T xi, T fd_scale = T(1e-2)) {
    HypergradResult<T> res;
    auto snap = snapshot_values(v);

    // inner probe step v -> v'
    T lower_val = 0;
    {
        Tape<T> tape;
        for (const auto& p : v) tape.watch(p);
        Tensor<T> lf = f_loss(tape);
        lower_val = lf->values[0];
        GradMap<T> gv = tape.backward(lf, names_of(v));
        if (!all_finite(gv)) throw NumericError("bl_hypergradient: non-finite inner gradient");
        if (xi != T(0)) {
            for (const auto& p : v) {
                const auto& g = gv[p->name];
                for (std::size_t i = 0; i < p->values.size(); ++i)
                    p->values[i] -= xi * g[i];
            }
        }
    }
    res.lower_loss = lower_val;

    // upper gradients at (u, v')
    GradMap<T> direct, g;
    {
        Tape<T> tape;
        for (const auto& p : u) tape.watch(p);
        for (const auto& p : v) tape.watch(p);
        Tensor<T> Fv = F_loss(tape);
        res.upper_loss = Fv->values[0];
        std::vector<std::string> wrt = names_of(u);
        const auto vn = names_of(v);
        wrt.insert(wrt.end(), vn.begin(), vn.end());
        GradMap<T> all = tape.backward(Fv, wrt);
        for (const auto& name : names_of(u)) direct[name] = std::move(all[name]);
        for (const auto& name : vn) g[name] = std::move(all[name]);
    }
    restore_values(v, snap);

    if (xi == T(0)) {
        res.grad = std::move(direct);
        return res;
    }

    const T gnorm = grad_l2_norm(g);
    if (gnorm == T(0)) {
        res.grad = std::move(direct);
        return res;
    }
    const T eps = fd_scale / gnorm;
    GradMap<T> mvp = finite_difference_mvp(u, v, g, f_loss, eps);
    for (auto& [name, vec] : direct) {
        const auto& corr = mvp[name];
        for (std::size_t i = 0; i < vec.size(); ++i) vec[i] -= xi * corr[i];
    }
    if (!all_finite(direct)) throw NumericError("bl_hypergradient: non-finite hypergradient");
    res.grad = std::move(direct);
    return res;
}

// Meta-initialization hypergradient: identical formula with the
// meta-parameters in the upper slot. The lower problem's coupling to the
// meta-initialization (episodic reset) is expressed by the caller inside the
// loss closures; see the learning driver.
template <typename T>
HypergradResult<T> rbl_hypergradient(const std::vector<Tensor<T>>& meta,
                                     const std::vector<Tensor<T>>& v, const LossFn<T>& H_loss,
                                     const LossFn<T>& h_loss, T xi, T fd_scale = T(1e-2)) {
    if (meta.size() != v.size())
        throw DimensionError("rbl_hypergradient: meta/decoder parameter counts differ (" +
                             std::to_string(meta.size()) + " vs " + std::to_string(v.size()) +
                             ")");
    for (std::size_t i = 0; i < meta.size(); ++i)
        if (meta[i]->shape != v[i]->shape)
            throw DimensionError("rbl_hypergradient: shape mismatch at '" + v[i]->name + "': " +
                                 shape_str(meta[i]->shape) + " vs " + shape_str(v[i]->shape));
    return bl_hypergradient(meta, v, H_loss, h_loss, xi, fd_scale);
}

} // namespace bladapt
