#pragma once

#include <array>
#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "bladapt/rng.hpp"
#include "bladapt/tensor.hpp"

namespace bladapt {

// Substitution map used by solvers that need to evaluate the network with
// composite parameter nodes (e.g. meta-initialization displacement) without
// touching the stored leaves. Keyed by the leaf's identity.
template <typename T>
using ParamOverride = std::unordered_map<const TensorData<T>*, Tensor<T>>;

template <typename T>
const Tensor<T>& resolve_param(const ParamOverride<T>* ov, const Tensor<T>& p) {
    if (ov) {
        auto it = ov->find(p.get());
        if (it != ov->end()) return it->second;
    }
    return p;
}

template <typename T>
std::vector<std::string> names_of(const std::vector<Tensor<T>>& ts) {
    std::vector<std::string> out;
    out.reserve(ts.size());
    for (const auto& t : ts) out.push_back(t->name);
    return out;
}

template <typename T>
std::vector<std::vector<T>> snapshot_values(const std::vector<Tensor<T>>& ts) {
    std::vector<std::vector<T>> out;
    out.reserve(ts.size());
    for (const auto& t : ts) out.push_back(t->values);
    return out;
}

template <typename T>
void restore_values(const std::vector<Tensor<T>>& ts, const std::vector<std::vector<T>>& snap) {
    for (std::size_t i = 0; i < ts.size(); ++i) ts[i]->values = snap[i];
}

template <typename T>
void set_requires_grad(const std::vector<Tensor<T>>& ts, bool flag) {
    for (const auto& t : ts) t->requires_grad = flag;
}

template <typename T>
void set_frozen(const std::vector<Tensor<T>>& ts, bool flag) {
    for (const auto& t : ts) t->frozen = flag;
}

// He-uniform fan-in initialization, biases zero.
template <typename T>
void he_uniform_fill(std::vector<T>& w, Index fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
struct Conv2d {
    Tensor<T> w, b;
    Index stride = 1;
    Index pad = 1;

    static Conv2d make(const std::string& prefix, Index in_ch, Index out_ch, Index k,
                       Index stride, Index pad, Rng& rng) {
        Conv2d c;
        c.stride = stride;
        c.pad = pad;
        std::vector<T> wv(static_cast<std::size_t>(out_ch * in_ch * k * k));
        he_uniform_fill(wv, in_ch * k * k, rng);
        c.w = make_tensor<T>({out_ch, in_ch, k, k}, std::move(wv), true, prefix + ".w");
        c.b = zeros<T>({out_ch}, true, prefix + ".b");
        return c;
    }

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, const ParamOverride<T>* ov) const {
        return tape.conv2d(x, resolve_param(ov, w), resolve_param(ov, b), stride, pad);
    }

    void collect(std::vector<Tensor<T>>& learnable, std::vector<Tensor<T>>& state) const {
        learnable.push_back(w);
        learnable.push_back(b);
        state.push_back(w);
        state.push_back(b);
    }
};

template <typename T>
struct BatchNorm2d {
    Tensor<T> gamma, beta;
    Tensor<T> running_mean, running_var;  // buffers, never differentiated
    T momentum = T(0.1);
    T eps = T(1e-5);

    static BatchNorm2d make(const std::string& prefix, Index channels) {
        BatchNorm2d bn;
        bn.gamma = full<T>({channels}, T(1), true, prefix + ".gamma");
        bn.beta = zeros<T>({channels}, true, prefix + ".beta");
        bn.running_mean = zeros<T>({channels}, false, prefix + ".running_mean");
        bn.running_var = full<T>({channels}, T(1), false, prefix + ".running_var");
        return bn;
    }

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, BatchNormMode mode,
                      const ParamOverride<T>* ov) const {
        return tape.batchnorm2d(x, resolve_param(ov, gamma), resolve_param(ov, beta),
                                running_mean->values, running_var->values, mode, momentum, eps);
    }

    void collect(std::vector<Tensor<T>>& learnable, std::vector<Tensor<T>>& state) const {
        learnable.push_back(gamma);
        learnable.push_back(beta);
        state.push_back(gamma);
        state.push_back(beta);
        state.push_back(running_mean);
        state.push_back(running_var);
    }
};

// conv 3x3 + batchnorm + leaky relu, the building block of both halves.
template <typename T>
struct ConvBlock {
    Conv2d<T> conv;
    BatchNorm2d<T> bn;
    T alpha = T(0.2);

    static ConvBlock make(const std::string& prefix, Index in_ch, Index out_ch, Rng& rng) {
        ConvBlock b;
        b.conv = Conv2d<T>::make(prefix + ".conv", in_ch, out_ch, 3, 1, 1, rng);
        b.bn = BatchNorm2d<T>::make(prefix + ".bn", out_ch);
        return b;
    }

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, BatchNormMode mode,
                      const ParamOverride<T>* ov) const {
        return tape.leaky_relu(bn.forward(tape, conv.forward(tape, x, ov), mode, ov), alpha);
    }

    void collect(std::vector<Tensor<T>>& learnable, std::vector<Tensor<T>>& state) const {
        conv.collect(learnable, state);
        bn.collect(learnable, state);
    }
};

// Four downsampling steps plus a bottleneck block; widths 8-16-32-64-64.
// Skip features are taken before each pooling for the decoder's concats.
template <typename T>
struct Encoder {
    std::array<ConvBlock<T>, 5> blocks;

    struct Features {
        Tensor<T> bottleneck;
        std::array<Tensor<T>, 4> skips;
    };

    static Encoder make(Rng rng) {
        Encoder e;
        const Index widths[6] = {3, 8, 16, 32, 64, 64};
        for (int i = 0; i < 5; ++i)
            e.blocks[static_cast<std::size_t>(i)] = ConvBlock<T>::make(
                "encoder.b" + std::to_string(i + 1), widths[i], widths[i + 1], rng);
        return e;
    }

    Features forward(Tape<T>& tape, const Tensor<T>& y, BatchNormMode mode,
                     const ParamOverride<T>* ov = nullptr) const {
        Features f;
        Tensor<T> a = y;
        for (int i = 0; i < 4; ++i) {
            a = blocks[static_cast<std::size_t>(i)].forward(tape, a, mode, ov);
            f.skips[static_cast<std::size_t>(i)] = a;
            a = tape.maxpool2d(a, 2);
        }
        f.bottleneck = blocks[4].forward(tape, a, mode, ov);
        return f;
    }

    std::vector<Tensor<T>> learnables() const {
        std::vector<Tensor<T>> l, s;
        for (const auto& b : blocks) b.collect(l, s);
        return l;
    }
    std::vector<Tensor<T>> state_tensors() const {
        std::vector<Tensor<T>> l, s;
        for (const auto& b : blocks) b.collect(l, s);
        return s;
    }
};

// Four upsampling steps with concatenated skips, a final block, and a
// 3-channel head squashed by a sigmoid. Pre-sigmoid logits are clamped so the
// output stays strictly inside (0,1) even in float32.
template <typename T>
struct Decoder {
    std::array<ConvBlock<T>, 5> blocks;
    Conv2d<T> head;
    static constexpr T kLogitClamp = T(15);

    static Decoder make(Rng rng) {
        Decoder d;
        const Index ins[5] = {64, 128, 64, 32, 16};
        const Index outs[5] = {64, 32, 16, 8, 8};
        for (int i = 0; i < 5; ++i)
            d.blocks[static_cast<std::size_t>(i)] = ConvBlock<T>::make(
                "decoder.b" + std::to_string(i + 1), ins[i], outs[i], rng);
        d.head = Conv2d<T>::make("decoder.head", 8, 3, 3, 1, 1, rng);
        return d;
    }

    Tensor<T> forward(Tape<T>& tape, const typename Encoder<T>::Features& f, BatchNormMode mode,
                      const ParamOverride<T>* ov = nullptr) const {
        Tensor<T> a = f.bottleneck;
        for (int i = 0; i < 4; ++i) {
            a = blocks[static_cast<std::size_t>(i)].forward(tape, a, mode, ov);
            a = tape.upsample_nearest(a, 2);
            a = tape.concat_channels(a, f.skips[static_cast<std::size_t>(3 - i)]);
        }
        a = blocks[4].forward(tape, a, mode, ov);
        Tensor<T> logits = head.forward(tape, a, ov);
        return tape.sigmoid(tape.clamp(logits, -kLogitClamp, kLogitClamp));
    }

    std::vector<Tensor<T>> learnables() const {
        std::vector<Tensor<T>> l, s;
        for (const auto& b : blocks) b.collect(l, s);
        head.collect(l, s);
        return l;
    }
    std::vector<Tensor<T>> state_tensors() const {
        std::vector<Tensor<T>> l, s;
        for (const auto& b : blocks) b.collect(l, s);
        head.collect(l, s);
        return s;
    }
};

// Residual noise estimator: five 3x3 convs, relu after the first four, last
// linear so the residual keeps its sign.
template <typename T>
struct Denoiser {
    std::array<Conv2d<T>, 5> convs;

    static Denoiser make(Rng rng) {
        Denoiser d;
        const Index ins[5] = {3, 8, 8, 8, 8};
        const Index outs[5] = {8, 8, 8, 8, 3};
        for (int i = 0; i < 5; ++i)
            d.convs[static_cast<std::size_t>(i)] = Conv2d<T>::make(
                "denoiser.c" + std::to_string(i + 1), ins[i], outs[i], 3, 1, 1, rng);
        return d;
    }

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& z,
                      const ParamOverride<T>* ov = nullptr) const {
        Tensor<T> a = z;
        for (int i = 0; i < 4; ++i)
            a = tape.relu(convs[static_cast<std::size_t>(i)].forward(tape, a, ov));
        return convs[4].forward(tape, a, ov);
    }

    std::vector<Tensor<T>> learnables() const {
        std::vector<Tensor<T>> l, s;
        for (const auto& c : convs) c.collect(l, s);
        return l;
    }
    std::vector<Tensor<T>> state_tensors() const { return learnables(); }
};

// Meta-initialization: a decoder-shaped snapshot of the learnable decoder
// parameters under the "meta_init." prefix.
template <typename T>
std::vector<Tensor<T>> make_meta_init(const Decoder<T>& dec) {
    std::vector<Tensor<T>> out;
    for (const auto& p : dec.learnables()) {
        std::string suffix = p->name.substr(std::string("decoder.").size());
        out.push_back(make_tensor<T>(p->shape, p->values, true, "meta_init." + suffix));
    }
    return out;
}

template <typename T>
struct Model {
    Encoder<T> encoder;
    Decoder<T> decoder;
    Denoiser<T> denoiser;
    std::vector<Tensor<T>> meta_init;  // empty unless the run maintains one

    static Model make(std::uint64_t seed, bool with_meta) {
        Model m;
        m.encoder = Encoder<T>::make(Rng(seed, "init/encoder"));
        m.decoder = Decoder<T>::make(Rng(seed, "init/decoder"));
        m.denoiser = Denoiser<T>::make(Rng(seed, "init/denoiser"));
        if (with_meta) m.meta_init = make_meta_init(m.decoder);
        return m;
    }

    std::vector<Tensor<T>> state_tensors() const {
        std::vector<Tensor<T>> out = encoder.state_tensors();
        auto add = [&out](const std::vector<Tensor<T>>& v) {
            out.insert(out.end(), v.begin(), v.end());
        };
        add(decoder.state_tensors());
        add(denoiser.state_tensors());
        add(meta_init);
        return out;
    }
};

} // namespace bladapt
