#pragma once

#include <type_traits>

#include "bladapt/nn.hpp"
#include "bladapt/tensor.hpp"

namespace bladapt {

constexpr double kDenomFloor = 1e-4;
constexpr double kReflectanceMax = 4.0;

// Batchnorm modes per half: the encoder can run on frozen statistics while
// the decoder still trains (adaptation), so the two are chosen independently.
struct ForwardModes {
    BatchNormMode enc;
    BatchNormMode dec;
    ForwardModes(BatchNormMode both) : enc(both), dec(both) {}  // NOLINT(google-explicit-constructor)
    ForwardModes(BatchNormMode e, BatchNormMode d) : enc(e), dec(d) {}
};

// Illumination estimate x = decoder(encoder(y)), strictly inside (0,1).
template <typename T>
Tensor<T> estimate_illumination(Tape<T>& tape, const Encoder<T>& enc, const Decoder<T>& dec,
                                const Tensor<T>& y, ForwardModes modes,
                                std::type_identity_t<const ParamOverride<T>*> ov = nullptr) {
    if (y->shape.size() != 4)
        throw DimensionError("estimate_illumination: expected [N,3,H,W], got " +
                             shape_str(y->shape));
    if (y->shape[2] % 16 != 0 || y->shape[3] % 16 != 0)
        throw DimensionError("estimate_illumination: spatial dims " + shape_str(y->shape) +
                             " must be divisible by 16 (four 2x poolings)");
    auto feats = enc.forward(tape, y, modes.enc, ov);
    return dec.forward(tape, feats, modes.dec, ov);
}

// Reflectance z = y / max(x, floor), clamped to [0, z_max].
template <typename T>
Tensor<T> reflectance(Tape<T>& tape, const Tensor<T>& y, const Tensor<T>& x,
                      T floor = T(kDenomFloor), T z_max = T(kReflectanceMax)) {
    return tape.clamp(tape.div(y, x, floor, DivPolicy::Clamp), T(0), z_max);
}

// Residual denoising: noise = G(z), output = clamp(z - noise, 0, 1).
template <typename T>
struct DenoiseOut {
    Tensor<T> output;
    Tensor<T> noise_map;
};

template <typename T>
DenoiseOut<T> denoise(Tape<T>& tape, const Denoiser<T>& den, const Tensor<T>& z,
                      std::type_identity_t<const ParamOverride<T>*> ov = nullptr) {
    Tensor<T> noise = den.forward(tape, z, ov);
    Tensor<T> out = tape.clamp(tape.sub(z, noise), T(0), T(1));
    return {out, noise};
}

template <typename T>
struct EnhanceOut {
    Tensor<T> illumination;  // x
    Tensor<T> reflectance;   // z
    Tensor<T> noise_map;     // G(z)
    Tensor<T> output;        // clamp(z - G(z), 0, 1)
};

template <typename T>
EnhanceOut<T> enhance(Tape<T>& tape, const Model<T>& m, const Tensor<T>& y, ForwardModes modes,
                      std::type_identity_t<const ParamOverride<T>*> ov = nullptr, bool use_denoiser = true) {
    EnhanceOut<T> r;
    r.illumination = estimate_illumination(tape, m.encoder, m.decoder, y, modes, ov);
    r.reflectance = reflectance<T>(tape, y, r.illumination);
    if (use_denoiser) {
        auto d = denoise(tape, m.denoiser, r.reflectance, ov);
        r.noise_map = d.noise_map;
        r.output = d.output;
    } else {
        r.noise_map = zeros<T>(r.reflectance->shape);
        r.output = tape.clamp(r.reflectance, T(0), T(1));
    }
    return r;
}

} // namespace bladapt
