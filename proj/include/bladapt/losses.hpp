#pragma once

#include <cmath>
#include <optional>

#include "bladapt/tensor.hpp"

namespace bladapt {

template <typename T>
Tensor<T> mse_loss(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    auto d = tape.sub(a, b);
    return tape.mean(tape.mul(d, d));
}

// Mean squared error against the ground truth (mean over all elements).
template <typename T>
Tensor<T> supervised_loss(Tape<T>& tape, const Tensor<T>& z, const Tensor<T>& z_gt) {
    return mse_loss(tape, z, z_gt);
}

// BT.601 full-range RGB -> YUV with U,V centered at zero. Pure value
// transform (no gradients); used to derive smoothness weights from the input.
template <typename T>
Tensor<T> rgb_to_yuv(const Tensor<T>& img) {
    if (img->shape.size() != 4 || img->shape[1] != 3)
        throw DimensionError("rgb_to_yuv: expected [N,3,H,W], got " + shape_str(img->shape));
    const Index N = img->shape[0], H = img->shape[2], W = img->shape[3];
    auto out = zeros<T>(img->shape);
    const Index plane = H * W;
    for (Index n = 0; n < N; ++n) {
        const T* r = img->values.data() + (n * 3 + 0) * plane;
        const T* g = img->values.data() + (n * 3 + 1) * plane;
        const T* b = img->values.data() + (n * 3 + 2) * plane;
        T* y = out->values.data() + (n * 3 + 0) * plane;
        T* u = out->values.data() + (n * 3 + 1) * plane;
        T* v = out->values.data() + (n * 3 + 2) * plane;
        for (Index i = 0; i < plane; ++i) {
            y[i] = static_cast<T>(0.299) * r[i] + static_cast<T>(0.587) * g[i] +
                   static_cast<T>(0.114) * b[i];
            u[i] = static_cast<T>(-0.168736) * r[i] + static_cast<T>(-0.331264) * g[i] +
                   static_cast<T>(0.5) * b[i];
            v[i] = static_cast<T>(0.5) * r[i] + static_cast<T>(-0.418688) * g[i] +
                   static_cast<T>(-0.081312) * b[i];
        }
    }
    return out;
}

template <typename T>
struct SmoothnessContext {
    T sigma = T(0.1);   // Gaussian bandwidth over YUV neighbor differences
    T lambda = T(0.2);  // fidelity weight
};

namespace detail {

// Edge weights w = exp(-sum_c (yuv_i - yuv_j)^2 / (2 sigma^2)) for forward
// neighbors along one axis, replicated across the 3 channels of x so the
// weighted difference can be formed with plain elementwise ops.
template <typename T>
Tensor<T> edge_weights(const Tensor<T>& yuv, int axis, T sigma) {
    const Index N = yuv->shape[0], H = yuv->shape[2], W = yuv->shape[3];
    const Index Ho = axis == 2 ? H - 1 : H;
    const Index Wo = axis == 3 ? W - 1 : W;
    auto w = zeros<T>({N, 3, Ho, Wo});
    const T inv = T(1) / (T(2) * sigma * sigma);
    for (Index n = 0; n < N; ++n)
        for (Index i = 0; i < Ho; ++i)
            for (Index j = 0; j < Wo; ++j) {
                double s = 0.0;
                for (Index c = 0; c < 3; ++c) {
                    const Index base = ((n * 3 + c) * H + i) * W + j;
                    const Index next = axis == 2 ? base + W : base + 1;
                    const double d = static_cast<double>(yuv->values[next]) -
                                     static_cast<double>(yuv->values[base]);
                    s += d * d;
                }
                const T wv = static_cast<T>(std::exp(-s * static_cast<double>(inv)));
                for (Index c = 0; c < 3; ++c)
                    w->values[((n * 3 + c) * Ho + i) * Wo + j] = wv;
            }
    return w;
}

} // namespace detail

// Fidelity + weighted smoothness for unpaired scenes:
//   lambda * mean((x - y)^2)
//   + (sum over directed 4-neighbor pairs and channels of w * |x_i - x_j|) / (N*H*W)
// The directed double sum counts each undirected edge twice.
template <typename T>
Tensor<T> unsupervised_loss(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& y,
                            const SmoothnessContext<T>& ctx) {
    if (x->shape != y->shape)
        throw DimensionError("unsupervised_loss: shape mismatch " + shape_str(x->shape) +
                             " vs " + shape_str(y->shape));
    const Index N = x->shape[0], H = x->shape[2], W = x->shape[3];
    Tensor<T> fidelity = tape.mul_scalar(mse_loss(tape, x, y), ctx.lambda);

    Tensor<T> yuv = rgb_to_yuv(y);
    Tensor<T> smooth;
    for (int axis : {2, 3}) {
        Tensor<T> w = detail::edge_weights(yuv, axis, ctx.sigma);
        Tensor<T> term = tape.sum(tape.mul(tape.abs(tape.spatial_diff(x, axis)), w));
        smooth = smooth ? tape.add(smooth, term) : term;
    }
    smooth = tape.mul_scalar(smooth, T(2) / static_cast<T>(N * H * W));
    return tape.add(fidelity, smooth);
}

// Split-group denoising objective: per-group MSE, summed, with empty groups
// omitted. Group a is the noisy-source pairs, group b the clean-source pairs.
template <typename T>
Tensor<T> adaptive_denoise_loss(Tape<T>& tape, const Tensor<T>* zhat_a, const Tensor<T>* gt_a,
                                const Tensor<T>* zhat_b, const Tensor<T>* gt_b) {
    const bool has_a = zhat_a != nullptr;
    const bool has_b = zhat_b != nullptr;
    if (!has_a && !has_b)
        throw ConfigError("adaptive_denoise_loss: both groups are empty");
    if (has_a != (gt_a != nullptr) || has_b != (gt_b != nullptr))
        throw DimensionError("adaptive_denoise_loss: prediction/target presence mismatch");
    Tensor<T> loss;
    if (has_a) loss = mse_loss(tape, *zhat_a, *gt_a);
    if (has_b) {
        Tensor<T> lb = mse_loss(tape, *zhat_b, *gt_b);
        loss = loss ? tape.add(loss, lb) : lb;
    }
    return loss;
}

} // namespace bladapt
