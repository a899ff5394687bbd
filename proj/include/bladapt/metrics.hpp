#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "bladapt/errors.hpp"
#include "bladapt/tensor.hpp"

namespace bladapt {

namespace detail {

// BT.601 luminance plane of a [3,H,W] image, as doubles.
template <typename T>
std::vector<double> luminance_plane(const Tensor<T>& img) {
    if (img->shape.size() != 3 || img->shape[0] != 3)
        throw DimensionError("metrics: expected [3,H,W] image, got " + shape_str(img->shape));
    const Index H = img->shape[1], W = img->shape[2];
    std::vector<double> y(static_cast<std::size_t>(H * W));
    for (Index i = 0; i < H * W; ++i)
        y[static_cast<std::size_t>(i)] = 0.299 * img->values[i] +
                                         0.587 * img->values[H * W + i] +
                                         0.114 * img->values[2 * H * W + i];
    return y;
}

inline std::vector<double> gaussian_kernel1d(int radius, double sigma) {
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-(i * i) / (2.0 * sigma * sigma));
        k[static_cast<std::size_t>(i + radius)] = v;
        sum += v;
    }
    for (auto& v : k) v /= sum;
    return k;
}

// Valid-mode separable Gaussian filter on an H x W plane.
inline std::vector<double> gaussian_valid(const std::vector<double>& img, Index H, Index W,
                                          const std::vector<double>& k, Index& Ho, Index& Wo) {
    const Index r = static_cast<Index>(k.size() / 2);
    Ho = H - 2 * r;
    Wo = W - 2 * r;
    std::vector<double> tmp(static_cast<std::size_t>(H * Wo));
    for (Index i = 0; i < H; ++i)
        for (Index j = 0; j < Wo; ++j) {
            double s = 0.0;
            for (Index t = 0; t < static_cast<Index>(k.size()); ++t)
                s += k[static_cast<std::size_t>(t)] * img[static_cast<std::size_t>(i * W + j + t)];
            tmp[static_cast<std::size_t>(i * Wo + j)] = s;
        }
    std::vector<double> out(static_cast<std::size_t>(Ho * Wo));
    for (Index i = 0; i < Ho; ++i)
        for (Index j = 0; j < Wo; ++j) {
            double s = 0.0;
            for (Index t = 0; t < static_cast<Index>(k.size()); ++t)
                s += k[static_cast<std::size_t>(t)] *
                     tmp[static_cast<std::size_t>((i + t) * Wo + j)];
            out[static_cast<std::size_t>(i * Wo + j)] = s;
        }
    return out;
}

} // namespace detail

// 10*log10(peak^2 / MSE) over all elements; identical inputs give +infinity.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0) {
    if (a->shape != b->shape)
        throw DimensionError("psnr: shape mismatch " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
    double se = 0.0;
    for (std::size_t i = 0; i < a->values.size(); ++i) {
        const double d = static_cast<double>(a->values[i]) - static_cast<double>(b->values[i]);
        se += d * d;
    }
    const double mse = se / static_cast<double>(a->values.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

// Mean local SSIM of the luminance planes: 11x11 Gaussian window sigma 1.5,
// C1=(0.01)^2, C2=(0.03)^2 on the [0,1] range, valid-mode windows.
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b) {
    if (a->shape != b->shape)
        throw DimensionError("ssim: shape mismatch " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
    const Index H = a->shape[1], W = a->shape[2];
    if (H < 11 || W < 11)
        throw DimensionError("ssim: image " + shape_str(a->shape) +
                             " smaller than the 11x11 window");
    const auto ya = detail::luminance_plane(a);
    const auto yb = detail::luminance_plane(b);
    const auto k = detail::gaussian_kernel1d(5, 1.5);
    constexpr double C1 = 0.01 * 0.01;
    constexpr double C2 = 0.03 * 0.03;

    std::vector<double> aa(ya.size()), bb(ya.size()), ab(ya.size());
    for (std::size_t i = 0; i < ya.size(); ++i) {
        aa[i] = ya[i] * ya[i];
        bb[i] = yb[i] * yb[i];
        ab[i] = ya[i] * yb[i];
    }
    Index Ho = 0, Wo = 0;
    const auto mua = detail::gaussian_valid(ya, H, W, k, Ho, Wo);
    const auto mub = detail::gaussian_valid(yb, H, W, k, Ho, Wo);
    const auto saa = detail::gaussian_valid(aa, H, W, k, Ho, Wo);
    const auto sbb = detail::gaussian_valid(bb, H, W, k, Ho, Wo);
    const auto sab = detail::gaussian_valid(ab, H, W, k, Ho, Wo);

    double total = 0.0;
    for (std::size_t i = 0; i < mua.size(); ++i) {
        const double va = saa[i] - mua[i] * mua[i];
        const double vb = sbb[i] - mub[i] * mub[i];
        const double cov = sab[i] - mua[i] * mub[i];
        total += ((2.0 * mua[i] * mub[i] + C1) * (2.0 * cov + C2)) /
                 ((mua[i] * mua[i] + mub[i] * mub[i] + C1) * (va + vb + C2));
    }
    return total / static_cast<double>(mua.size());
}

// Shannon entropy (bits) of the 256-bin histogram of 8-bit-quantized
// luminance.
template <typename T>
double de_entropy(const Tensor<T>& img) {
    const auto y = detail::luminance_plane(img);
    std::vector<double> hist(256, 0.0);
    for (double v : y) {
        int bin = static_cast<int>(std::lround(std::min(1.0, std::max(0.0, v)) * 255.0));
        hist[static_cast<std::size_t>(bin)] += 1.0;
    }
    const double n = static_cast<double>(y.size());
    double e = 0.0;
    for (double h : hist) {
        if (h == 0.0) continue;
        const double p = h / n;
        e -= p * std::log2(p);
    }
    return e;
}

// Lightness-order error: lightness is the per-pixel RGB max; both images are
// nearest-downsampled to at most 50x50; the score is the fraction of ordered
// pixel pairs whose (>=) lightness order flips, scaled by 1000. Ties count as
// concordant on both sides, so loe(x, x) == 0.
template <typename T>
double loe(const Tensor<T>& enhanced, const Tensor<T>& original) {
    if (enhanced->shape != original->shape)
        throw DimensionError("loe: shape mismatch " + shape_str(enhanced->shape) + " vs " +
                             shape_str(original->shape));
    if (enhanced->shape.size() != 3 || enhanced->shape[0] != 3)
        throw DimensionError("loe: expected [3,H,W] image, got " + shape_str(enhanced->shape));
    const Index H = enhanced->shape[1], W = enhanced->shape[2];
    const Index nh = std::min<Index>(50, H);
    const Index nw = std::min<Index>(50, W);
    auto lightness = [H, W](const Tensor<T>& img, Index i, Index j) {
        const Index plane = H * W;
        double m = static_cast<double>(img->values[i * W + j]);
        m = std::max(m, static_cast<double>(img->values[plane + i * W + j]));
        m = std::max(m, static_cast<double>(img->values[2 * plane + i * W + j]));
        return m;
    };
    std::vector<double> le(static_cast<std::size_t>(nh * nw)), lo(le.size());
    for (Index i = 0; i < nh; ++i)
        for (Index j = 0; j < nw; ++j) {
            const Index si = i * H / nh;
            const Index sj = j * W / nw;
            le[static_cast<std::size_t>(i * nw + j)] = lightness(enhanced, si, sj);
            lo[static_cast<std::size_t>(i * nw + j)] = lightness(original, si, sj);
        }
    const std::size_t n = le.size();
    std::size_t flips = 0;
    for (std::size_t p = 0; p < n; ++p)
        for (std::size_t q = 0; q < n; ++q) {
            const bool oe = le[p] >= le[q];
            const bool oo = lo[p] >= lo[q];
            if (oe != oo) ++flips;
        }
    return 1000.0 * static_cast<double>(flips) / static_cast<double>(n * n);
}

} // namespace bladapt
