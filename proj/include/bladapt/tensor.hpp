#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "bladapt/errors.hpp"

namespace bladapt {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index numel_of(const Shape& shape) {
    Index n = 1;
    for (Index d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// Value container. Gradients are never stored here; they live in tape-local
// buffers so concurrent tapes can share parameters read-only.
template <typename T>
struct TensorData {
    Shape shape;
    std::vector<T> values;
    bool requires_grad = false;
    bool frozen = false;
    std::string name;

    Index numel() const { return static_cast<Index>(values.size()); }
};

template <typename T>
using Tensor = std::shared_ptr<TensorData<T>>;

template <typename T>
Tensor<T> make_tensor(Shape shape, std::vector<T> values, bool requires_grad = false,
                      std::string name = "") {
    if (shape.empty()) throw DimensionError("make_tensor: shape must have at least one axis");
    for (Index d : shape) {
        if (d < 1)
            throw DimensionError("make_tensor: axis extents must be positive, got " +
                                 shape_str(shape));
    }
    if (numel_of(shape) != static_cast<Index>(values.size()))
        throw DimensionError("make_tensor: shape " + shape_str(shape) + " expects " +
                             std::to_string(numel_of(shape)) + " values, got " +
                             std::to_string(values.size()));
    auto t = std::make_shared<TensorData<T>>();
    t->shape = std::move(shape);
    t->values = std::move(values);
    t->requires_grad = requires_grad;
    t->name = std::move(name);
    return t;
}

template <typename T>
Tensor<T> zeros(Shape shape, bool requires_grad = false, std::string name = "") {
    std::vector<T> v(static_cast<std::size_t>(numel_of(shape)), T(0));
    return make_tensor<T>(std::move(shape), std::move(v), requires_grad, std::move(name));
}

template <typename T>
Tensor<T> full(Shape shape, T value, bool requires_grad = false, std::string name = "") {
    std::vector<T> v(static_cast<std::size_t>(numel_of(shape)), value);
    return make_tensor<T>(std::move(shape), std::move(v), requires_grad, std::move(name));
}

template <typename T>
Tensor<T> scalar(T value) {
    return make_tensor<T>({1}, {value});
}

// Gradient map returned by Tape::backward, keyed by leaf name. std::map keeps
// iteration order deterministic.
template <typename T>
using GradMap = std::map<std::string, std::vector<T>>;

template <typename T>
T grad_l2_norm(const GradMap<T>& g) {
    double acc = 0.0;
    for (const auto& [name, vec] : g)
        for (T x : vec) acc += static_cast<double>(x) * static_cast<double>(x);
    return static_cast<T>(std::sqrt(acc));
}

enum class BatchNormMode {
    Train,          // batch statistics, running stats updated
    TrainNoUpdate,  // batch statistics, running stats untouched
    Eval            // running statistics
};

enum class DivPolicy {
    Strict,  // |denominator| below the floor is an error
    Clamp    // denominator replaced by max(denominator, floor)
};

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Gathers conv patches: cols is (C*kh*kw) x (Hout*Wout), row-major.
template <typename T>
void im2col(const T* x, Index C, Index H, Index W, Index kh, Index kw, Index stride,
            Index pad, Index Hout, Index Wout, T* cols) {
    const Index L = Hout * Wout;
    for (Index c = 0; c < C; ++c) {
        for (Index p = 0; p < kh; ++p) {
            for (Index q = 0; q < kw; ++q) {
                T* row = cols + ((c * kh + p) * kw + q) * L;
                for (Index i = 0; i < Hout; ++i) {
                    const Index y = i * stride - pad + p;
                    if (y < 0 || y >= H) {
                        std::fill(row + i * Wout, row + (i + 1) * Wout, T(0));
                        continue;
                    }
                    const T* src = x + (c * H + y) * W;
                    for (Index j = 0; j < Wout; ++j) {
                        const Index xx = j * stride - pad + q;
                        row[i * Wout + j] = (xx < 0 || xx >= W) ? T(0) : src[xx];
                    }
                }
            }
        }
    }
}

// Scatter-add of a cols matrix back onto the input layout.
template <typename T>
void col2im_add(const T* cols, Index C, Index H, Index W, Index kh, Index kw, Index stride,
                Index pad, Index Hout, Index Wout, T* dx) {
    const Index L = Hout * Wout;
    for (Index c = 0; c < C; ++c) {
        for (Index p = 0; p < kh; ++p) {
            for (Index q = 0; q < kw; ++q) {
                const T* row = cols + ((c * kh + p) * kw + q) * L;
                for (Index i = 0; i < Hout; ++i) {
                    const Index y = i * stride - pad + p;
                    if (y < 0 || y >= H) continue;
                    T* dst = dx + (c * H + y) * W;
                    for (Index j = 0; j < Wout; ++j) {
                        const Index xx = j * stride - pad + q;
                        if (xx >= 0 && xx < W) dst[xx] += row[i * Wout + j];
                    }
                }
            }
        }
    }
}

} // namespace detail

// Define-by-run reverse-mode tape. Each forward pass builds a fresh tape;
// backward() fills tape-local gradient buffers and leaves every tensor's
// values untouched, so parameters may be shared across tapes.
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    int watch(const Tensor<T>& t) { return node_id(t); }

    // ---- elementwise binary ----

    Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
        require_same_shape("add", a, b);
        auto out = fresh_like(a);
        for (std::size_t i = 0; i < out->values.size(); ++i)
            out->values[i] = a->values[i] + b->values[i];
        record2(a, b, out, [](const T* g, std::size_t n, T* da, T* db, const T*, const T*) {
            for (std::size_t i = 0; i < n; ++i) {
                if (da) da[i] += g[i];
                if (db) db[i] += g[i];
            }
        });
        return out;
    }

    Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
        require_same_shape("sub", a, b);
        auto out = fresh_like(a);
        for (std::size_t i = 0; i < out->values.size(); ++i)
            out->values[i] = a->values[i] - b->values[i];
        record2(a, b, out, [](const T* g, std::size_t n, T* da, T* db, const T*, const T*) {
            for (std::size_t i = 0; i < n; ++i) {
                if (da) da[i] += g[i];
                if (db) db[i] -= g[i];
            }
        });
        return out;
    }

    Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
        require_same_shape("mul", a, b);
        auto out = fresh_like(a);
        for (std::size_t i = 0; i < out->values.size(); ++i)
            out->values[i] = a->values[i] * b->values[i];
        record2(a, b, out, [](const T* g, std::size_t n, T* da, T* db, const T* av, const T* bv) {
            for (std::size_t i = 0; i < n; ++i) {
                if (da) da[i] += g[i] * bv[i];
                if (db) db[i] += g[i] * av[i];
            }
        });
        return out;
    }

    // Division with a guarded denominator. Strict policy rejects entries whose
    // magnitude is below the floor; Clamp substitutes max(b, floor) and treats
    // the clamped region as constant in the backward pass.
    Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b, T floor,
                  DivPolicy policy = DivPolicy::Strict) {
        require_same_shape("div", a, b);
        if (!(floor > T(0))) throw NumericError("div: denominator floor must be positive");
        auto out = fresh_like(a);
        auto beff = std::make_shared<std::vector<T>>(b->values.size());
        for (std::size_t i = 0; i < out->values.size(); ++i) {
            T d = b->values[i];
            if (policy == DivPolicy::Strict) {
                if (std::abs(d) < floor)
                    throw NumericError("div: |denominator| at flat index " + std::to_string(i) +
                                       " is " + std::to_string(static_cast<double>(std::abs(d))) +
                                       ", below floor " + std::to_string(static_cast<double>(floor)));
            } else {
                d = std::max(d, floor);
            }
            (*beff)[i] = d;
            out->values[i] = a->values[i] / d;
        }
        const bool clamped = (policy == DivPolicy::Clamp);
        record2(a, b, out,
                [beff, clamped, floor](const T* g, std::size_t n, T* da, T* db, const T* av,
                                       const T* bv) {
                    for (std::size_t i = 0; i < n; ++i) {
                        const T d = (*beff)[i];
                        if (da) da[i] += g[i] / d;
                        if (db) {
                            // In the clamped region the output no longer
                            // depends on b.
                            if (clamped && bv[i] < floor) continue;
                            db[i] -= g[i] * av[i] / (d * d);
                        }
                    }
                });
        return out;
    }

    // ---- scalar ops ----

    Tensor<T> add_scalar(const Tensor<T>& a, T s) {
        auto out = fresh_like(a);
        for (std::size_t i = 0; i < out->values.size(); ++i) out->values[i] = a->values[i] + s;
        record1(a, out, [](const T* g, std::size_t n, T* da, const T*, const T*) {
            if (!da) return;
            for (std::size_t i = 0; i < n; ++i) da[i] += g[i];
        });
        return out;
    }

    Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
        auto out = fresh_like(a);
        for (std::size_t i = 0; i < out->values.size(); ++i) out->values[i] = a->values[i] * s;
        record1(a, out, [s](const T* g, std::size_t n, T* da, const T*, const T*) {
            if (!da) return;
            for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * s;
        });
        return out;
    }

    // ---- unary ----

    Tensor<T> relu(const Tensor<T>& a) { return leaky_relu(a, T(0)); }

    Tensor<T> leaky_relu(const Tensor<T>& a, T alpha) {
        auto out = fresh_like(a);
        for (std::size_t i = 0; i < out->values.size(); ++i) {
            const T x = a->values[i];
            out->values[i] = x > T(0) ? x : alpha * x;
        }
        record1(a, out, [alpha](const T* g, std::size_t n, T* da, const T* av, const T*) {
            if (!da) return;
            for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * (av[i] > T(0) ? T(1) : alpha);
        });
        return out;
    }

    Tensor<T> sigmoid(const Tensor<T>& a) {
        auto out = fresh_like(a);
        for (std::size_t i = 0; i < out->values.size(); ++i) {
            const T x = a->values[i];
            out->values[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                                       : std::exp(x) / (T(1) + std::exp(x));
        }
        record1(a, out, [](const T* g, std::size_t n, T* da, const T*, const T* ov) {
            if (!da) return;
            for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * ov[i] * (T(1) - ov[i]);
        });
        return out;
    }

    Tensor<T> abs(const Tensor<T>& a) {
        auto out = fresh_like(a);
        for (std::size_t i = 0; i < out->values.size(); ++i)
            out->values[i] = std::abs(a->values[i]);
        // Subgradient 0 at the kink.
        record1(a, out, [](const T* g, std::size_t n, T* da, const T* av, const T*) {
            if (!da) return;
            for (std::size_t i = 0; i < n; ++i) {
                if (av[i] > T(0)) da[i] += g[i];
                else if (av[i] < T(0)) da[i] -= g[i];
            }
        });
        return out;
    }

    // Gradient is zero strictly outside [lo, hi]; boundary values pass it.
    Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
        if (!(lo < hi)) throw NumericError("clamp: lower bound must be below upper bound");
        auto out = fresh_like(a);
        for (std::size_t i = 0; i < out->values.size(); ++i)
            out->values[i] = std::min(std::max(a->values[i], lo), hi);
        record1(a, out, [lo, hi](const T* g, std::size_t n, T* da, const T* av, const T*) {
            if (!da) return;
            for (std::size_t i = 0; i < n; ++i)
                if (av[i] >= lo && av[i] <= hi) da[i] += g[i];
        });
        return out;
    }

    Tensor<T> detach(const Tensor<T>& a) {
        auto out = make_tensor<T>(a->shape, a->values, false);
        node_id(out);
        return out;
    }

    // ---- reductions ----

    Tensor<T> sum(const Tensor<T>& a) {
        double acc = 0.0;
        for (T x : a->values) acc += static_cast<double>(x);
        auto out = make_tensor<T>({1}, {static_cast<T>(acc)});
        const int aid = node_id(a);
        const int oid = node_id(out);
        const std::size_t n = a->values.size();
        if (a->requires_grad) {
            out->requires_grad = true;
            ops_.push_back([this, aid, oid, n]() {
                const T* g = grad_ptr(oid);
                if (!g) return;
                T* da = grad_buf(aid);
                for (std::size_t i = 0; i < n; ++i) da[i] += g[0];
            });
        }
        return out;
    }

    Tensor<T> mean(const Tensor<T>& a) {
        auto s = sum(a);
        return mul_scalar(s, T(1) / static_cast<T>(a->values.size()));
    }

    // ---- structure ops ----

    Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
        require_rank("concat_channels", a, 4);
        require_rank("concat_channels", b, 4);
        const auto& sa = a->shape;
        const auto& sb = b->shape;
        if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
            throw DimensionError("concat_channels: shapes " + shape_str(sa) + " and " +
                                 shape_str(sb) + " differ outside the channel axis");
        const Index N = sa[0], Ca = sa[1], Cb = sb[1], H = sa[2], W = sa[3];
        auto out = zeros<T>({N, Ca + Cb, H, W});
        const Index plane = H * W;
        for (Index n = 0; n < N; ++n) {
            std::copy(a->values.begin() + n * Ca * plane, a->values.begin() + (n + 1) * Ca * plane,
                      out->values.begin() + n * (Ca + Cb) * plane);
            std::copy(b->values.begin() + n * Cb * plane, b->values.begin() + (n + 1) * Cb * plane,
                      out->values.begin() + (n * (Ca + Cb) + Ca) * plane);
        }
        const int aid = node_id(a), bid = node_id(b), oid = node_id(out);
        const bool ga = a->requires_grad, gb = b->requires_grad;
        if (ga || gb) {
            out->requires_grad = true;
            ops_.push_back([this, aid, bid, oid, ga, gb, N, Ca, Cb, plane]() {
                const T* g = grad_ptr(oid);
                if (!g) return;
                T* da = ga ? grad_buf(aid) : nullptr;
                T* db = gb ? grad_buf(bid) : nullptr;
                for (Index n = 0; n < N; ++n) {
                    if (da)
                        for (Index i = 0; i < Ca * plane; ++i)
                            da[n * Ca * plane + i] += g[n * (Ca + Cb) * plane + i];
                    if (db)
                        for (Index i = 0; i < Cb * plane; ++i)
                            db[n * Cb * plane + i] += g[(n * (Ca + Cb) + Ca) * plane + i];
                }
            });
        }
        return out;
    }

    // Forward difference along height (axis=2) or width (axis=3).
    Tensor<T> spatial_diff(const Tensor<T>& a, int axis) {
        require_rank("spatial_diff", a, 4);
        if (axis != 2 && axis != 3)
            throw DimensionError("spatial_diff: axis must be 2 (height) or 3 (width)");
        const Index N = a->shape[0], C = a->shape[1], H = a->shape[2], W = a->shape[3];
        const Index Ho = axis == 2 ? H - 1 : H;
        const Index Wo = axis == 3 ? W - 1 : W;
        if (Ho < 1 || Wo < 1)
            throw DimensionError("spatial_diff: axis extent must be at least 2, got " +
                                 shape_str(a->shape));
        auto out = zeros<T>({N, C, Ho, Wo});
        for (Index n = 0; n < N; ++n)
            for (Index c = 0; c < C; ++c)
                for (Index i = 0; i < Ho; ++i)
                    for (Index j = 0; j < Wo; ++j) {
                        const Index base = ((n * C + c) * H + i) * W + j;
                        const Index next = axis == 2 ? base + W : base + 1;
                        out->values[((n * C + c) * Ho + i) * Wo + j] =
                            a->values[next] - a->values[base];
                    }
        const int aid = node_id(a), oid = node_id(out);
        if (a->requires_grad) {
            out->requires_grad = true;
            ops_.push_back([this, aid, oid, axis, N, C, H, W, Ho, Wo]() {
                const T* g = grad_ptr(oid);
                if (!g) return;
                T* da = grad_buf(aid);
                for (Index n = 0; n < N; ++n)
                    for (Index c = 0; c < C; ++c)
                        for (Index i = 0; i < Ho; ++i)
                            for (Index j = 0; j < Wo; ++j) {
                                const Index base = ((n * C + c) * H + i) * W + j;
                                const Index next = axis == 2 ? base + W : base + 1;
                                const T gv = g[((n * C + c) * Ho + i) * Wo + j];
                                da[next] += gv;
                                da[base] -= gv;
                            }
            });
        }
        return out;
    }

    // Non-overlapping max pooling with kernel == stride; ties keep the first
    // maximum in row-major window order.
    Tensor<T> maxpool2d(const Tensor<T>& a, Index k) {
        require_rank("maxpool2d", a, 4);
        const Index N = a->shape[0], C = a->shape[1], H = a->shape[2], W = a->shape[3];
        if (k < 1 || H % k != 0 || W % k != 0)
            throw DimensionError("maxpool2d: spatial extents " + shape_str(a->shape) +
                                 " must be divisible by kernel " + std::to_string(k));
        const Index Ho = H / k, Wo = W / k;
        auto out = zeros<T>({N, C, Ho, Wo});
        auto argmax = std::make_shared<std::vector<Index>>(out->values.size());
        for (Index n = 0; n < N; ++n)
            for (Index c = 0; c < C; ++c)
                for (Index i = 0; i < Ho; ++i)
                    for (Index j = 0; j < Wo; ++j) {
                        Index best = ((n * C + c) * H + i * k) * W + j * k;
                        T bestv = a->values[best];
                        for (Index p = 0; p < k; ++p)
                            for (Index q = 0; q < k; ++q) {
                                const Index idx = ((n * C + c) * H + i * k + p) * W + j * k + q;
                                if (a->values[idx] > bestv) {
                                    bestv = a->values[idx];
                                    best = idx;
                                }
                            }
                        const Index o = ((n * C + c) * Ho + i) * Wo + j;
                        out->values[o] = bestv;
                        (*argmax)[o] = best;
                    }
        const int aid = node_id(a), oid = node_id(out);
        if (a->requires_grad) {
            out->requires_grad = true;
            const std::size_t no = out->values.size();
            ops_.push_back([this, aid, oid, argmax, no]() {
                const T* g = grad_ptr(oid);
                if (!g) return;
                T* da = grad_buf(aid);
                for (std::size_t o = 0; o < no; ++o) da[(*argmax)[o]] += g[o];
            });
        }
        return out;
    }

    Tensor<T> upsample_nearest(const Tensor<T>& a, Index factor) {
        require_rank("upsample_nearest", a, 4);
        if (factor < 1) throw DimensionError("upsample_nearest: factor must be positive");
        const Index N = a->shape[0], C = a->shape[1], H = a->shape[2], W = a->shape[3];
        const Index Ho = H * factor, Wo = W * factor;
        auto out = zeros<T>({N, C, Ho, Wo});
        for (Index n = 0; n < N; ++n)
            for (Index c = 0; c < C; ++c)
                for (Index i = 0; i < Ho; ++i)
                    for (Index j = 0; j < Wo; ++j)
                        out->values[((n * C + c) * Ho + i) * Wo + j] =
                            a->values[((n * C + c) * H + i / factor) * W + j / factor];
        const int aid = node_id(a), oid = node_id(out);
        if (a->requires_grad) {
            out->requires_grad = true;
            ops_.push_back([this, aid, oid, factor, N, C, H, W, Ho, Wo]() {
                const T* g = grad_ptr(oid);
                if (!g) return;
                T* da = grad_buf(aid);
                for (Index n = 0; n < N; ++n)
                    for (Index c = 0; c < C; ++c)
                        for (Index i = 0; i < Ho; ++i)
                            for (Index j = 0; j < Wo; ++j)
                                da[((n * C + c) * H + i / factor) * W + j / factor] +=
                                    g[((n * C + c) * Ho + i) * Wo + j];
            });
        }
        return out;
    }

    // Direct cross-correlation with zero padding; the forward and backward
    // passes run as GEMMs over im2col patches.
    Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Index stride,
                     Index pad) {
        require_rank("conv2d", x, 4);
        require_rank("conv2d", w, 4);
        if (b->shape.size() != 1 || b->shape[0] != w->shape[0])
            throw DimensionError("conv2d: bias shape " + shape_str(b->shape) +
                                 " must be [" + std::to_string(w->shape[0]) + "]");
        if (x->shape[1] != w->shape[1])
            throw DimensionError("conv2d: input channels " + std::to_string(x->shape[1]) +
                                 " != weight channels " + std::to_string(w->shape[1]));
        if (stride < 1 || pad < 0) throw DimensionError("conv2d: bad stride or padding");
        const Index N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
        const Index O = w->shape[0], kh = w->shape[2], kw = w->shape[3];
        if (H + 2 * pad < kh || W + 2 * pad < kw)
            throw DimensionError("conv2d: kernel " + shape_str(w->shape) +
                                 " exceeds padded input " + shape_str(x->shape));
        const Index Hout = (H + 2 * pad - kh) / stride + 1;
        const Index Wout = (W + 2 * pad - kw) / stride + 1;
        const Index CK = C * kh * kw;
        const Index L = Hout * Wout;

        auto out = zeros<T>({N, O, Hout, Wout});
        std::vector<T> cols(static_cast<std::size_t>(CK * L));
        using Map = Eigen::Map<detail::MatRM<T>>;
        using CMap = Eigen::Map<const detail::MatRM<T>>;
        CMap wm(w->values.data(), O, CK);
        for (Index n = 0; n < N; ++n) {
            detail::im2col(x->values.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, Hout,
                           Wout, cols.data());
            Map om(out->values.data() + n * O * L, O, L);
            CMap cm(cols.data(), CK, L);
            om.noalias() = wm * cm;
            for (Index o = 0; o < O; ++o) om.row(o).array() += b->values[o];
        }

        const int xid = node_id(x), wid = node_id(w), bid = node_id(b), oid = node_id(out);
        const bool gx = x->requires_grad, gw = w->requires_grad, gb = b->requires_grad;
        if (gx || gw || gb) {
            out->requires_grad = true;
            // x's values are captured by shared_ptr: backward re-runs im2col.
            Tensor<T> xin = x;
            Tensor<T> win = w;
            ops_.push_back([this, xid, wid, bid, oid, gx, gw, gb, xin, win, N, C, H, W, O, kh, kw,
                            stride, pad, Hout, Wout, CK, L]() {
                const T* g = grad_ptr(oid);
                if (!g) return;
                std::vector<T> cols(static_cast<std::size_t>(CK * L));
                std::vector<T> dcols;
                if (gx) dcols.resize(static_cast<std::size_t>(CK * L));
                CMap wm(win->values.data(), O, CK);
                T* dwp = gw ? grad_buf(wid) : nullptr;
                T* dbp = gb ? grad_buf(bid) : nullptr;
                T* dxp = gx ? grad_buf(xid) : nullptr;
                for (Index n = 0; n < N; ++n) {
                    CMap gm(g + n * O * L, O, L);
                    if (gw || gx)
                        detail::im2col(xin->values.data() + n * C * H * W, C, H, W, kh, kw,
                                       stride, pad, Hout, Wout, cols.data());
                    if (gw) {
                        Map dwm(dwp, O, CK);
                        CMap cm(cols.data(), CK, L);
                        dwm.noalias() += gm * cm.transpose();
                    }
                    if (gb)
                        for (Index o = 0; o < O; ++o) dbp[o] += gm.row(o).sum();
                    if (gx) {
                        Map dcm(dcols.data(), CK, L);
                        dcm.noalias() = wm.transpose() * gm;
                        detail::col2im_add(dcols.data(), C, H, W, kh, kw, stride, pad, Hout,
                                           Wout, dxp + n * C * H * W);
                    }
                }
            });
        }
        return out;
    }

    // Batch normalization over [N,H,W] per channel. Variance is biased in
    // both the normalization and the running-average update; running buffers
    // are plain state owned by the layer, not tape nodes.
    Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          std::vector<T>& running_mean, std::vector<T>& running_var,
                          BatchNormMode mode, T momentum, T eps) {
        require_rank("batchnorm2d", x, 4);
        const Index N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
        if (gamma->numel() != C || beta->numel() != C)
            throw DimensionError("batchnorm2d: gamma/beta must have one entry per channel");
        if (running_mean.size() != static_cast<std::size_t>(C) ||
            running_var.size() != static_cast<std::size_t>(C))
            throw DimensionError("batchnorm2d: running buffers must have one entry per channel");
        const Index M = N * H * W;
        const bool train = mode != BatchNormMode::Eval;
        if (train && M <= 1)
            throw NumericError("batchnorm2d: training-mode statistics need more than one value "
                               "per channel, got " + shape_str(x->shape));

        std::vector<T> mu(C), inv_std(C);
        for (Index c = 0; c < C; ++c) {
            if (train) {
                double m = 0.0;
                for (Index n = 0; n < N; ++n) {
                    const T* p = x->values.data() + (n * C + c) * H * W;
                    for (Index i = 0; i < H * W; ++i) m += p[i];
                }
                m /= static_cast<double>(M);
                double v = 0.0;
                for (Index n = 0; n < N; ++n) {
                    const T* p = x->values.data() + (n * C + c) * H * W;
                    for (Index i = 0; i < H * W; ++i) {
                        const double d = p[i] - m;
                        v += d * d;
                    }
                }
                v /= static_cast<double>(M);
                mu[c] = static_cast<T>(m);
                inv_std[c] = static_cast<T>(1.0 / std::sqrt(v + static_cast<double>(eps)));
                if (mode == BatchNormMode::Train) {
                    running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * static_cast<T>(m);
                    running_var[c] = (T(1) - momentum) * running_var[c] + momentum * static_cast<T>(v);
                }
            } else {
                mu[c] = running_mean[c];
                inv_std[c] = static_cast<T>(
                    1.0 / std::sqrt(static_cast<double>(running_var[c]) + static_cast<double>(eps)));
            }
        }

        auto out = zeros<T>({N, C, H, W});
        auto xhat = std::make_shared<std::vector<T>>(x->values.size());
        for (Index n = 0; n < N; ++n)
            for (Index c = 0; c < C; ++c) {
                const T* p = x->values.data() + (n * C + c) * H * W;
                T* xh = xhat->data() + (n * C + c) * H * W;
                T* po = out->values.data() + (n * C + c) * H * W;
                const T g = gamma->values[c], bb = beta->values[c];
                for (Index i = 0; i < H * W; ++i) {
                    xh[i] = (p[i] - mu[c]) * inv_std[c];
                    po[i] = g * xh[i] + bb;
                }
            }

        const int xid = node_id(x), gid = node_id(gamma), bid = node_id(beta),
                  oid = node_id(out);
        const bool gx = x->requires_grad, gg = gamma->requires_grad, gb = beta->requires_grad;
        if (gx || gg || gb) {
            out->requires_grad = true;
            Tensor<T> gam = gamma;
            auto istd = std::make_shared<std::vector<T>>(inv_std);
            ops_.push_back([this, xid, gid, bid, oid, gx, gg, gb, gam, xhat, istd, train, N, C, H,
                            W, M]() {
                const T* g = grad_ptr(oid);
                if (!g) return;
                T* dx = gx ? grad_buf(xid) : nullptr;
                T* dg = gg ? grad_buf(gid) : nullptr;
                T* db = gb ? grad_buf(bid) : nullptr;
                for (Index c = 0; c < C; ++c) {
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (Index n = 0; n < N; ++n) {
                        const Index off = (n * C + c) * H * W;
                        for (Index i = 0; i < H * W; ++i) {
                            sum_g += g[off + i];
                            sum_gx += static_cast<double>(g[off + i]) * (*xhat)[off + i];
                        }
                    }
                    if (dg) dg[c] += static_cast<T>(sum_gx);
                    if (db) db[c] += static_cast<T>(sum_g);
                    if (dx) {
                        const T scale = gam->values[c] * (*istd)[c];
                        if (train) {
                            const T mg = static_cast<T>(sum_g / static_cast<double>(M));
                            const T mgx = static_cast<T>(sum_gx / static_cast<double>(M));
                            for (Index n = 0; n < N; ++n) {
                                const Index off = (n * C + c) * H * W;
                                for (Index i = 0; i < H * W; ++i)
                                    dx[off + i] +=
                                        scale * (g[off + i] - mg - (*xhat)[off + i] * mgx);
                            }
                        } else {
                            for (Index n = 0; n < N; ++n) {
                                const Index off = (n * C + c) * H * W;
                                for (Index i = 0; i < H * W; ++i) dx[off + i] += scale * g[off + i];
                            }
                        }
                    }
                }
            });
        }
        return out;
    }

    // Backward from a scalar loss. Gradients for the requested leaf names are
    // returned; everything else stays in tape-local buffers that die with the
    // tape, so repeated calls and concurrent tapes cannot interfere.
    GradMap<T> backward(const Tensor<T>& loss, const std::vector<std::string>& wrt) {
        auto it = ids_.find(loss.get());
        if (it == ids_.end())
            throw UnknownParameterError("backward: loss tensor was not produced on this tape");
        if (loss->numel() != 1)
            throw DimensionError("backward: loss must be scalar, got shape " +
                                 shape_str(loss->shape));
        grads_.assign(nodes_.size(), {});
        grad_buf(it->second)[0] = T(1);
        for (auto op = ops_.rbegin(); op != ops_.rend(); ++op) (*op)();
        GradMap<T> out;
        for (const auto& name : wrt) {
            auto lit = leaf_ids_.find(name);
            if (lit == leaf_ids_.end())
                throw UnknownParameterError("backward: unknown parameter '" + name +
                                            "' (not registered on this tape)");
            const int id = lit->second;
            if (!nodes_[static_cast<std::size_t>(id)]->requires_grad)
                throw UnknownParameterError("backward: parameter '" + name +
                                            "' does not require gradients");
            if (grads_[static_cast<std::size_t>(id)].empty())
                out[name].assign(nodes_[static_cast<std::size_t>(id)]->values.size(), T(0));
            else
                out[name] = grads_[static_cast<std::size_t>(id)];
        }
        return out;
    }

    std::size_t node_count() const { return nodes_.size(); }

private:
    template <typename F>
    void record1(const Tensor<T>& a, Tensor<T>& out, F&& f) {
        const int aid = node_id(a);
        const int oid = node_id(out);
        if (!a->requires_grad) return;
        out->requires_grad = true;
        Tensor<T> av = a;
        Tensor<T> ov = out;
        const std::size_t n = out->values.size();
        ops_.push_back([this, aid, oid, av, ov, n, f = std::forward<F>(f)]() {
            const T* g = grad_ptr(oid);
            if (!g) return;
            f(g, n, grad_buf(aid), av->values.data(), ov->values.data());
        });
    }

    template <typename F>
    void record2(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out, F&& f) {
        const int aid = node_id(a);
        const int bid = node_id(b);
        const int oid = node_id(out);
        const bool ga = a->requires_grad, gb = b->requires_grad;
        if (!ga && !gb) return;
        out->requires_grad = true;
        Tensor<T> av = a;
        Tensor<T> bv = b;
        const std::size_t n = out->values.size();
        ops_.push_back([this, aid, bid, oid, ga, gb, av, bv, n, f = std::forward<F>(f)]() {
            const T* g = grad_ptr(oid);
            if (!g) return;
            f(g, n, ga ? grad_buf(aid) : nullptr, gb ? grad_buf(bid) : nullptr,
              av->values.data(), bv->values.data());
        });
    }

    static Tensor<T> fresh_like(const Tensor<T>& a) {
        return make_tensor<T>(a->shape, std::vector<T>(a->values.size()));
    }

    static void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
        if (a->shape != b->shape)
            throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a->shape) +
                                 " vs " + shape_str(b->shape));
    }

    static void require_rank(const char* op, const Tensor<T>& t, std::size_t rank) {
        if (t->shape.size() != rank)
            throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                                 " tensor, got shape " + shape_str(t->shape));
    }

    int node_id(const Tensor<T>& t) {
        auto it = ids_.find(t.get());
        if (it != ids_.end()) return it->second;
        const int id = static_cast<int>(nodes_.size());
        nodes_.push_back(t);
        ids_.emplace(t.get(), id);
        if (!t->name.empty()) leaf_ids_.emplace(t->name, id);
        return id;
    }

    T* grad_buf(int id) {
        auto& g = grads_[static_cast<std::size_t>(id)];
        if (g.empty()) g.assign(nodes_[static_cast<std::size_t>(id)]->values.size(), T(0));
        return g.data();
    }

    const T* grad_ptr(int id) const {
        const auto& g = grads_[static_cast<std::size_t>(id)];
        return g.empty() ? nullptr : g.data();
    }

    std::vector<Tensor<T>> nodes_;
    std::unordered_map<const TensorData<T>*, int> ids_;
    std::map<std::string, int> leaf_ids_;
    std::vector<std::function<void()>> ops_;
    std::vector<std::vector<T>> grads_;
};

} // namespace bladapt
