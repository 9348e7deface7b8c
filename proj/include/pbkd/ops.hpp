#pragma once

// Dense layer kernels: forward and backward passes for the layer set used by
// the teacher and replacement networks. All functions are pure with respect
// to shared state; they read caller-owned buffers and write caller-owned
// buffers, so concurrent use on disjoint tensors is safe.
//
// Backward functions accumulate (+=) into raw gradient buffers laid out like
// the corresponding tensor (nullptr skips that gradient). Callers zero the
// buffers between optimizer steps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pbkd/tensor.hpp"

namespace pbkd::ops {

inline int conv_out_dim(int in, int kernel, int stride, int pad) {
    int span = in + 2 * pad - kernel;
    if (span < 0)
        throw ShapeError("conv: kernel " + std::to_string(kernel) + " larger than padded input " +
                         std::to_string(in + 2 * pad));
    int out = span / stride + 1;  // floor division, edge rows beyond the last window are dropped
    if (out < 1) throw ShapeError("conv: output dim < 1");
    return out;
}

// ---------------------------------------------------------------------------
// Convolution (full, kernel spatial size K x K; used for 3x3 and 1x1)
// ---------------------------------------------------------------------------

template <typename T>
Tensor4<T> conv2d_fwd(const Tensor4<T>& x, const Tensor4<T>& k, int stride, int pad) {
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (pad < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
    if (k.c != x.c)
        throw ShapeError("conv2d: input has " + std::to_string(x.c) + " channels but kernel expects " +
                         std::to_string(k.c));
    const int co = k.n, ci = k.c, kh = k.h, kw = k.w;
    const int ho = conv_out_dim(x.h, kh, stride, pad);
    const int wo = conv_out_dim(x.w, kw, stride, pad);
    Tensor4<T> y(x.n, co, ho, wo);
    for (int n = 0; n < x.n; ++n) {
        for (int o = 0; o < co; ++o) {
            const T* kbase = &k.data[k.idx(o, 0, 0, 0)];
            for (int oy = 0; oy < ho; ++oy) {
                const int iy0 = oy * stride - pad;
                for (int ox = 0; ox < wo; ++ox) {
                    const int ix0 = ox * stride - pad;
                    T acc = 0;
                    for (int j = 0; j < ci; ++j) {
                        const T* xrow = &x.data[x.idx(n, j, 0, 0)];
                        const T* krow = kbase + static_cast<size_t>(j) * kh * kw;
                        for (int ky = 0; ky < kh; ++ky) {
                            const int iy = iy0 + ky;
                            if (static_cast<unsigned>(iy) >= static_cast<unsigned>(x.h)) continue;
                            for (int kx = 0; kx < kw; ++kx) {
                                const int ix = ix0 + kx;
                                if (static_cast<unsigned>(ix) >= static_cast<unsigned>(x.w)) continue;
                                acc += xrow[iy * x.w + ix] * krow[ky * kw + kx];
                            }
                        }
                    }
                    y.data[y.idx(n, o, oy, ox)] = acc;
                }
            }
        }
    }
    return y;
}

template <typename T>
void conv2d_bwd(const Tensor4<T>& x, const Tensor4<T>& k, const Tensor4<T>& gy, int stride, int pad,
                T* gx, T* gk) {
    const int co = k.n, ci = k.c, kh = k.h, kw = k.w;
    const int ho = conv_out_dim(x.h, kh, stride, pad);
    const int wo = conv_out_dim(x.w, kw, stride, pad);
    require_same_shape("conv2d_bwd: upstream grad", gy.n, gy.c, gy.h, gy.w, x.n, co, ho, wo);
    for (int n = 0; n < x.n; ++n) {
        for (int o = 0; o < co; ++o) {
            for (int oy = 0; oy < ho; ++oy) {
                const int iy0 = oy * stride - pad;
                for (int ox = 0; ox < wo; ++ox) {
                    const int ix0 = ox * stride - pad;
                    const T g = gy.data[gy.idx(n, o, oy, ox)];
                    if (g == T(0)) continue;
                    for (int j = 0; j < ci; ++j) {
                        for (int ky = 0; ky < kh; ++ky) {
                            const int iy = iy0 + ky;
                            if (static_cast<unsigned>(iy) >= static_cast<unsigned>(x.h)) continue;
                            for (int kx = 0; kx < kw; ++kx) {
                                const int ix = ix0 + kx;
                                if (static_cast<unsigned>(ix) >= static_cast<unsigned>(x.w)) continue;
                                if (gk) gk[k.idx(o, j, ky, kx)] += g * x.data[x.idx(n, j, iy, ix)];
                                if (gx) gx[x.idx(n, j, iy, ix)] += g * k.data[k.idx(o, j, ky, kx)];
                            }
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Depthwise convolution (channel multiplier 1; kernel shape [C,1,K,K])
// ---------------------------------------------------------------------------

template <typename T>
Tensor4<T> depthwise_conv2d_fwd(const Tensor4<T>& x, const Tensor4<T>& k, int stride, int pad) {
    if (k.n != x.c || k.c != 1)
        throw ShapeError("depthwise_conv2d: need one kernel per input channel, input has " +
                         std::to_string(x.c) + " channels but kernel is " + k.shape_str());
    const int kh = k.h, kw = k.w;
    const int ho = conv_out_dim(x.h, kh, stride, pad);
    const int wo = conv_out_dim(x.w, kw, stride, pad);
    Tensor4<T> y(x.n, x.c, ho, wo);
    for (int n = 0; n < x.n; ++n) {
        for (int j = 0; j < x.c; ++j) {
            const T* xrow = &x.data[x.idx(n, j, 0, 0)];
            const T* krow = &k.data[k.idx(j, 0, 0, 0)];
            for (int oy = 0; oy < ho; ++oy) {
                const int iy0 = oy * stride - pad;
                for (int ox = 0; ox < wo; ++ox) {
                    const int ix0 = ox * stride - pad;
                    T acc = 0;
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = iy0 + ky;
                        if (static_cast<unsigned>(iy) >= static_cast<unsigned>(x.h)) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = ix0 + kx;
                            if (static_cast<unsigned>(ix) >= static_cast<unsigned>(x.w)) continue;
                            acc += xrow[iy * x.w + ix] * krow[ky * kw + kx];
                        }
                    }
                    y.data[y.idx(n, j, oy, ox)] = acc;
                }
            }
        }
    }
    return y;
}

template <typename T>
void depthwise_conv2d_bwd(const Tensor4<T>& x, const Tensor4<T>& k, const Tensor4<T>& gy, int stride,
                          int pad, T* gx, T* gk) {
    const int kh = k.h, kw = k.w;
    const int ho = conv_out_dim(x.h, kh, stride, pad);
    const int wo = conv_out_dim(x.w, kw, stride, pad);
    require_same_shape("depthwise_conv2d_bwd: upstream grad", gy.n, gy.c, gy.h, gy.w, x.n, x.c, ho, wo);
    for (int n = 0; n < x.n; ++n) {
        for (int j = 0; j < x.c; ++j) {
            for (int oy = 0; oy < ho; ++oy) {
                const int iy0 = oy * stride - pad;
                for (int ox = 0; ox < wo; ++ox) {
                    const int ix0 = ox * stride - pad;
                    const T g = gy.data[gy.idx(n, j, oy, ox)];
                    if (g == T(0)) continue;
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = iy0 + ky;
                        if (static_cast<unsigned>(iy) >= static_cast<unsigned>(x.h)) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = ix0 + kx;
                            if (static_cast<unsigned>(ix) >= static_cast<unsigned>(x.w)) continue;
                            if (gk) gk[k.idx(j, 0, ky, kx)] += g * x.data[x.idx(n, j, iy, ix)];
                            if (gx) gx[x.idx(n, j, iy, ix)] += g * k.data[k.idx(j, 0, ky, kx)];
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pointwise (1x1) convolution: per-pixel linear map C_in -> C_out
// ---------------------------------------------------------------------------

template <typename T>
Tensor4<T> pointwise_conv2d_fwd(const Tensor4<T>& x, const Tensor4<T>& k, int stride = 1) {
    if (k.h != 1 || k.w != 1)
        throw ShapeError("pointwise_conv2d: kernel spatial size must be 1x1, got " + k.shape_str());
    if (k.c != x.c)
        throw ShapeError("pointwise_conv2d: input has " + std::to_string(x.c) +
                         " channels but kernel expects " + std::to_string(k.c));
    const int co = k.n;
    const int ho = conv_out_dim(x.h, 1, stride, 0);
    const int wo = conv_out_dim(x.w, 1, stride, 0);
    Tensor4<T> y(x.n, co, ho, wo);
    for (int n = 0; n < x.n; ++n) {
        for (int o = 0; o < co; ++o) {
            T* yrow = &y.data[y.idx(n, o, 0, 0)];
            for (int j = 0; j < x.c; ++j) {
                const T wgt = k.data[k.idx(o, j, 0, 0)];
                const T* xrow = &x.data[x.idx(n, j, 0, 0)];
                size_t out = 0;
                for (int oy = 0; oy < ho; ++oy)
                    for (int ox = 0; ox < wo; ++ox)
                        yrow[out++] += wgt * xrow[static_cast<size_t>(oy * stride) * x.w + ox * stride];
            }
        }
    }
    return y;
}

template <typename T>
void pointwise_conv2d_bwd(const Tensor4<T>& x, const Tensor4<T>& k, const Tensor4<T>& gy, int stride,
                          T* gx, T* gk) {
    const int co = k.n;
    const int ho = conv_out_dim(x.h, 1, stride, 0);
    const int wo = conv_out_dim(x.w, 1, stride, 0);
    require_same_shape("pointwise_bwd: upstream grad", gy.n, gy.c, gy.h, gy.w, x.n, co, ho, wo);
    for (int n = 0; n < x.n; ++n) {
        for (int o = 0; o < co; ++o) {
            const T* grow = &gy.data[gy.idx(n, o, 0, 0)];
            for (int j = 0; j < x.c; ++j) {
                const T wgt = k.data[k.idx(o, j, 0, 0)];
                const T* xrow = &x.data[x.idx(n, j, 0, 0)];
                T* gxrow = gx ? gx + x.idx(n, j, 0, 0) : nullptr;
                T kacc = 0;
                size_t out = 0;
                for (int oy = 0; oy < ho; ++oy) {
                    for (int ox = 0; ox < wo; ++ox) {
                        const T g = grow[out++];
                        const size_t in = static_cast<size_t>(oy * stride) * x.w + ox * stride;
                        kacc += g * xrow[in];
                        if (gxrow) gxrow[in] += g * wgt;
                    }
                }
                if (gk) gk[k.idx(o, j, 0, 0)] += kacc;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

constexpr double kBnEps = 1e-5;

template <typename T>
struct BnCache {
    Tensor4<T> xhat;         // normalized input, needed by backward
    std::vector<T> inv_std;  // per channel 1/sqrt(var+eps)
};

inline void check_bn_params(int c, size_t gamma, size_t beta, size_t mm, size_t mv) {
    if (gamma != static_cast<size_t>(c) || beta != static_cast<size_t>(c) ||
        mm != static_cast<size_t>(c) || mv != static_cast<size_t>(c))
        throw ShapeError("batch_norm: parameter length does not match " + std::to_string(c) +
                         " channels");
}

// Train mode: normalize with batch statistics, update moving stats in place.
template <typename T>
Tensor4<T> batch_norm_fwd_train(const Tensor4<T>& x, std::span<const T> gamma, std::span<const T> beta,
                                std::span<T> moving_mean, std::span<T> moving_var, T stat_momentum,
                                BnCache<T>* cache = nullptr) {
    check_bn_params(x.c, gamma.size(), beta.size(), moving_mean.size(), moving_var.size());
    const size_t m = static_cast<size_t>(x.n) * x.h * x.w;
    Tensor4<T> y(x.n, x.c, x.h, x.w);
    if (cache) {
        cache->xhat = Tensor4<T>(x.n, x.c, x.h, x.w);
        cache->inv_std.assign(x.c, T(0));
    }
    const size_t plane = static_cast<size_t>(x.h) * x.w;
    for (int j = 0; j < x.c; ++j) {
        T sum = 0, sq = 0;
        for (int n = 0; n < x.n; ++n) {
            const T* p = &x.data[x.idx(n, j, 0, 0)];
            for (size_t i = 0; i < plane; ++i) {
                sum += p[i];
                sq += p[i] * p[i];
            }
        }
        const T mean = sum / static_cast<T>(m);
        T var = sq / static_cast<T>(m) - mean * mean;
        if (var < T(0)) var = T(0);  // guard tiny negative from cancellation
        const T inv_std = T(1) / std::sqrt(var + static_cast<T>(kBnEps));
        for (int n = 0; n < x.n; ++n) {
            const T* p = &x.data[x.idx(n, j, 0, 0)];
            T* q = &y.data[y.idx(n, j, 0, 0)];
            T* xh = cache ? &cache->xhat.data[cache->xhat.idx(n, j, 0, 0)] : nullptr;
            for (size_t i = 0; i < plane; ++i) {
                const T norm = (p[i] - mean) * inv_std;
                if (xh) xh[i] = norm;
                q[i] = gamma[j] * norm + beta[j];
            }
        }
        if (cache) cache->inv_std[j] = inv_std;
        moving_mean[j] = stat_momentum * moving_mean[j] + (T(1) - stat_momentum) * mean;
        moving_var[j] = stat_momentum * moving_var[j] + (T(1) - stat_momentum) * var;
    }
    return y;
}

// Inference mode: normalize with moving statistics.
template <typename T>
Tensor4<T> batch_norm_fwd_infer(const Tensor4<T>& x, std::span<const T> gamma, std::span<const T> beta,
                                std::span<const T> moving_mean, std::span<const T> moving_var) {
    check_bn_params(x.c, gamma.size(), beta.size(), moving_mean.size(), moving_var.size());
    Tensor4<T> y(x.n, x.c, x.h, x.w);
    const size_t plane = static_cast<size_t>(x.h) * x.w;
    for (int j = 0; j < x.c; ++j) {
        const T inv_std = T(1) / std::sqrt(moving_var[j] + static_cast<T>(kBnEps));
        const T scale = gamma[j] * inv_std;
        const T shift = beta[j] - moving_mean[j] * scale;
        for (int n = 0; n < x.n; ++n) {
            const T* p = &x.data[x.idx(n, j, 0, 0)];
            T* q = &y.data[y.idx(n, j, 0, 0)];
            for (size_t i = 0; i < plane; ++i) q[i] = scale * p[i] + shift;
        }
    }
    return y;
}

// Backward for train-mode normalization (batch statistics). ggamma/gbeta may
// be empty spans to skip those gradients.
template <typename T>
void batch_norm_bwd_train(const BnCache<T>& cache, std::span<const T> gamma, const Tensor4<T>& gy,
                          T* gx, std::span<T> ggamma, std::span<T> gbeta) {
    const Tensor4<T>& xhat = cache.xhat;
    require_same_shape("batch_norm_bwd: upstream grad", gy.n, gy.c, gy.h, gy.w, xhat.n, xhat.c, xhat.h,
                       xhat.w);
    const size_t m = static_cast<size_t>(xhat.n) * xhat.h * xhat.w;
    const size_t plane = static_cast<size_t>(xhat.h) * xhat.w;
    for (int j = 0; j < xhat.c; ++j) {
        T sum_g = 0, sum_gx = 0;
        for (int n = 0; n < xhat.n; ++n) {
            const T* g = &gy.data[gy.idx(n, j, 0, 0)];
            const T* xh = &xhat.data[xhat.idx(n, j, 0, 0)];
            for (size_t i = 0; i < plane; ++i) {
                sum_g += g[i];
                sum_gx += g[i] * xh[i];
            }
        }
        if (!ggamma.empty()) ggamma[j] += sum_gx;
        if (!gbeta.empty()) gbeta[j] += sum_g;
        if (gx) {
            const T inv_m = T(1) / static_cast<T>(m);
            const T k = gamma[j] * cache.inv_std[j];
            for (int n = 0; n < xhat.n; ++n) {
                const T* g = &gy.data[gy.idx(n, j, 0, 0)];
                const T* xh = &xhat.data[xhat.idx(n, j, 0, 0)];
                T* gq = gx + xhat.idx(n, j, 0, 0);
                for (size_t i = 0; i < plane; ++i)
                    gq[i] += k * (g[i] - inv_m * sum_g - xh[i] * inv_m * sum_gx);
            }
        }
    }
}

// Backward through inference-mode normalization (an affine map per channel);
// used when backpropagating through frozen layers.
template <typename T>
void batch_norm_bwd_infer(const Tensor4<T>& gy, std::span<const T> gamma,
                          std::span<const T> moving_var, T* gx) {
    if (!gx) return;
    const size_t plane = static_cast<size_t>(gy.h) * gy.w;
    for (int j = 0; j < gy.c; ++j) {
        const T scale = gamma[j] / std::sqrt(moving_var[j] + static_cast<T>(kBnEps));
        for (int n = 0; n < gy.n; ++n) {
            const T* g = &gy.data[gy.idx(n, j, 0, 0)];
            T* q = gx + gy.idx(n, j, 0, 0);
            for (size_t i = 0; i < plane; ++i) q[i] += scale * g[i];
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise / reduction layers
// ---------------------------------------------------------------------------

template <typename T>
Tensor4<T> relu_fwd(const Tensor4<T>& x) {
    Tensor4<T> y(x.n, x.c, x.h, x.w);
    for (size_t i = 0; i < x.data.size(); ++i) y.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
    return y;
}

template <typename T>
void relu_bwd(const Tensor4<T>& x, const Tensor4<T>& gy, T* gx) {
    require_same_shape("relu_bwd", gy.n, gy.c, gy.h, gy.w, x.n, x.c, x.h, x.w);
    if (!gx) return;
    for (size_t i = 0; i < x.data.size(); ++i)
        if (x.data[i] > T(0)) gx[i] += gy.data[i];
}

template <typename T>
Tensor4<T> global_avg_pool_fwd(const Tensor4<T>& x) {
    Tensor4<T> y(x.n, x.c, 1, 1);
    const size_t plane = static_cast<size_t>(x.h) * x.w;
    for (int n = 0; n < x.n; ++n)
        for (int j = 0; j < x.c; ++j) {
            const T* p = &x.data[x.idx(n, j, 0, 0)];
            T sum = 0;
            for (size_t i = 0; i < plane; ++i) sum += p[i];
            y.data[y.idx(n, j, 0, 0)] = sum / static_cast<T>(plane);
        }
    return y;
}

template <typename T>
void global_avg_pool_bwd(const Tensor4<T>& x, const Tensor4<T>& gy, T* gx) {
    require_same_shape("global_avg_pool_bwd", gy.n, gy.c, gy.h, gy.w, x.n, x.c, 1, 1);
    if (!gx) return;
    const size_t plane = static_cast<size_t>(x.h) * x.w;
    const T inv = T(1) / static_cast<T>(plane);
    for (int n = 0; n < x.n; ++n)
        for (int j = 0; j < x.c; ++j) {
            const T g = gy.data[gy.idx(n, j, 0, 0)] * inv;
            T* q = gx + x.idx(n, j, 0, 0);
            for (size_t i = 0; i < plane; ++i) q[i] += g;
        }
}

// Dense layer over flattened channels; expects spatial size 1x1 input.
// Kernel shape [out,in,1,1], bias shape [1,out,1,1] (empty = no bias).
template <typename T>
Tensor4<T> dense_fwd(const Tensor4<T>& x, const Tensor4<T>& k, const Tensor4<T>& bias) {
    if (x.h != 1 || x.w != 1)
        throw ShapeError("dense: expects 1x1 spatial input (apply global_avg_pool first), got " +
                         x.shape_str());
    if (k.c != x.c)
        throw ShapeError("dense: input features " + std::to_string(x.c) + " vs kernel in-dim " +
                         std::to_string(k.c));
    const int out = k.n;
    Tensor4<T> y(x.n, out, 1, 1);
    for (int n = 0; n < x.n; ++n)
        for (int o = 0; o < out; ++o) {
            T acc = bias.data.empty() ? T(0) : bias.data[o];
            for (int j = 0; j < x.c; ++j) acc += k.data[k.idx(o, j, 0, 0)] * x.data[x.idx(n, j, 0, 0)];
            y.data[y.idx(n, o, 0, 0)] = acc;
        }
    return y;
}

template <typename T>
void dense_bwd(const Tensor4<T>& x, const Tensor4<T>& k, const Tensor4<T>& gy, T* gx, T* gk,
               T* gbias) {
    const int out = k.n;
    require_same_shape("dense_bwd", gy.n, gy.c, gy.h, gy.w, x.n, out, 1, 1);
    for (int n = 0; n < x.n; ++n)
        for (int o = 0; o < out; ++o) {
            const T g = gy.data[gy.idx(n, o, 0, 0)];
            if (gbias) gbias[o] += g;
            for (int j = 0; j < x.c; ++j) {
                if (gk) gk[k.idx(o, j, 0, 0)] += g * x.data[x.idx(n, j, 0, 0)];
                if (gx) gx[x.idx(n, j, 0, 0)] += g * k.data[k.idx(o, j, 0, 0)];
            }
        }
}

template <typename T>
Tensor4<T> add_fwd(const Tensor4<T>& a, const Tensor4<T>& b) {
    require_same_shape("add", a.n, a.c, a.h, a.w, b.n, b.c, b.h, b.w);
    Tensor4<T> y(a.n, a.c, a.h, a.w);
    for (size_t i = 0; i < a.data.size(); ++i) y.data[i] = a.data[i] + b.data[i];
    return y;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Mean negative log-likelihood over the batch with a stable log-sum-exp.
// Returns the loss; probs (softmax output) is cached for backward when given.
template <typename T>
T softmax_cross_entropy_fwd(const Tensor4<T>& logits, std::span<const int> labels,
                            Tensor4<T>* probs = nullptr) {
    if (logits.h != 1 || logits.w != 1)
        throw ShapeError("softmax_cross_entropy: logits must be (N,K,1,1), got " + logits.shape_str());
    if (static_cast<int>(labels.size()) != logits.n)
        throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(labels.size()) +
                                    " labels for batch of " + std::to_string(logits.n));
    const int k = logits.c;
    for (int label : labels)
        if (label < 0 || label >= k)
            throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(label) +
                                        " out of range [0," + std::to_string(k) + ")");
    if (probs) *probs = Tensor4<T>(logits.n, k, 1, 1);
    T total = 0;
    for (int n = 0; n < logits.n; ++n) {
        const T* row = &logits.data[logits.idx(n, 0, 0, 0)];
        T mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        T sum = 0;
        for (int j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
        const T lse = mx + std::log(sum);
        total += lse - row[labels[n]];
        if (probs)
            for (int j = 0; j < k; ++j) probs->data[probs->idx(n, j, 0, 0)] = std::exp(row[j] - lse);
    }
    return total / static_cast<T>(logits.n);
}

template <typename T>
void softmax_cross_entropy_bwd(const Tensor4<T>& probs, std::span<const int> labels, T* glogits,
                               T scale = T(1)) {
    if (!glogits) return;
    const T inv_n = scale / static_cast<T>(probs.n);
    for (int n = 0; n < probs.n; ++n)
        for (int j = 0; j < probs.c; ++j) {
            T g = probs.data[probs.idx(n, j, 0, 0)];
            if (j == labels[n]) g -= T(1);
            glogits[probs.idx(n, j, 0, 0)] += g * inv_n;
        }
}

// Local distillation loss: mean squared difference over all elements.
// Backward produces the gradient on the student side only.
template <typename T>
T mse_local_loss(const Tensor4<T>& student, const Tensor4<T>& teacher) {
    require_same_shape("mse_local_loss", student.n, student.c, student.h, student.w, teacher.n,
                       teacher.c, teacher.h, teacher.w);
    T total = 0;
    for (size_t i = 0; i < student.data.size(); ++i) {
        const T d = student.data[i] - teacher.data[i];
        total += d * d;
    }
    return total / static_cast<T>(student.data.size());
}

template <typename T>
void mse_local_loss_bwd(const Tensor4<T>& student, const Tensor4<T>& teacher, T* gstudent,
                        T scale = T(1)) {
    require_same_shape("mse_local_loss_bwd", student.n, student.c, student.h, student.w, teacher.n,
                       teacher.c, teacher.h, teacher.w);
    if (!gstudent) return;
    const T k = scale * T(2) / static_cast<T>(student.data.size());
    for (size_t i = 0; i < student.data.size(); ++i)
        gstudent[i] += k * (student.data[i] - teacher.data[i]);
}

// ---------------------------------------------------------------------------
// Optimizer step: v <- momentum*v + g; w <- w - lr*v
// ---------------------------------------------------------------------------

template <typename T>
void sgd_step(std::span<T> weights, std::span<const T> grads, std::span<T> velocity, T lr, T momentum) {
    if (lr <= T(0)) throw std::invalid_argument("sgd_step: lr must be > 0");
    if (momentum < T(0) || momentum >= T(1))
        throw std::invalid_argument("sgd_step: momentum must be in [0,1)");
    if (weights.size() != grads.size() || weights.size() != velocity.size())
        throw ShapeError("sgd_step: weights/grads/velocity length mismatch (" +
                         std::to_string(weights.size()) + "/" + std::to_string(grads.size()) + "/" +
                         std::to_string(velocity.size()) + ")");
    for (size_t i = 0; i < weights.size(); ++i) {
        velocity[i] = momentum * velocity[i] + grads[i];
        weights[i] -= lr * velocity[i];
    }
}

}  // namespace pbkd::ops
