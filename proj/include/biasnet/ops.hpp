#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "errors.hpp"
#include "gemm.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace biasnet {

using Label = std::uint8_t;

// ---------------------------------------------------------------------------
// Convolution: valid cross-correlation, stride 1, no kernel flip.
// ---------------------------------------------------------------------------

/// Unfolded input kept by the forward pass for reuse in backward.
template <typename T>
struct ConvCache {
    Shape input_shape;
    Shape weight_shape;
    std::vector<T> col; // [C*kh*kw, N*Ho*Wo]
};

template <typename T>
struct ConvGrads {
    Tensor<T> input;   // empty unless requested
    Tensor<T> weights; // empty unless requested
    Tensor<T> bias;
};

struct GradRequest {
    bool input = true;
    bool weights = true;
    bool bias = true;
};

namespace detail {

inline void check_conv_shapes(const Shape& in, const Shape& w, std::size_t bias_len)
{
    if (in.size() != 4) throw DimensionError("conv2d input must be [N,C,H,W], got " + shape_string(in));
    if (w.size() != 4) throw DimensionError("conv2d weights must be [F,C,kh,kw], got " + shape_string(w));
    if (in[1] != w[1])
        throw DimensionError("conv2d channel mismatch: input has " + std::to_string(in[1]) +
                             " channels, weights expect " + std::to_string(w[1]));
    if (w[2] > in[2] || w[3] > in[3])
        throw DimensionError("conv2d kernel " + shape_string(w) + " larger than input " + shape_string(in));
    if (bias_len != w[0])
        throw DimensionError("conv2d bias length " + std::to_string(bias_len) + " does not match " +
                             std::to_string(w[0]) + " filters");
}

template <typename T>
void im2col(const T* in, std::size_t N, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
            std::size_t kw, T* col)
{
    const std::size_t Ho = H - kh + 1, Wo = W - kw + 1, P = Ho * Wo, NP = N * P;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t a = 0; a < kh; ++a)
            for (std::size_t b = 0; b < kw; ++b) {
                T* row = col + ((c * kh + a) * kw + b) * NP;
                for (std::size_t n = 0; n < N; ++n) {
                    const T* src = in + ((n * C + c) * H + a) * W + b;
                    T* dst = row + n * P;
                    for (std::size_t i = 0; i < Ho; ++i)
                        for (std::size_t j = 0; j < Wo; ++j) dst[i * Wo + j] = src[i * W + j];
                }
            }
}

template <typename T>
void col2im_acc(const T* col, std::size_t N, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
                std::size_t kw, T* in)
{
    const std::size_t Ho = H - kh + 1, Wo = W - kw + 1, P = Ho * Wo, NP = N * P;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t a = 0; a < kh; ++a)
            for (std::size_t b = 0; b < kw; ++b) {
                const T* row = col + ((c * kh + a) * kw + b) * NP;
                for (std::size_t n = 0; n < N; ++n) {
                    T* dst = in + ((n * C + c) * H + a) * W + b;
                    const T* src = row + n * P;
                    for (std::size_t i = 0; i < Ho; ++i)
                        for (std::size_t j = 0; j < Wo; ++j) dst[i * W + j] += src[i * Wo + j];
                }
            }
}

} // namespace detail

/// out[n,f,i,j] = bias[f] + sum_{c,a,b} input[n,c,i+a,j+b] * weights[f,c,a,b],
/// accumulated in (c,a,b) lexicographic order.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                         ConvCache<T>* cache = nullptr)
{
    detail::check_conv_shapes(input.shape(), weights.shape(), bias.size());
    const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::size_t F = weights.dim(0), kh = weights.dim(2), kw = weights.dim(3);
    const std::size_t Ho = H - kh + 1, Wo = W - kw + 1, P = Ho * Wo, NP = N * P, K = C * kh * kw;

    std::vector<T> local;
    std::vector<T>& col = cache ? cache->col : local;
    col.resize(K * NP);
    detail::im2col(input.data(), N, C, H, W, kh, kw, col.data());

    std::vector<T> out_t(F * NP);
    for (std::size_t f = 0; f < F; ++f) std::fill_n(out_t.begin() + f * NP, NP, bias[f]);
    detail::gemm_acc(F, NP, K, weights.data(), K, col.data(), NP, out_t.data(), NP);

    Tensor<T> out({N, F, Ho, Wo});
    for (std::size_t f = 0; f < F; ++f)
        for (std::size_t n = 0; n < N; ++n)
            std::copy_n(out_t.data() + f * NP + n * P, P, out.data() + (n * F + f) * P);

    if (cache) {
        cache->input_shape = input.shape();
        cache->weight_shape = weights.shape();
    }
    return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const ConvCache<T>& cache, const Tensor<T>& weights, const Tensor<T>& grad_out,
                             GradRequest want = {})
{
    if (cache.input_shape.empty()) throw StateError("conv2d_backward called before conv2d_forward");
    if (weights.shape() != cache.weight_shape)
        throw DimensionError("conv2d_backward: weights changed shape since forward");
    const std::size_t N = cache.input_shape[0], C = cache.input_shape[1], H = cache.input_shape[2],
                      W = cache.input_shape[3];
    const std::size_t F = weights.dim(0), kh = weights.dim(2), kw = weights.dim(3);
    const std::size_t Ho = H - kh + 1, Wo = W - kw + 1, P = Ho * Wo, NP = N * P, K = C * kh * kw;
    require_shape(grad_out, {N, F, Ho, Wo}, "conv2d_backward grad_out");

    std::vector<T> g_t(F * NP);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t f = 0; f < F; ++f)
            std::copy_n(grad_out.data() + (n * F + f) * P, P, g_t.data() + f * NP + n * P);

    ConvGrads<T> out;
    if (want.bias) {
        out.bias = Tensor<T>({F});
        for (std::size_t f = 0; f < F; ++f) {
            T s{0};
            const T* row = g_t.data() + f * NP;
            for (std::size_t p = 0; p < NP; ++p) s += row[p];
            out.bias[f] = s;
        }
    }
    if (want.weights) {
        out.weights = Tensor<T>(weights.shape());
        detail::gemm_abt_acc(F, K, NP, g_t.data(), NP, cache.col.data(), NP, out.weights.data(), K);
    }
    if (want.input) {
        std::vector<T> w_t(K * F);
        detail::transpose(F, K, weights.data(), w_t.data());
        std::vector<T> dcol(K * NP, T{0});
        detail::gemm_acc(K, NP, F, w_t.data(), F, g_t.data(), NP, dcol.data(), NP);
        out.input = Tensor<T>(cache.input_shape);
        detail::col2im_acc(dcol.data(), N, C, H, W, kh, kw, out.input.data());
    }
    return out;
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, non-overlapping.
// ---------------------------------------------------------------------------

struct PoolCache {
    Shape input_shape;
    std::vector<std::uint32_t> argmax; // flat input index per output element
};

/// First maximum in row-major window order wins ties.
template <typename T>
Tensor<T> maxpool2(const Tensor<T>& input, PoolCache* cache = nullptr)
{
    require_rank(input, 4, "maxpool2");
    const std::size_t N = input.dim(0), F = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (H % 2 || W % 2) throw DimensionError("maxpool2 needs even spatial dims, got " + shape_string(input.shape()));
    const std::size_t Ho = H / 2, Wo = W / 2;
    Tensor<T> out({N, F, Ho, Wo});
    std::vector<std::uint32_t> local;
    auto& argmax = cache ? cache->argmax : local;
    argmax.resize(out.size());
    const T* in = input.data();
    std::size_t o = 0;
    for (std::size_t plane = 0; plane < N * F; ++plane) {
        const std::size_t base = plane * H * W;
        for (std::size_t i = 0; i < Ho; ++i)
            for (std::size_t j = 0; j < Wo; ++j, ++o) {
                std::size_t best = base + (2 * i) * W + 2 * j;
                const std::size_t cand[3] = {best + 1, best + W, best + W + 1};
                for (auto c : cand)
                    if (in[c] > in[best]) best = c;
                out[o] = in[best];
                argmax[o] = static_cast<std::uint32_t>(best);
            }
    }
    if (cache) cache->input_shape = input.shape();
    return out;
}

template <typename T>
Tensor<T> maxpool2_backward(const PoolCache& cache, const Tensor<T>& grad_out)
{
    if (cache.input_shape.empty()) throw StateError("maxpool2_backward called before maxpool2");
    if (grad_out.size() != cache.argmax.size()) throw DimensionError("maxpool2_backward: grad size mismatch");
    Tensor<T> grad_in(cache.input_shape);
    for (std::size_t o = 0; o < grad_out.size(); ++o) grad_in[cache.argmax[o]] += grad_out[o];
    return grad_in;
}

// ---------------------------------------------------------------------------
// Dense layer: out = x * W + b.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias)
{
    require_rank(x, 2, "dense_forward input");
    require_rank(weights, 2, "dense_forward weights");
    const std::size_t N = x.dim(0), D = x.dim(1), K = weights.dim(1);
    if (weights.dim(0) != D)
        throw DimensionError("dense_forward: input width " + std::to_string(D) + " vs weights " +
                             shape_string(weights.shape()));
    if (bias.size() != K)
        throw DimensionError("dense_forward: bias length " + std::to_string(bias.size()) + " vs " +
                             std::to_string(K) + " outputs");
    Tensor<T> out({N, K});
    for (std::size_t n = 0; n < N; ++n) std::copy_n(bias.data(), K, out.data() + n * K);
    detail::gemm_acc(N, K, D, x.data(), D, weights.data(), K, out.data(), K);
    return out;
}

template <typename T>
struct DenseGrads {
    Tensor<T> input;
    Tensor<T> weights;
    Tensor<T> bias;
};

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& grad_out,
                             GradRequest want = {})
{
    const std::size_t N = x.dim(0), D = x.dim(1), K = weights.dim(1);
    require_shape(grad_out, {N, K}, "dense_backward grad_out");
    DenseGrads<T> g;
    if (want.bias) {
        g.bias = Tensor<T>({K});
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t k = 0; k < K; ++k) g.bias[k] += grad_out[n * K + k];
    }
    if (want.weights) {
        std::vector<T> x_t(D * N);
        detail::transpose(N, D, x.data(), x_t.data());
        g.weights = Tensor<T>({D, K});
        detail::gemm_acc(D, K, N, x_t.data(), N, grad_out.data(), K, g.weights.data(), K);
    }
    if (want.input) {
        std::vector<T> w_t(K * D);
        detail::transpose(D, K, weights.data(), w_t.data());
        g.input = Tensor<T>({N, D});
        detail::gemm_acc(N, D, K, grad_out.data(), K, w_t.data(), D, g.input.data(), D);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Elementwise activations.
// ---------------------------------------------------------------------------

/// 32-bit tensors use Eigen's vectorized rational approximation (max abs error
/// ~3e-7); 64-bit tensors use std::tanh.
template <typename T>
Tensor<T> tanh_apply(Tensor<T> x)
{
    if constexpr (std::is_same_v<T, float>) {
        Eigen::Map<Eigen::ArrayXf> v(x.data(), static_cast<Eigen::Index>(x.size()));
        v = v.tanh();
    } else {
        for (auto& v : x.storage()) v = std::tanh(v);
    }
    return x;
}

/// grad_in = grad_out * (1 - y^2), where y = tanh(x) from the forward pass.
template <typename T>
Tensor<T> tanh_backward(const Tensor<T>& y, Tensor<T> grad)
{
    if (y.size() != grad.size()) throw DimensionError("tanh_backward size mismatch");
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= T{1} - y[i] * y[i];
    return grad;
}

template <typename T>
T sigmoid(T v)
{
    return T{1} / (T{1} + std::exp(-v));
}

template <typename T>
Tensor<T> sigmoid_apply(Tensor<T> x)
{
    for (auto& v : x.storage()) v = sigmoid(v);
    return x;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, Tensor<T> grad)
{
    if (y.size() != grad.size()) throw DimensionError("sigmoid_backward size mismatch");
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= y[i] * (T{1} - y[i]);
    return grad;
}

// ---------------------------------------------------------------------------
// Softmax + negative log-likelihood.
// ---------------------------------------------------------------------------

template <typename T>
struct SoftmaxResult {
    double loss = 0.0;
    Tensor<T> probabilities;
};

template <typename T>
SoftmaxResult<T> softmax_nll(const Tensor<T>& logits, std::span<const Label> labels)
{
    require_rank(logits, 2, "softmax_nll logits");
    const std::size_t N = logits.dim(0), K = logits.dim(1);
    if (labels.size() != N)
        throw DimensionError("softmax_nll: " + std::to_string(labels.size()) + " labels for " + std::to_string(N) +
                             " rows");
    SoftmaxResult<T> r{0.0, Tensor<T>({N, K})};
    double total = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
        if (labels[n] >= K)
            throw ValueError("softmax_nll: label " + std::to_string(labels[n]) + " outside [0," + std::to_string(K) +
                             ")");
        const T* z = logits.data() + n * K;
        T* p = r.probabilities.data() + n * K;
        T zmax = z[0];
        for (std::size_t k = 1; k < K; ++k) zmax = std::max(zmax, z[k]);
        T sum{0};
        for (std::size_t k = 0; k < K; ++k) {
            p[k] = std::exp(z[k] - zmax);
            sum += p[k];
        }
        for (std::size_t k = 0; k < K; ++k) p[k] /= sum;
        // log p_label = z_label - zmax - log(sum), stable even when p underflows
        total -= static_cast<double>(z[labels[n]] - zmax) - std::log(static_cast<double>(sum));
    }
    r.loss = total / static_cast<double>(N);
    return r;
}

/// d(mean NLL)/d(logits) = (p - onehot) / N.
template <typename T>
Tensor<T> softmax_nll_backward(const Tensor<T>& probabilities, std::span<const Label> labels, T loss_scale = T{1})
{
    const std::size_t N = probabilities.dim(0), K = probabilities.dim(1);
    Tensor<T> g = probabilities;
    const T inv = loss_scale / static_cast<T>(N);
    for (std::size_t n = 0; n < N; ++n) {
        g[n * K + labels[n]] -= T{1};
        for (std::size_t k = 0; k < K; ++k) g[n * K + k] *= inv;
    }
    return g;
}

// ---------------------------------------------------------------------------
// Optimizer and initialization.
// ---------------------------------------------------------------------------

/// p <- p - lr * g, in place.
template <typename T>
void sgd_step(Tensor<T>& params, const Tensor<T>& grads, T lr)
{
    if (params.shape() != grads.shape())
        throw DimensionError("sgd_step: parameter shape " + shape_string(params.shape()) + " vs gradient " +
                             shape_string(grads.shape()));
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
}

enum class InitKind {
    tanh_uniform,    // U(-b, b), b = sqrt(6 / (fan_in + fan_out))
    sigmoid_uniform, // 4x the tanh bound
    zeros,
};

struct LayerInit {
    Shape shape;
    std::size_t fan_in = 1;
    std::size_t fan_out = 1;
    InitKind kind = InitKind::tanh_uniform;
};

inline double init_bound(const LayerInit& spec)
{
    const double b = std::sqrt(6.0 / static_cast<double>(spec.fan_in + spec.fan_out));
    return spec.kind == InitKind::sigmoid_uniform ? 4.0 * b : b;
}

template <typename T>
Tensor<T> init_params(const LayerInit& spec, Rng& rng)
{
    Tensor<T> t(spec.shape);
    if (spec.kind == InitKind::zeros) return t;
    const double b = init_bound(spec);
    for (auto& v : t.storage()) v = static_cast<T>(rng.uniform(-b, b));
    return t;
}

template <typename T>
Tensor<T> zero_bias(std::size_t n)
{
    return Tensor<T>({n});
}

} // namespace biasnet
