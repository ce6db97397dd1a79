#pragma once

// Single-hidden-layer denoising autoencoder with tied weights:
//   h = sigmoid(x W + b_h),  z = sigmoid(h W^T + b_v)
// trained on cross-entropy between z and the clean target.

#include <cmath>
#include <span>

#include "errors.hpp"
#include "gemm.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace biasnet {

template <typename T>
struct DAParams {
    Tensor<T> weights;   // [visible, hidden]
    Tensor<T> b_hidden;  // [hidden]
    Tensor<T> b_visible; // [visible]
    bool tied = true;
    Meta meta;

    std::size_t visible() const { return weights.dim(0); }
    std::size_t hidden() const { return weights.dim(1); }

    std::vector<std::pair<std::string, Tensor<T>*>> named()
    {
        return {{"da.weight", &weights}, {"da.hidden_bias", &b_hidden}, {"da.visible_bias", &b_visible}};
    }
    std::vector<std::pair<std::string, const Tensor<T>*>> named() const
    {
        auto v = const_cast<DAParams*>(this)->named();
        return {v.begin(), v.end()};
    }

    bool same_values(const DAParams& o) const
    {
        return weights == o.weights && b_hidden == o.b_hidden && b_visible == o.b_visible && tied == o.tied;
    }

    template <typename U>
    DAParams<U> cast() const
    {
        return {weights.template cast<U>(), b_hidden.template cast<U>(), b_visible.template cast<U>(), tied, meta};
    }
};

template <typename T>
DAParams<T> init_da(std::size_t visible, std::size_t hidden, Rng& rng)
{
    DAParams<T> p;
    p.weights = init_params<T>({{visible, hidden}, visible, hidden, InitKind::sigmoid_uniform}, rng);
    p.b_hidden = zero_bias<T>(hidden);
    p.b_visible = zero_bias<T>(visible);
    p.meta["init_seed"] = std::to_string(rng.seed());
    return p;
}

namespace detail {

template <typename T>
Tensor<T> as_rows(const Tensor<T>& x, std::size_t visible)
{
    if (x.size() % visible != 0)
        throw DimensionError("autoencoder input " + shape_string(x.shape()) + " is not a multiple of " +
                             std::to_string(visible) + " pixels");
    return x.reshaped({x.size() / visible, visible});
}

template <typename T>
Tensor<T> da_decode(const DAParams<T>& p, const Tensor<T>& h)
{
    const std::size_t N = h.dim(0), V = p.visible(), H = p.hidden();
    Tensor<T> z({N, V});
    for (std::size_t n = 0; n < N; ++n) std::copy_n(p.b_visible.data(), V, z.data() + n * V);
    gemm_abt_acc(N, V, H, h.data(), H, p.weights.data(), H, z.data(), V);
    return sigmoid_apply(std::move(z));
}

} // namespace detail

template <typename T>
Tensor<T> da_encode(const DAParams<T>& p, const Tensor<T>& rows)
{
    return sigmoid_apply(dense_forward(rows, p.weights, p.b_hidden));
}

/// Reconstruction of one image ([visible] or any shape with that many values) or
/// a batch ([N, ...]); the output keeps the input's shape.
template <typename T>
Tensor<T> da_forward(const DAParams<T>& p, const Tensor<T>& x)
{
    const auto rows = detail::as_rows(x, p.visible());
    return detail::da_decode(p, da_encode(p, rows)).reshaped(x.shape());
}

/// Mean over rows of the summed per-pixel cross-entropy, with z clipped away from {0,1}.
template <typename T>
double da_cross_entropy(const Tensor<T>& recon, const Tensor<T>& target)
{
    if (recon.shape() != target.shape()) throw DimensionError("da_cross_entropy: shape mismatch");
    const double eps = 1e-12;
    double total = 0.0;
    for (std::size_t i = 0; i < recon.size(); ++i) {
        const double z = std::clamp(static_cast<double>(recon[i]), eps, 1.0 - eps);
        const double t = target[i];
        total -= t * std::log(z) + (1.0 - t) * std::log(1.0 - z);
    }
    return total / static_cast<double>(recon.dim(0));
}

template <typename T>
struct DAStep {
    double loss = 0.0;
    DAParams<T> grads;
};

/// Loss and exact gradients for one batch of (corrupted, clean) rows [N, visible].
template <typename T>
DAStep<T> da_loss_and_grads(const DAParams<T>& p, const Tensor<T>& input, const Tensor<T>& target)
{
    if (input.shape() != target.shape()) throw DimensionError("autoencoder: input and target shapes differ");
    const auto x = detail::as_rows(input, p.visible());
    const auto t = detail::as_rows(target, p.visible());
    const std::size_t N = x.dim(0), V = p.visible(), H = p.hidden();
    const auto h = da_encode(p, x);
    const auto z = detail::da_decode(p, h);

    DAStep<T> out;
    out.loss = da_cross_entropy(z, t);
    // d loss / d pre-activation of z for sigmoid + cross-entropy
    Tensor<T> gz({N, V});
    const T inv_n = T{1} / static_cast<T>(N);
    for (std::size_t i = 0; i < gz.size(); ++i) gz[i] = (z[i] - t[i]) * inv_n;

    auto& g = out.grads;
    g.tied = p.tied;
    g.b_visible = Tensor<T>({V});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t v = 0; v < V; ++v) g.b_visible[v] += gz[n * V + v];

    // decoder path: dW += gz^T h
    g.weights = Tensor<T>({V, H});
    {
        std::vector<T> gz_t(V * N);
        detail::transpose(N, V, gz.data(), gz_t.data());
        detail::gemm_acc(V, H, N, gz_t.data(), N, h.data(), H, g.weights.data(), H);
    }
    // encoder path: gh = (gz W) * h (1 - h); dW += x^T gh
    Tensor<T> gh({N, H});
    detail::gemm_acc(N, H, V, gz.data(), V, p.weights.data(), H, gh.data(), H);
    for (std::size_t i = 0; i < gh.size(); ++i) gh[i] *= h[i] * (T{1} - h[i]);
    g.b_hidden = Tensor<T>({H});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < H; ++k) g.b_hidden[k] += gh[n * H + k];
    {
        std::vector<T> x_t(V * N);
        detail::transpose(N, V, x.data(), x_t.data());
        detail::gemm_acc(V, H, N, x_t.data(), N, gh.data(), H, g.weights.data(), H);
    }
    return out;
}

} // namespace biasnet
