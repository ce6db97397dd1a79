#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace biasnet {

/// Layer widths and geometry of the two-conv LeNet.
struct LeNetArch {
    std::size_t input = 28;
    std::size_t kernel = 5;
    std::size_t conv1 = 20;
    std::size_t conv2 = 50;
    std::size_t hidden = 500;
    std::size_t classes = 10;

    static constexpr LeNetArch standard() { return {}; }

    std::size_t conv1_out() const { return input - kernel + 1; }
    std::size_t pool1_out() const { return conv1_out() / 2; }
    std::size_t conv2_out() const { return pool1_out() - kernel + 1; }
    std::size_t pool2_out() const { return conv2_out() / 2; }
    std::size_t flatten() const { return conv2 * pool2_out() * pool2_out(); }

    /// Throws DimensionError when the geometry does not pool evenly.
    void validate() const
    {
        if (kernel == 0 || conv1 == 0 || conv2 == 0 || hidden == 0 || classes < 2)
            throw DimensionError("LeNet widths must be positive with at least 2 classes");
        if (kernel > input || conv1_out() % 2 || kernel > pool1_out() || conv2_out() % 2)
            throw DimensionError("LeNet geometry: input " + std::to_string(input) + " with kernel " +
                                 std::to_string(kernel) + " does not give even pooled maps");
    }

    bool is_standard() const
    {
        return input == 28 && kernel == 5 && conv1 == 20 && conv2 == 50 && hidden == 500 && classes == 10;
    }

    friend bool operator==(const LeNetArch&, const LeNetArch&) = default;
};

template <typename T>
struct LeNetParams {
    LeNetArch arch;
    Tensor<T> conv1_w, conv1_b;
    Tensor<T> conv2_w, conv2_b;
    Tensor<T> hidden_w, hidden_b;
    Tensor<T> logreg_w, logreg_b;
    Meta meta;

    /// Zero-filled parameters of the right shapes.
    static LeNetParams zeros(const LeNetArch& arch)
    {
        arch.validate();
        LeNetParams p;
        p.arch = arch;
        p.conv1_w = Tensor<T>({arch.conv1, 1, arch.kernel, arch.kernel});
        p.conv1_b = Tensor<T>({arch.conv1});
        p.conv2_w = Tensor<T>({arch.conv2, arch.conv1, arch.kernel, arch.kernel});
        p.conv2_b = Tensor<T>({arch.conv2});
        p.hidden_w = Tensor<T>({arch.flatten(), arch.hidden});
        p.hidden_b = Tensor<T>({arch.hidden});
        p.logreg_w = Tensor<T>({arch.hidden, arch.classes});
        p.logreg_b = Tensor<T>({arch.classes});
        return p;
    }

    /// Ordered (name, tensor) view used by serialization, optimizers and checksums.
    std::vector<std::pair<std::string, Tensor<T>*>> named()
    {
        return {{"conv1.weight", &conv1_w}, {"conv1.bias", &conv1_b},   {"conv2.weight", &conv2_w},
                {"conv2.bias", &conv2_b},   {"hidden.weight", &hidden_w}, {"hidden.bias", &hidden_b},
                {"logreg.weight", &logreg_w}, {"logreg.bias", &logreg_b}};
    }

    std::vector<std::pair<std::string, const Tensor<T>*>> named() const
    {
        auto v = const_cast<LeNetParams*>(this)->named();
        return {v.begin(), v.end()};
    }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (auto& [name, t] : named()) n += t->size();
        return n;
    }

    bool all_finite() const
    {
        for (auto& [name, t] : named())
            if (!t->all_finite()) return false;
        return true;
    }

    /// Same parameters in another precision.
    template <typename U>
    LeNetParams<U> cast() const
    {
        LeNetParams<U> out;
        out.arch = arch;
        out.conv1_w = conv1_w.template cast<U>();
        out.conv1_b = conv1_b.template cast<U>();
        out.conv2_w = conv2_w.template cast<U>();
        out.conv2_b = conv2_b.template cast<U>();
        out.hidden_w = hidden_w.template cast<U>();
        out.hidden_b = hidden_b.template cast<U>();
        out.logreg_w = logreg_w.template cast<U>();
        out.logreg_b = logreg_b.template cast<U>();
        out.meta = meta;
        return out;
    }

    /// Values only; metadata is provenance and does not make two parameter sets differ.
    bool same_values(const LeNetParams& other) const
    {
        return arch == other.arch && conv1_w == other.conv1_w && conv1_b == other.conv1_b &&
               conv2_w == other.conv2_w && conv2_b == other.conv2_b && hidden_w == other.hidden_w &&
               hidden_b == other.hidden_b && logreg_w == other.logreg_w && logreg_b == other.logreg_b;
    }
};

/// Scaled-uniform weights for the tanh layers, zero logistic-regression layer
/// and zero biases, following the Theano tutorial this model comes from.
template <typename T>
LeNetParams<T> init_lenet(const LeNetArch& arch, Rng& rng)
{
    auto p = LeNetParams<T>::zeros(arch);
    const std::size_t k2 = arch.kernel * arch.kernel;
    p.conv1_w = init_params<T>({p.conv1_w.shape(), k2, arch.conv1 * k2 / 4, InitKind::tanh_uniform}, rng);
    p.conv2_w = init_params<T>({p.conv2_w.shape(), arch.conv1 * k2, arch.conv2 * k2 / 4, InitKind::tanh_uniform},
                               rng);
    p.hidden_w = init_params<T>({p.hidden_w.shape(), arch.flatten(), arch.hidden, InitKind::tanh_uniform}, rng);
    p.meta["init_seed"] = std::to_string(rng.seed());
    return p;
}

/// Which parameter gradients a backward pass should produce.
struct ParamMask {
    bool conv1_w = true, conv1_b = true;
    bool conv2_w = true, conv2_b = true;
    bool hidden_w = true, hidden_b = true;
    bool logreg_w = true, logreg_b = true;

    static ParamMask all() { return {}; }
    static ParamMask biases(bool conv1, bool conv2)
    {
        ParamMask m{false, conv1, false, conv2, false, false, false, false};
        return m;
    }
};

/// One recorded forward pass through a LeNet and its reverse-mode gradients.
template <typename T>
class LeNetGraph {
public:
    explicit LeNetGraph(const LeNetParams<T>& params) : params_(&params) {}

    /// Softmax probabilities [N, classes]; records everything backward needs.
    const Tensor<T>& forward(const Tensor<T>& batch)
    {
        const auto& a = params_->arch;
        require_rank(batch, 4, "lenet_forward input");
        if (batch.dim(1) != 1 || batch.dim(2) != a.input || batch.dim(3) != a.input)
            throw DimensionError("lenet_forward: expected [N,1," + std::to_string(a.input) + "," +
                                 std::to_string(a.input) + "], got " + shape_string(batch.shape()));
        const std::size_t N = batch.dim(0);
        h1_ = tanh_apply(conv2d_forward(batch, params_->conv1_w, params_->conv1_b, &conv1_));
        p1_ = maxpool2(h1_, &pool1_);
        h2_ = tanh_apply(conv2d_forward(p1_, params_->conv2_w, params_->conv2_b, &conv2_));
        flat_ = maxpool2(h2_, &pool2_).reshaped({N, a.flatten()});
        h3_ = tanh_apply(dense_forward(flat_, params_->hidden_w, params_->hidden_b));
        logits_ = dense_forward(h3_, params_->logreg_w, params_->logreg_b);
        probs_ = softmax_rows(logits_);
        recorded_ = true;
        return probs_;
    }

    const Tensor<T>& logits() const { return logits_; }
    const Tensor<T>& probabilities() const { return probs_; }

    double loss(std::span<const Label> labels) const
    {
        if (!recorded_) throw StateError("loss requested before forward");
        return softmax_nll(logits_, labels).loss;
    }

    /// Gradients of `loss_scale * mean NLL`. Tensors for masked-out parameters stay empty.
    LeNetParams<T> backward(std::span<const Label> labels, ParamMask mask = ParamMask::all(),
                            Tensor<T>* input_grad = nullptr, T loss_scale = T{1})
    {
        if (!recorded_) throw StateError("LeNet backward called before forward");
        const auto& a = params_->arch;
        const std::size_t N = logits_.dim(0);
        if (labels.size() != N) throw DimensionError("backward: label count does not match batch");
        for (auto l : labels)
            if (l >= a.classes) throw ValueError("backward: label out of range");

        LeNetParams<T> g;
        g.arch = a;
        const bool need_conv1 = mask.conv1_w || mask.conv1_b || input_grad;
        const bool need_conv2 = need_conv1 || mask.conv2_w || mask.conv2_b;
        const bool need_hidden = need_conv2 || mask.hidden_w || mask.hidden_b;

        auto gz = softmax_nll_backward(probs_, labels, loss_scale);
        auto d4 = dense_backward(h3_, params_->logreg_w, gz, {need_hidden, mask.logreg_w, mask.logreg_b});
        g.logreg_w = std::move(d4.weights);
        g.logreg_b = std::move(d4.bias);
        if (!need_hidden) return g;

        auto g3 = tanh_backward(h3_, std::move(d4.input));
        auto d3 = dense_backward(flat_, params_->hidden_w, g3, {need_conv2, mask.hidden_w, mask.hidden_b});
        g.hidden_w = std::move(d3.weights);
        g.hidden_b = std::move(d3.bias);
        if (!need_conv2) return g;

        const std::size_t s2 = a.pool2_out();
        auto g2 = tanh_backward(h2_, maxpool2_backward(pool2_, d3.input.reshaped({N, a.conv2, s2, s2})));
        auto d2 = conv2d_backward(conv2_, params_->conv2_w, g2, {need_conv1, mask.conv2_w, mask.conv2_b});
        g.conv2_w = std::move(d2.weights);
        g.conv2_b = std::move(d2.bias);
        if (!need_conv1) return g;

        auto g1 = tanh_backward(h1_, maxpool2_backward(pool1_, d2.input));
        auto d1 = conv2d_backward(conv1_, params_->conv1_w, g1, {input_grad != nullptr, mask.conv1_w, mask.conv1_b});
        g.conv1_w = std::move(d1.weights);
        g.conv1_b = std::move(d1.bias);
        if (input_grad) *input_grad = std::move(d1.input);
        return g;
    }

private:
    static Tensor<T> softmax_rows(const Tensor<T>& logits)
    {
        const std::size_t N = logits.dim(0), K = logits.dim(1);
        Tensor<T> p({N, K});
        for (std::size_t n = 0; n < N; ++n) {
            const T* z = logits.data() + n * K;
            T* q = p.data() + n * K;
            T zmax = z[0];
            for (std::size_t k = 1; k < K; ++k) zmax = std::max(zmax, z[k]);
            T sum{0};
            for (std::size_t k = 0; k < K; ++k) sum += (q[k] = std::exp(z[k] - zmax));
            for (std::size_t k = 0; k < K; ++k) q[k] /= sum;
        }
        return p;
    }

    const LeNetParams<T>* params_;
    ConvCache<T> conv1_, conv2_;
    PoolCache pool1_, pool2_;
    Tensor<T> h1_, p1_, h2_, flat_, h3_, logits_, probs_;
    bool recorded_ = false;
};

/// Probabilities [N, classes].
template <typename T>
Tensor<T> lenet_forward(const LeNetParams<T>& params, const Tensor<T>& batch)
{
    LeNetGraph<T> g(params);
    return g.forward(batch);
}

template <typename T>
Tensor<T> lenet_logits(const LeNetParams<T>& params, const Tensor<T>& batch)
{
    LeNetGraph<T> g(params);
    g.forward(batch);
    return g.logits();
}

/// Row argmax; ties go to the smaller class index.
template <typename T>
std::vector<Label> argmax_rows(const Tensor<T>& scores)
{
    require_rank(scores, 2, "argmax_rows");
    const std::size_t N = scores.dim(0), K = scores.dim(1);
    std::vector<Label> out(N);
    for (std::size_t n = 0; n < N; ++n) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < K; ++k)
            if (scores[n * K + k] > scores[n * K + best]) best = k;
        out[n] = static_cast<Label>(best);
    }
    return out;
}

/// Predicted labels, computed in chunks so arbitrarily large batches fit in memory.
template <typename T>
std::vector<Label> lenet_predict(const LeNetParams<T>& params, const Tensor<T>& batch, std::size_t chunk = 500)
{
    require_rank(batch, 4, "lenet_predict input");
    const std::size_t N = batch.dim(0), per = batch.size() / N;
    std::vector<Label> out;
    out.reserve(N);
    for (std::size_t s = 0; s < N; s += chunk) {
        const std::size_t n = std::min(chunk, N - s);
        Tensor<T> part({n, batch.dim(1), batch.dim(2), batch.dim(3)},
                       std::vector<T>(batch.data() + s * per, batch.data() + (s + n) * per));
        auto labels = argmax_rows(lenet_logits(params, part));
        out.insert(out.end(), labels.begin(), labels.end());
    }
    return out;
}

/// conv1 output before tanh; used to probe the bias lever directly.
template <typename T>
Tensor<T> conv1_preactivation(const LeNetParams<T>& params, const Tensor<T>& batch)
{
    return conv2d_forward(batch, params.conv1_w, params.conv1_b);
}

} // namespace biasnet
