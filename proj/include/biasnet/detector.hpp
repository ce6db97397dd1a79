#pragma once

// Binary hypothesis testing for a known signal in additive Gaussian noise:
//   H0: y = w,   H1: y = S + w,   w ~ N(m, sigma^2 I)
// The MAP rule reduces to comparing the correlator output <S,y> against
//   gamma = <S,S>/2 + <S,m> + sigma^2 ln(P0/P1),
// which is exactly what a single neuron with weights S and bias -gamma computes.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <type_traits>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace biasnet {

enum class Hypothesis { H0, H1 };

inline const char* to_string(Hypothesis h) { return h == Hypothesis::H0 ? "H0" : "H1"; }

class HypothesisTest {
public:
    HypothesisTest(Tensor<double> signal, Tensor<double> noise_mean, double noise_variance, double prior_h0)
        : signal_(std::move(signal)), noise_mean_(std::move(noise_mean)), variance_(noise_variance), p0_(prior_h0)
    {
        if (signal_.shape() != noise_mean_.shape())
            throw DimensionError("hypothesis test: signal " + shape_string(signal_.shape()) + " vs noise mean " +
                                 shape_string(noise_mean_.shape()));
        if (!(variance_ > 0.0) || !std::isfinite(variance_))
            throw ValueError("hypothesis test: noise variance must be positive");
        if (!(p0_ > 0.0 && p0_ < 1.0)) throw ValueError("hypothesis test: prior P0 must lie in (0,1)");
    }

    const Tensor<double>& signal() const noexcept { return signal_; }
    const Tensor<double>& noise_mean() const noexcept { return noise_mean_; }
    double noise_variance() const noexcept { return variance_; }
    double prior_h0() const noexcept { return p0_; }
    double prior_h1() const noexcept { return 1.0 - p0_; }

private:
    Tensor<double> signal_;
    Tensor<double> noise_mean_;
    double variance_;
    double p0_;
};

struct Decision {
    Hypothesis hypothesis;
    double statistic; // <S, y>
    double threshold; // gamma
};

inline double threshold_gamma(const HypothesisTest& t)
{
    const auto& s = t.signal();
    return 0.5 * dot(s, s) + dot(s, t.noise_mean()) + t.noise_variance() * std::log(t.prior_h0() / t.prior_h1());
}

/// H1 iff <S,y> >= gamma. Ties decide H1.
inline Decision map_decide(const Tensor<double>& y, const HypothesisTest& t)
{
    const double stat = dot(t.signal(), y);
    const double gamma = threshold_gamma(t);
    return {stat >= gamma ? Hypothesis::H1 : Hypothesis::H0, stat, gamma};
}

/// Reversed rule for backgrounds brighter than the signal: H1 iff <S,y> <= gamma. Ties decide H1.
inline Decision reversed_decide(const Tensor<double>& y, const HypothesisTest& t)
{
    const double stat = dot(t.signal(), y);
    const double gamma = threshold_gamma(t);
    return {stat <= gamma ? Hypothesis::H1 : Hypothesis::H0, stat, gamma};
}

/// Heaviside neuron: 1 iff <weights,y> + bias >= 0.
inline int neuron_decide(const Tensor<double>& y, const Tensor<double>& weights, double bias)
{
    return dot(weights, y) + bias >= 0.0 ? 1 : 0;
}

enum class Background { camouflage, darker, brighter };

inline const char* to_string(Background b)
{
    switch (b) {
    case Background::camouflage: return "camouflage";
    case Background::darker: return "darker";
    case Background::brighter: return "brighter";
    }
    return "?";
}

/// Compares <S,bk> against <S,S> with relative tolerance `rel_tol * <S,S>`.
inline Background classify_background(const Tensor<double>& signal, const Tensor<double>& background,
                                       double rel_tol = 1e-9)
{
    const double ss = dot(signal, signal);
    const double sb = dot(signal, background);
    const double eps = rel_tol * ss;
    if (std::abs(sb - ss) <= eps) return Background::camouflage;
    return sb < ss ? Background::darker : Background::brighter;
}

/// One observation drawn from the two-hypothesis mixture.
struct Draw {
    Hypothesis truth;
    Tensor<double> y;
};

inline Draw draw_observation(const HypothesisTest& t, Rng& rng)
{
    const bool h1 = rng.uniform() >= t.prior_h0();
    const double sigma = std::sqrt(t.noise_variance());
    Tensor<double> y = t.noise_mean();
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] += sigma * rng.normal();
        if (h1) y[i] += t.signal()[i];
    }
    return {h1 ? Hypothesis::H1 : Hypothesis::H0, std::move(y)};
}

/// Fraction of misclassified draws. `rule` maps an observation to a Decision or Hypothesis.
template <typename Rule>
double monte_carlo_error(const HypothesisTest& t, Rule&& rule, std::size_t trials, Rng& rng)
{
    if (trials == 0) throw ValueError("monte_carlo_error needs at least one trial");
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < trials; ++i) {
        auto d = draw_observation(t, rng);
        Hypothesis h;
        if constexpr (std::is_same_v<std::decay_t<decltype(rule(d.y))>, Decision>)
            h = rule(d.y).hypothesis;
        else
            h = rule(d.y);
        if (h != d.truth) ++wrong;
    }
    return static_cast<double>(wrong) / static_cast<double>(trials);
}

} // namespace biasnet
