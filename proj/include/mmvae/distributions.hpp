#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "mmvae/errors.hpp"
#include "mmvae/rng.hpp"

namespace mmvae {

inline constexpr double kLog2Pi = 1.8378770664093454836;

// Diagonal-covariance Gaussian. stddev entries must be finite and >= 0;
// density and divergence operations additionally require them > 0 (a zero
// stddev is allowed only as the degenerate sampling limit z == mean).
struct DiagonalGaussian {
  std::vector<double> mean;
  std::vector<double> stddev;

  DiagonalGaussian() = default;
  DiagonalGaussian(std::vector<double> m, std::vector<double> s)
      : mean(std::move(m)), stddev(std::move(s)) {
    require(mean.size() == stddev.size(), "gaussian: mean and stddev lengths differ");
    require(!mean.empty(), "gaussian: dimension must be positive");
    for (double v : stddev)
      require(std::isfinite(v) && v >= 0.0, "gaussian: stddev must be finite and non-negative");
  }

  std::size_t dim() const { return mean.size(); }

  void require_positive_stddev() const {
    for (double v : stddev)
      if (!(v > 0.0)) throw ContractError("gaussian: operation requires strictly positive stddev");
  }
};

// Mixture of diagonal Gaussians with the given weights (must sum to ~1).
struct GaussianMixture {
  std::vector<DiagonalGaussian> components;
  std::vector<double> weights;

  GaussianMixture() = default;
  GaussianMixture(std::vector<DiagonalGaussian> comps, std::vector<double> w)
      : components(std::move(comps)), weights(std::move(w)) {
    require(!components.empty(), "mixture: needs at least one component");
    require(components.size() == weights.size(), "mixture: component/weight counts differ");
    double total = 0.0;
    for (double x : weights) {
      require(x > 0.0, "mixture: weights must be positive");
      total += x;
    }
    require(std::fabs(total - 1.0) < 1e-9, "mixture: weights must sum to 1");
    for (const auto& c : components)
      require(c.dim() == components[0].dim(), "mixture: component dimensions differ");
  }

  static GaussianMixture uniform(std::span<const DiagonalGaussian> comps) {
    std::vector<DiagonalGaussian> c(comps.begin(), comps.end());
    std::vector<double> w(comps.size(), 1.0 / static_cast<double>(comps.size()));
    return GaussianMixture(std::move(c), std::move(w));
  }

  std::size_t dim() const { return components[0].dim(); }
  std::size_t size() const { return components.size(); }
};

// Factorized Laplace with fixed scale, used as a decoder likelihood.
struct LaplaceLikelihood {
  std::vector<double> loc;
  double scale = 1.0;

  LaplaceLikelihood(std::vector<double> l, double s) : loc(std::move(l)), scale(s) {
    require(scale > 0.0, "laplace: scale must be positive");
    require(!loc.empty(), "laplace: dimension must be positive");
  }
};

inline void check_same_dim(std::size_t a, std::size_t b, const char* what) {
  require(a == b, std::string(what) + ": dimension mismatch");
}

inline double gaussian_log_prob(const DiagonalGaussian& g, std::span<const double> z) {
  g.require_positive_stddev();
  check_same_dim(g.dim(), z.size(), "gaussian_log_prob");
  double acc = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double u = (z[i] - g.mean[i]) / g.stddev[i];
    acc += -0.5 * kLog2Pi - std::log(g.stddev[i]) - 0.5 * u * u;
  }
  return acc;
}

inline double gaussian_entropy(const DiagonalGaussian& g) {
  g.require_positive_stddev();
  double acc = 0.0;
  for (double s : g.stddev) acc += 0.5 * (kLog2Pi + 1.0) + std::log(s);
  return acc;
}

// z = mean + stddev * eps with eps ~ N(0, I).
inline std::vector<double> sample_reparam(const DiagonalGaussian& g, RngStream& rng) {
  std::vector<double> z(g.dim());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = g.mean[i] + g.stddev[i] * rng.normal();
  return z;
}

inline std::vector<double> sample_with_eps(const DiagonalGaussian& g,
                                           std::span<const double> eps) {
  check_same_dim(g.dim(), eps.size(), "sample_with_eps");
  std::vector<double> z(g.dim());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = g.mean[i] + g.stddev[i] * eps[i];
  return z;
}

// KL(q || p) in closed form.
inline double kl_gaussian(const DiagonalGaussian& q, const DiagonalGaussian& p) {
  q.require_positive_stddev();
  p.require_positive_stddev();
  check_same_dim(q.dim(), p.dim(), "kl_gaussian");
  double acc = 0.0;
  for (std::size_t i = 0; i < q.dim(); ++i) {
    const double vq = q.stddev[i] * q.stddev[i];
    const double vp = p.stddev[i] * p.stddev[i];
    const double dm = q.mean[i] - p.mean[i];
    acc += std::log(p.stddev[i] / q.stddev[i]) + (vq + dm * dm) / (2.0 * vp) - 0.5;
  }
  return acc;
}

inline double kl_standard_normal(const DiagonalGaussian& q) {
  q.require_positive_stddev();
  double acc = 0.0;
  for (std::size_t i = 0; i < q.dim(); ++i) {
    const double v = q.stddev[i] * q.stddev[i];
    acc += 0.5 * (v + q.mean[i] * q.mean[i] - 1.0) - std::log(q.stddev[i]);
  }
  return acc;
}

inline double mixture_log_prob(const GaussianMixture& mix, std::span<const double> z) {
  check_same_dim(mix.dim(), z.size(), "mixture_log_prob");
  double m = -std::numeric_limits<double>::infinity();
  std::vector<double> terms(mix.size());
  for (std::size_t k = 0; k < mix.size(); ++k) {
    terms[k] = std::log(mix.weights[k]) + gaussian_log_prob(mix.components[k], z);
    if (terms[k] > m) m = terms[k];
  }
  double s = 0.0;
  for (double t : terms) s += std::exp(t - m);
  return m + std::log(s);
}

// Plug-in Monte-Carlo estimate of KL(q || mix) from explicit samples:
// mean_i [log q(z_i) - log mix(z_i)]. Exact (0) when mix coincides with q
// pointwise, e.g. a single-component mixture equal to q or all components
// identical to q, for any sample set.
inline double kl_to_mixture_with_samples(const DiagonalGaussian& q, const GaussianMixture& mix,
                                         std::span<const std::vector<double>> samples) {
  require(!samples.empty(), "kl_to_mixture: needs at least one sample");
  double acc = 0.0;
  for (const auto& z : samples) acc += gaussian_log_prob(q, z) - mixture_log_prob(mix, z);
  return acc / static_cast<double>(samples.size());
}

inline std::vector<std::vector<double>> draw_reparam_samples(const DiagonalGaussian& q,
                                                             int n_samples, RngStream& rng) {
  require(n_samples > 0, "kl_to_mixture: sample count must be positive");
  std::vector<std::vector<double>> samples;
  samples.reserve(n_samples);
  for (int i = 0; i < n_samples; ++i) samples.push_back(sample_reparam(q, rng));
  return samples;
}

inline double kl_to_mixture(const DiagonalGaussian& q, const GaussianMixture& mix, int n_samples,
                            RngStream& rng) {
  auto samples = draw_reparam_samples(q, n_samples, rng);
  return kl_to_mixture_with_samples(q, mix, samples);
}

// Generalized Jensen-Shannon divergence of the bundle under uniform weights:
// (1/M) sum_m KL(q_m || mix). With per-component sample sets this equals
// (1/M) of the summed component KLs computed from the same samples.
inline double js_divergence_with_samples(
    std::span<const DiagonalGaussian> components,
    std::span<const std::vector<std::vector<double>>> per_component_samples) {
  require(!components.empty(), "js_divergence: empty bundle");
  require(components.size() == per_component_samples.size(),
          "js_divergence: one sample set per component required");
  GaussianMixture mix = GaussianMixture::uniform(components);
  double acc = 0.0;
  for (std::size_t m = 0; m < components.size(); ++m)
    acc += kl_to_mixture_with_samples(components[m], mix, per_component_samples[m]);
  return acc / static_cast<double>(components.size());
}

inline double js_divergence(std::span<const DiagonalGaussian> components, int n_samples,
                            RngStream& rng) {
  require(!components.empty(), "js_divergence: empty bundle");
  std::vector<std::vector<std::vector<double>>> samples;
  samples.reserve(components.size());
  for (std::size_t m = 0; m < components.size(); ++m) {
    RngStream sub = rng.split(m);
    samples.push_back(draw_reparam_samples(components[m], n_samples, sub));
  }
  return js_divergence_with_samples(components, samples);
}

// Precision-weighted product of Gaussian densities, renormalized.
inline DiagonalGaussian product_of_gaussians(std::span<const DiagonalGaussian> factors) {
  require(!factors.empty(), "product_of_gaussians: empty factor list");
  const std::size_t d = factors[0].dim();
  for (const auto& f : factors) {
    f.require_positive_stddev();
    check_same_dim(f.dim(), d, "product_of_gaussians");
  }
  // A one-factor product is the factor itself; skip the precision round trip.
  if (factors.size() == 1) return factors[0];
  std::vector<double> mean(d, 0.0), stddev(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    double prec = 0.0, wmean = 0.0;
    for (const auto& f : factors) {
      const double tau = 1.0 / (f.stddev[i] * f.stddev[i]);
      prec += tau;
      wmean += tau * f.mean[i];
    }
    mean[i] = wmean / prec;
    stddev[i] = 1.0 / std::sqrt(prec);
  }
  return DiagonalGaussian(std::move(mean), std::move(stddev));
}

inline double laplace_log_prob(const LaplaceLikelihood& lik, std::span<const double> x) {
  check_same_dim(lik.loc.size(), x.size(), "laplace_log_prob");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    acc += -std::log(2.0 * lik.scale) - std::fabs(x[i] - lik.loc[i]) / lik.scale;
  return acc;
}

// Gaussian likelihood with fixed isotropic scale, matching the decoder contract.
inline double gaussian_likelihood_log_prob(std::span<const double> loc, double scale,
                                           std::span<const double> x) {
  require(scale > 0.0, "gaussian likelihood: scale must be positive");
  check_same_dim(loc.size(), x.size(), "gaussian_likelihood_log_prob");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double u = (x[i] - loc[i]) / scale;
    acc += -0.5 * kLog2Pi - std::log(scale) - 0.5 * u * u;
  }
  return acc;
}

}  // namespace mmvae
