#pragma once

#include <span>
#include <vector>

#include "mmvae/distributions.hpp"
#include "mmvae/errors.hpp"
#include "mmvae/tape.hpp"

namespace mmvae {

// Batched diagonal Gaussian on the tape: mean, stddev and log(stddev) are all
// (batch, dim) nodes. log_stddev is carried alongside so densities avoid a
// redundant log when stddev came from exp(0.5 * logvar).
struct GaussianNode {
  ad::Value mean;
  ad::Value stddev;
  ad::Value log_stddev;
  int batch = 0;
  int dim = 0;
};

inline GaussianNode make_gaussian_node(ad::Tape& t, ad::Value mean, ad::Value stddev,
                                       ad::Value log_stddev) {
  GaussianNode g{mean, stddev, log_stddev, t.rows(mean), t.cols(mean)};
  require(t.rows(stddev) == g.batch && t.cols(stddev) == g.dim &&
              t.rows(log_stddev) == g.batch && t.cols(log_stddev) == g.dim,
          "gaussian node: mean/stddev/log_stddev shapes differ");
  return g;
}

inline GaussianNode make_gaussian_node(ad::Tape& t, ad::Value mean, ad::Value stddev) {
  return make_gaussian_node(t, mean, stddev, t.log_(stddev));
}

// Value copy whose density parameters no longer carry gradients.
inline GaussianNode detach_gaussian(ad::Tape& t, const GaussianNode& g) {
  return GaussianNode{t.detach(g.mean), t.detach(g.stddev), t.detach(g.log_stddev), g.batch,
                      g.dim};
}

// z = mean + stddev * eps, eps fixed; gradients flow through mean and stddev.
inline ad::Value sample_reparam(ad::Tape& t, const GaussianNode& g, ad::Value eps) {
  return t.add(g.mean, t.mul(g.stddev, eps));
}

// Per-row log N(z; mean, stddev^2), shape (batch, 1).
inline ad::Value gaussian_log_prob_rows(ad::Tape& t, const GaussianNode& g, ad::Value z) {
  ad::Value u = t.mul(t.sub(z, g.mean), t.recip(g.stddev));
  ad::Value quad = t.scale(t.row_sum(t.square(u)), 0.5);
  ad::Value logdet = t.row_sum(g.log_stddev);
  return t.scale(t.add(quad, logdet), -1.0, -0.5 * kLog2Pi * g.dim);
}

// Per-row KL(q || N(0, I)) in closed form, shape (batch, 1).
inline ad::Value kl_standard_normal_rows(ad::Tape& t, const GaussianNode& g) {
  ad::Value ss = t.add(t.square(g.stddev), t.square(g.mean));
  ad::Value half = t.scale(t.row_sum(ss), 0.5, -0.5 * g.dim);
  return t.sub(half, t.row_sum(g.log_stddev));
}

// Per-row log of the uniform mixture density over `components` at z.
inline ad::Value mixture_log_prob_rows(ad::Tape& t, std::span<const GaussianNode> components,
                                       ad::Value z) {
  require(!components.empty(), "mixture node: empty component list");
  std::vector<ad::Value> terms;
  std::vector<double> log_w(components.size(),
                            -std::log(static_cast<double>(components.size())));
  terms.reserve(components.size());
  for (const auto& c : components) terms.push_back(gaussian_log_prob_rows(t, c, z));
  return t.lse_rows(terms, log_w);
}

// Per-row plug-in KL(q || uniform mixture) evaluated at the given samples:
// mean_i [log q(z_i) - log mix(z_i)]. With detach_densities the density
// parameters of q and of every component are detached first, leaving only the
// pathwise gradient through the samples.
inline ad::Value kl_to_mixture_rows(ad::Tape& t, const GaussianNode& q,
                                    std::span<const GaussianNode> components,
                                    std::span<const ad::Value> samples,
                                    bool detach_densities = false) {
  require(!samples.empty(), "kl_to_mixture node: needs at least one sample");
  GaussianNode qd = detach_densities ? detach_gaussian(t, q) : q;
  std::vector<GaussianNode> comps;
  comps.reserve(components.size());
  for (const auto& c : components)
    comps.push_back(detach_densities ? detach_gaussian(t, c) : c);
  ad::Value acc{nullptr, -1};
  for (ad::Value z : samples) {
    ad::Value term =
        t.sub(gaussian_log_prob_rows(t, qd, z), mixture_log_prob_rows(t, comps, z));
    acc = acc.tape == nullptr ? term : t.add(acc, term);
  }
  return t.scale(acc, 1.0 / static_cast<double>(samples.size()));
}

// Per-row factorized Laplace log-likelihood of fixed data x given location.
inline ad::Value laplace_log_prob_rows(ad::Tape& t, ad::Value loc, double scale, ad::Value x) {
  require(scale > 0.0, "laplace node: scale must be positive");
  const int d = t.cols(loc);
  ad::Value l1 = t.row_sum(t.abs_(t.sub(x, loc)));
  return t.scale(l1, -1.0 / scale, -std::log(2.0 * scale) * d);
}

// Per-row Gaussian log-likelihood of fixed data x given location, fixed scale.
inline ad::Value gaussian_likelihood_rows(ad::Tape& t, ad::Value loc, double scale, ad::Value x) {
  require(scale > 0.0, "gaussian likelihood node: scale must be positive");
  const int d = t.cols(loc);
  ad::Value u = t.scale(t.sub(x, loc), 1.0 / scale);
  ad::Value quad = t.scale(t.row_sum(t.square(u)), 0.5);
  return t.scale(quad, -1.0, -(0.5 * kLog2Pi + std::log(scale)) * d);
}

}  // namespace mmvae
