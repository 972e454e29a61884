#pragma once

#include <span>
#include <string>
#include <vector>

#include "mmvae/distributions.hpp"
#include "mmvae/distributions_graph.hpp"
#include "mmvae/errors.hpp"

namespace mmvae {

// Posterior-sharing strategy. `independent` trains per-modality VAEs with no
// coupling; avg/moe/poe/mopoe aggregate the unimodal posteriors into a joint
// object; mmvm keeps unimodal posteriors and couples them through a
// data-dependent mixture prior.
enum class Strategy { kIndependent, kAvg, kMoe, kPoe, kMopoe, kMmvm };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kIndependent: return "independent";
    case Strategy::kAvg: return "avg";
    case Strategy::kMoe: return "moe";
    case Strategy::kPoe: return "poe";
    case Strategy::kMopoe: return "mopoe";
    case Strategy::kMmvm: return "mmvm";
  }
  throw ContractError("strategy: bad enum value");
}

inline Strategy strategy_from_string(const std::string& s) {
  if (s == "independent") return Strategy::kIndependent;
  if (s == "avg") return Strategy::kAvg;
  if (s == "moe") return Strategy::kMoe;
  if (s == "poe") return Strategy::kPoe;
  if (s == "mopoe") return Strategy::kMopoe;
  if (s == "mmvm") return Strategy::kMmvm;
  throw ConfigError("strategy: unknown tag '" + s +
                    "' (expected independent|avg|moe|poe|mopoe|mmvm)");
}

inline const std::vector<Strategy>& all_strategies() {
  static const std::vector<Strategy> all = {Strategy::kIndependent, Strategy::kAvg,
                                            Strategy::kMoe,         Strategy::kPoe,
                                            Strategy::kMopoe,       Strategy::kMmvm};
  return all;
}

// Arithmetic mean of means and of stddevs (not variances).
inline DiagonalGaussian aggregate_avg(std::span<const DiagonalGaussian> posteriors) {
  require(!posteriors.empty(), "aggregate_avg: empty bundle");
  const std::size_t d = posteriors[0].dim();
  std::vector<double> mean(d, 0.0), stddev(d, 0.0);
  for (const auto& q : posteriors) {
    check_same_dim(q.dim(), d, "aggregate_avg");
    for (std::size_t i = 0; i < d; ++i) {
      mean[i] += q.mean[i];
      stddev[i] += q.stddev[i];
    }
  }
  const double inv = 1.0 / static_cast<double>(posteriors.size());
  for (std::size_t i = 0; i < d; ++i) {
    mean[i] *= inv;
    stddev[i] *= inv;
  }
  return DiagonalGaussian(std::move(mean), std::move(stddev));
}

// Product of experts; with the flag set an N(0, I) expert joins the product.
inline DiagonalGaussian aggregate_poe(std::span<const DiagonalGaussian> posteriors,
                                      bool include_prior_expert = true) {
  require(!posteriors.empty(), "aggregate_poe: empty bundle");
  std::vector<DiagonalGaussian> factors(posteriors.begin(), posteriors.end());
  if (include_prior_expert)
    factors.emplace_back(std::vector<double>(posteriors[0].dim(), 0.0),
                         std::vector<double>(posteriors[0].dim(), 1.0));
  return product_of_gaussians(factors);
}

inline GaussianMixture aggregate_moe(std::span<const DiagonalGaussian> posteriors) {
  require(!posteriors.empty(), "aggregate_moe: empty bundle");
  return GaussianMixture::uniform(posteriors);
}

inline constexpr int kMopoeMaxModalities = 10;

// Nonempty subsets of {0..M-1} ordered by size then lexicographically by mask.
inline std::vector<std::vector<int>> nonempty_subsets(int m) {
  require(m >= 1, "subsets: need at least one element");
  require(m <= kMopoeMaxModalities,
          "subsets: " + std::to_string(m) + " modalities exceed the limit of " +
              std::to_string(kMopoeMaxModalities) + " (2^M - 1 subsets)");
  std::vector<std::vector<int>> out;
  for (int size = 1; size <= m; ++size)
    for (unsigned mask = 1; mask < (1u << m); ++mask) {
      if (__builtin_popcount(mask) != size) continue;
      std::vector<int> subset;
      for (int i = 0; i < m; ++i)
        if (mask & (1u << i)) subset.push_back(i);
      out.push_back(std::move(subset));
    }
  return out;
}

// Uniform mixture over PoE(S) for every nonempty subset S; no prior expert
// inside the subset products.
inline GaussianMixture aggregate_mopoe(std::span<const DiagonalGaussian> posteriors) {
  require(!posteriors.empty(), "aggregate_mopoe: empty bundle");
  auto subsets = nonempty_subsets(static_cast<int>(posteriors.size()));
  std::vector<DiagonalGaussian> comps;
  comps.reserve(subsets.size());
  for (const auto& s : subsets) {
    std::vector<DiagonalGaussian> factors;
    factors.reserve(s.size());
    for (int i : s) factors.push_back(posteriors[i]);
    comps.push_back(product_of_gaussians(factors));
  }
  return GaussianMixture::uniform(comps);
}

// The data-dependent prior shared by every modality: the uniform mixture of
// the unimodal posteriors themselves.
inline GaussianMixture mmvm_prior(std::span<const DiagonalGaussian> posteriors) {
  require(!posteriors.empty(), "mmvm_prior: empty bundle");
  return GaussianMixture::uniform(posteriors);
}

// ---- tape-side counterparts (batched) ----

inline GaussianNode aggregate_avg(ad::Tape& t, std::span<const GaussianNode> posteriors) {
  require(!posteriors.empty(), "aggregate_avg node: empty bundle");
  ad::Value mean = posteriors[0].mean;
  ad::Value stddev = posteriors[0].stddev;
  for (std::size_t m = 1; m < posteriors.size(); ++m) {
    mean = t.add(mean, posteriors[m].mean);
    stddev = t.add(stddev, posteriors[m].stddev);
  }
  const double inv = 1.0 / static_cast<double>(posteriors.size());
  return make_gaussian_node(t, t.scale(mean, inv), t.scale(stddev, inv));
}

inline GaussianNode product_of_gaussians(ad::Tape& t, std::span<const GaussianNode> factors,
                                         bool include_prior_expert) {
  require(!factors.empty(), "product node: empty factor list");
  if (factors.size() == 1 && !include_prior_expert) return factors[0];
  const int batch = factors[0].batch;
  const int dim = factors[0].dim;
  ad::Value prec{nullptr, -1};
  ad::Value wmean{nullptr, -1};
  for (const auto& f : factors) {
    ad::Value tau = t.recip(t.square(f.stddev));
    ad::Value tm = t.mul(tau, f.mean);
    prec = prec.tape == nullptr ? tau : t.add(prec, tau);
    wmean = wmean.tape == nullptr ? tm : t.add(wmean, tm);
  }
  if (include_prior_expert) {
    std::vector<double> ones(static_cast<std::size_t>(batch) * dim, 1.0);
    prec = t.add(prec, t.constant(batch, dim, ones));
  }
  ad::Value var = t.recip(prec);
  ad::Value mean = t.mul(wmean, var);
  ad::Value stddev = t.sqrt_(var);
  return make_gaussian_node(t, mean, stddev, t.scale(t.log_(var), 0.5));
}

inline std::vector<GaussianNode> mopoe_components(ad::Tape& t,
                                                  std::span<const GaussianNode> posteriors) {
  auto subsets = nonempty_subsets(static_cast<int>(posteriors.size()));
  std::vector<GaussianNode> comps;
  comps.reserve(subsets.size());
  for (const auto& s : subsets) {
    std::vector<GaussianNode> factors;
    factors.reserve(s.size());
    for (int i : s) factors.push_back(posteriors[i]);
    comps.push_back(product_of_gaussians(t, factors, /*include_prior_expert=*/false));
  }
  return comps;
}

}  // namespace mmvae
