#pragma once

// Training objective (maximized): per-sample mean reconstruction
// log-likelihood summed over modalities, minus beta times the strategy's rate
// term. Sampling layout per strategy:
//
//   independent, mmvm   one reparameterized sample from each unimodal posterior
//   avg, poe            one sample from the joint posterior, decoded by all
//   moe, mopoe          one sample per mixture component, uniformly weighted
//
// Rates: independent sums KL(q_m || N(0,I)); avg/poe use the joint posterior's
// KL to N(0,I); moe/mopoe average the component KLs; mmvm uses the plug-in
// divergence of each unimodal posterior from the uniform posterior mixture,
// evaluated at the same sample used for reconstruction, so it is exactly zero
// whenever the posteriors coincide. beta == 0 skips the rate graph entirely.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "mmvae/aggregation.hpp"
#include "mmvae/distributions_graph.hpp"
#include "mmvae/model.hpp"

namespace mmvae {

// Where a reparameterization noise matrix is consumed.
struct NoiseRequest {
  enum class Kind { kOwn, kJoint, kComponent };
  Kind kind = Kind::kOwn;
  int index = 0;  // modality for kOwn, mixture component for kComponent
};

using NoiseSource = std::function<std::vector<double>(const NoiseRequest&, int rows, int cols)>;

// Noise keyed by stable per-modality stream ids, so a model restricted to a
// subset of modalities replays exactly the noise the full model would see.
inline NoiseSource make_stream_noise(RngStream base, std::vector<std::uint64_t> stream_ids) {
  return [base, ids = std::move(stream_ids)](const NoiseRequest& req, int rows,
                                             int cols) -> std::vector<double> {
    RngStream s(0);
    switch (req.kind) {
      case NoiseRequest::Kind::kOwn:
        require(req.index >= 0 && req.index < static_cast<int>(ids.size()),
                "noise: own-sample request outside the stream id table");
        s = base.split("own").split(ids[static_cast<std::size_t>(req.index)]);
        break;
      case NoiseRequest::Kind::kJoint:
        s = base.split("joint");
        break;
      case NoiseRequest::Kind::kComponent:
        s = base.split("component").split(static_cast<std::uint64_t>(req.index));
        break;
    }
    return s.normal_vec(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols));
  };
}

inline NoiseSource zero_noise() {
  return [](const NoiseRequest&, int rows, int cols) {
    return std::vector<double>(static_cast<std::size_t>(rows) * cols, 0.0);
  };
}

struct ObjectiveNodes {
  std::vector<ad::Value> recon;  // scalar node per modality
  ad::Value rate{nullptr, -1};   // scalar node; only meaningful when has_rate
  ad::Value total{nullptr, -1};
  bool has_rate = false;
};

struct ObjectiveBreakdown {
  std::vector<double> recon;
  double recon_total = 0.0;
  double rate = 0.0;
  double total = 0.0;
  double beta = 0.0;
};

inline std::vector<ad::Value> bind_batch(ad::Tape& t, const MultimodalModel& model,
                                         const std::vector<std::vector<double>>& flat,
                                         int batch) {
  const int m_count = model.config.n_modalities();
  require(static_cast<int>(flat.size()) == m_count, "batch: one feature block per modality");
  require(batch > 0, "batch: batch size must be positive");
  std::vector<ad::Value> x;
  x.reserve(flat.size());
  for (int m = 0; m < m_count; ++m) {
    const int d = model.config.input_dims[m];
    require(flat[m].size() == static_cast<std::size_t>(batch) * static_cast<std::size_t>(d),
            "batch: modality " + std::to_string(m) + " block is not batch x input_dim");
    x.push_back(t.constant(batch, d, flat[m]));
  }
  return x;
}

inline ObjectiveNodes build_objective(ad::Tape& t, const MultimodalModel& model,
                                      const BoundModel& bound, const std::vector<ad::Value>& x,
                                      double beta, const NoiseSource& noise) {
  const ModelConfig& cfg = model.config;
  const int m_count = cfg.n_modalities();
  require(static_cast<int>(x.size()) == m_count, "objective: one input block per modality");
  const int batch = t.rows(x[0]);
  for (int m = 0; m < m_count; ++m) {
    require(t.rows(x[m]) == batch, "objective: batch sizes differ across modalities");
    require(t.cols(x[m]) == cfg.input_dims[m],
            "objective: input width mismatch for modality " + std::to_string(m));
  }
  const int d = cfg.latent_dim;

  std::vector<GaussianNode> post;
  post.reserve(static_cast<std::size_t>(m_count));
  for (int m = 0; m < m_count; ++m) post.push_back(encode_node(t, model, bound, m, x[m]));

  auto eps = [&](NoiseRequest::Kind kind, int index) {
    return t.constant(batch, d, noise(NoiseRequest{kind, index}, batch, d));
  };

  ObjectiveNodes nodes;
  nodes.recon.reserve(static_cast<std::size_t>(m_count));
  ad::Value rate_rows{nullptr, -1};
  auto add_rate_rows = [&](ad::Value r) {
    rate_rows = rate_rows.tape == nullptr ? r : t.add(rate_rows, r);
  };
  const bool want_rate = beta != 0.0;

  switch (cfg.strategy) {
    case Strategy::kIndependent: {
      for (int m = 0; m < m_count; ++m) {
        ad::Value z = sample_reparam(t, post[m], eps(NoiseRequest::Kind::kOwn, m));
        nodes.recon.push_back(t.mean_all(likelihood_rows(t, model, bound, m, z, x[m])));
        if (want_rate) add_rate_rows(kl_standard_normal_rows(t, post[m]));
      }
      break;
    }
    case Strategy::kAvg:
    case Strategy::kPoe: {
      GaussianNode joint = cfg.strategy == Strategy::kAvg
                               ? aggregate_avg(t, post)
                               : product_of_gaussians(t, post, cfg.poe_prior_expert);
      ad::Value z = sample_reparam(t, joint, eps(NoiseRequest::Kind::kJoint, 0));
      for (int m = 0; m < m_count; ++m)
        nodes.recon.push_back(t.mean_all(likelihood_rows(t, model, bound, m, z, x[m])));
      if (want_rate) add_rate_rows(kl_standard_normal_rows(t, joint));
      break;
    }
    case Strategy::kMoe:
    case Strategy::kMopoe: {
      std::vector<GaussianNode> comps =
          cfg.strategy == Strategy::kMoe ? post : mopoe_components(t, post);
      const int k_count = static_cast<int>(comps.size());
      const double w = 1.0 / static_cast<double>(k_count);
      std::vector<ad::Value> ll_sum(static_cast<std::size_t>(m_count),
                                    ad::Value{nullptr, -1});
      for (int k = 0; k < k_count; ++k) {
        ad::Value z = sample_reparam(t, comps[k], eps(NoiseRequest::Kind::kComponent, k));
        for (int m = 0; m < m_count; ++m) {
          ad::Value ll = likelihood_rows(t, model, bound, m, z, x[m]);
          ll_sum[m] = ll_sum[m].tape == nullptr ? ll : t.add(ll_sum[m], ll);
        }
        if (want_rate) add_rate_rows(kl_standard_normal_rows(t, comps[k]));
      }
      for (int m = 0; m < m_count; ++m)
        nodes.recon.push_back(t.scale(t.mean_all(ll_sum[m]), w));
      if (want_rate) rate_rows = t.scale(rate_rows, w);
      break;
    }
    case Strategy::kMmvm: {
      std::vector<ad::Value> z;
      z.reserve(static_cast<std::size_t>(m_count));
      for (int m = 0; m < m_count; ++m) {
        z.push_back(sample_reparam(t, post[m], eps(NoiseRequest::Kind::kOwn, m)));
        nodes.recon.push_back(t.mean_all(likelihood_rows(t, model, bound, m, z[m], x[m])));
      }
      if (want_rate) {
        for (int m = 0; m < m_count; ++m) {
          std::array<ad::Value, 1> sample{z[static_cast<std::size_t>(m)]};
          add_rate_rows(
              kl_to_mixture_rows(t, post[m], post, sample, cfg.stop_prior_gradient));
        }
      }
      break;
    }
  }

  ad::Value recon_total = nodes.recon[0];
  for (int m = 1; m < m_count; ++m) recon_total = t.add(recon_total, nodes.recon[m]);
  if (want_rate && rate_rows.tape != nullptr) {
    nodes.rate = t.mean_all(rate_rows);
    nodes.has_rate = true;
    nodes.total = t.add(recon_total, t.scale(nodes.rate, -beta));
  } else {
    nodes.total = recon_total;
  }
  return nodes;
}

// Deterministic per-modality autoencoder: decode each modality from its own
// posterior mean, no noise, no rate. Trained with the same budget it serves
// as a reconstruction reference the noisy objective cannot beat.
inline ObjectiveNodes build_ae_objective(ad::Tape& t, const MultimodalModel& model,
                                         const BoundModel& bound,
                                         const std::vector<ad::Value>& x) {
  const int m_count = model.config.n_modalities();
  require(static_cast<int>(x.size()) == m_count, "objective: one input block per modality");
  ObjectiveNodes nodes;
  for (int m = 0; m < m_count; ++m) {
    GaussianNode q = encode_node(t, model, bound, m, x[m]);
    nodes.recon.push_back(t.mean_all(likelihood_rows(t, model, bound, m, q.mean, x[m])));
  }
  nodes.total = nodes.recon[0];
  for (int m = 1; m < m_count; ++m) nodes.total = t.add(nodes.total, nodes.recon[m]);
  return nodes;
}

inline ObjectiveBreakdown read_breakdown(const ad::Tape& t, const ObjectiveNodes& nodes,
                                         double beta) {
  ObjectiveBreakdown b;
  b.beta = beta;
  b.recon.reserve(nodes.recon.size());
  for (ad::Value r : nodes.recon) {
    b.recon.push_back(t.scalar_value(r));
    b.recon_total += b.recon.back();
  }
  b.rate = nodes.has_rate ? t.scalar_value(nodes.rate) : 0.0;
  b.total = t.scalar_value(nodes.total);
  return b;
}

struct MixtureOptimalityReport {
  double mixture_value = 0.0;
  double best_perturbed_value = -std::numeric_limits<double>::infinity();
  double min_margin = std::numeric_limits<double>::infinity();
  double required_margin = 0.0;
  int grid_points = 0;
  int perturbations = 0;
  bool passed = false;
};

// Discretized check that the uniform mixture of the unimodal posteriors
// maximizes the shared-prior functional sum_m E_{q_m}[log h] over probability
// vectors h on a 1-D grid. Every perturbed candidate at L1 distance r must
// fall short of the mixture by at least the Pinsker bound (M/2) r^2.
inline MixtureOptimalityReport verify_mixture_optimality(
    const std::vector<DiagonalGaussian>& components, int grid_points, int n_perturbations,
    double l1_radius, RngStream rng) {
  if (grid_points < 200)
    throw ConfigError("mixture optimality check: need at least 200 grid points, got " +
                      std::to_string(grid_points));
  if (components.empty()) throw ConfigError("mixture optimality check: empty posterior bundle");
  if (n_perturbations < 1)
    throw ConfigError("mixture optimality check: need at least one perturbation");
  if (!(l1_radius > 0.0) || l1_radius > 0.5)
    throw ConfigError("mixture optimality check: l1 radius must lie in (0, 0.5]");
  for (const auto& c : components) {
    if (c.dim() != 1)
      throw ConfigError("mixture optimality check: only 1-D posteriors are supported");
    c.require_positive_stddev();
  }

  const int n = grid_points;
  const int m_count = static_cast<int>(components.size());
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& c : components) {
    lo = std::min(lo, c.mean[0] - 8.0 * c.stddev[0]);
    hi = std::max(hi, c.mean[0] + 8.0 * c.stddev[0]);
  }

  // Discrete masses per component, normalized on the grid.
  std::vector<std::vector<double>> p(static_cast<std::size_t>(m_count),
                                     std::vector<double>(static_cast<std::size_t>(n)));
  for (int m = 0; m < m_count; ++m) {
    const double mu = components[m].mean[0];
    const double sd = components[m].stddev[0];
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      double xv = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
      double u = (xv - mu) / sd;
      p[m][i] = std::exp(-0.5 * u * u);
      total += p[m][i];
    }
    for (int i = 0; i < n; ++i) p[m][i] /= total;
  }
  std::vector<double> mix(static_cast<std::size_t>(n), 0.0);
  for (int m = 0; m < m_count; ++m)
    for (int i = 0; i < n; ++i) mix[i] += p[m][i] / static_cast<double>(m_count);

  auto functional = [&](const std::vector<double>& h) {
    double f = 0.0;
    for (int m = 0; m < m_count; ++m)
      for (int i = 0; i < n; ++i)
        if (p[m][i] > 0.0) f += p[m][i] * std::log(h[i]);
    return f;
  };

  MixtureOptimalityReport report;
  report.grid_points = n;
  report.perturbations = n_perturbations;
  report.mixture_value = functional(mix);

  bool cleared_bound = true;
  double min_l1 = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n));
  std::vector<double> h(static_cast<std::size_t>(n));
  for (int r = 0; r < n_perturbations; ++r) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      u[i] = std::fabs(rng.normal()) + 1e-12;
      total += u[i];
    }
    double dist = 0.0;
    for (int i = 0; i < n; ++i) {
      u[i] /= total;
      dist += std::fabs(u[i] - mix[i]);
    }
    // Convex step toward u of exact L1 length alpha * dist.
    double alpha = std::min(l1_radius / dist, 0.99);
    for (int i = 0; i < n; ++i) h[i] = (1.0 - alpha) * mix[i] + alpha * u[i];
    const double l1 = alpha * dist;
    const double value = functional(h);
    const double margin = report.mixture_value - value;
    report.best_perturbed_value = std::max(report.best_perturbed_value, value);
    report.min_margin = std::min(report.min_margin, margin);
    min_l1 = std::min(min_l1, l1);
    if (margin < 0.5 * static_cast<double>(m_count) * l1 * l1) cleared_bound = false;
  }
  report.required_margin = 0.5 * static_cast<double>(m_count) * min_l1 * min_l1;
  report.passed = cleared_bound && report.min_margin > 0.0;
  return report;
}

}  // namespace mmvae
