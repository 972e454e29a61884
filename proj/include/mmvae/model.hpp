#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mmvae/aggregation.hpp"
#include "mmvae/distributions.hpp"
#include "mmvae/distributions_graph.hpp"
#include "mmvae/errors.hpp"
#include "mmvae/mlp.hpp"
#include "mmvae/rng.hpp"

namespace mmvae {

inline constexpr double kLogvarMin = -10.0;
inline constexpr double kLogvarMax = 10.0;

struct LikelihoodSpec {
  enum class Family { kGaussian, kLaplace };
  Family family = Family::kGaussian;
  double scale = 1.0;
};

inline std::string to_string(LikelihoodSpec::Family f) {
  switch (f) {
    case LikelihoodSpec::Family::kGaussian: return "gaussian";
    case LikelihoodSpec::Family::kLaplace: return "laplace";
  }
  throw ContractError("likelihood: bad enum value");
}

inline LikelihoodSpec::Family likelihood_family_from_string(const std::string& s) {
  if (s == "gaussian") return LikelihoodSpec::Family::kGaussian;
  if (s == "laplace") return LikelihoodSpec::Family::kLaplace;
  throw ConfigError("likelihood: unknown family '" + s + "' (expected gaussian|laplace)");
}

struct ModelConfig {
  std::vector<int> input_dims;           // one per modality
  int latent_dim = 2;
  std::vector<int> hidden_widths = {32, 32};
  Activation activation = Activation::kRelu;
  std::vector<LikelihoodSpec> likelihoods;  // one per modality; filled by validate if empty
  Strategy strategy = Strategy::kMmvm;
  bool stop_prior_gradient = false;
  bool poe_prior_expert = true;

  int n_modalities() const { return static_cast<int>(input_dims.size()); }

  void validate() {
    if (input_dims.empty()) throw ConfigError("model: at least one modality required");
    for (std::size_t m = 0; m < input_dims.size(); ++m)
      if (input_dims[m] <= 0)
        throw ConfigError("model: input_dims[" + std::to_string(m) + "] must be positive");
    if (latent_dim <= 0) throw ConfigError("model: latent_dim must be positive");
    if (hidden_widths.empty()) throw ConfigError("model: hidden_widths must be nonempty");
    for (int w : hidden_widths)
      if (w <= 0) throw ConfigError("model: hidden widths must be positive");
    if (likelihoods.empty()) likelihoods.assign(input_dims.size(), LikelihoodSpec{});
    if (likelihoods.size() != input_dims.size())
      throw ConfigError("model: need one likelihood per modality");
    for (const auto& lik : likelihoods)
      if (!(lik.scale > 0.0)) throw ConfigError("model: likelihood scale must be positive");
    if (strategy == Strategy::kMopoe && n_modalities() > kMopoeMaxModalities)
      throw ConfigError("model: mopoe supports at most " +
                        std::to_string(kMopoeMaxModalities) + " modalities");
  }

  MlpSpec encoder_spec(int m) const {
    std::vector<int> widths;
    widths.push_back(input_dims[m]);
    widths.insert(widths.end(), hidden_widths.begin(), hidden_widths.end());
    widths.push_back(2 * latent_dim);  // mean head then logvar head
    return MlpSpec{std::move(widths), activation};
  }

  MlpSpec decoder_spec(int m) const {
    std::vector<int> widths;
    widths.push_back(latent_dim);
    widths.insert(widths.end(), hidden_widths.begin(), hidden_widths.end());
    widths.push_back(input_dims[m]);
    return MlpSpec{std::move(widths), activation};
  }
};

inline constexpr const char* kInitScheme = "kaiming_uniform_fanin_zero_bias_zero_logvar_head";

struct MultimodalModel {
  ModelConfig config;
  std::vector<ParameterSet> encoders;
  std::vector<ParameterSet> decoders;
};

// Per-modality parameter streams split from `seed`; the logvar head starts at
// zero so the initial posterior stddev is exactly 1.
inline MultimodalModel init_model(ModelConfig config, std::uint64_t seed) {
  config.validate();
  MultimodalModel model;
  model.config = config;
  RngStream root = RngStream(seed).split("init");
  for (int m = 0; m < config.n_modalities(); ++m) {
    RngStream mod = root.split(static_cast<std::uint64_t>(m));
    model.encoders.push_back(
        init_mlp(config.encoder_spec(m), mod.split("enc"), config.latent_dim));
    model.decoders.push_back(init_mlp(config.decoder_spec(m), mod.split("dec")));
  }
  return model;
}

inline void check_modality(const MultimodalModel& model, int m) {
  require(m >= 0 && m < model.config.n_modalities(),
          "model: modality index " + std::to_string(m) + " outside [0," +
              std::to_string(model.config.n_modalities()) + ")");
}

inline DiagonalGaussian encode(const MultimodalModel& model, int m,
                               std::span<const double> x) {
  check_modality(model, m);
  const int d = model.config.latent_dim;
  std::vector<double> out = mlp_forward(model.encoders[m], model.config.encoder_spec(m), x);
  std::vector<double> mean(out.begin(), out.begin() + d);
  std::vector<double> stddev(d);
  for (int i = 0; i < d; ++i) {
    double lv = std::clamp(out[d + i], kLogvarMin, kLogvarMax);
    stddev[i] = std::exp(0.5 * lv);
  }
  return DiagonalGaussian(std::move(mean), std::move(stddev));
}

inline std::vector<double> decode(const MultimodalModel& model, int m,
                                  std::span<const double> z) {
  check_modality(model, m);
  return mlp_forward(model.decoders[m], model.config.decoder_spec(m), z);
}

inline double likelihood_log_prob(const LikelihoodSpec& lik, std::span<const double> loc,
                                  std::span<const double> x) {
  switch (lik.family) {
    case LikelihoodSpec::Family::kGaussian:
      return gaussian_likelihood_log_prob(loc, lik.scale, x);
    case LikelihoodSpec::Family::kLaplace: {
      LaplaceLikelihood l(std::vector<double>(loc.begin(), loc.end()), lik.scale);
      return laplace_log_prob(l, x);
    }
  }
  throw ContractError("likelihood: bad enum value");
}

// One multimodal observation: features[m] has length input_dims[m].
using MultimodalSample = std::vector<std::vector<double>>;

inline void check_sample_dims(const MultimodalModel& model, const MultimodalSample& x) {
  require(static_cast<int>(x.size()) == model.config.n_modalities(),
          "model: sample has " + std::to_string(x.size()) + " modalities, model expects " +
              std::to_string(model.config.n_modalities()));
  for (int m = 0; m < model.config.n_modalities(); ++m)
    require(static_cast<int>(x[m].size()) == model.config.input_dims[m],
            "model: modality " + std::to_string(m) + " has dim " + std::to_string(x[m].size()) +
                ", model expects " + std::to_string(model.config.input_dims[m]));
}

struct ReconComponent {
  std::vector<double> location;
  double weight = 1.0;
  double loglik = 0.0;
};

struct ReconResult {
  std::vector<std::vector<ReconComponent>> per_modality;
  std::vector<double> loglik_per_modality;  // weight-averaged over components
  double total_loglik = 0.0;
};

inline std::vector<double> maybe_sample(const DiagonalGaussian& q, RngStream& rng,
                                        bool deterministic) {
  return deterministic ? q.mean : sample_reparam(q, rng);
}

// The strategy's standard reconstruction path for one observation.
// independent/mmvm decode each modality from its own posterior sample; avg/poe
// decode every modality from one joint sample; moe/mopoe produce one component
// per mixture element, uniformly weighted.
inline ReconResult reconstruct(const MultimodalModel& model, const MultimodalSample& x,
                               RngStream& rng, bool deterministic = false) {
  check_sample_dims(model, x);
  const int m_count = model.config.n_modalities();
  std::vector<DiagonalGaussian> post;
  post.reserve(m_count);
  for (int m = 0; m < m_count; ++m) post.push_back(encode(model, m, x[m]));

  ReconResult result;
  result.per_modality.resize(m_count);
  result.loglik_per_modality.assign(m_count, 0.0);

  auto decode_component = [&](int m, std::span<const double> z, double weight) {
    ReconComponent comp;
    comp.location = decode(model, m, z);
    comp.weight = weight;
    comp.loglik = likelihood_log_prob(model.config.likelihoods[m], comp.location, x[m]);
    result.per_modality[m].push_back(std::move(comp));
  };

  switch (model.config.strategy) {
    case Strategy::kIndependent:
    case Strategy::kMmvm: {
      for (int m = 0; m < m_count; ++m) {
        RngStream sub = rng.split(static_cast<std::uint64_t>(m));
        decode_component(m, maybe_sample(post[m], sub, deterministic), 1.0);
      }
      break;
    }
    case Strategy::kAvg:
    case Strategy::kPoe: {
      DiagonalGaussian joint =
          model.config.strategy == Strategy::kAvg
              ? aggregate_avg(post)
              : aggregate_poe(post, model.config.poe_prior_expert);
      RngStream sub = rng.split("joint");
      std::vector<double> z = maybe_sample(joint, sub, deterministic);
      for (int m = 0; m < m_count; ++m) decode_component(m, z, 1.0);
      break;
    }
    case Strategy::kMoe: {
      const double w = 1.0 / static_cast<double>(m_count);
      for (int k = 0; k < m_count; ++k) {
        RngStream sub = rng.split(static_cast<std::uint64_t>(k));
        std::vector<double> z = maybe_sample(post[k], sub, deterministic);
        for (int m = 0; m < m_count; ++m) decode_component(m, z, w);
      }
      break;
    }
    case Strategy::kMopoe: {
      GaussianMixture mix = aggregate_mopoe(post);
      const double w = 1.0 / static_cast<double>(mix.size());
      for (std::size_t k = 0; k < mix.size(); ++k) {
        RngStream sub = rng.split(static_cast<std::uint64_t>(k));
        std::vector<double> z = maybe_sample(mix.components[k], sub, deterministic);
        for (int m = 0; m < m_count; ++m) decode_component(m, z, w);
      }
      break;
    }
  }

  for (int m = 0; m < m_count; ++m) {
    double acc = 0.0;
    for (const auto& comp : result.per_modality[m]) acc += comp.weight * comp.loglik;
    result.loglik_per_modality[m] = acc;
    result.total_loglik += acc;
  }
  return result;
}

// Encode modality `from`, sample (or take the mean of) its unimodal posterior,
// decode with modality `to`. The same procedure for every strategy.
inline std::vector<double> conditional_generate(const MultimodalModel& model, int from, int to,
                                                std::span<const double> x_from, RngStream& rng,
                                                bool deterministic = false) {
  check_modality(model, from);
  check_modality(model, to);
  require(static_cast<int>(x_from.size()) == model.config.input_dims[from],
          "conditional_generate: input dim " + std::to_string(x_from.size()) +
              " does not match modality " + std::to_string(from));
  DiagonalGaussian q = encode(model, from, x_from);
  std::vector<double> z = maybe_sample(q, rng, deterministic);
  return decode(model, to, z);
}

// ---- tape-side forward passes ----

struct BoundModel {
  std::vector<BoundParams> encoders;
  std::vector<BoundParams> decoders;
};

inline BoundModel bind_model(ad::Tape& t, const MultimodalModel& model) {
  BoundModel bound;
  for (int m = 0; m < model.config.n_modalities(); ++m) {
    bound.encoders.push_back(bind(t, model.encoders[m]));
    bound.decoders.push_back(bind(t, model.decoders[m]));
  }
  return bound;
}

inline GradMap collect_model_grads(ad::Tape& t, const MultimodalModel& model,
                                   const BoundModel& bound) {
  GradMap all;
  for (int m = 0; m < model.config.n_modalities(); ++m) {
    for (auto& [name, g] : collect_grads(t, bound.encoders[m]))
      all["enc" + std::to_string(m) + "/" + name] = std::move(g);
    for (auto& [name, g] : collect_grads(t, bound.decoders[m]))
      all["dec" + std::to_string(m) + "/" + name] = std::move(g);
  }
  return all;
}

// Batched encoder pass: x is (batch, input_dims[m]).
inline GaussianNode encode_node(ad::Tape& t, const MultimodalModel& model,
                                const BoundModel& bound, int m, ad::Value x) {
  check_modality(model, m);
  const int d = model.config.latent_dim;
  ad::Value out = mlp_forward(t, bound.encoders[m], model.config.encoder_spec(m), x);
  ad::Value mean = t.slice_cols(out, 0, d);
  ad::Value logvar = t.clamp(t.slice_cols(out, d, d), kLogvarMin, kLogvarMax);
  ad::Value log_stddev = t.scale(logvar, 0.5);
  return make_gaussian_node(t, mean, t.exp_(log_stddev), log_stddev);
}

inline ad::Value decode_node(ad::Tape& t, const MultimodalModel& model, const BoundModel& bound,
                             int m, ad::Value z) {
  check_modality(model, m);
  return mlp_forward(t, bound.decoders[m], model.config.decoder_spec(m), z);
}

// Per-row decoder log-likelihood of fixed data x given latent rows z.
inline ad::Value likelihood_rows(ad::Tape& t, const MultimodalModel& model,
                                 const BoundModel& bound, int m, ad::Value z, ad::Value x) {
  ad::Value loc = decode_node(t, model, bound, m, z);
  const auto& lik = model.config.likelihoods[m];
  switch (lik.family) {
    case LikelihoodSpec::Family::kGaussian:
      return gaussian_likelihood_rows(t, loc, lik.scale, x);
    case LikelihoodSpec::Family::kLaplace:
      return laplace_log_prob_rows(t, loc, lik.scale, x);
  }
  throw ContractError("likelihood: bad enum value");
}

}  // namespace mmvae
