#pragma once

// Minibatch Adam training of the multimodal objective. All randomness flows
// from TrainOptions.seed through named child streams: batch order from
// ("shuffle", epoch), reparameterization noise from ("eps", step). Model
// parameters stay finite: a step whose objective or gradients are non-finite
// is not applied and training stops with diverged = true.

#include <cmath>
#include <string>
#include <vector>

#include "mmvae/adam.hpp"
#include "mmvae/eval.hpp"
#include "mmvae/objective.hpp"

namespace mmvae {

struct TrainOptions {
  int epochs = 200;
  int batch_size = 256;
  AdamConfig adam;
  double beta = 1.0;
  std::uint64_t seed = 0;
  int log_interval = 50;  // steps between trace points; 0 disables except the final step
  std::vector<std::uint64_t> modality_stream_ids;  // defaults to 0..M-1
  bool deterministic_ae = false;  // train the noise-free reconstruction bound instead

  void validate(int m_count) const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(beta >= 0.0)) throw ConfigError("train: beta must be >= 0");
    if (log_interval < 0) throw ConfigError("train: log_interval must be >= 0");
    if (!(adam.lr > 0.0)) throw ConfigError("train: learning rate must be positive");
    if (!modality_stream_ids.empty() &&
        modality_stream_ids.size() != static_cast<std::size_t>(m_count))
      throw ConfigError("train: need one noise stream id per modality");
  }
};

struct TrainResult {
  MultimodalModel model;
  std::vector<TracePoint> trace;
  int steps = 0;
  int epochs_completed = 0;
  bool diverged = false;
  std::uint64_t rng_key = 0;
  std::uint64_t rng_counter = 0;
};

namespace detail {

inline bool all_finite(const GradMap& grads) {
  for (const auto& [name, g] : grads)
    for (double v : g)
      if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace detail

// Trains `model` in place on the training split and returns it with the
// objective trace. The caller owns initialization, so reductions that copy
// parameters between models see identical starting points.
inline TrainResult train_model(MultimodalModel model, const MultimodalDataset& data,
                               TrainOptions opt) {
  const int m_count = model.config.n_modalities();
  check_model_dataset(model, data);
  opt.validate(m_count);
  if (opt.modality_stream_ids.empty())
    for (int m = 0; m < m_count; ++m)
      opt.modality_stream_ids.push_back(static_cast<std::uint64_t>(m));

  RngStream run = RngStream(opt.seed).split("train");
  std::vector<AdamState> enc_opt, dec_opt;
  for (int m = 0; m < m_count; ++m) {
    enc_opt.emplace_back(model.encoders[m], opt.adam);
    dec_opt.emplace_back(model.decoders[m], opt.adam);
  }

  TrainResult result;
  const int n = data.n();
  int step = 0;
  int last_logged = -1;
  bool stopped = false;

  for (int epoch = 0; epoch < opt.epochs && !stopped; ++epoch) {
    std::vector<std::size_t> order =
        run.split("shuffle").split(static_cast<std::uint64_t>(epoch)).permutation(
            static_cast<std::size_t>(n));
    for (int start = 0; start < n && !stopped; start += opt.batch_size, ++step) {
      const int b = std::min(opt.batch_size, n - start);
      std::vector<std::vector<double>> blocks(static_cast<std::size_t>(m_count));
      for (int m = 0; m < m_count; ++m) {
        const int d = data.dims[m];
        blocks[m].resize(static_cast<std::size_t>(b) * d);
        for (int i = 0; i < b; ++i) {
          auto row = data.row(m, static_cast<int>(order[start + i]));
          std::copy(row.begin(), row.end(), blocks[m].begin() + static_cast<std::size_t>(i) * d);
        }
      }

      ad::Tape t;
      BoundModel bound = bind_model(t, model);
      std::vector<ad::Value> x = bind_batch(t, model, blocks, b);
      ObjectiveNodes nodes;
      if (opt.deterministic_ae) {
        nodes = build_ae_objective(t, model, bound, x);
      } else {
        NoiseSource noise = make_stream_noise(
            run.split("eps").split(static_cast<std::uint64_t>(step)), opt.modality_stream_ids);
        nodes = build_objective(t, model, bound, x, opt.beta, noise);
      }
      t.backward(t.neg(nodes.total));
      ObjectiveBreakdown breakdown = read_breakdown(t, nodes, opt.beta);
      GradMap grads = collect_model_grads(t, model, bound);
      if (!std::isfinite(breakdown.total) || !detail::all_finite(grads)) {
        result.diverged = true;
        stopped = true;
        break;
      }

      if (opt.log_interval > 0 && step % opt.log_interval == 0) {
        result.trace.push_back(
            {epoch, step, breakdown.total, breakdown.recon_total, breakdown.rate});
        last_logged = step;
      }

      for (int m = 0; m < m_count; ++m) {
        GradMap eg, dg;
        const std::string ep = "enc" + std::to_string(m) + "/";
        const std::string dp = "dec" + std::to_string(m) + "/";
        for (auto& [name, g] : grads) {
          if (name.rfind(ep, 0) == 0) eg[name.substr(ep.size())] = std::move(g);
          else if (name.rfind(dp, 0) == 0) dg[name.substr(dp.size())] = std::move(g);
        }
        enc_opt[m].step(model.encoders[m], eg);
        dec_opt[m].step(model.decoders[m], dg);
      }
      result.steps = step + 1;
      const int total_steps = opt.epochs * ((n + opt.batch_size - 1) / opt.batch_size);
      if (step + 1 == total_steps && last_logged != step)
        result.trace.push_back(
            {epoch, step, breakdown.total, breakdown.recon_total, breakdown.rate});
    }
    if (!stopped) result.epochs_completed = epoch + 1;
  }

  result.rng_key = run.key();
  result.rng_counter = run.counter();
  result.model = std::move(model);
  return result;
}

// Mean objective over the whole split at fixed parameters, averaged over
// `n_noise` independent noise draws; the standard error quantifies the
// Monte-Carlo uncertainty of the estimate.
struct ObjectiveEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::vector<double> draws;
};

inline ObjectiveEstimate estimate_objective(const MultimodalModel& model,
                                            const MultimodalDataset& data, double beta,
                                            std::uint64_t seed, int n_noise,
                                            bool deterministic_ae = false,
                                            int batch_size = 256) {
  require(n_noise >= 1, "estimate: need at least one noise draw");
  const int m_count = model.config.n_modalities();
  std::vector<std::uint64_t> ids;
  for (int m = 0; m < m_count; ++m) ids.push_back(static_cast<std::uint64_t>(m));
  RngStream root = RngStream(seed).split("estimate");

  ObjectiveEstimate est;
  const int n = data.n();
  for (int draw = 0; draw < n_noise; ++draw) {
    double acc = 0.0;
    int chunk_index = 0;
    for (int start = 0; start < n; start += batch_size, ++chunk_index) {
      const int b = std::min(batch_size, n - start);
      std::vector<std::vector<double>> blocks(static_cast<std::size_t>(m_count));
      for (int m = 0; m < m_count; ++m) {
        const int d = data.dims[m];
        blocks[m].assign(data.features[m].begin() + static_cast<std::size_t>(start) * d,
                         data.features[m].begin() + static_cast<std::size_t>(start + b) * d);
      }
      ad::Tape t;
      BoundModel bound = bind_model(t, model);
      std::vector<ad::Value> x = bind_batch(t, model, blocks, b);
      ObjectiveNodes nodes;
      if (deterministic_ae) {
        nodes = build_ae_objective(t, model, bound, x);
      } else {
        NoiseSource noise = make_stream_noise(
            root.split(static_cast<std::uint64_t>(draw)).split(static_cast<std::uint64_t>(chunk_index)),
            ids);
        nodes = build_objective(t, model, bound, x, beta, noise);
      }
      acc += t.scalar_value(nodes.total) * b;
    }
    est.draws.push_back(acc / n);
    if (deterministic_ae) break;  // noise-free: one pass suffices
  }
  double sum = 0.0;
  for (double v : est.draws) sum += v;
  est.mean = sum / est.draws.size();
  if (est.draws.size() > 1) {
    double sq = 0.0;
    for (double v : est.draws) sq += (v - est.mean) * (v - est.mean);
    est.std_error = std::sqrt(sq / (est.draws.size() - 1.0) / est.draws.size());
  }
  return est;
}

}  // namespace mmvae
