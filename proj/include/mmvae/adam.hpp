#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mmvae/errors.hpp"
#include "mmvae/parameters.hpp"

namespace mmvae {

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment accumulators, one pair per parameter entry.
class AdamState {
 public:
  AdamState() = default;
  AdamState(const ParameterSet& params, AdamConfig cfg) : cfg_(cfg) {
    for (const auto& e : params.entries()) {
      m_[e.name].assign(e.value.size(), 0.0);
      v_[e.name].assign(e.value.size(), 0.0);
    }
  }

  // One bias-corrected descent step in place. Gradient keys must exactly match
  // the parameter entries this state was built for.
  void step(ParameterSet& params, const GradMap& grads) {
    require(m_.size() == grads.size() && params.count() == grads.size(),
            "adam: gradient keys do not match parameter set");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (auto& e : params.entries()) {
      auto git = grads.find(e.name);
      require(git != grads.end(), "adam: missing gradient for " + e.name);
      const std::vector<double>& g = git->second;
      require(g.size() == e.value.size(), "adam: gradient size mismatch for " + e.name);
      std::vector<double>& m = m_.at(e.name);
      std::vector<double>& v = v_.at(e.name);
      for (std::size_t i = 0; i < g.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mh = m[i] / bc1;
        const double vh = v[i] / bc2;
        e.value[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
      }
    }
  }

  long step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

}  // namespace mmvae
