#pragma once

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mmvae/errors.hpp"
#include "mmvae/parameters.hpp"
#include "mmvae/rng.hpp"
#include "mmvae/tape.hpp"

namespace mmvae {

enum class Activation { kRelu, kTanh, kIdentity };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::kRelu: return "relu";
    case Activation::kTanh: return "tanh";
    case Activation::kIdentity: return "identity";
  }
  throw ContractError("activation: bad enum value");
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "tanh") return Activation::kTanh;
  if (s == "identity") return Activation::kIdentity;
  throw ConfigError("activation: unknown tag '" + s + "' (expected relu|tanh|identity)");
}

// Fully connected stack: widths[0] inputs -> ... -> widths.back() outputs.
// Hidden layers apply `hidden` activation; the output layer is linear.
// Parameters are named W0/b0, W1/b1, ... with W shaped (out, in).
struct MlpSpec {
  std::vector<int> widths;
  Activation hidden = Activation::kRelu;

  int layers() const { return static_cast<int>(widths.size()) - 1; }
  int in_dim() const { return widths.front(); }
  int out_dim() const { return widths.back(); }

  void validate() const {
    require(widths.size() >= 2, "mlp: spec needs at least input and output widths");
    for (std::size_t i = 0; i < widths.size(); ++i)
      require(widths[i] > 0, "mlp: width " + std::to_string(i) + " must be positive");
  }
};

inline std::string weight_name(int layer) { return "W" + std::to_string(layer); }
inline std::string bias_name(int layer) { return "b" + std::to_string(layer); }

// Kaiming-style fan-in uniform weights, zero biases. The final
// `zero_tail_rows` rows of the last layer (weights and bias) are zeroed; the
// encoder uses this for the logvar head so initial stddev is exactly 1.
inline ParameterSet init_mlp(const MlpSpec& spec, RngStream rng, int zero_tail_rows = 0) {
  spec.validate();
  ParameterSet params;
  for (int l = 0; l < spec.layers(); ++l) {
    const int in = spec.widths[l];
    const int out = spec.widths[l + 1];
    RngStream layer_rng = rng.split("layer").split(static_cast<std::uint64_t>(l));
    const double bound = std::sqrt(6.0 / in);
    std::vector<double> w(static_cast<std::size_t>(out) * in);
    for (auto& x : w) x = (2.0 * layer_rng.uniform() - 1.0) * bound;
    if (l == spec.layers() - 1 && zero_tail_rows > 0) {
      require(zero_tail_rows <= out, "mlp: zero_tail_rows exceeds output width");
      for (int r = out - zero_tail_rows; r < out; ++r)
        for (int c = 0; c < in; ++c) w[static_cast<std::size_t>(r) * in + c] = 0.0;
    }
    params.add(weight_name(l), {out, in}, std::move(w));
    params.add(bias_name(l), {out});
  }
  return params;
}

inline void check_mlp_shapes(const ParameterSet& params, const MlpSpec& spec,
                             const std::string& who) {
  spec.validate();
  for (int l = 0; l < spec.layers(); ++l) {
    const auto& w = params.at(weight_name(l));
    const auto& b = params.at(bias_name(l));
    if (w.shape != std::vector<int>{spec.widths[l + 1], spec.widths[l]} ||
        b.shape != std::vector<int>{spec.widths[l + 1]})
      throw ConfigError("mlp: " + who + " layer " + std::to_string(l) +
                        " parameter shapes do not match spec widths " +
                        std::to_string(spec.widths[l]) + "->" + std::to_string(spec.widths[l + 1]));
  }
}

// Forward pass without a tape; used by evaluation paths.
inline std::vector<double> mlp_forward(const ParameterSet& params, const MlpSpec& spec,
                                       std::span<const double> input) {
  check_mlp_shapes(params, spec, "forward");
  require(static_cast<int>(input.size()) == spec.in_dim(),
          "mlp: input size " + std::to_string(input.size()) + " does not match spec in_dim " +
              std::to_string(spec.in_dim()));
  std::vector<double> cur(input.begin(), input.end());
  for (int l = 0; l < spec.layers(); ++l) {
    const auto& w = params.at(weight_name(l)).value;
    const auto& b = params.at(bias_name(l)).value;
    const int in = spec.widths[l];
    const int out = spec.widths[l + 1];
    std::vector<double> next(out);
    for (int o = 0; o < out; ++o) {
      double acc = b[o];
      const double* wr = w.data() + static_cast<std::size_t>(o) * in;
      for (int i = 0; i < in; ++i) acc += wr[i] * cur[i];
      next[o] = acc;
    }
    if (l + 1 < spec.layers()) {
      switch (spec.hidden) {
        case Activation::kRelu:
          for (auto& x : next) x = x > 0.0 ? x : 0.0;
          break;
        case Activation::kTanh:
          for (auto& x : next) x = std::tanh(x);
          break;
        case Activation::kIdentity:
          break;
      }
    }
    cur = std::move(next);
  }
  return cur;
}

// Tape leaves for one ParameterSet, keyed by entry name.
struct BoundParams {
  std::map<std::string, ad::Value> leaves;

  ad::Value at(const std::string& name) const {
    auto it = leaves.find(name);
    require(it != leaves.end(), "bound params: unknown name " + name);
    return it->second;
  }
};

inline BoundParams bind(ad::Tape& tape, const ParameterSet& params) {
  BoundParams bound;
  for (const auto& e : params.entries()) {
    int rows = e.shape.size() == 2 ? e.shape[0] : 1;
    int cols = e.shape.size() == 2 ? e.shape[1] : e.shape[0];
    bound.leaves.emplace(e.name, tape.leaf(rows, cols, e.value));
  }
  return bound;
}

// Gradients of every bound leaf after tape.backward(); zero-filled when a leaf
// does not influence the differentiated scalar.
inline GradMap collect_grads(ad::Tape& tape, const BoundParams& bound) {
  GradMap grads;
  for (const auto& [name, leaf] : bound.leaves) {
    const std::vector<double>& g = tape.grad(leaf);
    grads[name] = g.empty() ? std::vector<double>(tape.value(leaf).size(), 0.0) : g;
  }
  return grads;
}

// Batched forward on the tape; input is (batch, in_dim).
inline ad::Value mlp_forward(ad::Tape& tape, const BoundParams& bound, const MlpSpec& spec,
                             ad::Value input) {
  spec.validate();
  require(tape.cols(input) == spec.in_dim(),
          "mlp: input cols " + std::to_string(tape.cols(input)) +
              " does not match spec in_dim " + std::to_string(spec.in_dim()));
  ad::Value cur = input;
  for (int l = 0; l < spec.layers(); ++l) {
    cur = tape.bias_add(tape.linear(cur, bound.at(weight_name(l))), bound.at(bias_name(l)));
    if (l + 1 < spec.layers()) {
      switch (spec.hidden) {
        case Activation::kRelu: cur = tape.relu(cur); break;
        case Activation::kTanh: cur = tape.tanh_(cur); break;
        case Activation::kIdentity: break;
      }
    }
  }
  return cur;
}

}  // namespace mmvae
