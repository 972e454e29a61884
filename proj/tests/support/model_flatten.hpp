#pragma once

// Flattens all model parameters into one ParameterSet keyed the same way
// collect_model_grads keys gradients, so finite-difference checks can sweep
// the whole model at once.

#include <string>

#include "mmvae/model.hpp"

namespace mmvae::testsupport {

inline ParameterSet flatten_model(const MultimodalModel& model) {
  ParameterSet flat;
  for (int m = 0; m < model.config.n_modalities(); ++m) {
    for (const auto& e : model.encoders[m].entries())
      flat.add("enc" + std::to_string(m) + "/" + e.name, e.shape, e.value);
    for (const auto& e : model.decoders[m].entries())
      flat.add("dec" + std::to_string(m) + "/" + e.name, e.shape, e.value);
  }
  return flat;
}

inline MultimodalModel unflatten_model(ModelConfig config, const ParameterSet& flat) {
  MultimodalModel model = init_model(std::move(config), 0);
  for (int m = 0; m < model.config.n_modalities(); ++m) {
    for (auto& e : model.encoders[m].entries())
      e.value = flat.at("enc" + std::to_string(m) + "/" + e.name).value;
    for (auto& e : model.decoders[m].entries())
      e.value = flat.at("dec" + std::to_string(m) + "/" + e.name).value;
  }
  return model;
}

}  // namespace mmvae::testsupport
