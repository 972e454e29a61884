#pragma once

// Checkpoint container: magic "MMCK1", a u32-length-prefixed UTF-8 JSON
// header, then named float64 parameter arrays, little-endian, concatenated in
// the order the header declares. Round-trips byte-exactly.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmvae/io.hpp"
#include "mmvae/model.hpp"

namespace mmvae {

inline constexpr const char* kCheckpointMagic = "MMCK1";
inline constexpr int kCheckpointVersion = 1;

struct CheckpointMeta {
  double beta = 1.0;
  std::uint64_t seed = 0;
  int epoch = 0;
  std::uint64_t rng_key = 0;
  std::uint64_t rng_counter = 0;
};

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json liks = nlohmann::json::array();
  for (const auto& lik : cfg.likelihoods)
    liks.push_back({{"family", to_string(lik.family)}, {"scale", lik.scale}});
  return nlohmann::json{{"input_dims", cfg.input_dims},
                        {"latent_dim", cfg.latent_dim},
                        {"hidden_widths", cfg.hidden_widths},
                        {"activation", to_string(cfg.activation)},
                        {"likelihoods", liks},
                        {"strategy", to_string(cfg.strategy)},
                        {"stop_prior_gradient", cfg.stop_prior_gradient},
                        {"poe_prior_expert", cfg.poe_prior_expert}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig cfg;
    cfg.input_dims = j.at("input_dims").get<std::vector<int>>();
    cfg.latent_dim = j.at("latent_dim").get<int>();
    cfg.hidden_widths = j.at("hidden_widths").get<std::vector<int>>();
    cfg.activation = activation_from_string(j.at("activation").get<std::string>());
    for (const auto& jl : j.at("likelihoods")) {
      LikelihoodSpec lik;
      lik.family = likelihood_family_from_string(jl.at("family").get<std::string>());
      lik.scale = jl.at("scale").get<double>();
      cfg.likelihoods.push_back(lik);
    }
    cfg.strategy = strategy_from_string(j.at("strategy").get<std::string>());
    cfg.stop_prior_gradient = j.value("stop_prior_gradient", false);
    cfg.poe_prior_expert = j.value("poe_prior_expert", true);
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config json: ") + e.what());
  }
}

inline std::string array_name(const char* kind, int m, const std::string& entry) {
  return std::string(kind) + std::to_string(m) + "/" + entry;
}

inline void save_checkpoint(const std::filesystem::path& path, const MultimodalModel& model,
                            const CheckpointMeta& meta) {
  nlohmann::json arrays = nlohmann::json::array();
  auto declare = [&](const char* kind, int m, const ParameterSet& params) {
    for (const auto& e : params.entries())
      arrays.push_back({{"name", array_name(kind, m, e.name)}, {"shape", e.shape}});
  };
  for (int m = 0; m < model.config.n_modalities(); ++m) {
    declare("enc", m, model.encoders[m]);
    declare("dec", m, model.decoders[m]);
  }
  nlohmann::json header{{"format_version", kCheckpointVersion},
                        {"config", model_config_to_json(model.config)},
                        {"beta", meta.beta},
                        {"seed", meta.seed},
                        {"epoch", meta.epoch},
                        {"rng_state",
                         {{"key", hex64(meta.rng_key)}, {"counter", hex64(meta.rng_counter)}}},
                        {"init_scheme", kInitScheme},
                        {"arrays", arrays}};
  const std::string header_str = header.dump();

  ByteWriter w;
  w.str(kCheckpointMagic);
  w.u32(static_cast<std::uint32_t>(header_str.size()));
  w.str(header_str);
  for (int m = 0; m < model.config.n_modalities(); ++m) {
    for (const auto& e : model.encoders[m].entries())
      for (double v : e.value) w.f64(v);
    for (const auto& e : model.decoders[m].entries())
      for (double v : e.value) w.f64(v);
  }
  write_file_bytes(path, w.data());
}

struct LoadedCheckpoint {
  MultimodalModel model;
  CheckpointMeta meta;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  r.expect_magic(kCheckpointMagic);
  const std::uint32_t header_len = r.u32("header length");
  const std::size_t header_at = r.offset();
  const std::string header_str = r.str(header_len, "json header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid json: ") + e.what(),
                      header_at);
  }

  LoadedCheckpoint out;
  try {
    const int version = header.at("format_version").get<int>();
    if (version != kCheckpointVersion)
      throw FormatError("unsupported checkpoint format_version " + std::to_string(version),
                        header_at);
    out.model.config = model_config_from_json(header.at("config"));
    out.meta.beta = header.at("beta").get<double>();
    out.meta.seed = header.at("seed").get<std::uint64_t>();
    out.meta.epoch = header.at("epoch").get<int>();
    out.meta.rng_key = parse_hex64(header.at("rng_state").at("key").get<std::string>(), "rng key");
    out.meta.rng_counter =
        parse_hex64(header.at("rng_state").at("counter").get<std::string>(), "rng counter");

    // Arrays must arrive in the declared order with the declared shapes.
    std::size_t next = 0;
    const auto& arrays = header.at("arrays");
    auto take = [&](const char* kind, int m, ParameterSet& params, const MlpSpec& spec) {
      check_mlp_shapes(params, spec, std::string(kind) + std::to_string(m));
      for (auto& e : params.entries()) {
        if (next >= arrays.size())
          throw FormatError("checkpoint declares fewer arrays than the model needs",
                            r.offset());
        const auto& decl = arrays[next++];
        const std::string want = array_name(kind, m, e.name);
        if (decl.at("name").get<std::string>() != want)
          throw FormatError("checkpoint array order mismatch: expected " + want + ", found " +
                                decl.at("name").get<std::string>(),
                            r.offset());
        if (decl.at("shape").get<std::vector<int>>() != e.shape)
          throw FormatError("checkpoint array shape mismatch for " + want, r.offset());
        for (auto& v : e.value) v = r.f64(want.c_str());
      }
    };
    for (int m = 0; m < out.model.config.n_modalities(); ++m) {
      out.model.encoders.push_back(ParameterSet());
      out.model.decoders.push_back(ParameterSet());
      MlpSpec enc_spec = out.model.config.encoder_spec(m);
      MlpSpec dec_spec = out.model.config.decoder_spec(m);
      for (int l = 0; l < enc_spec.layers(); ++l) {
        out.model.encoders[m].add(weight_name(l), {enc_spec.widths[l + 1], enc_spec.widths[l]});
        out.model.encoders[m].add(bias_name(l), {enc_spec.widths[l + 1]});
      }
      for (int l = 0; l < dec_spec.layers(); ++l) {
        out.model.decoders[m].add(weight_name(l), {dec_spec.widths[l + 1], dec_spec.widths[l]});
        out.model.decoders[m].add(bias_name(l), {dec_spec.widths[l + 1]});
      }
      take("enc", m, out.model.encoders[m], enc_spec);
      take("dec", m, out.model.decoders[m], dec_spec);
    }
    if (next != arrays.size())
      throw FormatError("checkpoint declares more arrays than the model needs", r.offset());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header field error: ") + e.what(), header_at);
  }
  if (r.remaining() != 0)
    throw FormatError("trailing bytes after checkpoint payload", r.offset());
  return out;
}

}  // namespace mmvae
