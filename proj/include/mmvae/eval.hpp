#pragma once

// Evaluation protocol: unimodal latent classification with a linear probe,
// conditional-generation coherence judged by a per-modality MLP oracle, and
// reconstruction MSE under each strategy's standard reconstruction path.
// Latent representations are posterior means; recorded in metrics metadata.

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmvae/adam.hpp"
#include "mmvae/data.hpp"
#include "mmvae/linear_classifier.hpp"
#include "mmvae/model.hpp"

namespace mmvae {

inline constexpr const char* kKlEstimatorTag = "plugin_shared_sample";
inline constexpr int kNumRateSamples = 1;
inline constexpr const char* kRepresentationTag = "posterior_mean";

inline constexpr double kOracleAccuracyGate = 0.98;
inline constexpr int kOracleHiddenWidth = 128;
inline constexpr int kOracleMaxEpochs = 150;
inline constexpr int kOracleBatch = 256;
inline constexpr double kOracleLr = 1e-3;
inline constexpr const char* kOracleMagic = "MMCO1";

inline void check_model_dataset(const MultimodalModel& model, const MultimodalDataset& ds) {
  auto shape = [](const std::vector<int>& dims) {
    std::string s = "[";
    for (std::size_t i = 0; i < dims.size(); ++i)
      s += (i ? "," : "") + std::to_string(dims[i]);
    return s + "]";
  };
  if (model.config.input_dims != ds.dims)
    throw ConfigError("model/dataset dimension mismatch: model expects " +
                      shape(model.config.input_dims) + ", dataset provides " + shape(ds.dims));
}

// Per-modality classifier trained on raw features; a coherence judgment is
// only trusted if the judge reaches the accuracy gate on held-out originals.
struct CoherenceOracle {
  int classes = 0;
  std::vector<int> dims;
  std::vector<ParameterSet> params;
  std::vector<double> test_accuracy;

  MlpSpec spec(int m) const {
    return MlpSpec{{dims[static_cast<std::size_t>(m)], kOracleHiddenWidth, kOracleHiddenWidth,
                    classes},
                   Activation::kRelu};
  }

  int predict(int m, std::span<const double> x) const {
    std::vector<double> logits = mlp_forward(params[static_cast<std::size_t>(m)], spec(m), x);
    int best = 0;
    for (int c = 1; c < classes; ++c)
      if (logits[c] > logits[best]) best = c;
    return best;
  }

  double accuracy(int m, const MultimodalDataset& ds) const {
    int hits = 0;
    for (int i = 0; i < ds.n(); ++i)
      if (predict(m, ds.row(m, i)) == ds.labels[i]) ++hits;
    return static_cast<double>(hits) / ds.n();
  }
};

// Content hash covering everything that affects training and judging.
// Features are hashed at storage precision so the hash survives a
// save/load round trip of the dataset file.
inline std::uint64_t dataset_content_hash(const MultimodalDataset& ds) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(ds.modalities()));
  w.u32(static_cast<std::uint32_t>(ds.class_count));
  w.u32(static_cast<std::uint32_t>(ds.n()));
  for (int d : ds.dims) w.u32(static_cast<std::uint32_t>(d));
  for (std::uint16_t label : ds.labels) w.u16(label);
  for (const auto& block : ds.features)
    for (double v : block) w.f32(static_cast<float>(v));
  return fnv1a_bytes(w.data());
}

inline std::uint64_t dataset_pair_hash(const MultimodalDataset& train,
                                       const MultimodalDataset& test) {
  ByteWriter w;
  w.u32(0x4d4d4f31u);
  for (std::uint64_t h : {dataset_content_hash(train), dataset_content_hash(test)}) {
    w.u32(static_cast<std::uint32_t>(h));
    w.u32(static_cast<std::uint32_t>(h >> 32));
  }
  return fnv1a_bytes(w.data());
}

inline CoherenceOracle train_coherence_oracle(const MultimodalDataset& train,
                                              const MultimodalDataset& test, std::uint64_t seed,
                                              int max_epochs = kOracleMaxEpochs) {
  train.validate();
  test.validate();
  require(train.dims == test.dims && train.class_count == test.class_count,
          "oracle: train and test splits disagree on shape");
  require(max_epochs >= 1, "oracle: need at least one epoch");

  CoherenceOracle oracle;
  oracle.classes = train.class_count;
  oracle.dims = train.dims;
  RngStream root(seed);

  for (int m = 0; m < train.modalities(); ++m) {
    const MlpSpec spec = oracle.spec(m);
    RngStream mod = root.split("oracle").split(static_cast<std::uint64_t>(m));
    ParameterSet params = init_mlp(spec, mod.split("init"));
    AdamConfig adam_cfg;
    adam_cfg.lr = kOracleLr;
    AdamState adam(params, adam_cfg);
    const int n = train.n();
    const int d = train.dims[m];

    for (int epoch = 0; epoch < max_epochs; ++epoch) {
      RngStream shuffle = mod.split("shuffle").split(static_cast<std::uint64_t>(epoch));
      std::vector<std::size_t> order = shuffle.permutation(static_cast<std::size_t>(n));
      for (int start = 0; start < n; start += kOracleBatch) {
        const int b = std::min(kOracleBatch, n - start);
        std::vector<double> block(static_cast<std::size_t>(b) * d);
        std::vector<int> labels(static_cast<std::size_t>(b));
        for (int i = 0; i < b; ++i) {
          auto row = train.row(m, static_cast<int>(order[start + i]));
          std::copy(row.begin(), row.end(), block.begin() + static_cast<std::size_t>(i) * d);
          labels[i] = train.labels[order[start + i]];
        }
        ad::Tape t;
        BoundParams bound = bind(t, params);
        ad::Value x = t.constant(b, d, block);
        ad::Value logits = mlp_forward(t, bound, spec, x);
        ad::Value loss = t.mean_all(t.xent_rows(logits, labels));
        t.backward(loss);
        adam.step(params, collect_grads(t, bound));
      }
      // Deterministic early exit once the training split is fully fit.
      if (epoch >= 9 && (epoch + 1) % 5 == 0) {
        oracle.params.resize(static_cast<std::size_t>(m) + 1);
        oracle.params[m] = params;
        if (oracle.accuracy(m, train) == 1.0) break;
      }
    }
    oracle.params.resize(static_cast<std::size_t>(m) + 1);
    oracle.params[m] = params;
    oracle.test_accuracy.push_back(oracle.accuracy(m, test));
  }
  return oracle;
}

inline void require_oracle_valid(const CoherenceOracle& oracle) {
  for (std::size_t m = 0; m < oracle.test_accuracy.size(); ++m)
    if (oracle.test_accuracy[m] < kOracleAccuracyGate) {
      std::ostringstream msg;
      msg << "coherence oracle for modality " << m << " reached "
          << std::setprecision(4) << oracle.test_accuracy[m]
          << " test accuracy, below the " << kOracleAccuracyGate << " gate";
      throw ConfigError(msg.str());
    }
}

inline void save_oracle(const std::filesystem::path& path, const CoherenceOracle& oracle) {
  nlohmann::json arrays = nlohmann::json::array();
  for (std::size_t m = 0; m < oracle.params.size(); ++m)
    for (const auto& e : oracle.params[m].entries())
      arrays.push_back(
          {{"name", "m" + std::to_string(m) + "/" + e.name}, {"shape", e.shape}});
  nlohmann::json header{{"format_version", 1},
                        {"classes", oracle.classes},
                        {"dims", oracle.dims},
                        {"test_accuracy", oracle.test_accuracy},
                        {"arrays", arrays}};
  const std::string header_str = header.dump();
  ByteWriter w;
  w.str(kOracleMagic);
  w.u32(static_cast<std::uint32_t>(header_str.size()));
  w.str(header_str);
  for (const auto& params : oracle.params)
    for (const auto& e : params.entries())
      for (double v : e.value) w.f64(v);
  write_file_bytes(path, w.data());
}

inline CoherenceOracle load_oracle(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  r.expect_magic(kOracleMagic);
  const std::uint32_t header_len = r.u32("header length");
  const std::size_t header_at = r.offset();
  const std::string header_str = r.str(header_len, "json header");
  CoherenceOracle oracle;
  try {
    nlohmann::json header = nlohmann::json::parse(header_str);
    if (header.at("format_version").get<int>() != 1)
      throw FormatError("unsupported oracle format_version", header_at);
    oracle.classes = header.at("classes").get<int>();
    oracle.dims = header.at("dims").get<std::vector<int>>();
    oracle.test_accuracy = header.at("test_accuracy").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("oracle header error: ") + e.what(), header_at);
  }
  for (int m = 0; m < static_cast<int>(oracle.dims.size()); ++m) {
    const MlpSpec spec = oracle.spec(m);
    ParameterSet params;
    for (int l = 0; l < spec.layers(); ++l) {
      params.add(weight_name(l), {spec.widths[l + 1], spec.widths[l]});
      params.add(bias_name(l), {spec.widths[l + 1]});
    }
    for (auto& e : params.entries())
      for (auto& v : e.value) v = r.f64("oracle parameters");
    oracle.params.push_back(std::move(params));
  }
  if (r.remaining() != 0)
    throw FormatError("trailing bytes after oracle payload", r.offset());
  return oracle;
}

// Fit a probe on training-split posterior means per modality, score on the
// test split. Aggregated strategies are still probed unimodally.
inline std::vector<double> latent_accuracy(const MultimodalModel& model,
                                           const MultimodalDataset& train,
                                           const MultimodalDataset& test, std::uint64_t seed) {
  check_model_dataset(model, train);
  check_model_dataset(model, test);
  const int d = model.config.latent_dim;
  std::vector<double> acc;
  for (int m = 0; m < model.config.n_modalities(); ++m) {
    std::vector<double> z_train(static_cast<std::size_t>(train.n()) * d);
    for (int i = 0; i < train.n(); ++i) {
      DiagonalGaussian q = encode(model, m, train.row(m, i));
      std::copy(q.mean.begin(), q.mean.end(), z_train.begin() + static_cast<std::size_t>(i) * d);
    }
    std::vector<double> z_test(static_cast<std::size_t>(test.n()) * d);
    for (int i = 0; i < test.n(); ++i) {
      DiagonalGaussian q = encode(model, m, test.row(m, i));
      std::copy(q.mean.begin(), q.mean.end(), z_test.begin() + static_cast<std::size_t>(i) * d);
    }
    LinearClassifier probe = fit_linear_classifier(
        z_train, train.labels, d, train.class_count,
        RngStream(seed).split("probe").split(static_cast<std::uint64_t>(m)).key());
    acc.push_back(classifier_accuracy(probe, z_test, test.labels));
  }
  return acc;
}

// coherence[source][target]: fraction of test samples whose conditional
// generation source -> target the target's oracle assigns to the true class.
// One latent draw per source sample, shared across targets.
inline std::vector<std::vector<double>> coherence_matrix(const MultimodalModel& model,
                                                         const MultimodalDataset& test,
                                                         const CoherenceOracle& oracle,
                                                         RngStream rng,
                                                         bool deterministic = false) {
  check_model_dataset(model, test);
  require(oracle.dims == test.dims && oracle.classes == test.class_count,
          "coherence: oracle was trained on a differently shaped dataset");
  require_oracle_valid(oracle);

  const int m_count = model.config.n_modalities();
  std::vector<std::vector<double>> matrix(
      static_cast<std::size_t>(m_count),
      std::vector<double>(static_cast<std::size_t>(m_count), 0.0));
  for (int from = 0; from < m_count; ++from) {
    RngStream source_rng = rng.split(static_cast<std::uint64_t>(from));
    std::vector<int> hits(static_cast<std::size_t>(m_count), 0);
    for (int i = 0; i < test.n(); ++i) {
      DiagonalGaussian q = encode(model, from, test.row(from, i));
      RngStream sample_rng = source_rng.split(static_cast<std::uint64_t>(i));
      std::vector<double> z = deterministic ? q.mean : sample_reparam(q, sample_rng);
      for (int to = 0; to < m_count; ++to) {
        std::vector<double> loc = decode(model, to, z);
        if (oracle.predict(to, loc) == test.labels[i]) ++hits[to];
      }
    }
    for (int to = 0; to < m_count; ++to)
      matrix[from][to] = static_cast<double>(hits[to]) / test.n();
  }
  return matrix;
}

inline double offdiagonal_mean(const std::vector<std::vector<double>>& matrix) {
  double acc = 0.0;
  int count = 0;
  for (std::size_t i = 0; i < matrix.size(); ++i)
    for (std::size_t j = 0; j < matrix[i].size(); ++j)
      if (i != j) {
        acc += matrix[i][j];
        ++count;
      }
  return count == 0 ? 0.0 : acc / count;
}

struct ReconError {
  std::vector<double> per_modality;  // mean squared error per feature
  double total = 0.0;
};

// MSE between original features and decoded locations under the strategy's
// standard reconstruction path; mixture components contribute by weight.
inline ReconError reconstruction_error(const MultimodalModel& model,
                                       const MultimodalDataset& test, RngStream rng,
                                       bool deterministic = false) {
  check_model_dataset(model, test);
  const int m_count = model.config.n_modalities();
  ReconError err;
  err.per_modality.assign(static_cast<std::size_t>(m_count), 0.0);
  for (int i = 0; i < test.n(); ++i) {
    MultimodalSample x;
    for (int m = 0; m < m_count; ++m) {
      auto row = test.row(m, i);
      x.emplace_back(row.begin(), row.end());
    }
    RngStream sample_rng = rng.split(static_cast<std::uint64_t>(i));
    ReconResult r = reconstruct(model, x, sample_rng, deterministic);
    for (int m = 0; m < m_count; ++m) {
      double acc = 0.0;
      for (const auto& comp : r.per_modality[m]) {
        double sq = 0.0;
        for (std::size_t j = 0; j < comp.location.size(); ++j) {
          const double d = comp.location[j] - x[m][j];
          sq += d * d;
        }
        acc += comp.weight * sq / static_cast<double>(test.dims[m]);
      }
      err.per_modality[m] += acc;
    }
  }
  for (int m = 0; m < m_count; ++m) {
    err.per_modality[m] /= test.n();
    err.total += err.per_modality[m];
  }
  return err;
}

struct TracePoint {
  int epoch = 0;
  int step = 0;
  double total = 0.0;
  double recon_total = 0.0;
  double rate = 0.0;
};

struct RunMetrics {
  std::string strategy;
  double beta = 0.0;
  std::uint64_t seed = 0;
  int epoch = 0;
  std::vector<double> recon;  // per-modality MSE
  double recon_total = 0.0;
  std::vector<double> latent_acc;
  double latent_acc_mean = 0.0;
  std::vector<std::vector<double>> coherence;
  double coherence_offdiag_mean = 0.0;
  std::vector<TracePoint> trace;
  nlohmann::json config_echo;
};

inline nlohmann::json metrics_to_json(const RunMetrics& m) {
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& p : m.trace)
    trace.push_back({{"epoch", p.epoch},
                     {"step", p.step},
                     {"total", p.total},
                     {"recon_total", p.recon_total},
                     {"rate", p.rate}});
  return nlohmann::json{{"strategy", m.strategy},
                        {"beta", m.beta},
                        {"seed", m.seed},
                        {"epoch", m.epoch},
                        {"recon", m.recon},
                        {"recon_total", m.recon_total},
                        {"latent_acc", m.latent_acc},
                        {"latent_acc_mean", m.latent_acc_mean},
                        {"coherence", m.coherence},
                        {"coherence_offdiag_mean", m.coherence_offdiag_mean},
                        {"metadata",
                         {{"kl_estimator", kKlEstimatorTag},
                          {"n_rate_samples", kNumRateSamples},
                          {"representation", kRepresentationTag}}},
                        {"trace", trace},
                        {"config", m.config_echo}};
}

inline void save_metrics(const std::filesystem::path& path, const RunMetrics& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open file for writing: " + path.string());
  out << metrics_to_json(m).dump(2) << "\n";
  if (!out) throw ConfigError("short write to " + path.string());
}

inline std::string csv_number(double v) {
  std::ostringstream s;
  s << std::setprecision(12) << v;
  return s.str();
}

// Fixed column order; the matrix is flattened row-major.
inline std::string sweep_csv_header(int m_count) {
  std::string h = "strategy,beta,seed,epoch,recon_total";
  for (int m = 0; m < m_count; ++m) h += ",recon_m" + std::to_string(m);
  h += ",latent_acc_mean";
  for (int m = 0; m < m_count; ++m) h += ",latent_acc_m" + std::to_string(m);
  h += ",coherence_offdiag_mean";
  for (int i = 0; i < m_count; ++i)
    for (int j = 0; j < m_count; ++j)
      h += ",coh_" + std::to_string(i) + "_" + std::to_string(j);
  return h;
}

inline std::string sweep_csv_row(const RunMetrics& m) {
  std::string row = m.strategy + "," + csv_number(m.beta) + "," + std::to_string(m.seed) + "," +
                    std::to_string(m.epoch) + "," + csv_number(m.recon_total);
  for (double v : m.recon) row += "," + csv_number(v);
  row += "," + csv_number(m.latent_acc_mean);
  for (double v : m.latent_acc) row += "," + csv_number(v);
  row += "," + csv_number(m.coherence_offdiag_mean);
  for (const auto& r : m.coherence)
    for (double v : r) row += "," + csv_number(v);
  return row;
}

}  // namespace mmvae
