#pragma once

// Command-line surface: gen-data, train, eval, sweep. Config files are JSON,
// flags override file fields, and the merged effective config is echoed into
// every output so a run can be reproduced from its artifacts alone.
// Exit codes: 0 success, 2 config/validation error, 3 runtime/numeric error
// (training divergence included, after the last finite state is saved).

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mmvae/checkpoint.hpp"
#include "mmvae/data.hpp"
#include "mmvae/eval.hpp"
#include "mmvae/train.hpp"

namespace mmvae {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

// Paper-grid subsample: six powers of two spanning 2^-8 .. 2^3.
inline const std::vector<double>& default_beta_grid() {
  // Spans under-regularized through the posterior-alignment regime; the
  // shared-prior rate only overcomes the reconstruction gradient near the top.
  static const std::vector<double> grid = {0.015625, 0.0625, 0.25, 1.0, 8.0, 32.0};
  return grid;
}

// ---- JSON overlays: missing fields keep the base value -------------------

inline nlohmann::json synthetic_config_to_json(const SyntheticConfig& c) {
  return {{"modalities", c.modalities}, {"classes", c.classes},
          {"n_train", c.n_train},       {"n_test", c.n_test},
          {"dims", c.dims},             {"class_scale", c.class_scale},
          {"style_scale", c.style_scale}, {"noise_stddev", c.noise_stddev},
          {"seed", c.seed}};
}

inline SyntheticConfig synthetic_config_overlay(const nlohmann::json& j, SyntheticConfig base) {
  try {
    base.modalities = j.value("modalities", base.modalities);
    base.classes = j.value("classes", base.classes);
    base.n_train = j.value("n_train", base.n_train);
    base.n_test = j.value("n_test", base.n_test);
    base.dims = j.value("dims", base.dims);
    base.class_scale = j.value("class_scale", base.class_scale);
    base.style_scale = j.value("style_scale", base.style_scale);
    base.noise_stddev = j.value("noise_stddev", base.noise_stddev);
    base.seed = j.value("seed", base.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("data config: ") + e.what());
  }
  return base;
}

inline ModelConfig model_config_overlay(const nlohmann::json& j, ModelConfig base) {
  try {
    base.input_dims = j.value("input_dims", base.input_dims);
    base.latent_dim = j.value("latent_dim", base.latent_dim);
    base.hidden_widths = j.value("hidden_widths", base.hidden_widths);
    if (j.contains("activation"))
      base.activation = activation_from_string(j.at("activation").get<std::string>());
    if (j.contains("strategy"))
      base.strategy = strategy_from_string(j.at("strategy").get<std::string>());
    base.stop_prior_gradient = j.value("stop_prior_gradient", base.stop_prior_gradient);
    base.poe_prior_expert = j.value("poe_prior_expert", base.poe_prior_expert);
    if (j.contains("likelihoods")) {
      base.likelihoods.clear();
      for (const auto& lj : j.at("likelihoods")) {
        LikelihoodSpec spec;
        spec.family = likelihood_family_from_string(lj.at("family").get<std::string>());
        spec.scale = lj.value("scale", 1.0);
        base.likelihoods.push_back(spec);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return base;
}

inline nlohmann::json train_options_to_json(const TrainOptions& t) {
  return {{"epochs", t.epochs},       {"batch_size", t.batch_size},
          {"lr", t.adam.lr},          {"beta", t.beta},
          {"seed", t.seed},           {"log_interval", t.log_interval}};
}

inline TrainOptions train_options_overlay(const nlohmann::json& j, TrainOptions base) {
  try {
    base.epochs = j.value("epochs", base.epochs);
    base.batch_size = j.value("batch_size", base.batch_size);
    base.adam.lr = j.value("lr", base.adam.lr);
    base.beta = j.value("beta", base.beta);
    base.seed = j.value("seed", base.seed);
    base.log_interval = j.value("log_interval", base.log_interval);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return base;
}

inline nlohmann::json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open file for writing: " + path.string());
  out << j.dump(2) << "\n";
}

// ---- gen-data --------------------------------------------------------------

inline int cmd_gen_data(SyntheticConfig cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  DatasetPair pair = generate_synthetic(cfg);
  std::filesystem::create_directories(out_dir);
  save_dataset(out_dir / "train.mmds", pair.train);
  save_dataset(out_dir / "test.mmds", pair.test);
  nlohmann::json manifest{{"format", kDatasetMagic},
                          {"config", synthetic_config_to_json(cfg)},
                          {"files", {{"train", "train.mmds"}, {"test", "test.mmds"}}},
                          {"train_hash", hex64(dataset_content_hash(pair.train))},
                          {"test_hash", hex64(dataset_content_hash(pair.test))}};
  write_json_file(out_dir / "manifest.json", manifest);
  std::cout << "wrote " << (out_dir / "train.mmds").string() << " (" << pair.train.n()
            << " samples), " << (out_dir / "test.mmds").string() << " (" << pair.test.n()
            << " samples), manifest.json\n";
  return kExitOk;
}

// ---- train ----------------------------------------------------------------

struct TrainCommand {
  std::string data_dir;
  std::string out_dir = "run";
  ModelConfig model;
  TrainOptions train;
  // Flag-level likelihood override, broadcast to all modalities once the
  // dataset (and thus M) is known.
  std::optional<std::string> likelihood_family;
  std::optional<double> likelihood_scale;
};

inline nlohmann::json train_command_to_json(const TrainCommand& c) {
  return {{"data_dir", c.data_dir},
          {"out_dir", c.out_dir},
          {"model", model_config_to_json(c.model)},
          {"train", train_options_to_json(c.train)}};
}

inline TrainCommand train_command_overlay(const nlohmann::json& j, TrainCommand base) {
  try {
    base.data_dir = j.value("data_dir", base.data_dir);
    base.out_dir = j.value("out_dir", base.out_dir);
    if (j.contains("model")) base.model = model_config_overlay(j.at("model"), base.model);
    if (j.contains("train")) base.train = train_options_overlay(j.at("train"), base.train);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return base;
}

inline int cmd_train(TrainCommand cfg) {
  if (cfg.data_dir.empty()) throw ConfigError("train: --data directory is required");
  const std::filesystem::path data_dir(cfg.data_dir);
  MultimodalDataset train_split = load_dataset(data_dir / "train.mmds");
  if (!cfg.model.input_dims.empty() && cfg.model.input_dims != train_split.dims) {
    MultimodalModel shape_check;
    shape_check.config = cfg.model;
    check_model_dataset(shape_check, train_split);
  }
  cfg.model.input_dims = train_split.dims;
  if (cfg.likelihood_family || cfg.likelihood_scale) {
    LikelihoodSpec spec;
    if (!cfg.model.likelihoods.empty()) spec = cfg.model.likelihoods.front();
    if (cfg.likelihood_family)
      spec.family = likelihood_family_from_string(*cfg.likelihood_family);
    if (cfg.likelihood_scale) spec.scale = *cfg.likelihood_scale;
    cfg.model.likelihoods.assign(cfg.model.input_dims.size(), spec);
  }
  cfg.model.validate();
  cfg.train.validate(cfg.model.n_modalities());

  MultimodalModel model = init_model(cfg.model, cfg.train.seed);
  TrainResult result = train_model(std::move(model), train_split, cfg.train);

  const std::filesystem::path out_dir(cfg.out_dir);
  std::filesystem::create_directories(out_dir);
  CheckpointMeta meta;
  meta.beta = cfg.train.beta;
  meta.seed = cfg.train.seed;
  meta.epoch = result.epochs_completed;
  meta.rng_key = result.rng_key;
  meta.rng_counter = result.rng_counter;
  save_checkpoint(out_dir / "checkpoint.mmck", result.model, meta);

  RunMetrics metrics;
  metrics.strategy = to_string(cfg.model.strategy);
  metrics.beta = cfg.train.beta;
  metrics.seed = cfg.train.seed;
  metrics.epoch = result.epochs_completed;
  metrics.trace = result.trace;
  metrics.config_echo = train_command_to_json(cfg);
  save_metrics(out_dir / "metrics.json", metrics);

  if (result.diverged) {
    std::cerr << "training diverged after " << result.steps
              << " steps; last finite state saved to "
              << (out_dir / "checkpoint.mmck").string() << "\n";
    return kExitRuntime;
  }
  if (!result.trace.empty())
    std::cout << "trained " << metrics.strategy << " beta=" << cfg.train.beta << " seed="
              << cfg.train.seed << " epochs=" << result.epochs_completed
              << " final total=" << result.trace.back().total << "\n";
  std::cout << "wrote " << (out_dir / "checkpoint.mmck").string() << " and metrics.json\n";
  return kExitOk;
}

// ---- eval -----------------------------------------------------------------

struct EvalCommand {
  std::string checkpoint;
  std::string data_dir;
  std::string out_dir;       // defaults to the checkpoint's directory
  std::string csv;           // defaults to <out_dir>/sweep.csv
  std::string oracle_cache;  // defaults to <data_dir>/oracle_cache
  std::uint64_t eval_seed = 0;
  bool deterministic = false;
};

inline nlohmann::json eval_command_to_json(const EvalCommand& c) {
  return {{"checkpoint", c.checkpoint}, {"data_dir", c.data_dir},
          {"out_dir", c.out_dir},       {"csv", c.csv},
          {"oracle_cache", c.oracle_cache}, {"eval_seed", c.eval_seed},
          {"deterministic", c.deterministic}};
}

inline EvalCommand eval_command_overlay(const nlohmann::json& j, EvalCommand base) {
  try {
    base.checkpoint = j.value("checkpoint", base.checkpoint);
    base.data_dir = j.value("data_dir", base.data_dir);
    base.out_dir = j.value("out_dir", base.out_dir);
    base.csv = j.value("csv", base.csv);
    base.oracle_cache = j.value("oracle_cache", base.oracle_cache);
    base.eval_seed = j.value("eval_seed", base.eval_seed);
    base.deterministic = j.value("deterministic", base.deterministic);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("eval config: ") + e.what());
  }
  return base;
}

// Oracle cache keyed by the train/test content hash; a hit skips training.
inline CoherenceOracle load_or_train_oracle(const MultimodalDataset& train,
                                            const MultimodalDataset& test,
                                            const std::filesystem::path& cache_dir,
                                            bool announce = true) {
  const std::uint64_t h = dataset_pair_hash(train, test);
  const std::filesystem::path file = cache_dir / ("oracle_" + hex64(h) + ".mmco");
  if (std::filesystem::exists(file)) {
    CoherenceOracle oracle = load_oracle(file);
    if (oracle.dims == test.dims && oracle.classes == test.class_count) return oracle;
    throw ConfigError("oracle cache entry " + file.string() +
                      " does not match the dataset shape");
  }
  if (announce) std::cout << "training coherence oracle (cache miss)...\n";
  CoherenceOracle oracle = train_coherence_oracle(train, test, h);
  std::filesystem::create_directories(cache_dir);
  save_oracle(file, oracle);
  return oracle;
}

inline void append_csv_row(const std::filesystem::path& csv, const std::string& header,
                           const std::string& row) {
  if (csv.has_parent_path()) std::filesystem::create_directories(csv.parent_path());
  const bool fresh =
      !std::filesystem::exists(csv) || std::filesystem::file_size(csv) == 0;
  std::ofstream out(csv, std::ios::app);
  if (!out) throw ConfigError("cannot open CSV for append: " + csv.string());
  if (fresh) out << header << "\n";
  out << row << "\n";
  if (!out) throw ConfigError("short write to " + csv.string());
}

// Shared by cmd_eval and the sweep worker; the oracle is read-only.
inline RunMetrics evaluate_checkpoint(const LoadedCheckpoint& ck,
                                      const MultimodalDataset& train_split,
                                      const MultimodalDataset& test_split,
                                      const CoherenceOracle& oracle, std::uint64_t eval_seed,
                                      bool deterministic) {
  check_model_dataset(ck.model, test_split);
  RunMetrics m;
  m.strategy = to_string(ck.model.config.strategy);
  m.beta = ck.meta.beta;
  m.seed = ck.meta.seed;
  m.epoch = ck.meta.epoch;

  ReconError recon = reconstruction_error(
      ck.model, test_split, RngStream(eval_seed).split("recon"), deterministic);
  m.recon = recon.per_modality;
  m.recon_total = recon.total;

  m.latent_acc = latent_accuracy(ck.model, train_split, test_split, eval_seed);
  double acc_sum = 0.0;
  for (double a : m.latent_acc) acc_sum += a;
  m.latent_acc_mean = acc_sum / m.latent_acc.size();

  m.coherence = coherence_matrix(ck.model, test_split, oracle,
                                 RngStream(eval_seed).split("coherence"), deterministic);
  m.coherence_offdiag_mean = offdiagonal_mean(m.coherence);
  return m;
}

inline int cmd_eval(EvalCommand cfg) {
  if (cfg.checkpoint.empty()) throw ConfigError("eval: --checkpoint is required");
  if (cfg.data_dir.empty()) throw ConfigError("eval: --data directory is required");
  const std::filesystem::path ck_path(cfg.checkpoint);
  if (cfg.out_dir.empty())
    cfg.out_dir = ck_path.has_parent_path() ? ck_path.parent_path().string() : ".";
  if (cfg.csv.empty()) cfg.csv = (std::filesystem::path(cfg.out_dir) / "sweep.csv").string();
  if (cfg.oracle_cache.empty())
    cfg.oracle_cache = (std::filesystem::path(cfg.data_dir) / "oracle_cache").string();

  LoadedCheckpoint ck = load_checkpoint(ck_path);
  const std::filesystem::path data_dir(cfg.data_dir);
  MultimodalDataset train_split = load_dataset(data_dir / "train.mmds");
  MultimodalDataset test_split = load_dataset(data_dir / "test.mmds");
  check_model_dataset(ck.model, test_split);
  CoherenceOracle oracle = load_or_train_oracle(train_split, test_split, cfg.oracle_cache);

  RunMetrics m = evaluate_checkpoint(ck, train_split, test_split, oracle, cfg.eval_seed,
                                     cfg.deterministic);

  // Preserve the training trace and config echo if metrics.json already exists.
  const std::filesystem::path metrics_path = std::filesystem::path(cfg.out_dir) / "metrics.json";
  if (std::filesystem::exists(metrics_path)) {
    try {
      nlohmann::json old = load_json_file(metrics_path);
      if (old.contains("trace"))
        for (const auto& p : old.at("trace"))
          m.trace.push_back({p.value("epoch", 0), p.value("step", 0), p.value("total", 0.0),
                             p.value("recon_total", 0.0), p.value("rate", 0.0)});
      if (old.contains("config") && old.at("config").is_object())
        m.config_echo = old.at("config");
    } catch (const ConfigError&) {
      // unreadable previous metrics: rewrite from scratch
    }
  }
  m.config_echo["eval"] = eval_command_to_json(cfg);
  save_metrics(metrics_path, m);
  append_csv_row(cfg.csv, sweep_csv_header(test_split.modalities()), sweep_csv_row(m));

  std::cout << "eval " << m.strategy << " beta=" << m.beta << " seed=" << m.seed
            << ": recon_total=" << m.recon_total << " latent_acc_mean=" << m.latent_acc_mean
            << " coherence_offdiag_mean=" << m.coherence_offdiag_mean << "\n";
  std::cout << "wrote " << metrics_path.string() << " and appended " << cfg.csv << "\n";
  return kExitOk;
}

// ---- sweep ----------------------------------------------------------------

struct SweepCommand {
  std::vector<std::string> strategies;  // declared order is execution order
  std::vector<double> betas;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  SyntheticConfig data;    // used when data_dir is empty
  std::string data_dir;    // optional pre-generated dataset
  std::string out_dir = "sweep";
  ModelConfig model;
  TrainOptions train;
  std::uint64_t eval_seed = 0;
  bool deterministic_eval = false;

  void fill_defaults() {
    if (strategies.empty())
      for (Strategy s : all_strategies()) strategies.push_back(to_string(s));
    if (betas.empty()) betas = default_beta_grid();
    if (seeds.empty()) throw ConfigError("sweep: need at least one seed");
    for (const std::string& s : strategies) strategy_from_string(s);
    for (double b : betas)
      if (!(b >= 0.0)) throw ConfigError("sweep: beta values must be >= 0");
  }
};

inline nlohmann::json sweep_command_to_json(const SweepCommand& c) {
  return {{"strategies", c.strategies},
          {"betas", c.betas},
          {"seeds", c.seeds},
          {"data", synthetic_config_to_json(c.data)},
          {"data_dir", c.data_dir},
          {"out_dir", c.out_dir},
          {"model", model_config_to_json(c.model)},
          {"train", train_options_to_json(c.train)},
          {"eval_seed", c.eval_seed},
          {"deterministic_eval", c.deterministic_eval}};
}

inline SweepCommand sweep_command_overlay(const nlohmann::json& j, SweepCommand base) {
  try {
    base.strategies = j.value("strategies", base.strategies);
    base.betas = j.value("betas", base.betas);
    base.seeds = j.value("seeds", base.seeds);
    if (j.contains("data")) base.data = synthetic_config_overlay(j.at("data"), base.data);
    base.data_dir = j.value("data_dir", base.data_dir);
    base.out_dir = j.value("out_dir", base.out_dir);
    if (j.contains("model")) base.model = model_config_overlay(j.at("model"), base.model);
    if (j.contains("train")) base.train = train_options_overlay(j.at("train"), base.train);
    base.eval_seed = j.value("eval_seed", base.eval_seed);
    base.deterministic_eval = j.value("deterministic_eval", base.deterministic_eval);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("sweep config: ") + e.what());
  }
  return base;
}

inline int sweep_worker_count(int cells) {
  unsigned hw = std::thread::hardware_concurrency();
  int workers = hw == 0 ? 1 : static_cast<int>(hw);
  if (const char* env = std::getenv("MMVAE_THREADS")) {
    try {
      int cap = std::stoi(env);
      if (cap < 1) throw ConfigError("MMVAE_THREADS must be >= 1");
      workers = std::min(workers, cap);
    } catch (const std::exception&) {
      throw ConfigError("MMVAE_THREADS must be a positive integer");
    }
  }
  return std::min(workers, std::max(cells, 1));
}

struct SweepCell {
  std::string strategy;
  double beta = 0.0;
  std::uint64_t seed = 0;
  std::string status = "ok";  // or the error message
  RunMetrics metrics;
};

inline std::string sweep_cell_dir_name(const SweepCell& cell) {
  std::ostringstream s;
  s << cell.strategy << "_b" << csv_number(cell.beta) << "_s" << cell.seed;
  return s.str();
}

inline std::string aggregate_csv_header() {
  return "strategy,beta,n_seeds,status,recon_total_mean,recon_total_std,"
         "latent_acc_mean,latent_acc_std,coherence_offdiag_mean,coherence_offdiag_std,"
         "coherence_diag_mean,coherence_diag_std";
}

inline int cmd_sweep(SweepCommand cfg) {
  cfg.fill_defaults();
  cfg.train.validate(1);
  const std::filesystem::path out_dir(cfg.out_dir);
  std::filesystem::create_directories(out_dir);

  // Dataset: reuse a provided directory or generate one inside the sweep dir.
  std::filesystem::path data_dir;
  if (!cfg.data_dir.empty()) {
    data_dir = cfg.data_dir;
  } else {
    data_dir = out_dir / "data";
    SyntheticConfig dc = cfg.data;
    dc.validate();
    if (!std::filesystem::exists(data_dir / "train.mmds")) {
      int rc = cmd_gen_data(dc, data_dir);
      if (rc != kExitOk) return rc;
    }
  }
  MultimodalDataset train_split = load_dataset(data_dir / "train.mmds");
  MultimodalDataset test_split = load_dataset(data_dir / "test.mmds");

  write_json_file(out_dir / "sweep_config.json", sweep_command_to_json(cfg));
  CoherenceOracle oracle =
      load_or_train_oracle(train_split, test_split, data_dir / "oracle_cache");

  std::vector<SweepCell> cells;
  for (const std::string& strategy : cfg.strategies)
    for (double beta : cfg.betas)
      for (std::uint64_t seed : cfg.seeds) cells.push_back({strategy, beta, seed});

  const std::filesystem::path runs_csv = out_dir / "runs.csv";
  const std::string runs_header = sweep_csv_header(test_split.modalities());
  std::mutex csv_mutex;
  std::atomic<int> next{0};
  std::atomic<int> failures{0};

  auto run_cell = [&](SweepCell& cell) {
    ModelConfig mc = cfg.model;
    mc.input_dims = train_split.dims;
    mc.strategy = strategy_from_string(cell.strategy);
    mc.validate();
    TrainOptions opt = cfg.train;
    opt.beta = cell.beta;
    opt.seed = cell.seed;

    const std::filesystem::path cell_dir = out_dir / sweep_cell_dir_name(cell);
    std::filesystem::create_directories(cell_dir);
    MultimodalModel model = init_model(mc, opt.seed);
    TrainResult result = train_model(std::move(model), train_split, opt);

    CheckpointMeta meta;
    meta.beta = opt.beta;
    meta.seed = opt.seed;
    meta.epoch = result.epochs_completed;
    meta.rng_key = result.rng_key;
    meta.rng_counter = result.rng_counter;
    save_checkpoint(cell_dir / "checkpoint.mmck", result.model, meta);
    if (result.diverged)
      throw NumericError("training diverged after " + std::to_string(result.steps) +
                         " steps; last finite state saved");

    LoadedCheckpoint ck;
    ck.model = std::move(result.model);
    ck.meta = meta;
    RunMetrics m = evaluate_checkpoint(ck, train_split, test_split, oracle, cfg.eval_seed,
                                       cfg.deterministic_eval);
    m.trace = std::move(result.trace);
    m.config_echo = sweep_command_to_json(cfg);
    m.config_echo["cell"] = {{"strategy", cell.strategy},
                             {"beta", cell.beta},
                             {"seed", cell.seed}};
    save_metrics(cell_dir / "metrics.json", m);
    cell.metrics = std::move(m);
    {
      std::lock_guard<std::mutex> lock(csv_mutex);
      append_csv_row(runs_csv, runs_header, sweep_csv_row(cell.metrics));
    }
  };

  const int workers = sweep_worker_count(static_cast<int>(cells.size()));
  auto worker = [&] {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= static_cast<int>(cells.size())) return;
      try {
        run_cell(cells[i]);
      } catch (const std::exception& e) {
        cells[i].status = e.what();
        failures.fetch_add(1);
        std::lock_guard<std::mutex> lock(csv_mutex);
        std::cerr << "cell " << sweep_cell_dir_name(cells[i]) << " failed: " << e.what()
                  << "\n";
      }
    }
  };
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  // Aggregate rows follow the declared (strategy, beta) order.
  std::ostringstream agg;
  agg << aggregate_csv_header() << "\n";
  for (const std::string& strategy : cfg.strategies)
    for (double beta : cfg.betas) {
      std::vector<const SweepCell*> group;
      for (const SweepCell& c : cells)
        if (c.strategy == strategy && c.beta == beta) group.push_back(&c);
      std::vector<double> recon, lat, offdiag, diag;
      for (const SweepCell* c : group)
        if (c->status == "ok") {
          recon.push_back(c->metrics.recon_total);
          lat.push_back(c->metrics.latent_acc_mean);
          offdiag.push_back(c->metrics.coherence_offdiag_mean);
          double dsum = 0.0;
          for (std::size_t i = 0; i < c->metrics.coherence.size(); ++i)
            dsum += c->metrics.coherence[i][i];
          diag.push_back(dsum / c->metrics.coherence.size());
        }
      auto mean_of = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return v.empty() ? 0.0 : s / v.size();
      };
      auto std_of = [&](const std::vector<double>& v) {
        if (v.size() < 2) return 0.0;
        double mu = mean_of(v), s = 0.0;
        for (double x : v) s += (x - mu) * (x - mu);
        return std::sqrt(s / (v.size() - 1.0));
      };
      std::string status = recon.size() == group.size()
                               ? "ok"
                               : (recon.empty() ? "failed" : "partial");
      agg << strategy << "," << csv_number(beta) << "," << recon.size() << "," << status;
      if (recon.empty()) {
        agg << ",,,,,,,,";
      } else {
        agg << "," << csv_number(mean_of(recon)) << "," << csv_number(std_of(recon)) << ","
            << csv_number(mean_of(lat)) << "," << csv_number(std_of(lat)) << ","
            << csv_number(mean_of(offdiag)) << "," << csv_number(std_of(offdiag)) << ","
            << csv_number(mean_of(diag)) << "," << csv_number(std_of(diag));
      }
      agg << "\n";
    }
  {
    std::ofstream out(out_dir / "aggregate.csv");
    if (!out) throw ConfigError("cannot write " + (out_dir / "aggregate.csv").string());
    out << agg.str();
  }
  std::cout << "sweep complete: " << cells.size() << " cells, " << failures.load()
            << " failed; wrote " << (out_dir / "runs.csv").string() << " and aggregate.csv\n";
  return kExitOk;
}

// ---- argument parsing -------------------------------------------------------

inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Multimodal VAE laboratory: synthetic data, training, evaluation, sweeps"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic multimodal dataset");
  std::string gen_config, gen_out = "data";
  SyntheticConfig gen_defaults;
  int g_modalities = 0, g_classes = 0, g_n_train = -1, g_n_test = -1;
  std::uint64_t g_seed = 0;
  double g_class_scale = 0, g_style_scale = 0, g_noise = -1;
  std::vector<int> g_dims;
  gen->add_option("--config", gen_config, "JSON config file");
  gen->add_option("--out", gen_out, "output directory")->capture_default_str();
  gen->add_option("--modalities", g_modalities, "number of modalities");
  gen->add_option("--classes", g_classes, "number of classes");
  gen->add_option("--n-train", g_n_train, "training samples");
  gen->add_option("--n-test", g_n_test, "test samples");
  gen->add_option("--dims", g_dims, "per-modality feature dims")->delimiter(',');
  gen->add_option("--class-scale", g_class_scale, "class mean scale");
  gen->add_option("--style-scale", g_style_scale, "style factor scale");
  gen->add_option("--noise-stddev", g_noise, "observation noise stddev");
  gen->add_option("--seed", g_seed, "generation seed");

  // train
  auto* tr = app.add_subcommand("train", "Train one model on a dataset");
  std::string tr_config, tr_data, tr_out;
  std::string tr_strategy, tr_activation, tr_likelihood;
  double tr_beta = 0, tr_lr = 0, tr_lik_scale = 0;
  std::uint64_t tr_seed = 0;
  int tr_epochs = 0, tr_batch = 0, tr_log = -1, tr_latent = 0;
  std::vector<int> tr_hidden;
  bool tr_stop_prior = false;
  tr->add_option("--config", tr_config, "JSON config file");
  tr->add_option("--data", tr_data, "dataset directory (train.mmds/test.mmds)");
  tr->add_option("--out", tr_out, "output directory");
  tr->add_option("--strategy", tr_strategy,
                 "independent|avg|moe|poe|mopoe|mmvm");
  tr->add_option("--beta", tr_beta, "rate weight");
  tr->add_option("--seed", tr_seed, "training seed");
  tr->add_option("--epochs", tr_epochs, "training epochs");
  tr->add_option("--batch-size", tr_batch, "minibatch size");
  tr->add_option("--lr", tr_lr, "Adam learning rate");
  tr->add_option("--log-interval", tr_log, "steps between trace points");
  tr->add_option("--latent-dim", tr_latent, "latent dimension");
  tr->add_option("--hidden", tr_hidden, "hidden widths")->delimiter(',');
  tr->add_option("--likelihood", tr_likelihood, "gaussian|laplace (all modalities)");
  tr->add_option("--likelihood-scale", tr_lik_scale, "likelihood scale (all modalities)");
  tr->add_flag("--stop-prior-gradient", tr_stop_prior,
               "detach the prior mixture parameters in the rate term");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string ev_config, ev_checkpoint, ev_data, ev_out, ev_csv, ev_cache;
  std::uint64_t ev_seed = 0;
  bool ev_det = false;
  ev->add_option("--config", ev_config, "JSON config file");
  ev->add_option("--checkpoint", ev_checkpoint, "checkpoint file (.mmck)");
  ev->add_option("--data", ev_data, "dataset directory");
  ev->add_option("--out", ev_out, "metrics output directory");
  ev->add_option("--csv", ev_csv, "per-run CSV to append");
  ev->add_option("--oracle-cache", ev_cache, "coherence oracle cache directory");
  ev->add_option("--eval-seed", ev_seed, "evaluation stream seed");
  ev->add_flag("--deterministic", ev_det, "use posterior means instead of samples");

  // sweep
  auto* sw = app.add_subcommand("sweep", "Train and evaluate a strategy/beta/seed grid");
  std::string sw_config, sw_data, sw_out;
  std::vector<std::string> sw_strategies;
  std::vector<double> sw_betas;
  std::vector<std::uint64_t> sw_seeds;
  int sw_epochs = 0;
  sw->add_option("--config", sw_config, "JSON sweep spec");
  sw->add_option("--data", sw_data, "pre-generated dataset directory");
  sw->add_option("--out", sw_out, "sweep output directory");
  sw->add_option("--strategies", sw_strategies, "strategy list")->delimiter(',');
  sw->add_option("--betas", sw_betas, "beta list")->delimiter(',');
  sw->add_option("--seeds", sw_seeds, "seed list")->delimiter(',');
  sw->add_option("--epochs", sw_epochs, "training epochs per cell");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (gen->parsed()) {
      SyntheticConfig cfg = gen_defaults;
      if (!gen_config.empty()) cfg = synthetic_config_overlay(load_json_file(gen_config), cfg);
      if (gen->count("--modalities")) cfg.modalities = g_modalities;
      if (gen->count("--classes")) cfg.classes = g_classes;
      if (gen->count("--n-train")) cfg.n_train = g_n_train;
      if (gen->count("--n-test")) cfg.n_test = g_n_test;
      if (gen->count("--dims")) cfg.dims = g_dims;
      if (gen->count("--class-scale")) cfg.class_scale = g_class_scale;
      if (gen->count("--style-scale")) cfg.style_scale = g_style_scale;
      if (gen->count("--noise-stddev")) cfg.noise_stddev = g_noise;
      if (gen->count("--seed")) cfg.seed = g_seed;
      return cmd_gen_data(cfg, gen_out);
    }
    if (tr->parsed()) {
      TrainCommand cfg;
      if (!tr_config.empty()) cfg = train_command_overlay(load_json_file(tr_config), cfg);
      if (tr->count("--data")) cfg.data_dir = tr_data;
      if (tr->count("--out")) cfg.out_dir = tr_out;
      if (tr->count("--strategy")) cfg.model.strategy = strategy_from_string(tr_strategy);
      if (tr->count("--beta")) cfg.train.beta = tr_beta;
      if (tr->count("--seed")) cfg.train.seed = tr_seed;
      if (tr->count("--epochs")) cfg.train.epochs = tr_epochs;
      if (tr->count("--batch-size")) cfg.train.batch_size = tr_batch;
      if (tr->count("--lr")) cfg.train.adam.lr = tr_lr;
      if (tr->count("--log-interval")) cfg.train.log_interval = tr_log;
      if (tr->count("--latent-dim")) cfg.model.latent_dim = tr_latent;
      if (tr->count("--hidden")) cfg.model.hidden_widths = tr_hidden;
      if (tr->count("--likelihood")) cfg.likelihood_family = tr_likelihood;
      if (tr->count("--likelihood-scale")) cfg.likelihood_scale = tr_lik_scale;
      if (tr->count("--stop-prior-gradient")) cfg.model.stop_prior_gradient = tr_stop_prior;
      return cmd_train(std::move(cfg));
    }
    if (ev->parsed()) {
      EvalCommand cfg;
      if (!ev_config.empty()) cfg = eval_command_overlay(load_json_file(ev_config), cfg);
      if (ev->count("--checkpoint")) cfg.checkpoint = ev_checkpoint;
      if (ev->count("--data")) cfg.data_dir = ev_data;
      if (ev->count("--out")) cfg.out_dir = ev_out;
      if (ev->count("--csv")) cfg.csv = ev_csv;
      if (ev->count("--oracle-cache")) cfg.oracle_cache = ev_cache;
      if (ev->count("--eval-seed")) cfg.eval_seed = ev_seed;
      if (ev->count("--deterministic")) cfg.deterministic = ev_det;
      return cmd_eval(std::move(cfg));
    }
    if (sw->parsed()) {
      SweepCommand cfg;
      if (!sw_config.empty()) cfg = sweep_command_overlay(load_json_file(sw_config), cfg);
      if (sw->count("--data")) cfg.data_dir = sw_data;
      if (sw->count("--out")) cfg.out_dir = sw_out;
      if (sw->count("--strategies")) cfg.strategies = sw_strategies;
      if (sw->count("--betas")) cfg.betas = sw_betas;
      if (sw->count("--seeds")) cfg.seeds = sw_seeds;
      if (sw->count("--epochs")) cfg.train.epochs = sw_epochs;
      return cmd_sweep(std::move(cfg));
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}

}  // namespace mmvae
