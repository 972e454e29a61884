#pragma once

// Synthetic multimodal data: every sample shares one class label across M
// modalities; each modality adds its own style nuisance plus isotropic noise.
//   x_{i,m} = mu_{c_i, m} + style_scale * t_{i,m} * v_m + noise_stddev * eps
// with mu_{c,m} ~ class_scale * N(0, I), v_m a fixed unit direction, and
// t_{i,m} ~ N(0,1) drawn independently per modality. Generation is
// counter-based: any sample is reproducible without its predecessors.
//
// On-disk container: magic "MMDS1", u32-length-prefixed JSON header
// {format_version, M, C, N, dims, seed, split}, then per-modality row-major
// little-endian float32 blocks, then labels as little-endian uint16.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmvae/errors.hpp"
#include "mmvae/io.hpp"
#include "mmvae/rng.hpp"

namespace mmvae {

inline constexpr const char* kDatasetMagic = "MMDS1";
inline constexpr int kDatasetVersion = 1;

struct SyntheticConfig {
  int modalities = 3;
  int classes = 5;
  int n_train = 2000;
  int n_test = 1000;
  std::vector<int> dims;  // per-modality feature width; empty = 20 each
  double class_scale = 3.0;
  double style_scale = 1.0;
  double noise_stddev = 0.5;
  std::uint64_t seed = 0;

  void validate() {
    if (modalities < 1) throw ConfigError("synthetic: need at least one modality");
    if (classes < 2) throw ConfigError("synthetic: need at least two classes");
    if (classes > 0xffff) throw ConfigError("synthetic: class count exceeds the label width");
    if (n_train < 1 || n_test < 1)
      throw ConfigError("synthetic: sample counts must be positive");
    if (dims.empty()) dims.assign(static_cast<std::size_t>(modalities), 20);
    if (static_cast<int>(dims.size()) != modalities)
      throw ConfigError("synthetic: need one feature dim per modality");
    for (int d : dims)
      if (d < 1) throw ConfigError("synthetic: feature dims must be positive");
    if (!(class_scale > 0.0)) throw ConfigError("synthetic: class scale must be positive");
    if (style_scale < 0.0) throw ConfigError("synthetic: style scale must be non-negative");
    if (noise_stddev < 0.0) throw ConfigError("synthetic: noise stddev must be non-negative");
  }
};

struct MultimodalDataset {
  int class_count = 0;
  std::vector<int> dims;
  std::vector<std::vector<double>> features;  // per modality, flat (n, dims[m]) row-major
  std::vector<std::uint16_t> labels;
  std::string split;
  std::uint64_t seed = 0;

  int n() const { return static_cast<int>(labels.size()); }
  int modalities() const { return static_cast<int>(dims.size()); }

  std::span<const double> row(int m, int i) const {
    return std::span<const double>(
        features[static_cast<std::size_t>(m)].data() +
            static_cast<std::size_t>(i) * static_cast<std::size_t>(dims[m]),
        static_cast<std::size_t>(dims[m]));
  }

  void validate() const {
    require(class_count >= 2, "dataset: class count must be at least 2");
    require(!dims.empty(), "dataset: needs at least one modality");
    require(features.size() == dims.size(), "dataset: one feature block per modality");
    for (int m = 0; m < modalities(); ++m)
      require(features[m].size() ==
                  static_cast<std::size_t>(labels.size()) * static_cast<std::size_t>(dims[m]),
              "dataset: modality " + std::to_string(m) + " block is not n x dim");
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] >= class_count)
        throw ContractError("dataset: label " + std::to_string(labels[i]) + " at row " +
                            std::to_string(i) + " outside [0, " + std::to_string(class_count) +
                            ")");
  }
};

// The fixed per-(class, modality) means and per-modality unit style
// directions implied by a config; exposed so tests can invert the generator.
struct SyntheticFactors {
  std::vector<std::vector<std::vector<double>>> class_means;  // [class][modality]
  std::vector<std::vector<double>> style_dirs;                // [modality]
};

inline SyntheticFactors synthetic_factors(SyntheticConfig cfg) {
  cfg.validate();
  RngStream root(cfg.seed);
  SyntheticFactors f;
  f.class_means.resize(static_cast<std::size_t>(cfg.classes));
  RngStream means = root.split("class_means");
  for (int c = 0; c < cfg.classes; ++c) {
    f.class_means[c].resize(static_cast<std::size_t>(cfg.modalities));
    RngStream per_class = means.split(static_cast<std::uint64_t>(c));
    for (int m = 0; m < cfg.modalities; ++m) {
      auto v = per_class.split(static_cast<std::uint64_t>(m))
                   .normal_vec(static_cast<std::size_t>(cfg.dims[m]));
      for (auto& x : v) x *= cfg.class_scale;
      f.class_means[c][m] = std::move(v);
    }
  }
  RngStream dirs = root.split("style_dirs");
  f.style_dirs.resize(static_cast<std::size_t>(cfg.modalities));
  for (int m = 0; m < cfg.modalities; ++m) {
    auto v = dirs.split(static_cast<std::uint64_t>(m))
                 .normal_vec(static_cast<std::size_t>(cfg.dims[m]));
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    require(norm > 1e-12, "synthetic: degenerate style direction");
    for (auto& x : v) x /= norm;
    f.style_dirs[m] = std::move(v);
  }
  return f;
}

inline MultimodalDataset generate_split(const SyntheticConfig& cfg, const SyntheticFactors& f,
                                        const std::string& split, int count) {
  MultimodalDataset ds;
  ds.class_count = cfg.classes;
  ds.dims = cfg.dims;
  ds.split = split;
  ds.seed = cfg.seed;
  ds.labels.resize(static_cast<std::size_t>(count));
  ds.features.resize(cfg.dims.size());
  for (int m = 0; m < cfg.modalities; ++m)
    ds.features[m].resize(static_cast<std::size_t>(count) *
                          static_cast<std::size_t>(cfg.dims[m]));

  RngStream split_stream = RngStream(cfg.seed).split("samples").split(split);
  for (int i = 0; i < count; ++i) {
    RngStream s = split_stream.split(static_cast<std::uint64_t>(i));
    const int label = static_cast<int>(s.split("label").next_u64() %
                                       static_cast<std::uint64_t>(cfg.classes));
    ds.labels[i] = static_cast<std::uint16_t>(label);
    for (int m = 0; m < cfg.modalities; ++m) {
      RngStream sm = s.split("modality").split(static_cast<std::uint64_t>(m));
      const double t = sm.normal();
      const int d = cfg.dims[m];
      double* out = ds.features[m].data() + static_cast<std::size_t>(i) * d;
      const auto& mu = f.class_means[label][m];
      const auto& dir = f.style_dirs[m];
      for (int j = 0; j < d; ++j)
        out[j] = mu[j] + cfg.style_scale * t * dir[j] + cfg.noise_stddev * sm.normal();
    }
  }
  return ds;
}

struct DatasetPair {
  MultimodalDataset train;
  MultimodalDataset test;
};

inline DatasetPair generate_synthetic(SyntheticConfig cfg) {
  cfg.validate();
  SyntheticFactors f = synthetic_factors(cfg);
  DatasetPair pair;
  pair.train = generate_split(cfg, f, "train", cfg.n_train);
  pair.test = generate_split(cfg, f, "test", cfg.n_test);
  return pair;
}

inline void save_dataset(const std::filesystem::path& path, const MultimodalDataset& ds) {
  ds.validate();
  nlohmann::json header{{"format_version", kDatasetVersion}, {"M", ds.modalities()},
                        {"C", ds.class_count},              {"N", ds.n()},
                        {"dims", ds.dims},                  {"seed", hex64(ds.seed)},
                        {"split", ds.split}};
  const std::string header_str = header.dump();
  ByteWriter w;
  w.str(kDatasetMagic);
  w.u32(static_cast<std::uint32_t>(header_str.size()));
  w.str(header_str);
  for (int m = 0; m < ds.modalities(); ++m)
    for (double v : ds.features[m]) w.f32(static_cast<float>(v));
  for (std::uint16_t label : ds.labels) w.u16(label);
  write_file_bytes(path, w.data());
}

inline MultimodalDataset load_dataset(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  r.expect_magic(kDatasetMagic);
  const std::uint32_t header_len = r.u32("header length");
  const std::size_t header_at = r.offset();
  const std::string header_str = r.str(header_len, "json header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset header is not valid json: ") + e.what(), header_at);
  }

  MultimodalDataset ds;
  int m_count = 0, count = 0;
  try {
    const int version = header.at("format_version").get<int>();
    if (version != kDatasetVersion)
      throw FormatError("unsupported dataset format_version " + std::to_string(version),
                        header_at);
    m_count = header.at("M").get<int>();
    ds.class_count = header.at("C").get<int>();
    count = header.at("N").get<int>();
    ds.dims = header.at("dims").get<std::vector<int>>();
    ds.seed = parse_hex64(header.at("seed").get<std::string>(), "dataset seed");
    ds.split = header.at("split").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset header field error: ") + e.what(), header_at);
  }
  if (m_count < 1 || static_cast<int>(ds.dims.size()) != m_count)
    throw FormatError("dataset header M does not match dims", header_at);
  if (count < 0 || ds.class_count < 2)
    throw FormatError("dataset header has invalid N or C", header_at);

  ds.features.resize(ds.dims.size());
  for (int m = 0; m < m_count; ++m) {
    ds.features[m].resize(static_cast<std::size_t>(count) *
                          static_cast<std::size_t>(ds.dims[m]));
    for (auto& v : ds.features[m]) v = static_cast<double>(r.f32("feature block"));
  }
  ds.labels.resize(static_cast<std::size_t>(count));
  for (std::size_t i = 0; i < ds.labels.size(); ++i) {
    const std::size_t at = r.offset();
    const std::uint16_t label = r.u16("label block");
    if (label >= ds.class_count)
      throw FormatError("label " + std::to_string(label) + " at row " + std::to_string(i) +
                            " outside [0, " + std::to_string(ds.class_count) + ")",
                        at);
    ds.labels[i] = label;
  }
  if (r.remaining() != 0)
    throw FormatError("trailing bytes after dataset payload", r.offset());
  ds.validate();
  return ds;
}

// One row per sample: label, then every modality's features in order.
inline void export_dataset_csv(const std::filesystem::path& path, const MultimodalDataset& ds) {
  ds.validate();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open file for writing: " + path.string());
  out << "label";
  for (int m = 0; m < ds.modalities(); ++m)
    for (int j = 0; j < ds.dims[m]; ++j) out << ",m" << m << "_d" << j;
  out << "\n";
  out.precision(9);
  for (int i = 0; i < ds.n(); ++i) {
    out << ds.labels[i];
    for (int m = 0; m < ds.modalities(); ++m)
      for (double v : ds.row(m, i)) out << ',' << v;
    out << "\n";
  }
  if (!out) throw ConfigError("short write to " + path.string());
}

// Dataset with only the selected modalities, in the given order.
inline MultimodalDataset restrict_modalities(const MultimodalDataset& ds,
                                             const std::vector<int>& keep) {
  ds.validate();
  require(!keep.empty(), "restrict: need at least one modality");
  MultimodalDataset out;
  out.class_count = ds.class_count;
  out.labels = ds.labels;
  out.split = ds.split;
  out.seed = ds.seed;
  for (int m : keep) {
    require(m >= 0 && m < ds.modalities(),
            "restrict: modality index " + std::to_string(m) + " outside [0," +
                std::to_string(ds.modalities()) + ")");
    out.dims.push_back(ds.dims[m]);
    out.features.push_back(ds.features[m]);
  }
  return out;
}

}  // namespace mmvae
