#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "mmvae/finite_diff.hpp"
#include "mmvae/objective.hpp"
#include "support/model_flatten.hpp"

using namespace mmvae;

namespace {

// Flat row-major (batch, input_dims[m]) feature blocks.
std::vector<std::vector<double>> random_batch(const ModelConfig& cfg, int batch,
                                              std::uint64_t seed) {
  std::vector<std::vector<double>> flat;
  RngStream rng(seed);
  for (int m = 0; m < cfg.n_modalities(); ++m)
    flat.push_back(rng.split(static_cast<std::uint64_t>(m))
                       .normal_vec(static_cast<std::size_t>(batch) * cfg.input_dims[m]));
  return flat;
}

ObjectiveBreakdown run_objective(const MultimodalModel& model,
                                 const std::vector<std::vector<double>>& flat, int batch,
                                 double beta, const NoiseSource& noise) {
  ad::Tape t;
  BoundModel bound = bind_model(t, model);
  std::vector<ad::Value> x = bind_batch(t, model, flat, batch);
  ObjectiveNodes nodes = build_objective(t, model, bound, x, beta, noise);
  return read_breakdown(t, nodes, beta);
}

GradMap run_objective_grads(const MultimodalModel& model,
                            const std::vector<std::vector<double>>& flat, int batch, double beta,
                            const NoiseSource& noise) {
  ad::Tape t;
  BoundModel bound = bind_model(t, model);
  std::vector<ad::Value> x = bind_batch(t, model, flat, batch);
  ObjectiveNodes nodes = build_objective(t, model, bound, x, beta, noise);
  t.backward(nodes.total);
  return collect_model_grads(t, model, bound);
}

double rows_mean(const std::vector<double>& rows) {
  double acc = 0.0;
  for (double v : rows) acc += v;
  return acc / static_cast<double>(rows.size());
}

}  // namespace

TEST_CASE("objective totals satisfy recon minus beta times rate for every strategy") {
  const double beta = 0.3;
  for (Strategy s : all_strategies()) {
    ModelConfig cfg;
    cfg.input_dims = {4, 3, 5};
    cfg.latent_dim = 2;
    cfg.hidden_widths = {8};
    cfg.strategy = s;
    cfg.validate();
    MultimodalModel model = init_model(cfg, 3);
    auto flat = random_batch(cfg, 6, 10);
    NoiseSource noise = make_stream_noise(RngStream(55), {0, 1, 2});

    ObjectiveBreakdown b = run_objective(model, flat, 6, beta, noise);
    REQUIRE(b.beta == beta);
    REQUIRE(static_cast<int>(b.recon.size()) == cfg.n_modalities());
    double recon_sum = 0.0;
    for (double r : b.recon) recon_sum += r;
    REQUIRE(b.recon_total == Catch::Approx(recon_sum).margin(1e-12));
    REQUIRE(b.total == Catch::Approx(b.recon_total - beta * b.rate).margin(1e-12));
    if (s != Strategy::kMmvm) REQUIRE(b.rate >= 0.0);

    // The rate and reconstruction values do not depend on beta.
    ObjectiveBreakdown b2 = run_objective(model, flat, 6, 2.0, noise);
    REQUIRE(b2.rate == b.rate);
    REQUIRE(b2.recon_total == b.recon_total);
  }
}

TEST_CASE("zero beta skips the rate graph and reports a zero rate") {
  for (Strategy s : all_strategies()) {
    ModelConfig cfg;
    cfg.input_dims = {3, 3};
    cfg.strategy = s;
    cfg.validate();
    MultimodalModel model = init_model(cfg, 4);
    auto flat = random_batch(cfg, 4, 20);
    NoiseSource noise = make_stream_noise(RngStream(9), {0, 1});

    ad::Tape t;
    BoundModel bound = bind_model(t, model);
    std::vector<ad::Value> x = bind_batch(t, model, flat, 4);
    ObjectiveNodes nodes = build_objective(t, model, bound, x, 0.0, noise);
    REQUIRE_FALSE(nodes.has_rate);
    ObjectiveBreakdown b = read_breakdown(t, nodes, 0.0);
    REQUIRE(b.rate == 0.0);
    REQUIRE(b.total == Catch::Approx(b.recon_total).margin(1e-14));
  }
}

TEST_CASE("independent objective separates into per-modality objectives") {
  ModelConfig cfg;
  cfg.input_dims = {4, 3, 5};
  cfg.hidden_widths = {6, 6};
  cfg.strategy = Strategy::kIndependent;
  cfg.validate();
  MultimodalModel joint = init_model(cfg, 77);
  const int batch = 8;
  auto flat = random_batch(cfg, batch, 31);
  const double beta = 0.7;
  RngStream base(123);

  ObjectiveBreakdown joint_b =
      run_objective(joint, flat, batch, beta, make_stream_noise(base, {0, 1, 2}));

  double total_sum = 0.0, rate_sum = 0.0;
  for (int m = 0; m < cfg.n_modalities(); ++m) {
    ModelConfig sub_cfg;
    sub_cfg.input_dims = {cfg.input_dims[m]};
    sub_cfg.hidden_widths = cfg.hidden_widths;
    sub_cfg.strategy = Strategy::kIndependent;
    sub_cfg.validate();
    MultimodalModel sub = init_model(sub_cfg, 1);
    for (auto& e : sub.encoders[0].entries()) e.value = joint.encoders[m].at(e.name).value;
    for (auto& e : sub.decoders[0].entries()) e.value = joint.decoders[m].at(e.name).value;

    // The restricted run replays modality m's noise through its stream id.
    ObjectiveBreakdown b = run_objective(
        sub, {flat[m]}, batch, beta,
        make_stream_noise(base, {static_cast<std::uint64_t>(m)}));
    REQUIRE(b.recon[0] == Catch::Approx(joint_b.recon[m]).margin(1e-12));
    total_sum += b.total;
    rate_sum += b.rate;
  }
  REQUIRE(joint_b.total == Catch::Approx(total_sum).margin(1e-10));
  REQUIRE(joint_b.rate == Catch::Approx(rate_sum).margin(1e-10));
}

TEST_CASE("joint-posterior objectives match a per-row reference computation") {
  for (Strategy s : {Strategy::kAvg, Strategy::kPoe}) {
    ModelConfig cfg;
    cfg.input_dims = {3, 4};
    cfg.hidden_widths = {5};
    cfg.latent_dim = 2;
    cfg.strategy = s;
    cfg.likelihoods = {LikelihoodSpec{LikelihoodSpec::Family::kGaussian, 0.8},
                       LikelihoodSpec{LikelihoodSpec::Family::kLaplace, 1.2}};
    cfg.validate();
    MultimodalModel model = init_model(cfg, 15);
    const int batch = 3;
    auto flat = random_batch(cfg, batch, 44);
    NoiseSource noise = make_stream_noise(RngStream(7), {0, 1});
    const double beta = 0.9;

    ObjectiveBreakdown b = run_objective(model, flat, batch, beta, noise);

    std::vector<double> eps = noise(NoiseRequest{NoiseRequest::Kind::kJoint, 0}, batch, 2);
    std::vector<std::vector<double>> ll(2, std::vector<double>(batch));
    std::vector<double> kl(batch);
    for (int i = 0; i < batch; ++i) {
      std::vector<DiagonalGaussian> post;
      for (int m = 0; m < 2; ++m) {
        std::span<const double> row(flat[m].data() + i * cfg.input_dims[m],
                                    cfg.input_dims[m]);
        post.push_back(encode(model, m, row));
      }
      DiagonalGaussian joint =
          s == Strategy::kAvg ? aggregate_avg(post) : aggregate_poe(post, true);
      std::vector<double> z(2);
      for (int j = 0; j < 2; ++j) z[j] = joint.mean[j] + joint.stddev[j] * eps[i * 2 + j];
      for (int m = 0; m < 2; ++m) {
        std::span<const double> row(flat[m].data() + i * cfg.input_dims[m],
                                    cfg.input_dims[m]);
        ll[m][i] = likelihood_log_prob(cfg.likelihoods[m], decode(model, m, z), row);
      }
      kl[i] = kl_standard_normal(joint);
    }
    for (int m = 0; m < 2; ++m)
      REQUIRE(b.recon[m] == Catch::Approx(rows_mean(ll[m])).margin(1e-11));
    REQUIRE(b.rate == Catch::Approx(rows_mean(kl)).margin(1e-11));
  }
}

TEST_CASE("mixture-sampling objectives match a per-component reference computation") {
  for (Strategy s : {Strategy::kMoe, Strategy::kMopoe}) {
    ModelConfig cfg;
    cfg.input_dims = {3, 2};
    cfg.hidden_widths = {4};
    cfg.latent_dim = 2;
    cfg.strategy = s;
    cfg.validate();
    MultimodalModel model = init_model(cfg, 25);
    const int batch = 3;
    auto flat = random_batch(cfg, batch, 60);
    NoiseSource noise = make_stream_noise(RngStream(70), {0, 1});
    const double beta = 0.4;

    ObjectiveBreakdown b = run_objective(model, flat, batch, beta, noise);

    const int k_count = s == Strategy::kMoe ? 2 : 3;
    std::vector<std::vector<double>> recon(2, std::vector<double>(batch, 0.0));
    std::vector<double> kl(batch, 0.0);
    for (int i = 0; i < batch; ++i) {
      std::vector<DiagonalGaussian> post;
      for (int m = 0; m < 2; ++m) {
        std::span<const double> row(flat[m].data() + i * cfg.input_dims[m],
                                    cfg.input_dims[m]);
        post.push_back(encode(model, m, row));
      }
      std::vector<DiagonalGaussian> comps =
          s == Strategy::kMoe ? post : aggregate_mopoe(post).components;
      REQUIRE(static_cast<int>(comps.size()) == k_count);
      for (int k = 0; k < k_count; ++k) {
        std::vector<double> eps =
            noise(NoiseRequest{NoiseRequest::Kind::kComponent, k}, batch, 2);
        std::vector<double> z(2);
        for (int j = 0; j < 2; ++j)
          z[j] = comps[k].mean[j] + comps[k].stddev[j] * eps[i * 2 + j];
        for (int m = 0; m < 2; ++m) {
          std::span<const double> row(flat[m].data() + i * cfg.input_dims[m],
                                      cfg.input_dims[m]);
          recon[m][i] +=
              likelihood_log_prob(cfg.likelihoods[m], decode(model, m, z), row) / k_count;
        }
        kl[i] += kl_standard_normal(comps[k]) / k_count;
      }
    }
    for (int m = 0; m < 2; ++m)
      REQUIRE(b.recon[m] == Catch::Approx(rows_mean(recon[m])).margin(1e-10));
    REQUIRE(b.rate == Catch::Approx(rows_mean(kl)).margin(1e-10));
  }
}

TEST_CASE("mixture-prior rate matches a per-row reference and vanishes for one modality") {
  ModelConfig cfg;
  cfg.input_dims = {4};
  cfg.strategy = Strategy::kMmvm;
  cfg.validate();
  MultimodalModel single = init_model(cfg, 2);
  auto flat1 = random_batch(cfg, 5, 3);
  ObjectiveBreakdown b1 =
      run_objective(single, flat1, 5, 1.0, make_stream_noise(RngStream(1), {0}));
  REQUIRE(b1.rate == 0.0);

  ModelConfig cfg3;
  cfg3.input_dims = {3, 4, 2};
  cfg3.hidden_widths = {5};
  cfg3.strategy = Strategy::kMmvm;
  cfg3.validate();
  MultimodalModel model = init_model(cfg3, 31);
  const int batch = 4;
  auto flat = random_batch(cfg3, batch, 90);
  NoiseSource noise = make_stream_noise(RngStream(41), {0, 1, 2});
  ObjectiveBreakdown b = run_objective(model, flat, batch, 1.0, noise);

  std::vector<double> rate_rows(batch, 0.0);
  std::vector<std::vector<double>> eps;
  for (int m = 0; m < 3; ++m)
    eps.push_back(noise(NoiseRequest{NoiseRequest::Kind::kOwn, m}, batch, cfg3.latent_dim));
  for (int i = 0; i < batch; ++i) {
    std::vector<DiagonalGaussian> post;
    for (int m = 0; m < 3; ++m) {
      std::span<const double> row(flat[m].data() + i * cfg3.input_dims[m], cfg3.input_dims[m]);
      post.push_back(encode(model, m, row));
    }
    GaussianMixture mix = mmvm_prior(post);
    for (int m = 0; m < 3; ++m) {
      std::vector<double> z(cfg3.latent_dim);
      for (int j = 0; j < cfg3.latent_dim; ++j)
        z[j] = post[m].mean[j] + post[m].stddev[j] * eps[m][i * cfg3.latent_dim + j];
      rate_rows[i] += gaussian_log_prob(post[m], z) - mixture_log_prob(mix, z);
    }
  }
  REQUIRE(b.rate == Catch::Approx(rows_mean(rate_rows)).margin(1e-10));
}

TEST_CASE("objective gradients agree with central finite differences") {
  for (Strategy s : all_strategies()) {
    ModelConfig cfg;
    cfg.input_dims = {3, 2};
    cfg.latent_dim = 2;
    cfg.hidden_widths = {4};
    cfg.activation = Activation::kTanh;
    cfg.strategy = s;
    cfg.likelihoods = {LikelihoodSpec{LikelihoodSpec::Family::kGaussian, 1.0},
                       LikelihoodSpec{LikelihoodSpec::Family::kGaussian, 0.7}};
    cfg.validate();
    MultimodalModel model = init_model(cfg, 19);
    const int batch = 3;
    auto flat = random_batch(cfg, batch, 100);
    NoiseSource noise = make_stream_noise(RngStream(500), {0, 1});
    const double beta = 0.7;

    GradMap analytic = run_objective_grads(model, flat, batch, beta, noise);
    ParameterSet flat_params = testsupport::flatten_model(model);
    auto loss = [&](const ParameterSet& p) {
      MultimodalModel probe = testsupport::unflatten_model(cfg, p);
      return run_objective(probe, flat, batch, beta, noise).total;
    };
    FiniteDiffReport report = finite_diff_check(loss, flat_params, analytic, 1e-5);
    INFO(to_string(s) << " worst entry " << report.worst_entry);
    REQUIRE(report.checked == flat_params.total_size());
    REQUIRE(report.max_rel_error < 1e-4);
  }
}

TEST_CASE("detaching the mixture prior silences the rate for identical posteriors") {
  ModelConfig cfg;
  cfg.input_dims = {4, 4, 4};
  cfg.hidden_widths = {5};
  cfg.strategy = Strategy::kMmvm;
  cfg.stop_prior_gradient = true;
  cfg.validate();
  MultimodalModel model = init_model(cfg, 8);
  // Same encoder weights everywhere and the same features for every modality
  // force identical posteriors.
  for (int m = 1; m < 3; ++m)
    for (auto& e : model.encoders[m].entries()) e.value = model.encoders[0].at(e.name).value;
  const int batch = 5;
  RngStream rng(64);
  std::vector<double> block = rng.normal_vec(static_cast<std::size_t>(batch) * 4);
  std::vector<std::vector<double>> flat = {block, block, block};
  NoiseSource noise = make_stream_noise(RngStream(92), {0, 1, 2});

  ObjectiveBreakdown with_rate = run_objective(model, flat, batch, 1.0, noise);
  REQUIRE(std::fabs(with_rate.rate) < 1e-12);

  GradMap g_rate = run_objective_grads(model, flat, batch, 1.0, noise);
  GradMap g_plain = run_objective_grads(model, flat, batch, 0.0, noise);
  for (const auto& [name, g] : g_rate) {
    const auto& h = g_plain.at(name);
    for (std::size_t i = 0; i < g.size(); ++i)
      REQUIRE(g[i] == Catch::Approx(h[i]).margin(1e-9));
  }
}

TEST_CASE("autoencoder objective equals the noiseless reconstruction terms") {
  ModelConfig cfg;
  cfg.input_dims = {4, 3};
  cfg.strategy = Strategy::kMmvm;
  cfg.validate();
  MultimodalModel model = init_model(cfg, 12);
  const int batch = 4;
  auto flat = random_batch(cfg, batch, 8);

  ObjectiveBreakdown noiseless = run_objective(model, flat, batch, 0.0, zero_noise());

  ad::Tape t;
  BoundModel bound = bind_model(t, model);
  std::vector<ad::Value> x = bind_batch(t, model, flat, batch);
  ObjectiveNodes ae = build_ae_objective(t, model, bound, x);
  ObjectiveBreakdown ae_b = read_breakdown(t, ae, 0.0);

  REQUIRE_FALSE(ae.has_rate);
  for (int m = 0; m < 2; ++m) REQUIRE(ae_b.recon[m] == noiseless.recon[m]);
  REQUIRE(ae_b.total == noiseless.total);
}

TEST_CASE("stream noise is a pure function of its request") {
  NoiseSource a = make_stream_noise(RngStream(5), {0, 1});
  NoiseSource b = make_stream_noise(RngStream(5), {0, 1});
  NoiseRequest own0{NoiseRequest::Kind::kOwn, 0};
  NoiseRequest own1{NoiseRequest::Kind::kOwn, 1};
  NoiseRequest joint{NoiseRequest::Kind::kJoint, 0};
  REQUIRE(a(own0, 3, 2) == b(own0, 3, 2));
  REQUIRE(a(own0, 3, 2) == a(own0, 3, 2));
  REQUIRE(a(own0, 3, 2) != a(own1, 3, 2));
  REQUIRE(a(own0, 3, 2) != a(joint, 3, 2));
  REQUIRE_THROWS_AS(a(NoiseRequest{NoiseRequest::Kind::kOwn, 2}, 1, 1), ContractError);

  // Remapped stream ids reproduce the other modality's noise.
  NoiseSource c = make_stream_noise(RngStream(5), {1});
  REQUIRE(c(own0, 3, 2) == a(own1, 3, 2));

  std::vector<double> zeros = zero_noise()(own0, 2, 3);
  for (double v : zeros) REQUIRE(v == 0.0);
}

TEST_CASE("uniform mixture maximizes the shared-prior functional on a grid") {
  std::vector<DiagonalGaussian> bundle = {DiagonalGaussian({-1.0}, {0.6}),
                                          DiagonalGaussian({0.5}, {1.2}),
                                          DiagonalGaussian({2.0}, {0.8})};
  MixtureOptimalityReport report =
      verify_mixture_optimality(bundle, 400, 200, 0.05, RngStream(11));
  REQUIRE(report.passed);
  REQUIRE(report.min_margin > 0.0);
  REQUIRE(report.min_margin >= report.required_margin);
  REQUIRE(report.best_perturbed_value < report.mixture_value);
  REQUIRE(report.grid_points == 400);
  REQUIRE(report.perturbations == 200);

  // Identical components: the mixture equals each component and still wins.
  std::vector<DiagonalGaussian> twins = {DiagonalGaussian({0.0}, {1.0}),
                                         DiagonalGaussian({0.0}, {1.0})};
  REQUIRE(verify_mixture_optimality(twins, 300, 100, 0.02, RngStream(3)).passed);

  REQUIRE_THROWS_AS(verify_mixture_optimality(bundle, 100, 10, 0.05, RngStream(1)),
                    ConfigError);
  REQUIRE_THROWS_AS(verify_mixture_optimality(bundle, 400, 10, 0.9, RngStream(1)),
                    ConfigError);
  REQUIRE_THROWS_AS(verify_mixture_optimality(bundle, 400, 0, 0.05, RngStream(1)),
                    ConfigError);
  std::vector<DiagonalGaussian> twod = {DiagonalGaussian({0.0, 0.0}, {1.0, 1.0})};
  REQUIRE_THROWS_AS(verify_mixture_optimality(twod, 400, 10, 0.05, RngStream(1)),
                    ConfigError);
}
