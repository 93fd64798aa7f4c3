#include <gtest/gtest.h>

#include "tcx/ebm.hpp"

using namespace tcx;
using namespace tcx::ebm;

namespace {

Matrix uniform_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double lo = 0.05,
                      double hi = 0.95) {
  Rng rng(seed);
  Matrix m(r, c);
  for (double& v : m.data()) v = lo + (hi - lo) * rng.uniform();
  return m;
}

double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(num) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

PriorConfig random_prior(std::size_t D, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> p(D);
  for (double& v : p) v = 0.1 + 0.8 * rng.uniform();
  return PriorConfig::from_rates(p);
}

// Visits every scalar parameter of a network.
template <class Fn>
void for_each_param(nn::Network& net, Fn&& fn) {
  for (auto& p : net.params) {
    for (double& w : p.weight.data()) fn(w);
    for (double& b : p.bias) fn(b);
  }
}

std::vector<double> flatten(const nn::GradientSet& g) {
  std::vector<double> out;
  for (const auto& p : g.params) {
    out.insert(out.end(), p.weight.data().begin(), p.weight.data().end());
    out.insert(out.end(), p.bias.begin(), p.bias.end());
  }
  return out;
}

}  // namespace

TEST(Prior, PointValues) {
  PriorConfig p{{0.3, 0.5, 0.9}};
  EXPECT_NEAR(prior_logq(std::vector<double>{1, 0.5, 0}, p),
              std::log(0.3) + std::log(0.5) + std::log(0.1), 1e-15);
  EXPECT_NEAR(prior_logq(std::vector<double>{0, 1, 1}, p),
              std::log(0.7) + std::log(0.5) + std::log(0.9), 1e-15);
  EXPECT_THROW(prior_logq(std::vector<double>{0, 1}, p), std::invalid_argument);
  EXPECT_THROW(prior_logq(std::vector<double>{0, NAN, 1}, p), std::invalid_argument);
  const auto c = PriorConfig::from_rates(std::vector<double>{0.0, 1.0, 0.4});
  EXPECT_EQ(c.rates, (std::vector<double>{1e-3, 1 - 1e-3, 0.4}));
}

TEST(Prior, MonotoneWithSignOfBias) {
  PriorConfig p{{0.2, 0.8}};
  for (double s = 0; s < 1.0; s += 0.1) {
    EXPECT_LT(prior_logq(std::vector<double>{s + 0.1, 0.5}, p), prior_logq(std::vector<double>{s, 0.5}, p));
    EXPECT_GT(prior_logq(std::vector<double>{0.5, s + 0.1}, p), prior_logq(std::vector<double>{0.5, s}, p));
  }
}

TEST(Energy, ZeroNetIsNegativeLogPrior) {
  const auto prior = random_prior(6, 1);
  const auto s = uniform_matrix(4, 6, 2);
  const auto ev = energy(s, EnergyNet::zero(6), prior);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(ev.energy[i], -prior_logq(s.row(i), prior));
}

TEST(Energy, ShiftInOutputBiasShiftsEnergy) {
  const auto prior = random_prior(5, 1);
  auto f = EnergyNet::make(5, 8, 3);
  const auto s = uniform_matrix(3, 5, 4);
  const auto before = energy(s, f, prior).energy;
  f.net->params.back().bias[0] += 0.75;
  const auto after = energy(s, f, prior).energy;
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(after[i], before[i] - 0.75, 1e-12);
}

TEST(Energy, GradientMatchesFiniteDifferences) {
  for (std::size_t D : {8u, 16u}) {
    const auto prior = random_prior(D, D);
    const auto f = EnergyNet::make(D, 12, D + 1);
    auto s = uniform_matrix(3, D, 7);
    const auto ev = energy(s, f, prior);
    std::vector<double> a, b;
    for (std::size_t k = 0; k < s.size(); ++k) {
      auto p = s, m = s;
      p.data()[k] += 1e-5;
      m.data()[k] -= 1e-5;
      const std::size_t i = k / D;
      a.push_back(ev.grad.data()[k]);
      b.push_back((energy(p.row(i), f, prior) - energy(m.row(i), f, prior)) / 2e-5);
    }
    EXPECT_LT(rel_err(a, b), 1e-4) << D;
  }
}

TEST(Langevin, ZeroGradientZeroNoiseIsIdentity) {
  const auto s = uniform_matrix(5, 3, 1);
  LangevinConfig cfg;
  cfg.noise_scale = 0.0;
  cfg.steps = 50;
  const auto out = langevin_chain(s, [](const Matrix& x) { return Matrix(x.rows(), x.cols()); }, cfg);
  EXPECT_EQ(out, s);
}

TEST(Langevin, DeterministicGivenSeed) {
  const auto prior = random_prior(6, 2);
  const auto f = EnergyNet::make(6, 8, 5);
  const auto s = uniform_matrix(10, 6, 3);
  LangevinConfig cfg;
  cfg.noise_seed = 42;
  EXPECT_EQ(langevin_chain(s, f, prior, cfg), langevin_chain(s, f, prior, cfg));
  cfg.noise_seed = 43;
  EXPECT_NE(langevin_chain(s, f, prior, cfg), langevin_chain(s, f, prior, LangevinConfig{}));
  const auto clipped = langevin_chain(s, f, prior, cfg);
  for (double v : clipped.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Langevin, ZeroNoiseDescendsConvexEnergy) {
  // E = 0.5 * sum (a_d (s_d - mu_d)^2), smoothness max a = 4, dt = 0.02.
  const std::vector<double> a{1.0, 4.0, 2.5}, mu{0.3, -1.0, 2.0};
  auto E = [&](const Matrix& s) {
    double e = 0;
    for (std::size_t d = 0; d < 3; ++d) e += 0.5 * a[d] * std::pow(s(0, d) - mu[d], 2);
    return e;
  };
  auto grad = [&](const Matrix& s) {
    Matrix g(s.rows(), s.cols());
    for (std::size_t d = 0; d < 3; ++d) g(0, d) = a[d] * (s(0, d) - mu[d]);
    return g;
  };
  LangevinConfig cfg;
  cfg.noise_scale = 0.0;
  cfg.clip = false;
  cfg.steps = 1;
  cfg.step_size = 0.02;
  Matrix s = Matrix::from_rows({{5.0, 5.0, -5.0}});
  double prev = E(s);
  for (int t = 0; t < 200; ++t) {
    s = langevin_chain(s, grad, cfg);
    const double cur = E(s);
    ASSERT_LT(cur, prev);
    prev = cur;
  }
}

TEST(Langevin, GaussianStationaryMoments) {
  const double mu = 0.4, s2 = 0.25;
  LangevinConfig cfg;
  cfg.clip = false;
  cfg.step_size = 0.01;
  cfg.steps = 2000;
  cfg.noise_seed = 3;
  const auto out = langevin_chain(Matrix(10000, 1, 0.0), [&](const Matrix& x) {
    Matrix g(x.rows(), 1);
    for (std::size_t i = 0; i < x.rows(); ++i) g(i, 0) = (x(i, 0) - mu) / s2;
    return g;
  }, cfg);
  const double m = mean(out.data());
  double v = 0;
  for (double x : out.data()) v += (x - m) * (x - m);
  v /= static_cast<double>(out.rows());
  EXPECT_NEAR(m, mu, 0.05 * std::sqrt(s2));
  EXPECT_NEAR(v, s2, 0.05 * s2);
}

TEST(Langevin, DivergenceAndValidation) {
  LangevinConfig cfg;
  cfg.clip = false;
  cfg.noise_scale = 0.0;
  cfg.steps = 5;
  EXPECT_THROW(langevin_chain(Matrix(1, 1, 0.0),
                              [](const Matrix& x) { return Matrix(x.rows(), x.cols(), -1e6); }, cfg),
               DivergenceError);
  cfg.step_size = 0.0;
  EXPECT_THROW(langevin_chain(Matrix(1, 1), [](const Matrix& x) { return x; }, cfg),
               std::invalid_argument);
}

TEST(Mle, GradientMatchesFiniteDifferences) {
  const std::size_t D = 10;
  const auto prior = random_prior(D, 4);
  auto f = EnergyNet::make(D, 8, 9);
  const auto data = uniform_matrix(6, D, 1);
  const auto synth = uniform_matrix(5, D, 2);
  auto objective = [&](const EnergyNet& g) {
    return mean(energy(data, g, prior).energy) - mean(energy(synth, g, prior).energy);
  };
  const auto analytic = flatten(ebm_mle_gradient(data, synth, f));
  std::vector<double> numeric;
  for_each_param(*f.net, [&](double& w) {
    const double w0 = w;
    w = w0 + 1e-5;
    const double up = objective(f);
    w = w0 - 1e-5;
    const double dn = objective(f);
    w = w0;
    numeric.push_back((up - dn) / 2e-5);
  });
  EXPECT_LT(rel_err(analytic, numeric), 1e-4);
}

TEST(Mle, IdenticalSamplesGiveZeroGradient) {
  auto f = EnergyNet::make(4, 6, 1);
  const auto data = uniform_matrix(7, 4, 3);
  for (double g : flatten(ebm_mle_gradient(data, data, f))) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Mle, StepUpdatesOnlyTheEnergyNet) {
  auto net = nn::init_network(nn::stacked_mlp(3, {5}, 2), 1);
  const auto before = net.params;
  nn::ForwardOptions o;
  o.relaxed = true;
  const auto res = nn::forward(net, uniform_matrix(8, 3, 2, -1, 1), o);
  auto f = EnergyNet::make(5, 6, 2);
  const auto f_before = f.net->params;
  nn::OptimizerState st;
  ebm_mle_step(res.trace.gates[1], f, PriorConfig::uniform(5), {}, {}, st);
  EXPECT_EQ(net.params, before);
  EXPECT_NE(f.net->params, f_before);

  auto zero = EnergyNet::zero(5);
  EXPECT_NO_THROW(ebm_mle_step(res.trace.gates[1], zero, PriorConfig::uniform(5), {}, {}, st));
  EXPECT_FALSE(zero.has_params());
  EXPECT_THROW(ebm_mle_step(Matrix(0, 5), f, PriorConfig::uniform(5), {}, {}, st),
               std::invalid_argument);
}

TEST(ComplexityLoss, UniformPriorZeroNet) {
  // Gates at 0.5 with p = 0.5 everywhere: each gate contributes -log 0.5.
  nn::ForwardTrace tr;
  tr.relaxed = true;
  tr.gates.resize(3);
  tr.gates[2] = Matrix(10, 7, 0.5);
  EnergyModel m;
  m.layer_index = 2;
  m.f = EnergyNet::zero(7);
  m.prior = PriorConfig::uniform(7);
  std::vector<EnergyModel> models{m};
  const auto v = complexity_loss(tr, models);
  EXPECT_NEAR(v.value, 7 * std::log(2.0), 1e-12);
  tr.relaxed = false;
  EXPECT_THROW(complexity_loss(tr, models), std::invalid_argument);
}

TEST(ComplexityLoss, FullPipelineFiniteDifferences) {
  auto net = nn::init_network(nn::stacked_mlp(6, {8, 8}, 3), 5);
  for (auto& p : net.params)
    for (double& b : p.bias) b = 0.05;
  auto models = make_energy_models(net, 4, 6, 11);
  ASSERT_EQ(models.size(), 2u);
  models[0].prior = random_prior(8, 1);
  models[1].prior = random_prior(8, 2);
  const auto x = uniform_matrix(5, 6, 3, -1, 1);
  nn::ForwardOptions o;
  o.relaxed = true;
  o.relax_beta = 2.0;
  auto objective = [&](const nn::Network& n) {
    return complexity_loss(nn::forward(n, x, o).trace, models).value;
  };
  const auto res = nn::forward(net, x, o);
  const auto cl = complexity_loss(res.trace, models);
  const auto g = nn::backward(net, res.trace, Matrix(5, 3, 0.0), &cl.gate_grads);
  std::vector<double> numeric;
  for_each_param(net, [&](double& w) {
    const double w0 = w;
    w = w0 + 1e-5;
    const double up = objective(net);
    w = w0 - 1e-5;
    const double dn = objective(net);
    w = w0;
    numeric.push_back((up - dn) / 2e-5);
  });
  EXPECT_LT(rel_err(flatten(g), numeric), 1e-4);
}

TEST(ComplexityLoss, PenalizesLastRectifiers) {
  auto net = nn::init_network(nn::stacked_mlp(3, {4, 4, 4, 4, 4, 4}, 2), 1);
  const auto idx = penalized_layers(net, 4);
  EXPECT_EQ(idx, (std::vector<std::size_t>{5, 7, 9, 11}));
  EXPECT_EQ(penalized_layers(net, 10).size(), 6u);
  const auto zero = make_energy_models(net, 2, 0, 1);
  EXPECT_FALSE(zero[0].f.has_params());
}

namespace {

data::Dataset toy_dataset() {
  auto ds = data::make_synthetic_classification(3, 64, 5, 3, 2.0);
  data::normalize(ds);
  return ds;
}

Schedule toy_schedule(double lambda) {
  Schedule s;
  s.lambda = lambda;
  s.epochs = 2;
  s.batch_size = 16;
  s.optimizer.lr = 3e-3;
  s.ebm_hidden = 8;
  s.langevin.steps = 5;
  s.seed = 4;
  return s;
}

}  // namespace

TEST(Training, LambdaZeroIsTaskOnlyBitwise) {
  const auto ds = toy_dataset();
  auto a = nn::init_network(nn::stacked_mlp(5, {8, 8}, 3), 2);
  auto b = a;
  auto ebms = make_energy_models(a, 4, 8, 1);
  const auto ebm_before = ebms[0].f.net->params;
  const auto la = alternating_train(a, ds, ebms, toy_schedule(0.0));
  const auto lb = train_task_only(b, ds, toy_schedule(0.0));
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(ebms[0].f.net->params, ebm_before);
  ASSERT_EQ(la.size(), 2u);
  EXPECT_EQ(la[1].loss_task, lb[1].loss_task);
  EXPECT_EQ(la[1].loss_complexity, 0.0);
}

TEST(Training, PenalizedRunIsDeterministicAndLogsBothLosses) {
  const auto ds = toy_dataset();
  auto run = [&] {
    auto net = nn::init_network(nn::stacked_mlp(5, {8, 8}, 3), 2);
    auto ebms = make_energy_models(net, 4, 8, 1);
    const auto logs = alternating_train(net, ds, ebms, toy_schedule(0.05));
    return std::make_pair(net.params, logs.back().loss_complexity);
  };
  const auto r1 = run(), r2 = run();
  EXPECT_EQ(r1.first, r2.first);
  EXPECT_EQ(r1.second, r2.second);
  EXPECT_GT(r1.second, 0.0);

  auto net = nn::init_network(nn::stacked_mlp(5, {8}, 3), 2);
  std::vector<EnergyModel> none;
  EXPECT_THROW(alternating_train(net, ds, none, toy_schedule(0.1)), std::invalid_argument);
  EXPECT_THROW(alternating_train(net, ds, none, toy_schedule(-1.0)), std::invalid_argument);
}

TEST(Training, RecenterZeroesRectifierMeans) {
  const auto ds = toy_dataset();
  auto net = nn::init_network(nn::residual_mlp(5, 6, 3, 3), 7);
  recenter_rectifiers(net, ds.features, {});
  const auto res = nn::forward(net, ds.features);
  for (auto li : net.gating_layers()) {
    const auto& h = res.trace.pre_activation(li);
    for (std::size_t d = 0; d < h.cols(); ++d) {
      double m = 0;
      for (std::size_t i = 0; i < h.rows(); ++i) m += h(i, d);
      EXPECT_NEAR(m / h.rows(), 0.0, 1e-12);
    }
  }
  net.frozen = true;
  EXPECT_THROW(recenter_rectifiers(net, ds.features, {}), std::logic_error);
}

TEST(Training, DivergenceIsReported) {
  const auto ds = toy_dataset();
  auto net = nn::init_network(nn::stacked_mlp(5, {8}, 3), 2);
  auto sch = toy_schedule(0.0);
  sch.optimizer = {nn::OptimizerKind::Sgd, 1e200};
  EXPECT_THROW(train_task_only(net, ds, sch), DivergenceError);
}
