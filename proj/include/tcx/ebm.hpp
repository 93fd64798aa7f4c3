#pragma once

// Energy-based model over relaxed gate vectors and the complexity loss built
// on it.
//
//   p(s) = exp[f(s; theta)] q(s) / Z(theta),   E(s) = -log q(s) - f(s; theta)
//   q(s) = prod_d (1 - p_d + s_d (2 p_d - 1))
//
// f is learned by maximum likelihood with Langevin-synthesised negatives; the
// network being analysed is then penalised by -(1/n) sum_i [f(s_i) + log q(s_i)]
// with log Z held constant. Gate relaxations s = sigmoid(beta h) carry the
// gradient back into the network.

#include <functional>
#include <optional>

#include "tcx/core.hpp"
#include "tcx/data.hpp"
#include "tcx/nn.hpp"

namespace tcx::ebm {

// ---------------------------------------------------------------------------
// Prior
// ---------------------------------------------------------------------------

inline constexpr double kMinRate = 1e-3;

struct PriorConfig {
  std::vector<double> rates;  // p_d, clamped into [1e-3, 1 - 1e-3]

  static PriorConfig from_rates(std::span<const double> a) {
    PriorConfig p;
    p.rates.reserve(a.size());
    for (double v : a) p.rates.push_back(std::clamp(v, kMinRate, 1.0 - kMinRate));
    return p;
  }
  static PriorConfig uniform(std::size_t dim) {
    return {std::vector<double>(dim, 0.5)};
  }
  std::size_t dim() const { return rates.size(); }
};

inline double prior_logq(std::span<const double> sigma, const PriorConfig& prior) {
  if (sigma.size() != prior.dim()) throw std::invalid_argument("prior_logq: dimension mismatch");
  double s = 0.0;
  for (std::size_t d = 0; d < sigma.size(); ++d) {
    const double x = sigma[d];
    if (!std::isfinite(x)) throw std::invalid_argument("prior_logq: non-finite input");
    const double p = prior.rates[d];
    s += std::log(1.0 - p + x * (2.0 * p - 1.0));
  }
  return s;
}

/// d log q / d s_d = (2 p_d - 1) / q_d(s_d).
inline void prior_logq_grad(std::span<const double> sigma, const PriorConfig& prior,
                            std::span<double> out) {
  for (std::size_t d = 0; d < sigma.size(); ++d) {
    const double p = prior.rates[d];
    out[d] = (2.0 * p - 1.0) / (1.0 - p + sigma[d] * (2.0 * p - 1.0));
  }
}

// ---------------------------------------------------------------------------
// Energy network f(s; theta)
// ---------------------------------------------------------------------------

/// Scalar-output dense network with smooth (Swish, beta = 1) activations.
/// An EnergyNet without parameters is the constant f = 0.
struct EnergyNet {
  std::size_t dim = 0;
  std::optional<nn::Network> net;

  static EnergyNet make(std::size_t dim, std::size_t hidden, std::uint64_t seed) {
    nn::NetSpec spec{nn::LayerSpec::dense(dim, hidden), nn::LayerSpec::swish(1.0),
                     nn::LayerSpec::dense(hidden, hidden), nn::LayerSpec::swish(1.0),
                     nn::LayerSpec::dense(hidden, 1)};
    EnergyNet e{dim, nn::init_network(std::move(spec), seed)};
    // Start close to f = 0 so the prior dominates early sampling.
    for (double& w : e.net->params.back().weight.data()) w *= 0.1;
    return e;
  }
  static EnergyNet zero(std::size_t dim) { return {dim, std::nullopt}; }

  bool has_params() const { return net.has_value(); }
};

struct EnergyEval {
  std::vector<double> energy;  // per row
  Matrix grad;                 // dE/ds per row
};

/// Energies of a batch of gate vectors and their gradients w.r.t. the gates.
inline EnergyEval energy(const Matrix& sigma, const EnergyNet& f, const PriorConfig& prior) {
  if (sigma.cols() != prior.dim() || sigma.cols() != f.dim)
    throw std::invalid_argument("energy: dimension mismatch");
  const std::size_t n = sigma.rows(), D = sigma.cols();
  EnergyEval ev{std::vector<double>(n), Matrix(n, D)};
  std::vector<double> gq(D);
  for (std::size_t i = 0; i < n; ++i) {
    ev.energy[i] = -prior_logq(sigma.row(i), prior);
    prior_logq_grad(sigma.row(i), prior, gq);
    for (std::size_t d = 0; d < D; ++d) ev.grad(i, d) = -gq[d];
  }
  if (f.has_params()) {
    auto res = nn::forward(*f.net, sigma, nn::natural_options(*f.net));
    const auto g = nn::backward(*f.net, res.trace, Matrix(n, 1, 1.0));
    for (std::size_t i = 0; i < n; ++i) {
      ev.energy[i] -= res.output(i, 0);
      for (std::size_t d = 0; d < D; ++d) ev.grad(i, d) -= g.input(i, d);
    }
  }
  return ev;
}

inline double energy(std::span<const double> sigma, const EnergyNet& f, const PriorConfig& prior) {
  Matrix m(1, sigma.size(), std::vector<double>(sigma.begin(), sigma.end()));
  return energy(m, f, prior).energy[0];
}

// ---------------------------------------------------------------------------
// Langevin dynamics
// ---------------------------------------------------------------------------

struct LangevinConfig {
  double step_size = 0.01;
  std::size_t steps = 20;
  std::uint64_t noise_seed = 0;
  /// 1 for sampling; 0 turns the chain into plain gradient descent.
  double noise_scale = 1.0;
  /// Clamp every coordinate to [0, 1] after each update.
  bool clip = true;
  double divergence_bound = 1e3;

  void validate() const {
    if (!(step_size > 0.0)) throw std::invalid_argument("LangevinConfig: step size must be > 0");
    if (steps < 1) throw std::invalid_argument("LangevinConfig: steps must be >= 1");
  }
};

/// Runs one chain per row of `init`:
///   s <- s - (dt / 2) dE/ds + sqrt(dt) * eps,  eps ~ N(0, I).
/// `grad_energy(const Matrix&) -> Matrix` returns dE/ds for every row.
template <class GradFn>
Matrix langevin_chain(Matrix sigma, GradFn&& grad_energy, const LangevinConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.noise_seed);
  const double half = 0.5 * cfg.step_size;
  const double sd = std::sqrt(cfg.step_size) * cfg.noise_scale;
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    const Matrix g = grad_energy(static_cast<const Matrix&>(sigma));
    for (std::size_t k = 0; k < sigma.size(); ++k) {
      double x = sigma.data()[k] - half * g.data()[k];
      if (sd != 0.0) x += sd * rng.normal();
      if (!std::isfinite(x) || std::abs(x) > cfg.divergence_bound)
        throw DivergenceError("Langevin chain diverged at step " + std::to_string(t) +
                              " (|s| = " + std::to_string(std::abs(x)) + ")");
      sigma.data()[k] = cfg.clip ? std::clamp(x, 0.0, 1.0) : x;
    }
  }
  return sigma;
}

inline Matrix langevin_chain(Matrix init, const EnergyNet& f, const PriorConfig& prior,
                             const LangevinConfig& cfg) {
  return langevin_chain(
      std::move(init), [&](const Matrix& s) { return energy(s, f, prior).grad; }, cfg);
}

// ---------------------------------------------------------------------------
// Maximum likelihood
// ---------------------------------------------------------------------------

/// Gradient w.r.t. theta of  mean E(data) - mean E(synth), which is the
/// Monte Carlo estimate of the negative log-likelihood gradient.
inline nn::GradientSet ebm_mle_gradient(const Matrix& data, const Matrix& synth,
                                        const EnergyNet& f) {
  if (!f.has_params()) return {};
  const auto& net = *f.net;
  auto opts = nn::natural_options(net);
  auto rd = nn::forward(net, data, opts);
  auto rs = nn::forward(net, synth, opts);
  // E = -log q - f, and log q does not depend on theta.
  auto g = nn::backward(net, rd.trace, Matrix(data.rows(), 1, -1.0 / data.rows()));
  const auto gs = nn::backward(net, rs.trace, Matrix(synth.rows(), 1, 1.0 / synth.rows()));
  g.add_scaled(gs, 1.0);
  return g;
}

struct MleStats {
  double mean_energy_data = 0.0;
  double mean_energy_synth = 0.0;
};

/// One maximum-likelihood update of theta from a batch of data gates, with
/// negatives synthesised by Langevin chains started at the data.
inline MleStats ebm_mle_step(const Matrix& data, EnergyNet& f, const PriorConfig& prior,
                             const LangevinConfig& langevin, const nn::OptimizerConfig& opt,
                             nn::OptimizerState& state) {
  if (data.rows() == 0) throw std::invalid_argument("ebm_mle_step: empty batch");
  const Matrix synth = langevin_chain(data, f, prior, langevin);
  MleStats st;
  st.mean_energy_data = mean(energy(data, f, prior).energy);
  st.mean_energy_synth = mean(energy(synth, f, prior).energy);
  if (!f.has_params()) return st;
  const auto g = ebm_mle_gradient(data, synth, f);
  if (!g.all_finite()) throw DivergenceError("ebm_mle_step: non-finite gradient");
  nn::optimizer_step(*f.net, g, state, opt);
  return st;
}

// ---------------------------------------------------------------------------
// Complexity loss
// ---------------------------------------------------------------------------

/// One EBM per penalised gating layer of the analysed network.
struct EnergyModel {
  std::size_t layer_index = 0;  // spec index of the rectifier layer
  EnergyNet f;
  PriorConfig prior;
  nn::OptimizerState opt_state;
};

/// Spec indices of the last k rectifier layers.
inline std::vector<std::size_t> penalized_layers(const nn::Network& net, std::size_t k) {
  std::vector<std::size_t> r;
  for (auto li : net.gating_layers())
    if (net.spec[li].is_rectifier()) r.push_back(li);
  if (r.size() > k) r.erase(r.begin(), r.end() - static_cast<std::ptrdiff_t>(k));
  return r;
}

inline std::vector<EnergyModel> make_energy_models(const nn::Network& net, std::size_t last_k,
                                                   std::size_t hidden, std::uint64_t seed) {
  const auto dims = nn::validate_spec(net.spec);
  std::vector<EnergyModel> out;
  for (auto li : penalized_layers(net, last_k)) {
    EnergyModel m;
    m.layer_index = li;
    const std::size_t D = dims[li];
    m.f = hidden == 0 ? EnergyNet::zero(D) : EnergyNet::make(D, hidden, mix_seed(seed, li));
    m.prior = PriorConfig::uniform(D);
    out.push_back(std::move(m));
  }
  return out;
}

struct ComplexityLossValue {
  double value = 0.0;
  std::vector<double> per_layer;
  /// dLoss/ds for every penalised layer, ready for nn::backward.
  nn::GateGradients gate_grads;
};

/// -(1/n) sum_l sum_i [f_l(s_{l,i}) + log q_l(s_{l,i})], log Z treated as a
/// constant. Requires a relaxed trace.
inline ComplexityLossValue complexity_loss(const nn::ForwardTrace& trace,
                                           std::span<const EnergyModel> models) {
  if (!trace.relaxed) throw std::invalid_argument("complexity_loss: trace has hard gates");
  ComplexityLossValue out;
  for (const auto& m : models) {
    const Matrix& s = trace.gates.at(m.layer_index);
    if (s.empty()) throw std::invalid_argument("complexity_loss: layer gates were not captured");
    const double n = static_cast<double>(s.rows());
    const auto ev = energy(s, m.f, m.prior);
    double term = 0.0;
    for (double e : ev.energy) term += e;
    term /= n;
    Matrix g = ev.grad;
    for (double& v : g.data()) v /= n;
    out.value += term;
    out.per_layer.push_back(term);
    out.gate_grads.emplace(m.layer_index, std::move(g));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Alternating training
// ---------------------------------------------------------------------------

enum class Regularizer { None, L1, L2 };

struct Schedule {
  double lambda = 0.0;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  nn::OptimizerConfig optimizer{};
  Regularizer regularizer = Regularizer::None;
  double reg_weight = 0.0;
  /// Relaxation temperature used for ReLU layers when lambda > 0.
  double beta = 10.0;
  std::size_t penalize_last = 4;
  /// Shift the bias of every Dense layer feeding a rectifier so that its
  /// pre-activations have zero mean over the training set, at the start of
  /// every epoch. Keeps activation rates comparable across seeds.
  bool recenter = false;
  std::size_t ebm_hidden = 32;
  std::size_t ebm_steps_per_batch = 1;
  LangevinConfig langevin{};
  nn::OptimizerConfig ebm_optimizer{nn::OptimizerKind::Adam, 1e-3};
  std::uint64_t seed = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double loss_task = 0.0;
  double loss_complexity = 0.0;
  double loss_reg = 0.0;
};

/// Forward options used for training and evaluating `net` under `sch`.
inline nn::ForwardOptions training_options(const nn::Network& net, const Schedule& sch,
                                           nn::Mode mode, Rng* rng = nullptr) {
  auto o = nn::natural_options(net, mode, rng);
  o.relaxed = o.relaxed || sch.lambda > 0.0;
  o.relax_beta = sch.beta;
  return o;
}

/// Task loss of the whole dataset in eval mode: cross-entropy for labelled
/// sets, MSE for regression sets.
inline double evaluate_loss(const nn::Network& net, const data::Dataset& ds,
                            const nn::ForwardOptions& opts) {
  auto o = opts;
  o.mode = nn::Mode::Eval;
  o.capture = false;
  const auto res = nn::forward(net, ds.features, o);
  return ds.targets ? nn::mse(res.output, *ds.targets).value
                    : nn::cross_entropy(res.output, ds.labels).value;
}

/// Per-dimension activation rates of the hardened gates of layer `li`.
inline std::vector<double> activation_rates(const nn::Network& net, const Matrix& x,
                                            std::size_t li, const nn::ForwardOptions& opts) {
  auto o = opts;
  o.mode = nn::Mode::Eval;
  const auto res = nn::forward(net, x, o);
  const Matrix& h = res.trace.pre_activation(li);
  std::vector<double> a(h.cols(), 0.0);
  for (std::size_t i = 0; i < h.rows(); ++i)
    for (std::size_t d = 0; d < h.cols(); ++d) a[d] += h(i, d) > 0.0 ? 1.0 : 0.0;
  for (double& v : a) v /= static_cast<double>(h.rows());
  return a;
}

/// Mean-centres the pre-activation of every rectifier layer over `x`, layer
/// by layer from the input upwards.
inline void recenter_rectifiers(nn::Network& net, const Matrix& x, const nn::ForwardOptions& opts) {
  if (net.frozen) throw std::logic_error("recenter_rectifiers: network is frozen");
  auto o = opts;
  o.mode = nn::Mode::Eval;
  std::size_t dense = 0;
  for (std::size_t i = 0; i + 1 < net.spec.size(); ++i) {
    if (net.spec[i].kind != nn::LayerKind::Dense) continue;
    if (net.spec[i + 1].is_rectifier()) {
      const auto res = nn::forward(net, x, o);
      const Matrix& h = res.trace.values[i + 1];
      auto& b = net.params[dense].bias;
      for (std::size_t d = 0; d < h.cols(); ++d) {
        double m = 0.0;
        for (std::size_t r = 0; r < h.rows(); ++r) m += h(r, d);
        b[d] -= m / static_cast<double>(h.rows());
      }
    }
    ++dense;
  }
}

using EpochHook = std::function<void(std::size_t epoch, const EpochLog&)>;

/// Trains `net` on L_task + lambda * L_complexity (+ optional weight
/// penalty). For every batch the EBMs are first updated by maximum likelihood
/// with the network frozen, then the network is updated with the EBMs frozen.
/// With lambda = 0 no EBM work is done and this is plain training.
inline std::vector<EpochLog> alternating_train(nn::Network& net, const data::Dataset& train,
                                               std::vector<EnergyModel>& ebms,
                                               const Schedule& sch, const EpochHook& hook = {}) {
  if (!(sch.lambda >= 0.0)) throw std::invalid_argument("alternating_train: lambda must be >= 0");
  if (sch.batch_size == 0) throw std::invalid_argument("alternating_train: batch size is zero");
  const bool penalize = sch.lambda > 0.0;
  if (penalize && ebms.empty())
    throw std::invalid_argument("alternating_train: lambda > 0 needs energy models");

  Rng dropout_rng(mix_seed(sch.seed, 0xD50));
  nn::OptimizerState opt_state;
  std::vector<EpochLog> logs;
  std::uint64_t step = 0;
  const std::size_t n = train.size();

  for (std::size_t epoch = 1; epoch <= sch.epochs; ++epoch) {
    if (sch.recenter)
      recenter_rectifiers(net, train.features, training_options(net, sch, nn::Mode::Eval));
    if (penalize) {
      auto o = training_options(net, sch, nn::Mode::Eval);
      for (auto& m : ebms)
        m.prior = PriorConfig::from_rates(activation_rates(net, train.features, m.layer_index, o));
    }
    Rng order_rng(mix_seed(sch.seed, epoch));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    order_rng.shuffle(order);

    EpochLog log;
    log.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += sch.batch_size, ++step, ++batches) {
      const std::size_t end = std::min(n, start + sch.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      const Matrix xb = train.features.select_rows(idx);
      const auto res = nn::forward(net, xb, training_options(net, sch, nn::Mode::Train, &dropout_rng));

      nn::LossValue task;
      if (train.targets) {
        task = nn::mse(res.output, train.targets->select_rows(idx));
      } else {
        std::vector<int> yb;
        for (auto i : idx) yb.push_back(train.labels[i]);
        task = nn::cross_entropy(res.output, yb);
      }
      log.loss_task += task.value;

      nn::GateGradients gate_grads;
      if (penalize) {
        for (std::size_t k = 0; k < ebms.size(); ++k) {
          auto& m = ebms[k];
          const Matrix& s = res.trace.gates[m.layer_index];
          for (std::size_t r = 0; r < sch.ebm_steps_per_batch; ++r) {
            auto lc = sch.langevin;
            lc.noise_seed = mix_seed(sch.seed ^ 0xEB3, (step * 64 + k) * 16 + r);
            ebm_mle_step(s, m.f, m.prior, lc, sch.ebm_optimizer, m.opt_state);
          }
        }
        auto cl = complexity_loss(res.trace, ebms);
        log.loss_complexity += cl.value;
        for (auto& [li, g] : cl.gate_grads)
          for (double& v : g.data()) v *= sch.lambda;
        gate_grads = std::move(cl.gate_grads);
      }

      auto grads = nn::backward(net, res.trace, task.out_grad, penalize ? &gate_grads : nullptr);
      if (sch.regularizer != Regularizer::None && sch.reg_weight > 0.0) {
        const auto pen = nn::weight_penalty(
            sch.regularizer == Regularizer::L1 ? nn::LossKind::L1Reg : nn::LossKind::L2Reg, net);
        log.loss_reg += pen.value;
        grads.add_scaled(pen.grads, sch.reg_weight);
      }
      if (!std::isfinite(task.value) || !grads.all_finite())
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch));
      nn::optimizer_step(net, grads, opt_state, sch.optimizer);
    }
    if (batches) {
      log.loss_task /= static_cast<double>(batches);
      log.loss_complexity /= static_cast<double>(batches);
      log.loss_reg /= static_cast<double>(batches);
    }
    logs.push_back(log);
    if (hook) hook(epoch, log);
  }
  return logs;
}

/// Plain task training (lambda forced to 0).
inline std::vector<EpochLog> train_task_only(nn::Network& net, const data::Dataset& train,
                                             Schedule sch, const EpochHook& hook = {}) {
  sch.lambda = 0.0;
  std::vector<EnergyModel> none;
  return alternating_train(net, train, none, sch, hook);
}

}  // namespace tcx::ebm
