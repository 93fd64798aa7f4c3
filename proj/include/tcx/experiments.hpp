#pragma once

// Desk-scale studies built from the other modules. Every study is a pure
// function of its inputs and seeds.

#include <limits>

#include "tcx/data.hpp"
#include "tcx/ebm.hpp"
#include "tcx/estimators.hpp"
#include "tcx/gating.hpp"
#include "tcx/nn.hpp"

namespace tcx::exp {

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

inline LabelVector label_vector(const data::Dataset& ds) {
  return {ds.labels, ds.num_classes};
}

/// Checksum of everything an estimator must not touch.
inline std::uint64_t state_checksum(const nn::Network& net) { return nn::param_checksum(net); }

/// Hash of the estimator configuration, logged with every record.
inline std::uint64_t kernel_config_hash(const KernelConfig& cfg, EstimatorKind kind) {
  std::string s = std::string(to_string(kind)) + ";" + nn::format_double(cfg.kappa_fc) + ";" +
                  nn::format_double(cfg.kappa_conv_like) + ";" + std::to_string(cfg.synth_seed);
  for (const auto& [id, k] : cfg.overrides) s += ";" + std::to_string(id) + "=" + nn::format_double(k);
  return crc64({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}

/// Deterministic + stochastic capture and report over an analysis set.
inline ComplexityReport analyze(const nn::Network& net, const data::Dataset& analysis,
                                const KernelConfig& cfg, EstimatorKind kind,
                                std::uint64_t sampling_seed) {
  const auto det = capture_record(net, analysis.features, Provenance::DeterministicPass);
  const auto sto = net.has_sampling()
                       ? capture_record(net, analysis.features, Provenance::StochasticPass,
                                        sampling_seed)
                       : det;
  return build_report(sto, det, label_vector(analysis), cfg, kind);
}

// ---------------------------------------------------------------------------
// Training with tracking
// ---------------------------------------------------------------------------

struct LayerMetrics {
  std::uint32_t layer_id = 0;
  double H = 0.0;
  double I_XS = 0.0;
  std::optional<double> I_XSY;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  double gap = 0.0;  // test_loss - train_loss
  /// Mean minibatch losses of the epoch; zero for epoch 0.
  double loss_task = 0.0;
  double loss_complexity = 0.0;
  /// Empty when no analysis ran at this epoch.
  std::vector<LayerMetrics> layers;
  std::vector<double> suffix_H;
};

struct RunLog {
  std::string run_id;
  std::uint64_t seed = 0;
  double lambda = 0.0;
  EstimatorKind estimator = EstimatorKind::Kde;
  std::uint64_t estimator_config_hash = 0;
  std::vector<std::size_t> analysis_indices;
  std::vector<EpochRecord> epochs;
};

struct TrackingConfig {
  std::size_t analysis_every = 1;
  std::size_t analysis_size = 2000;
  std::uint64_t analysis_seed = 0;
  EstimatorKind estimator = EstimatorKind::Kde;
  KernelConfig kernel{};
};

/// Trains `net` under `schedule`, recording losses every epoch and gate
/// complexities at epoch 0, every `analysis_every` epochs and at the end.
inline RunLog train_with_tracking(nn::Network& net, const data::Dataset& train,
                                  const data::Dataset& test, std::vector<ebm::EnergyModel>& ebms,
                                  const ebm::Schedule& schedule, const TrackingConfig& track,
                                  const std::string& run_id) {
  if (track.analysis_every == 0)
    throw std::invalid_argument("train_with_tracking: analysis_every must be positive");
  track.kernel.validate();
  RunLog log;
  log.run_id = run_id;
  log.seed = schedule.seed;
  log.lambda = schedule.lambda;
  log.estimator = track.estimator;
  log.estimator_config_hash = kernel_config_hash(track.kernel, track.estimator);
  data::AnalysisSubset chosen;
  const auto analysis =
      data::subsample_analysis_set(train, track.analysis_size, track.analysis_seed, &chosen);
  log.analysis_indices = chosen.indices;

  auto record = [&](std::size_t epoch, const ebm::EpochLog* el) {
    EpochRecord r;
    r.epoch = epoch;
    const auto opts = ebm::training_options(net, schedule, nn::Mode::Eval);
    r.train_loss = ebm::evaluate_loss(net, train, opts);
    r.test_loss = ebm::evaluate_loss(net, test, opts);
    r.gap = r.test_loss - r.train_loss;
    if (el) {
      r.loss_task = el->loss_task;
      r.loss_complexity = el->loss_complexity;
    }
    const bool due = epoch % track.analysis_every == 0 || epoch == schedule.epochs;
    if (due && !net.gating_layers().empty()) {
      const auto before = state_checksum(net);
      const auto rep = analyze(net, analysis, track.kernel, track.estimator,
                               mix_seed(track.analysis_seed, epoch));
      if (state_checksum(net) != before)
        throw std::logic_error("train_with_tracking: analysis modified the network");
      for (const auto& l : rep.layers) r.layers.push_back({l.layer_id, l.H, l.I_XS, l.I_XSY});
      r.suffix_H = rep.suffix_H;
    }
    log.epochs.push_back(std::move(r));
  };

  record(0, nullptr);
  ebm::alternating_train(net, train, ebms, schedule,
                         [&](std::size_t epoch, const ebm::EpochLog& el) { record(epoch, &el); });
  return log;
}

// ---------------------------------------------------------------------------
// Layerwise study
// ---------------------------------------------------------------------------

struct LayerwiseResult {
  /// suffix[l-1] = H(Sigma_l, ..., Sigma_L).
  std::vector<double> suffix_exact;
  std::vector<double> suffix_kde;
  bool exact_non_increasing = true;
};

inline bool non_increasing(std::span<const double> v, double tol = 1e-9) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[i - 1] + tol) return false;
  return true;
}

inline bool non_decreasing(std::span<const double> v, double tol = 1e-9) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] < v[i - 1] - tol) return false;
  return true;
}

inline LayerwiseResult layerwise_study(const nn::Network& net, const Matrix& analysis_set,
                                       const KernelConfig& cfg = {}) {
  const auto rec = capture_record(net, analysis_set, Provenance::DeterministicPass);
  LayerwiseResult r;
  const std::size_t L = rec.layers.size();
  for (std::size_t l = 1; l <= L; ++l) {
    r.suffix_exact.push_back(joint_entropy(rec, l, L, EstimatorKind::Exact, cfg));
    r.suffix_kde.push_back(joint_entropy(rec, l, L, EstimatorKind::Kde, cfg));
  }
  r.exact_non_increasing = non_increasing(r.suffix_exact);
  return r;
}

// ---------------------------------------------------------------------------
// Disentanglement study
// ---------------------------------------------------------------------------

struct DisentanglementConfig {
  /// Seeds of the models; the architecture and schedule are shared.
  std::vector<std::uint64_t> seeds;
  /// 1-based gating layer; 0 selects the penultimate gating layer.
  std::size_t layer = 0;
  std::size_t analysis_size = 2000;
  std::uint64_t analysis_seed = 0;
  ebm::Schedule schedule{};
  EstimatorKind estimator = EstimatorKind::Exact;
  KernelConfig kernel{};
};

struct DisentanglementPoint {
  std::uint64_t seed = 0;
  double H = 0.0;
  double TC = 0.0;
  double C = 0.0;
  /// H + TC - C under the exact estimator.
  double exact_residual = 0.0;
};

struct DisentanglementResult {
  std::size_t layer = 0;
  std::vector<DisentanglementPoint> points;
  double pearson = 0.0;
  double max_exact_residual = 0.0;
};

inline std::size_t resolve_layer(std::size_t requested, std::size_t gating_count) {
  if (gating_count == 0) throw std::invalid_argument("network has no gating layers");
  if (requested == 0) return gating_count >= 2 ? gating_count - 1 : 1;
  if (requested > gating_count) throw std::invalid_argument("gating layer index out of range");
  return requested;
}

inline DisentanglementResult disentanglement_study(const nn::NetSpec& spec,
                                                   const data::Dataset& train,
                                                   const DisentanglementConfig& cfg) {
  if (cfg.seeds.size() < 3)
    throw std::invalid_argument("disentanglement_study: at least 3 models are required");
  const auto analysis = data::subsample_analysis_set(train, cfg.analysis_size, cfg.analysis_seed);
  DisentanglementResult out;
  std::vector<double> hs, tcs;
  for (auto seed : cfg.seeds) {
    auto net = nn::init_network(spec, seed);
    auto sch = cfg.schedule;
    sch.seed = mix_seed(cfg.schedule.seed, seed);
    ebm::train_task_only(net, train, sch);
    const auto rec = capture_record(net, analysis.features, Provenance::DeterministicPass);
    out.layer = resolve_layer(cfg.layer, rec.layers.size());
    const auto& g = rec.layers[out.layer - 1];
    DisentanglementPoint p;
    p.seed = seed;
    p.C = marginal_entropies(g).sum;
    p.H = entropy(g, cfg.estimator, cfg.kernel);
    p.TC = total_correlation(g, cfg.estimator, cfg.kernel);
    const double eh = exact_entropy(g);
    p.exact_residual = eh + exact_tc(g) - p.C;
    out.max_exact_residual = std::max(out.max_exact_residual, std::abs(p.exact_residual));
    hs.push_back(p.H);
    tcs.push_back(p.TC);
    out.points.push_back(p);
  }
  out.pearson = pearson(hs, tcs);
  return out;
}

// ---------------------------------------------------------------------------
// Distillation ceiling
// ---------------------------------------------------------------------------

struct DistillTarget {
  std::string name;
  /// Built from (input dim, output dim).
  std::function<nn::NetSpec(std::size_t, std::size_t)> make;
};

struct DistillConfig {
  std::vector<std::size_t> task_ns;
  std::vector<DistillTarget> targets;
  std::size_t trials = 1;
  std::size_t image_side = 8;
  std::size_t n_train = 512;
  std::size_t analysis_size = 512;
  std::size_t task_width = 64;
  std::size_t out_dim = 4;
  ebm::Schedule schedule{};
  EstimatorKind estimator = EstimatorKind::Kde;
  KernelConfig kernel{};
  std::uint64_t seed = 0;
};

struct DistillCell {
  std::size_t task_n = 0;
  std::string target;
  std::size_t trial = 0;
  /// Joint entropy of all gating layers of the trained target (0 without gates).
  double H = 0.0;
  double train_mse = 0.0;
};

/// Target network trained to mimic a frozen task MLP on grayscale synthetic
/// images, with an MSE loss.
inline DistillCell distill_once(std::size_t task_n, const DistillTarget& target,
                                std::size_t trial, const DistillConfig& cfg) {
  const std::uint64_t s = mix_seed(cfg.seed, (task_n * 1009 + trial) * 131);
  const Matrix x = data::to_grayscale(data::make_synthetic_images(s, cfg.n_train, cfg.image_side));
  const auto task = data::make_task_mlp(task_n, x.cols(), cfg.task_width, cfg.out_dim,
                                        mix_seed(s, 1));
  data::Dataset ds;
  ds.features = x;
  ds.labels.assign(x.rows(), 0);
  ds.num_classes = 1;
  ds.targets = nn::forward(task, x, {.capture = false}).output;
  ds.split = "train";

  auto net = nn::init_network(target.make(x.cols(), cfg.out_dim), mix_seed(s, 2));
  auto sch = cfg.schedule;
  sch.seed = mix_seed(s, 3);
  ebm::train_task_only(net, ds, sch);

  DistillCell c{task_n, target.name, trial, 0.0, 0.0};
  c.train_mse = ebm::evaluate_loss(net, ds, nn::natural_options(net));
  if (!net.gating_layers().empty()) {
    auto idx = data::subsample_indices(ds.size(), cfg.analysis_size, mix_seed(s, 4)).indices;
    const auto rec =
        capture_record(net, x.select_rows(idx), Provenance::DeterministicPass);
    c.H = joint_entropy(rec, 1, rec.layers.size(), cfg.estimator, cfg.kernel);
  }
  return c;
}

inline std::vector<DistillCell> distillation_ceiling(const DistillConfig& cfg) {
  std::vector<DistillCell> out;
  for (auto n : cfg.task_ns)
    for (const auto& t : cfg.targets)
      for (std::size_t k = 0; k < cfg.trials; ++k) out.push_back(distill_once(n, t, k, cfg));
  return out;
}

// ---------------------------------------------------------------------------
// Lambda sweep
// ---------------------------------------------------------------------------

struct Baseline {
  std::string name;  // "l1" or "l2"
  ebm::Regularizer regularizer = ebm::Regularizer::None;
  double weight = 0.0;
};

struct SweepConfig {
  std::vector<double> lambdas;
  std::vector<std::uint64_t> seeds;
  std::vector<Baseline> baselines;
  ebm::Schedule schedule{};
  std::size_t analysis_size = 2000;
  std::uint64_t analysis_seed = 0;
  EstimatorKind estimator = EstimatorKind::Kde;
  KernelConfig kernel{};
};

struct SweepEntry {
  std::string variant;  // "lambda", "l1", "l2"
  double lambda = 0.0;
  double reg_weight = 0.0;
  std::uint64_t seed = 0;
  /// Sum of H(Sigma_l) over the penalised layers.
  double H = 0.0;
  /// Same sum for I(X; Sigma_l; Y); NaN when undefined.
  double I_XSY = 0.0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  double gap = 0.0;
  std::vector<ebm::EpochLog> logs;
  std::uint64_t param_checksum = 0;
};

struct SweepResult {
  std::vector<SweepEntry> entries;
  /// Spearman correlation of lambda against final H over all lambda entries.
  double spearman = 0.0;
};

inline SweepEntry sweep_one(const nn::NetSpec& spec, const data::Dataset& train,
                            const data::Dataset& test, const data::Dataset& analysis,
                            ebm::Schedule sch, std::uint64_t seed, const SweepConfig& cfg,
                            std::string variant) {
  auto net = nn::init_network(spec, seed);
  sch.seed = mix_seed(cfg.schedule.seed, seed);
  auto ebms = sch.lambda > 0.0
                  ? ebm::make_energy_models(net, sch.penalize_last, sch.ebm_hidden,
                                            mix_seed(sch.seed, 0xEB))
                  : std::vector<ebm::EnergyModel>{};
  SweepEntry e;
  e.variant = std::move(variant);
  e.lambda = sch.lambda;
  e.reg_weight = sch.reg_weight;
  e.seed = seed;
  e.logs = ebm::alternating_train(net, train, ebms, sch);
  const auto opts = ebm::training_options(net, sch, nn::Mode::Eval);
  e.train_loss = ebm::evaluate_loss(net, train, opts);
  e.test_loss = ebm::evaluate_loss(net, test, opts);
  e.gap = e.test_loss - e.train_loss;
  e.param_checksum = nn::param_checksum(net);

  const auto rep = analyze(net, analysis, cfg.kernel, cfg.estimator, mix_seed(sch.seed, 7));
  const auto penalized = ebm::penalized_layers(net, sch.penalize_last);
  const auto gating = net.gating_layers();
  for (std::size_t k = 0; k < gating.size(); ++k) {
    if (std::find(penalized.begin(), penalized.end(), gating[k]) == penalized.end()) continue;
    e.H += rep.layers[k].H;
    e.I_XSY += rep.layers[k].I_XSY.value_or(std::numeric_limits<double>::quiet_NaN());
  }
  return e;
}

inline SweepResult lambda_sweep(const nn::NetSpec& spec, const data::Dataset& train,
                                const data::Dataset& test, const SweepConfig& cfg) {
  if (std::find(cfg.lambdas.begin(), cfg.lambdas.end(), 0.0) == cfg.lambdas.end())
    throw std::invalid_argument("lambda_sweep: the lambda grid must include 0");
  if (cfg.seeds.empty()) throw std::invalid_argument("lambda_sweep: no seeds");
  const auto analysis = data::subsample_analysis_set(train, cfg.analysis_size, cfg.analysis_seed);
  SweepResult out;
  std::vector<double> xs, hs;
  for (auto seed : cfg.seeds) {
    for (double lam : cfg.lambdas) {
      auto sch = cfg.schedule;
      sch.lambda = lam;
      sch.regularizer = ebm::Regularizer::None;
      sch.reg_weight = 0.0;
      out.entries.push_back(sweep_one(spec, train, test, analysis, sch, seed, cfg, "lambda"));
      xs.push_back(lam);
      hs.push_back(out.entries.back().H);
    }
    for (const auto& b : cfg.baselines) {
      auto sch = cfg.schedule;
      sch.lambda = 0.0;
      sch.regularizer = b.regularizer;
      sch.reg_weight = b.weight;
      out.entries.push_back(sweep_one(spec, train, test, analysis, sch, seed, cfg, b.name));
    }
  }
  out.spearman = xs.size() >= 2 ? spearman(xs, hs) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Adversarial perturbations
// ---------------------------------------------------------------------------

struct AttackConfig {
  double step_size = 0.5 / 255.0;
  std::size_t max_iters = 20000;
  double utility_target = 40.0;

  void validate() const {
    if (!(step_size > 0.0)) throw std::invalid_argument("AttackConfig: step size must be > 0");
  }
};

struct AttackResult {
  std::vector<double> epsilon;
  /// L2 norm of epsilon; +inf when the target utility was never reached.
  double norm = 0.0;
  bool reached = false;
  bool already_misclassified = false;
  std::size_t iterations = 0;
};

/// U(x) = max_{y' != y} h_{y'}(x) - h_y(x), with its input gradient.
inline std::pair<double, std::vector<double>> untargeted_utility(const nn::Network& net,
                                                                 std::span<const double> x,
                                                                 int y) {
  Matrix in(1, x.size(), std::vector<double>(x.begin(), x.end()));
  const auto res = nn::forward(net, in, nn::natural_options(net));
  const std::size_t C = res.output.cols();
  if (y < 0 || static_cast<std::size_t>(y) >= C)
    throw std::invalid_argument("untargeted_utility: label out of range");
  std::size_t best = y == 0 ? 1 : 0;
  for (std::size_t c = 0; c < C; ++c)
    if (c != static_cast<std::size_t>(y) && res.output(0, c) > res.output(0, best)) best = c;
  Matrix g(1, C, 0.0);
  g(0, best) = 1.0;
  g(0, static_cast<std::size_t>(y)) -= 1.0;
  const auto grads = nn::backward(net, res.trace, g);
  const auto row = grads.input.row(0);
  return {res.output(0, best) - res.output(0, static_cast<std::size_t>(y)),
          std::vector<double>(row.begin(), row.end())};
}

inline int predict(const nn::Network& net, std::span<const double> x) {
  Matrix in(1, x.size(), std::vector<double>(x.begin(), x.end()));
  auto o = nn::natural_options(net);
  o.capture = false;
  return nn::argmax_rows(nn::forward(net, in, o).output)[0];
}

/// Iterated L2-normalised gradient ascent on U from epsilon = 0, keeping the
/// smallest-norm iterate whose utility reaches the target.
inline AttackResult pgd_min_perturbation(const nn::Network& net, std::span<const double> x,
                                         int y, const AttackConfig& cfg) {
  cfg.validate();
  AttackResult r;
  r.epsilon.assign(x.size(), 0.0);
  if (predict(net, x) != y) {
    r.already_misclassified = true;
    r.reached = true;
    return r;
  }
  std::vector<double> eps(x.size(), 0.0), xe(x.begin(), x.end());
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t it = 1; it <= cfg.max_iters; ++it) {
    auto [u, g] = untargeted_utility(net, xe, y);
    double gn = 0.0;
    for (double v : g) gn += v * v;
    gn = std::sqrt(gn);
    if (!(gn > 0.0)) break;
    for (std::size_t k = 0; k < eps.size(); ++k) {
      eps[k] += cfg.step_size * g[k] / gn;
      xe[k] = x[k] + eps[k];
    }
    r.iterations = it;
    const double un = untargeted_utility(net, xe, y).first;
    if (un >= cfg.utility_target) {
      double norm = 0.0;
      for (double v : eps) norm += v * v;
      norm = std::sqrt(norm);
      if (norm < best) {
        best = norm;
        r.epsilon = eps;
      }
      break;
    }
  }
  r.reached = std::isfinite(best);
  r.norm = best;
  if (!r.reached) r.epsilon.assign(x.size(), 0.0);
  return r;
}

struct TransferResult {
  /// rates(i, j): fraction of source-i successful examples that change model j's prediction.
  Matrix rates;
  std::vector<std::size_t> successes;
};

inline TransferResult transferability_matrix(std::span<const nn::Network> models,
                                             const Matrix& x, std::span<const int> y,
                                             const AttackConfig& cfg) {
  if (models.size() < 2) throw std::invalid_argument("transferability_matrix: need >= 2 models");
  for (const auto& m : models)
    if (m.input_dim() != x.cols())
      throw std::invalid_argument("transferability_matrix: models disagree on input space");
  const std::size_t K = models.size();
  TransferResult out{Matrix(K, K, 0.0), std::vector<std::size_t>(K, 0)};
  for (std::size_t i = 0; i < K; ++i) {
    for (std::size_t s = 0; s < x.rows(); ++s) {
      const auto xs = x.row(s);
      if (predict(models[i], xs) != y[s]) continue;
      const auto a = pgd_min_perturbation(models[i], xs, y[s], cfg);
      if (!a.reached) continue;
      ++out.successes[i];
      std::vector<double> adv(xs.begin(), xs.end());
      for (std::size_t k = 0; k < adv.size(); ++k) adv[k] += a.epsilon[k];
      for (std::size_t j = 0; j < K; ++j)
        if (predict(models[j], adv) != predict(models[j], xs)) out.rates(i, j) += 1.0;
    }
    if (out.successes[i])
      for (std::size_t j = 0; j < K; ++j) out.rates(i, j) /= static_cast<double>(out.successes[i]);
  }
  return out;
}

}  // namespace tcx::exp
