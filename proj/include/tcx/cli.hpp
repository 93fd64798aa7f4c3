#pragma once

// Command-line driver: train, analyze, sweep, disentangle, distill, attack,
// report. Exit status 0 on success, 2 on configuration errors, 3 on numeric
// divergence, 1 on anything else.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "tcx/data.hpp"
#include "tcx/ebm.hpp"
#include "tcx/estimators.hpp"
#include "tcx/experiments.hpp"
#include "tcx/gating.hpp"
#include "tcx/manifest.hpp"
#include "tcx/nn.hpp"
#include "tcx/report.hpp"

namespace tcx::cli {

namespace fs = std::filesystem;
using report::fmt;
using report::Table;

struct Options {
  std::string command;
  std::string manifest_path;
  std::optional<std::int64_t> seed;
  std::string out;
  std::size_t jobs = 1;
  std::optional<std::string> estimator;
  std::optional<double> kappa_fc, kappa_conv, lambda;
  bool allow_mixed = false;
  std::string checkpoint;
  std::vector<std::string> inputs;
  // report plot overrides
  std::string plot, x, y, group, title;
  std::vector<std::string> where;
};

// ---------------------------------------------------------------------------
// Manifest -> objects
// ---------------------------------------------------------------------------

inline Manifest effective_manifest(const Options& o) {
  Manifest m = o.manifest_path.empty() ? Manifest() : Manifest::load(o.manifest_path);
  if (o.seed) m.set("seed", std::to_string(*o.seed));
  if (o.estimator) m.set("estimate.estimator", *o.estimator);
  if (o.kappa_fc) m.set("estimate.kappa_fc", fmt(*o.kappa_fc));
  if (o.kappa_conv) m.set("estimate.kappa_conv", fmt(*o.kappa_conv));
  if (o.lambda) m.set("ebm.lambda", fmt(*o.lambda));
  return m;
}

inline std::uint64_t base_seed(const Manifest& m) {
  return static_cast<std::uint64_t>(m.integer("seed"));
}

struct Datasets {
  data::Dataset train, test;
};

inline Datasets load_datasets(const Manifest& m) {
  Datasets d;
  const auto seed = base_seed(m);
  if (m.str("data.source") == "synthetic") {
    data::BlobModel model;
    d.train = data::make_synthetic_classification(mix_seed(seed, 0xDA7A), m.count("data.n_train"),
                                                  m.count("data.dim"), m.count("data.classes"),
                                                  m.real("data.separation"), &model);
    d.test = data::sample_blobs(model, mix_seed(seed, 0x7E57), m.count("data.n_test"));
  } else {
    for (auto k : {"data.train_images", "data.train_labels", "data.test_images", "data.test_labels"})
      if (m.str(k).empty()) throw ConfigError(std::string(k) + " is required for idx data");
    d.train = data::load_idx(m.str("data.train_images"), m.str("data.train_labels"));
    d.test = data::load_idx(m.str("data.test_images"), m.str("data.test_labels"));
    d.test.num_classes = d.train.num_classes = std::max(d.train.num_classes, d.test.num_classes);
    if (m.str("data.grayscale") == "mean") {
      d.train.features = data::to_grayscale(d.train.features);
      d.test.features = data::to_grayscale(d.test.features);
    }
  }
  d.train.split = "train";
  d.test.split = "test";
  const double noise = m.real("data.label_noise");
  if (noise < 0.0 || noise > 1.0) throw ConfigError("data.label_noise must be in [0, 1]");
  if (noise > 0.0) data::corrupt_labels(d.train, noise, mix_seed(seed, 0x401E));
  if (m.flag("data.normalize")) {
    data::normalize(d.train);
    data::apply_normalization(d.test, *d.train.normalization);
  }
  return d;
}

inline nn::LayerSpec gate_layer(const Manifest& m) {
  if (m.str("model.gate") == "swish") {
    const double b = m.real("model.swish_beta");
    if (!(b > 0.0)) throw ConfigError("model.swish_beta must be > 0");
    return nn::LayerSpec::swish(b);
  }
  return nn::LayerSpec::relu();
}

inline nn::NetSpec build_spec(const Manifest& m, std::size_t in, std::size_t out) {
  const auto gate = gate_layer(m);
  const double drop = m.real("model.dropout");
  if (drop < 0.0 || drop >= 1.0) throw ConfigError("model.dropout must be in [0, 1)");
  nn::NetSpec spec;
  if (m.str("model.arch") == "stacked") {
    const auto widths = m.counts("model.widths");
    if (widths.empty()) throw ConfigError("model.widths must list at least one width");
    std::size_t prev = in;
    for (auto w : widths) {
      if (w == 0) throw ConfigError("model.widths entries must be positive");
      spec.push_back(nn::LayerSpec::dense(prev, w));
      spec.push_back(gate);
      if (drop > 0.0) spec.push_back(nn::LayerSpec::dropout(drop));
      prev = w;
    }
    spec.push_back(nn::LayerSpec::dense(prev, out));
  } else {
    const auto w = m.count("model.width"), blocks = m.count("model.blocks");
    if (w == 0) throw ConfigError("model.width must be positive");
    spec.push_back(nn::LayerSpec::dense(in, w));
    for (std::size_t b = 0; b < blocks; ++b) {
      const std::string tag = "b" + std::to_string(b);
      spec.push_back(nn::LayerSpec::skip_start(tag));
      spec.push_back(nn::LayerSpec::dense(w, w));
      spec.push_back(gate);
      if (drop > 0.0) spec.push_back(nn::LayerSpec::dropout(drop));
      spec.push_back(nn::LayerSpec::skip_end(tag));
    }
    spec.push_back(nn::LayerSpec::dense(w, out));
  }
  try {
    nn::validate_spec(spec);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  return spec;
}

inline ebm::Schedule build_schedule(const Manifest& m) {
  ebm::Schedule s;
  s.lambda = m.real("ebm.lambda");
  if (s.lambda < 0.0) throw ConfigError("ebm.lambda must be >= 0");
  s.epochs = m.count("train.epochs");
  s.batch_size = m.count("train.batch_size");
  if (s.batch_size == 0) throw ConfigError("train.batch_size must be positive");
  s.optimizer.kind =
      m.str("train.optimizer") == "sgd" ? nn::OptimizerKind::Sgd : nn::OptimizerKind::Adam;
  s.optimizer.lr = m.real("train.lr");
  s.optimizer.momentum = m.real("train.momentum");
  if (!(s.optimizer.lr > 0.0)) throw ConfigError("train.lr must be > 0");
  const auto& r = m.str("train.regularizer");
  s.regularizer = r == "l1"   ? ebm::Regularizer::L1
                  : r == "l2" ? ebm::Regularizer::L2
                              : ebm::Regularizer::None;
  s.reg_weight = m.real("train.reg_weight");
  s.recenter = m.flag("train.recenter");
  s.beta = m.real("ebm.beta");
  s.penalize_last = m.count("ebm.penalize_last");
  s.ebm_hidden = m.count("ebm.hidden");
  s.ebm_steps_per_batch = m.count("ebm.steps_per_batch");
  s.langevin.steps = m.count("ebm.langevin_steps");
  s.langevin.step_size = m.real("ebm.langevin_step_size");
  s.ebm_optimizer.lr = m.real("ebm.lr");
  try {
    s.langevin.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("ebm: ") + e.what());
  }
  s.seed = mix_seed(base_seed(m), 0x7EA1);
  return s;
}

inline KernelConfig build_kernel(const Manifest& m) {
  KernelConfig k;
  k.kappa_fc = m.real("estimate.kappa_fc");
  k.kappa_conv_like = m.real("estimate.kappa_conv");
  k.synth_seed = static_cast<std::uint64_t>(m.integer("estimate.synth_seed"));
  try {
    k.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("estimate: ") + e.what());
  }
  return k;
}

inline std::vector<EstimatorKind> estimator_kinds(const Manifest& m) {
  const auto& e = m.str("estimate.estimator");
  if (e == "both") return {EstimatorKind::Kde, EstimatorKind::Exact};
  return {e == "exact" ? EstimatorKind::Exact : EstimatorKind::Kde};
}

inline exp::AttackConfig build_attack(const Manifest& m) {
  exp::AttackConfig a;
  a.step_size = m.real("attack.step_size");
  a.max_iters = m.count("attack.max_iters");
  a.utility_target = m.real("attack.utility_target");
  if (!(a.step_size > 0.0)) throw ConfigError("attack.step_size must be > 0");
  return a;
}

// ---------------------------------------------------------------------------
// Metric CSV
// ---------------------------------------------------------------------------

inline Table metric_table() {
  return Table{{"run_id", "epoch", "layer_id", "metric", "estimator", "value_nats", "value_bits",
                "manifest_hash", "loss_task", "loss_complexity", "lambda"},
               {}};
}

struct RowContext {
  std::string run_id, hash, loss_task, loss_complexity, lambda;
};

inline void add_metric(Table& t, const RowContext& c, long epoch, std::uint32_t layer,
                       const std::string& metric, const std::string& estimator, double v) {
  t.add({c.run_id, std::to_string(epoch), std::to_string(layer), metric, estimator, fmt(v),
         fmt(v / kLn2), c.hash, c.loss_task, c.loss_complexity, c.lambda});
}

inline Table run_log_table(const exp::RunLog& log, const std::string& hash) {
  Table t = metric_table();
  const std::string est = to_string(log.estimator);
  for (const auto& r : log.epochs) {
    RowContext c{log.run_id, hash, r.epoch ? fmt(r.loss_task) : "",
                 r.epoch ? fmt(r.loss_complexity) : "", fmt(log.lambda)};
    const long e = static_cast<long>(r.epoch);
    add_metric(t, c, e, 0, "train_loss", "none", r.train_loss);
    add_metric(t, c, e, 0, "test_loss", "none", r.test_loss);
    add_metric(t, c, e, 0, "gap", "none", r.gap);
    for (const auto& l : r.layers) {
      add_metric(t, c, e, l.layer_id, "H", est, l.H);
      add_metric(t, c, e, l.layer_id, "I_XS", est, l.I_XS);
      add_metric(t, c, e, l.layer_id, "I_XSY", est,
                 l.I_XSY.value_or(std::numeric_limits<double>::quiet_NaN()));
    }
    for (std::size_t l = 0; l < r.suffix_H.size(); ++l)
      add_metric(t, c, e, static_cast<std::uint32_t>(l + 1), "suffix_H", est, r.suffix_H[l]);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline fs::path output_dir(const Options& o, const Manifest& m) {
  fs::path p;
  if (!o.out.empty()) {
    p = o.out;
  } else if (!m.str("out").empty()) {
    p = m.str("out");
  } else if (const char* env = std::getenv("TCX_OUT"); env && *env) {
    p = env;
  } else {
    p = "tcx_out";
  }
  fs::create_directories(p);
  return p;
}

inline void say(const std::string& s) { std::cout << s << "\n"; }

inline int cmd_train(const Options& o) {
  const auto m = effective_manifest(o);
  const auto dir = output_dir(o, m);
  const auto d = load_datasets(m);
  const auto spec = build_spec(m, d.train.dim(), d.train.num_classes);
  auto sch = build_schedule(m);
  auto net = nn::init_network(spec, mix_seed(base_seed(m), 0x1417));
  auto ebms = sch.lambda > 0.0 ? ebm::make_energy_models(net, sch.penalize_last, sch.ebm_hidden,
                                                         mix_seed(sch.seed, 0xEB))
                               : std::vector<ebm::EnergyModel>{};
  exp::TrackingConfig track;
  track.analysis_every = m.count("estimate.analysis_every");
  if (track.analysis_every == 0) throw ConfigError("estimate.analysis_every must be positive");
  track.analysis_size = m.count("estimate.analysis_size");
  if (track.analysis_size == 0) throw ConfigError("estimate.analysis_size must be positive");
  track.analysis_seed = mix_seed(base_seed(m), 0xA5);
  track.estimator = estimator_kinds(m).front();
  track.kernel = build_kernel(m);

  const auto log = exp::train_with_tracking(net, d.train, d.test, ebms, sch, track,
                                            m.str("run_id"));
  const auto hash = m.hash_hex();
  report::write_table(run_log_table(log, hash), (dir / "train_log.csv").string());
  nn::save_network(net, (dir / "model").string(), "network " + hash);
  for (const auto& e : ebms)
    if (e.f.has_params())
      nn::save_network(*e.f.net, (dir / ("ebm_" + std::to_string(e.layer_index))).string(),
                       "ebm " + hash);
  std::string idx;
  for (auto i : log.analysis_indices) idx += std::to_string(i) + "\n";
  write_text_file((dir / "analysis_indices.txt").string(), idx);
  say("train: wrote " + (dir / "train_log.csv").string() + " and " + (dir / "model.tckp").string());
  return 0;
}

inline int cmd_analyze(const Options& o) {
  const auto m = effective_manifest(o);
  const auto dir = output_dir(o, m);
  const auto prefix = o.checkpoint.empty() ? (dir / "model").string() : o.checkpoint;
  const auto net = nn::load_network(prefix);
  const auto d = load_datasets(m);
  if (net.input_dim() != d.train.dim())
    throw ConfigError("checkpoint input dimension does not match the manifest data");
  const auto analysis = data::subsample_analysis_set(d.train, m.count("estimate.analysis_size"),
                                                     mix_seed(base_seed(m), 0xA5));
  const auto kernel = build_kernel(m);
  const auto hash = m.hash_hex();
  Table t = metric_table();
  RowContext c{m.str("run_id"), hash, "", "", m.str("ebm.lambda")};
  const long epoch = static_cast<long>(m.count("train.epochs"));
  for (auto kind : estimator_kinds(m)) {
    const auto rep = exp::analyze(net, analysis, kernel, kind, mix_seed(base_seed(m), 0x5A));
    for (const auto& r : report_rows(rep, c.run_id, epoch))
      add_metric(t, c, r.epoch, r.layer_id, r.metric, r.estimator, r.value);
  }
  report::write_table(t, (dir / "analysis.csv").string());
  const auto det = capture_record(net, analysis.features, Provenance::DeterministicPass);
  std::ofstream gates(dir / "gates.tcgd", std::ios::binary);
  write_all(gates, encode_gate_record(det));
  say("analyze: wrote " + (dir / "analysis.csv").string());
  return 0;
}

inline exp::SweepConfig build_sweep(const Manifest& m) {
  exp::SweepConfig cfg;
  cfg.lambdas = m.reals("sweep.lambdas");
  for (double l : cfg.lambdas)
    if (l < 0.0) throw ConfigError("sweep.lambdas entries must be >= 0");
  cfg.seeds = m.counts("sweep.seeds");
  if (cfg.seeds.empty()) throw ConfigError("sweep.seeds must not be empty");
  if (std::find(cfg.lambdas.begin(), cfg.lambdas.end(), 0.0) == cfg.lambdas.end())
    throw ConfigError("sweep.lambdas must include 0");
  if (m.real("sweep.l1") > 0.0) cfg.baselines.push_back({"l1", ebm::Regularizer::L1, m.real("sweep.l1")});
  if (m.real("sweep.l2") > 0.0) cfg.baselines.push_back({"l2", ebm::Regularizer::L2, m.real("sweep.l2")});
  cfg.schedule = build_schedule(m);
  cfg.analysis_size = m.count("estimate.analysis_size");
  cfg.analysis_seed = mix_seed(base_seed(m), 0xA5);
  cfg.estimator = estimator_kinds(m).front();
  cfg.kernel = build_kernel(m);
  return cfg;
}

inline int cmd_sweep(const Options& o) {
  const auto m = effective_manifest(o);
  const auto dir = output_dir(o, m);
  const auto d = load_datasets(m);
  const auto spec = build_spec(m, d.train.dim(), d.train.num_classes);
  const auto res = exp::lambda_sweep(spec, d.train, d.test, build_sweep(m));
  const auto hash = m.hash_hex();
  Table t{{"variant", "lambda", "reg_weight", "seed", "H", "I_XSY", "train_loss", "test_loss",
           "gap", "manifest_hash"},
          {}};
  Table e{{"variant", "lambda", "reg_weight", "seed", "epoch", "loss_task", "loss_complexity",
           "loss_reg", "manifest_hash"},
          {}};
  for (const auto& r : res.entries) {
    t.add({r.variant, fmt(r.lambda), fmt(r.reg_weight), std::to_string(r.seed), fmt(r.H),
           fmt(r.I_XSY), fmt(r.train_loss), fmt(r.test_loss), fmt(r.gap), hash});
    for (const auto& l : r.logs)
      e.add({r.variant, fmt(r.lambda), fmt(r.reg_weight), std::to_string(r.seed),
             std::to_string(l.epoch), fmt(l.loss_task), fmt(l.loss_complexity), fmt(l.loss_reg),
             hash});
  }
  report::write_table(t, (dir / "sweep.csv").string());
  report::write_table(e, (dir / "sweep_epochs.csv").string());
  say("sweep: spearman(lambda, H) = " + fmt(res.spearman) + "; wrote " +
      (dir / "sweep.csv").string());
  return 0;
}

inline int cmd_disentangle(const Options& o) {
  const auto m = effective_manifest(o);
  const auto dir = output_dir(o, m);
  const auto d = load_datasets(m);
  const auto spec = build_spec(m, d.train.dim(), d.train.num_classes);
  exp::DisentanglementConfig cfg;
  const auto n = m.count("disentangle.models");
  if (n < 3) throw ConfigError("disentangle.models must be at least 3");
  for (std::size_t k = 0; k < n; ++k) cfg.seeds.push_back(mix_seed(base_seed(m), 0xD15 + k));
  cfg.layer = m.count("disentangle.layer");
  cfg.analysis_size = m.count("estimate.analysis_size");
  cfg.analysis_seed = mix_seed(base_seed(m), 0xA5);
  cfg.schedule = build_schedule(m);
  cfg.estimator = estimator_kinds(m).front();
  cfg.kernel = build_kernel(m);
  const auto res = exp::disentanglement_study(spec, d.train, cfg);
  const auto hash = m.hash_hex();
  Table t{{"model", "layer_id", "estimator", "H", "TC", "C_l", "exact_residual", "manifest_hash"},
          {}};
  for (std::size_t k = 0; k < res.points.size(); ++k) {
    const auto& p = res.points[k];
    t.add({std::to_string(k), std::to_string(res.layer), to_string(cfg.estimator), fmt(p.H),
           fmt(p.TC), fmt(p.C), fmt(p.exact_residual), hash});
  }
  report::write_table(t, (dir / "disentangle.csv").string());
  say("disentangle: pearson(H, TC) = " + fmt(res.pearson) + "; wrote " +
      (dir / "disentangle.csv").string());
  return 0;
}

inline int cmd_distill(const Options& o) {
  const auto m = effective_manifest(o);
  const auto dir = output_dir(o, m);
  exp::DistillConfig cfg;
  for (auto n : m.counts("distill.task_ns")) cfg.task_ns.push_back(n);
  const auto depth = m.count("distill.depth"), width = m.count("distill.width");
  if (width == 0) throw ConfigError("distill.width must be positive");
  const auto gate = gate_layer(m);
  for (const auto& name : split(m.str("distill.targets"), ',')) {
    const auto t = trim(name);
    if (t == "stacked") {
      cfg.targets.push_back({t, [=](std::size_t in, std::size_t out) {
                               return depth == 0 ? nn::NetSpec{nn::LayerSpec::dense(in, out)}
                                                 : nn::stacked_mlp(in, std::vector<std::size_t>(depth, width), out, gate);
                             }});
    } else if (t == "residual") {
      cfg.targets.push_back({t, [=](std::size_t in, std::size_t out) {
                               return nn::residual_mlp(in, width, depth, out, gate);
                             }});
    } else if (t == "linear") {
      cfg.targets.push_back({t, [](std::size_t in, std::size_t out) {
                               return nn::NetSpec{nn::LayerSpec::dense(in, out)};
                             }});
    } else {
      throw ConfigError("distill.targets: unknown target '" + t + "'");
    }
  }
  cfg.trials = m.count("distill.trials");
  cfg.image_side = m.count("distill.image_side");
  cfg.n_train = m.count("distill.n_train");
  cfg.analysis_size = std::min(cfg.n_train, m.count("estimate.analysis_size"));
  cfg.task_width = m.count("distill.task_width");
  cfg.out_dim = m.count("distill.out_dim");
  if (cfg.image_side == 0 || cfg.n_train == 0 || cfg.task_width == 0 || cfg.out_dim == 0)
    throw ConfigError("distill: sizes must be positive");
  cfg.schedule = build_schedule(m);
  cfg.schedule.lambda = 0.0;
  cfg.estimator = estimator_kinds(m).front();
  cfg.kernel = build_kernel(m);
  cfg.seed = mix_seed(base_seed(m), 0xD157);
  const auto cells = exp::distillation_ceiling(cfg);
  const auto hash = m.hash_hex();
  Table t{{"task_n", "target", "trial", "H", "train_mse", "manifest_hash"}, {}};
  for (const auto& c : cells)
    t.add({std::to_string(c.task_n), c.target, std::to_string(c.trial), fmt(c.H),
           fmt(c.train_mse), hash});
  report::write_table(t, (dir / "distill.csv").string());
  say("distill: wrote " + (dir / "distill.csv").string());
  return 0;
}

inline int cmd_attack(const Options& o) {
  const auto m = effective_manifest(o);
  const auto dir = output_dir(o, m);
  const auto d = load_datasets(m);
  const auto spec = build_spec(m, d.train.dim(), d.train.num_classes);
  const auto attack = build_attack(m);
  const auto lambdas = m.reals("sweep.lambdas");
  if (lambdas.size() < 2) throw ConfigError("attack needs at least two sweep.lambdas");
  std::vector<nn::Network> models;
  for (double lam : lambdas) {
    if (lam < 0.0) throw ConfigError("sweep.lambdas entries must be >= 0");
    auto sch = build_schedule(m);
    sch.lambda = lam;
    auto net = nn::init_network(spec, mix_seed(base_seed(m), 0x1417));
    auto ebms = lam > 0.0 ? ebm::make_energy_models(net, sch.penalize_last, sch.ebm_hidden,
                                                    mix_seed(sch.seed, 0xEB))
                          : std::vector<ebm::EnergyModel>{};
    ebm::alternating_train(net, d.train, ebms, sch);
    models.push_back(std::move(net));
  }
  const auto n = std::min(m.count("attack.examples"), d.test.size());
  const auto idx = data::subsample_indices(d.test.size(), std::max<std::size_t>(n, 1),
                                           mix_seed(base_seed(m), 0xA77)).indices;
  const auto eval = d.test.subset(idx);
  const auto hash = m.hash_hex();

  Table rob{{"lambda", "examples", "reached", "mean_norm", "manifest_hash"}, {}};
  for (std::size_t k = 0; k < models.size(); ++k) {
    std::size_t attempted = 0, reached = 0;
    double sum = 0.0;
    for (std::size_t s = 0; s < eval.size(); ++s) {
      if (exp::predict(models[k], eval.features.row(s)) != eval.labels[s]) continue;
      ++attempted;
      const auto r = exp::pgd_min_perturbation(models[k], eval.features.row(s), eval.labels[s], attack);
      if (r.reached) ++reached, sum += r.norm;
    }
    rob.add({fmt(lambdas[k]), std::to_string(attempted), std::to_string(reached),
             fmt(reached ? sum / static_cast<double>(reached)
                         : std::numeric_limits<double>::quiet_NaN()),
             hash});
  }
  const auto tr = exp::transferability_matrix(models, eval.features, eval.labels, attack);
  Table tt{{"source_lambda", "target_lambda", "rate", "successes", "manifest_hash"}, {}};
  for (std::size_t i = 0; i < models.size(); ++i)
    for (std::size_t j = 0; j < models.size(); ++j)
      tt.add({fmt(lambdas[i]), fmt(lambdas[j]), fmt(tr.rates(i, j)),
              std::to_string(tr.successes[i]), hash});
  report::write_table(rob, (dir / "robustness.csv").string());
  report::write_table(tt, (dir / "transfer.csv").string());
  say("attack: wrote " + (dir / "robustness.csv").string() + " and " +
      (dir / "transfer.csv").string());
  return 0;
}

struct NamedPlot {
  std::string suffix;
  report::PlotSpec spec;
};

inline bool has_columns(const Table& t, std::initializer_list<const char*> cols) {
  for (auto c : cols)
    if (!t.find(c)) return false;
  return true;
}

/// Default plots for the CSV layouts this tool writes.
inline std::vector<NamedPlot> default_plots(const Table& t) {
  using report::PlotKind;
  std::vector<NamedPlot> out;
  if (has_columns(t, {"metric", "estimator", "epoch", "layer_id", "value_nats"})) {
    const auto cm = t.column("metric"), ce = t.column("estimator"), cep = t.column("epoch");
    std::vector<std::pair<std::string, std::string>> combos;
    std::set<std::string> epochs;
    for (const auto& r : t.rows) {
      epochs.insert(r[cep]);
      std::pair<std::string, std::string> k{r[cm], r[ce]};
      if (std::find(combos.begin(), combos.end(), k) == combos.end()) combos.push_back(k);
    }
    const bool over_epochs = epochs.size() > 1;
    for (const auto& [metric, est] : combos) {
      report::PlotSpec s;
      s.kind = PlotKind::Curve;
      s.x = over_epochs ? "epoch" : "layer_id";
      s.y = "value_nats";
      s.group = over_epochs ? "layer_id" : "run_id";
      s.where = {{"metric", metric}, {"estimator", est}};
      s.title = metric + " (" + est + ")";
      out.push_back({"_" + metric + "_" + est, s});
    }
  } else if (has_columns(t, {"variant", "lambda", "H", "gap"})) {
    out.push_back({"_H", {PlotKind::Curve, "lambda", "H", "seed", {{"variant", "lambda"}}, "H vs lambda"}});
    out.push_back({"_gap", {PlotKind::Curve, "lambda", "gap", "seed", {{"variant", "lambda"}}, "loss gap vs lambda"}});
  } else if (has_columns(t, {"H", "TC", "C_l"})) {
    out.push_back({"", {PlotKind::Scatter, "H", "TC", "", {}, "TC vs H"}});
  } else if (has_columns(t, {"task_n", "target", "H"})) {
    out.push_back({"", {PlotKind::Curve, "task_n", "H", "target", {}, "H vs task nonlinear layers"}});
  } else if (has_columns(t, {"lambda", "mean_norm"})) {
    out.push_back({"", {PlotKind::Curve, "lambda", "mean_norm", "", {}, "minimum perturbation norm"}});
  } else if (has_columns(t, {"source_lambda", "target_lambda", "rate"})) {
    out.push_back({"", {PlotKind::Curve, "target_lambda", "rate", "source_lambda", {}, "transfer rate"}});
  }
  return out;
}

inline std::string safe_name(std::string s) {
  for (char& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') c = '_';
  return s;
}

inline int cmd_report(const Options& o) {
  std::vector<fs::path> inputs;
  fs::path dir;
  if (!o.out.empty()) {
    dir = o.out;
  } else if (const char* env = std::getenv("TCX_OUT"); env && *env) {
    dir = env;
  } else {
    dir = "tcx_out";
  }
  if (o.inputs.empty()) {
    if (!fs::is_directory(dir)) throw ConfigError("no CSV inputs and no output directory " + dir.string());
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".csv") inputs.push_back(e.path());
    std::sort(inputs.begin(), inputs.end());
    if (inputs.empty()) throw ConfigError("no CSV files in " + dir.string());
  } else {
    for (const auto& p : o.inputs) inputs.emplace_back(p);
  }
  fs::create_directories(dir);

  std::vector<Table> tables;
  std::set<std::string> hashes;
  for (const auto& p : inputs) {
    tables.push_back(report::read_table(p.string()));
    for (const auto& h : report::manifest_hashes(tables.back())) hashes.insert(h);
  }
  if (hashes.size() > 1 && !o.allow_mixed)
    throw ConfigError("inputs come from " + std::to_string(hashes.size()) +
                      " different manifests (use --allow-mixed)");
  std::string hash_label;
  for (const auto& h : hashes) hash_label += (hash_label.empty() ? "" : ";") + h;

  std::size_t written = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto& t = tables[k];
    if (t.rows.empty()) throw FormatError(inputs[k].string() + ": CSV has no data rows");
    std::vector<NamedPlot> plots;
    if (!o.plot.empty()) {
      report::PlotSpec s;
      s.kind = o.plot == "scatter" ? report::PlotKind::Scatter : report::PlotKind::Curve;
      if (!o.x.empty()) s.x = o.x;
      if (!o.y.empty()) s.y = o.y;
      s.group = o.group;
      s.title = o.title;
      for (const auto& w : o.where) {
        const auto eq = w.find('=');
        if (eq == std::string::npos) throw ConfigError("--where expects column=value: " + w);
        s.where.emplace_back(w.substr(0, eq), w.substr(eq + 1));
      }
      plots.push_back({"", s});
    } else {
      plots = default_plots(t);
    }
    for (const auto& p : plots) {
      const auto svg = report::render_svg(t, p.spec, hash_label);
      const auto path = dir / (inputs[k].stem().string() + safe_name(p.suffix) + ".svg");
      write_text_file(path.string(), svg);
      ++written;
    }
  }
  say("report: wrote " + std::to_string(written) + " SVG file(s) to " + dir.string());
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int dispatch(const Options& o) {
  if (o.jobs == 0) throw ConfigError("--jobs must be at least 1");
  if (o.command == "train") return cmd_train(o);
  if (o.command == "analyze") return cmd_analyze(o);
  if (o.command == "sweep") return cmd_sweep(o);
  if (o.command == "disentangle") return cmd_disentangle(o);
  if (o.command == "distill") return cmd_distill(o);
  if (o.command == "attack") return cmd_attack(o);
  if (o.command == "report") return cmd_report(o);
  throw ConfigError("unknown command: " + o.command);
}

inline int run(int argc, const char* const* argv) {
  CLI::App app{"Gate-state complexity toolkit for small ReLU networks"};
  app.require_subcommand(1);
  Options o;
  std::string estimator;
  double kfc = 0, kconv = 0, lam = 0;
  std::int64_t seed = 0;

  auto common = [&](CLI::App* sub, bool needs_manifest) {
    auto* mf = sub->add_option("--manifest", o.manifest_path, "experiment manifest (INI)");
    if (needs_manifest) mf->required();
    sub->add_option("--seed", seed, "override the global seed");
    sub->add_option("--out", o.out, "output directory (default: $TCX_OUT or ./tcx_out)");
    sub->add_option("--jobs", o.jobs, "worker bound for independent trials");
    sub->add_option("--estimator", estimator, "kde, exact or both")
        ->check(CLI::IsMember({"kde", "exact", "both"}));
    sub->add_option("--kappa-fc", kfc, "bandwidth factor for dense gating layers");
    sub->add_option("--kappa-conv", kconv, "bandwidth factor for pooled gating layers");
    sub->add_option("--lambda", lam, "complexity-loss weight");
    sub->add_flag("--allow-mixed", o.allow_mixed, "accept CSVs from different manifests");
  };
  std::vector<std::pair<std::string, CLI::App*>> subs;
  for (auto [name, help] : std::initializer_list<std::pair<const char*, const char*>>{
           {"train", "train a network and track gate complexity per epoch"},
           {"analyze", "complexity report for a trained checkpoint"},
           {"sweep", "complexity-loss weight sweep with L1/L2 baselines"},
           {"disentangle", "entropy vs total correlation across seeds"},
           {"distill", "distil frozen task MLPs into target networks"},
           {"attack", "minimum-norm perturbations and transferability"},
           {"report", "render SVG plots from CSV outputs"}}) {
    auto* sub = app.add_subcommand(name, help);
    common(sub, std::string(name) != "report");
    subs.emplace_back(name, sub);
  }
  auto* analyze = subs[1].second;
  analyze->add_option("--checkpoint", o.checkpoint, "checkpoint prefix (default: <out>/model)");
  auto* rep = subs.back().second;
  rep->add_option("inputs", o.inputs, "CSV files (default: every CSV in the output directory)");
  rep->add_option("--plot", o.plot, "curve or scatter")->check(CLI::IsMember({"curve", "scatter"}));
  rep->add_option("--x", o.x, "x column");
  rep->add_option("--y", o.y, "y column");
  rep->add_option("--group", o.group, "series column");
  rep->add_option("--where", o.where, "row filter column=value (repeatable)");
  rep->add_option("--title", o.title, "plot title");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  for (const auto& [name, sub] : subs)
    if (sub->parsed()) {
      o.command = name;
      if (sub->count("--seed")) o.seed = seed;
      if (sub->count("--estimator")) o.estimator = estimator;
      if (sub->count("--kappa-fc")) o.kappa_fc = kfc;
      if (sub->count("--kappa-conv")) o.kappa_conv = kconv;
      if (sub->count("--lambda")) o.lambda = lam;
    }

  try {
    return dispatch(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "numeric divergence: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace tcx::cli
