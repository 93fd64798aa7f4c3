#pragma once

// Entropy, mutual-information and total-correlation estimates over gate
// matrices. Two estimator families:
//   * exact  - plug-in values of the empirical distribution of gate rows;
//   * kde    - pairwise Gaussian-kernel upper bounds with bandwidth
//              sigma0^2 = kappa * Var(gates).
// All values are in nats.
//
// Rows are first collapsed to distinct patterns with multiplicities (sorted
// lexicographically), and sums run over patterns in that order, so every
// estimate is bitwise invariant to the row order of the input.

#include <map>
#include <optional>

#include "tcx/core.hpp"
#include "tcx/gating.hpp"

namespace tcx {

enum class EstimatorKind { Kde, Exact };

inline const char* to_string(EstimatorKind k) { return k == EstimatorKind::Kde ? "kde" : "exact"; }

struct KernelConfig {
  double kappa_fc = 0.01;
  /// For gating layers over spatial feature maps (max-pool gates here).
  double kappa_conv_like = 0.04;
  /// Per-layer override keyed by layer id.
  std::map<std::uint32_t, double> overrides;
  /// Seed for the independent-marginals sample used by the KDE TC bound.
  std::uint64_t synth_seed = 0;

  double kappa_for(const GateMatrix& g) const {
    if (auto it = overrides.find(g.layer_id()); it != overrides.end()) return it->second;
    return g.kind() == GateKind::MaxPool ? kappa_conv_like : kappa_fc;
  }
  void validate() const {
    if (!(kappa_fc > 0.0) || !(kappa_conv_like > 0.0))
      throw std::invalid_argument("KernelConfig: kappa must be positive");
    for (const auto& [id, k] : overrides)
      if (!(k > 0.0)) throw std::invalid_argument("KernelConfig: kappa must be positive");
  }
};

struct LabelVector {
  std::vector<int> labels;
  int num_classes = 0;

  /// Row indices per class; throws if a class in [0, num_classes) is empty.
  std::vector<std::vector<std::size_t>> partition() const {
    if (num_classes < 1) throw std::invalid_argument("LabelVector: no classes");
    std::vector<std::vector<std::size_t>> idx(static_cast<std::size_t>(num_classes));
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const int y = labels[i];
      if (y < 0 || y >= num_classes) throw std::invalid_argument("LabelVector: label out of range");
      idx[static_cast<std::size_t>(y)].push_back(i);
    }
    for (std::size_t m = 0; m < idx.size(); ++m)
      if (idx[m].empty())
        throw std::invalid_argument("LabelVector: class " + std::to_string(m) + " is empty");
    return idx;
  }
};

// ---------------------------------------------------------------------------
// Pattern histogram
// ---------------------------------------------------------------------------

/// Distinct rows of a GateMatrix with their counts, in lexicographic order.
struct PatternCounts {
  std::size_t words = 0;
  std::vector<std::uint64_t> patterns;  // distinct rows, `words` each
  std::vector<std::size_t> counts;
  std::size_t total = 0;

  std::size_t size() const { return counts.size(); }
  std::span<const std::uint64_t> pattern(std::size_t u) const {
    return {patterns.data() + u * words, words};
  }
};

inline PatternCounts pattern_counts(const GateMatrix& g) {
  std::vector<std::size_t> order(g.n());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto less = [&](std::size_t a, std::size_t b) {
    auto ra = g.row(a), rb = g.row(b);
    return std::lexicographical_compare(ra.rbegin(), ra.rend(), rb.rbegin(), rb.rend());
  };
  std::sort(order.begin(), order.end(), less);
  PatternCounts pc;
  pc.words = g.words_per_row();
  pc.total = g.n();
  for (std::size_t k = 0; k < order.size(); ++k) {
    auto r = g.row(order[k]);
    if (k > 0 && std::equal(r.begin(), r.end(), g.row(order[k - 1]).begin())) {
      ++pc.counts.back();
    } else {
      pc.patterns.insert(pc.patterns.end(), r.begin(), r.end());
      pc.counts.push_back(1);
    }
  }
  return pc;
}

namespace detail {

/// log sum_v counts[v] * exp(-d(u, v) / (2 sigma0^2)) for every pattern u of
/// `from`, where v ranges over the patterns of `to`.
inline std::vector<double> log_kernel_sums(const PatternCounts& from, const PatternCounts& to,
                                           std::size_t dim, double sigma0_sq) {
  std::vector<double> out(from.size());
  std::vector<std::size_t> hist(dim + 1);
  const double inv = 1.0 / (2.0 * sigma0_sq);
  for (std::size_t u = 0; u < from.size(); ++u) {
    std::fill(hist.begin(), hist.end(), 0);
    auto pu = from.pattern(u);
    for (std::size_t v = 0; v < to.size(); ++v) hist[hamming(pu, to.pattern(v))] += to.counts[v];
    std::size_t dmin = 0;
    while (hist[dmin] == 0) ++dmin;
    double s = 0.0;
    for (std::size_t d = dmin; d <= dim; ++d)
      if (hist[d]) s += static_cast<double>(hist[d]) * std::exp(-static_cast<double>(d - dmin) * inv);
    out[u] = std::log(s) - static_cast<double>(dmin) * inv;
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Basic estimators
// ---------------------------------------------------------------------------

/// E||sigma - mu||^2 over rows, which for 0/1 gates is sum_d a_d (1 - a_d).
inline double gate_variance(const GateMatrix& g) {
  double v = 0.0;
  for (double a : g.rates()) v += a * (1.0 - a);
  return v;
}

/// kappa * Var(gates), or nullopt when every row is identical (zero variance),
/// in which case the layer's entropy is taken to be 0.
inline std::optional<double> compute_sigma0_sq(const GateMatrix& g, double kappa) {
  if (!(kappa > 0.0)) throw std::invalid_argument("compute_sigma0_sq: kappa must be positive");
  const double var = gate_variance(g);
  if (var == 0.0) return std::nullopt;
  return kappa * var;
}

/// Kernel upper bound  -(1/n) sum_j log (1/n) sum_k exp(-||s_j - s_k||^2 / 2 sigma0^2).
inline double kde_entropy(const GateMatrix& g, double sigma0_sq) {
  if (!(sigma0_sq > 0.0)) throw std::invalid_argument("kde_entropy: sigma0^2 must be positive");
  const auto pc = pattern_counts(g);
  const auto ls = detail::log_kernel_sums(pc, pc, g.dim(), sigma0_sq);
  const double logn = std::log(static_cast<double>(pc.total));
  double h = 0.0;
  for (std::size_t u = 0; u < pc.size(); ++u)
    h -= static_cast<double>(pc.counts[u]) * (ls[u] - logn);
  return h / static_cast<double>(pc.total);
}

/// Bandwidth from kappa; degenerate layers give 0.
inline double kde_entropy_kappa(const GateMatrix& g, double kappa) {
  const auto s = compute_sigma0_sq(g, kappa);
  return s ? kde_entropy(g, *s) : 0.0;
}

/// Plug-in entropy of the empirical row distribution.
inline double exact_entropy(const GateMatrix& g) {
  const auto pc = pattern_counts(g);
  const double n = static_cast<double>(pc.total);
  double h = 0.0;
  for (auto c : pc.counts) {
    const double p = static_cast<double>(c) / n;
    h -= p * std::log(p);
  }
  return h;
}

struct Marginals {
  std::vector<double> rates;      // a_{l,d}
  std::vector<double> entropies;  // H_{l,d}
  double sum = 0.0;               // C_l
};

inline Marginals marginal_entropies(const GateMatrix& g) {
  Marginals m;
  m.rates = g.rates();
  m.entropies.reserve(m.rates.size());
  for (double a : m.rates) {
    m.entropies.push_back(binary_entropy(a));
    m.sum += m.entropies.back();
  }
  return m;
}

/// KL(p || prod_d p_d) of the empirical distribution, computed as
/// C_l - H. Can dip below zero by rounding only.
inline double exact_tc(const GateMatrix& g) { return marginal_entropies(g).sum - exact_entropy(g); }

/// Synthesises n rows whose columns are independent Bernoulli(a_d).
inline GateMatrix synthesize_independent(const GateMatrix& g, std::uint64_t seed) {
  const auto a = g.rates();
  GateMatrix out(g.layer_id(), g.kind(), g.n(), g.dim());
  Rng rng(seed);
  for (std::size_t i = 0; i < g.n(); ++i)
    for (std::size_t d = 0; d < g.dim(); ++d)
      if (rng.bernoulli(a[d])) out.set(i, d, true);
  return out;
}

/// Kernel bound on TC: (1/n) sum_i log [ sum_j K(s_i, s_j) / sum_j K(s_i, s^_j) ],
/// where s^ are rows drawn from the product of the empirical marginals.
inline double kde_tc(const GateMatrix& g, double sigma0_sq, std::uint64_t synth_seed) {
  if (!(sigma0_sq > 0.0)) throw std::invalid_argument("kde_tc: sigma0^2 must be positive");
  const auto data = pattern_counts(g);
  const auto synth = pattern_counts(synthesize_independent(g, synth_seed));
  const auto num = detail::log_kernel_sums(data, data, g.dim(), sigma0_sq);
  const auto den = detail::log_kernel_sums(data, synth, g.dim(), sigma0_sq);
  double tc = 0.0;
  for (std::size_t u = 0; u < data.size(); ++u)
    tc += static_cast<double>(data.counts[u]) * (num[u] - den[u]);
  return tc / static_cast<double>(data.total);
}

inline double kde_tc_kappa(const GateMatrix& g, double kappa, std::uint64_t synth_seed) {
  const auto s = compute_sigma0_sq(g, kappa);
  return s ? kde_tc(g, *s, synth_seed) : 0.0;
}

// ---------------------------------------------------------------------------
// Dispatch by estimator kind
// ---------------------------------------------------------------------------

inline double entropy(const GateMatrix& g, EstimatorKind kind, const KernelConfig& cfg) {
  return kind == EstimatorKind::Exact ? exact_entropy(g) : kde_entropy_kappa(g, cfg.kappa_for(g));
}

inline double total_correlation(const GateMatrix& g, EstimatorKind kind, const KernelConfig& cfg) {
  return kind == EstimatorKind::Exact ? exact_tc(g)
                                      : kde_tc_kappa(g, cfg.kappa_for(g), cfg.synth_seed);
}

/// Class-weighted average of a per-subset statistic, p_m = n_m / n.
template <class Stat>
double class_average(const GateMatrix& g, const LabelVector& y, Stat&& stat) {
  if (y.labels.size() != g.n()) throw std::invalid_argument("label count does not match gates");
  const auto parts = y.partition();
  double acc = 0.0;
  for (const auto& idx : parts) {
    const double p = static_cast<double>(idx.size()) / static_cast<double>(g.n());
    acc += p * stat(g.select_rows(idx));
  }
  return acc;
}

/// H(Sigma_l | Y) = sum_m p_m H(Sigma_l | class m). KDE bandwidths are
/// recomputed on every class subset.
inline double class_conditional_entropy(const GateMatrix& g, const LabelVector& y,
                                        EstimatorKind kind, const KernelConfig& cfg = {}) {
  return class_average(g, y, [&](const GateMatrix& s) { return entropy(s, kind, cfg); });
}

/// I(X; Sigma_l; Y) = H(Sigma_l) - H(Sigma_l | Y) - I(Sigma_l; Y | X). The
/// last term is zero for networks without sampling.
inline double estimate_I_XSY(const GateMatrix& g, const LabelVector& y, EstimatorKind kind,
                             const KernelConfig& cfg = {}, double stochastic_correction = 0.0) {
  return entropy(g, kind, cfg) - class_conditional_entropy(g, y, kind, cfg) -
         stochastic_correction;
}

/// I(X; Sigma_l) per layer: the entropy of gates observed with sampling
/// switched off.
inline std::vector<double> estimate_I_XS(const GateRecord& deterministic, EstimatorKind kind,
                                         const KernelConfig& cfg = {}) {
  if (deterministic.provenance != Provenance::DeterministicPass)
    throw std::invalid_argument("estimate_I_XS: record must come from a deterministic pass");
  std::vector<double> out;
  for (const auto& g : deterministic.layers) out.push_back(entropy(g, kind, cfg));
  return out;
}

/// Entropy of the concatenated gates of layers [first, last] (1-based).
inline double joint_entropy(const GateRecord& rec, std::size_t first, std::size_t last,
                            EstimatorKind kind, const KernelConfig& cfg = {}) {
  return entropy(rec.joint(first, last), kind, cfg);
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct LayerComplexity {
  std::uint32_t layer_id = 0;
  GateKind kind = GateKind::Relu;
  std::size_t dim = 0;
  double H = 0.0;
  double I_XS = 0.0;
  /// Undefined for networks that sample (no estimator for H(Sigma|X,Y)).
  std::optional<double> I_XSY;
  double H_given_Y = 0.0;
  double TC = 0.0;
  double TC_given_Y = 0.0;
  double C = 0.0;
  double C_given_Y = 0.0;
  std::vector<double> rates;
  std::vector<double> marginals;
};

struct ComplexityReport {
  EstimatorKind estimator = EstimatorKind::Exact;
  std::vector<LayerComplexity> layers;
  /// prefix_H[l-1] = H(Sigma_1..Sigma_l); suffix_H[l-1] = H(Sigma_l..Sigma_L).
  std::vector<double> prefix_H;
  std::vector<double> suffix_H;
};

/// Fills every report field from a stochastic-pass record, the matching
/// deterministic-pass record and the labels of the analysis set.
inline ComplexityReport build_report(const GateRecord& stochastic, const GateRecord& deterministic,
                                     const LabelVector& labels, const KernelConfig& cfg,
                                     EstimatorKind kind) {
  cfg.validate();
  stochastic.validate();
  deterministic.validate();
  if (stochastic.layers.size() != deterministic.layers.size() ||
      stochastic.n() != deterministic.n())
    throw std::invalid_argument("build_report: records do not describe the same analysis set");
  if (deterministic.provenance != Provenance::DeterministicPass)
    throw std::invalid_argument("build_report: second record must be a deterministic pass");
  const auto parts = labels.partition();
  if (labels.labels.size() != stochastic.n())
    throw std::invalid_argument("build_report: label count does not match gates");

  ComplexityReport rep;
  rep.estimator = kind;
  const auto ixs = estimate_I_XS(deterministic, kind, cfg);
  for (std::size_t k = 0; k < stochastic.layers.size(); ++k) {
    const auto& g = stochastic.layers[k];
    LayerComplexity lc;
    lc.layer_id = g.layer_id();
    lc.kind = g.kind();
    lc.dim = g.dim();
    lc.H = entropy(g, kind, cfg);
    lc.I_XS = ixs[k];
    lc.H_given_Y = class_conditional_entropy(g, labels, kind, cfg);
    if (!stochastic.has_sampling) lc.I_XSY = lc.H - lc.H_given_Y;
    lc.TC = total_correlation(g, kind, cfg);
    lc.TC_given_Y = class_average(
        g, labels, [&](const GateMatrix& s) { return total_correlation(s, kind, cfg); });
    const auto m = marginal_entropies(g);
    lc.C = m.sum;
    lc.C_given_Y =
        class_average(g, labels, [](const GateMatrix& s) { return marginal_entropies(s).sum; });
    lc.rates = m.rates;
    lc.marginals = m.entropies;
    rep.layers.push_back(std::move(lc));
  }
  const std::size_t L = stochastic.layers.size();
  for (std::size_t l = 1; l <= L; ++l) {
    rep.prefix_H.push_back(joint_entropy(stochastic, 1, l, kind, cfg));
    rep.suffix_H.push_back(joint_entropy(stochastic, l, L, kind, cfg));
  }
  return rep;
}

/// One long-format CSV row: run_id, epoch, layer_id, metric, estimator, value.
struct MetricRow {
  std::string run_id;
  long epoch = 0;
  std::uint32_t layer_id = 0;
  std::string metric;
  std::string estimator;
  double value = 0.0;
};

/// Flattens a report. Undefined I_XSY values are emitted as NaN rows so that
/// every metric is present for every layer.
inline std::vector<MetricRow> report_rows(const ComplexityReport& rep, const std::string& run_id,
                                          long epoch) {
  std::vector<MetricRow> rows;
  const std::string est = to_string(rep.estimator);
  auto push = [&](std::uint32_t id, const char* metric, double v) {
    rows.push_back({run_id, epoch, id, metric, est, v});
  };
  for (const auto& l : rep.layers) {
    push(l.layer_id, "H", l.H);
    push(l.layer_id, "I_XS", l.I_XS);
    push(l.layer_id, "I_XSY", l.I_XSY.value_or(std::numeric_limits<double>::quiet_NaN()));
    push(l.layer_id, "TC", l.TC);
    push(l.layer_id, "TC_Y", l.TC_given_Y);
    push(l.layer_id, "C_l", l.C);
    push(l.layer_id, "C_lY", l.C_given_Y);
  }
  for (std::size_t l = 0; l < rep.prefix_H.size(); ++l) {
    push(static_cast<std::uint32_t>(l + 1), "prefix_H", rep.prefix_H[l]);
    push(static_cast<std::uint32_t>(l + 1), "suffix_H", rep.suffix_H[l]);
  }
  return rows;
}

}  // namespace tcx
