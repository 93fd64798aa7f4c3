#pragma once

// Dense / residual feed-forward networks with gating layers and a layer-level
// reverse-mode differentiator. A forward pass records every intermediate value
// on a tape (ForwardTrace); backward walks the tape in reverse.

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tcx/core.hpp"

namespace tcx::nn {

enum class LayerKind : std::uint8_t { Dense, ReLU, Swish, Dropout, MaxPool, SkipStart, SkipEnd };

struct LayerSpec {
  LayerKind kind = LayerKind::Dense;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  double beta = 0.0;
  double rate = 0.0;
  std::vector<std::vector<std::size_t>> regions;
  std::string tag;

  static LayerSpec dense(std::size_t in, std::size_t out) {
    LayerSpec s;
    s.kind = LayerKind::Dense;
    s.in_dim = in;
    s.out_dim = out;
    return s;
  }
  static LayerSpec relu() { return with_kind(LayerKind::ReLU); }
  static LayerSpec swish(double beta) {
    auto s = with_kind(LayerKind::Swish);
    s.beta = beta;
    return s;
  }
  static LayerSpec dropout(double rate) {
    auto s = with_kind(LayerKind::Dropout);
    s.rate = rate;
    return s;
  }
  static LayerSpec maxpool(std::vector<std::vector<std::size_t>> regions) {
    auto s = with_kind(LayerKind::MaxPool);
    s.regions = std::move(regions);
    return s;
  }
  static LayerSpec skip_start(std::string tag) {
    auto s = with_kind(LayerKind::SkipStart);
    s.tag = std::move(tag);
    return s;
  }
  static LayerSpec skip_end(std::string tag) {
    auto s = with_kind(LayerKind::SkipEnd);
    s.tag = std::move(tag);
    return s;
  }

  bool is_gating() const {
    return kind == LayerKind::ReLU || kind == LayerKind::Swish || kind == LayerKind::Dropout ||
           kind == LayerKind::MaxPool;
  }
  /// ReLU-like layers: the only ones with a differentiable relaxation.
  bool is_rectifier() const { return kind == LayerKind::ReLU || kind == LayerKind::Swish; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;

 private:
  static LayerSpec with_kind(LayerKind k) {
    LayerSpec s;
    s.kind = k;
    return s;
  }
};

using NetSpec = std::vector<LayerSpec>;

/// Validates a spec and returns the feature dimension at every layer boundary
/// (dims[i] is the input width of layer i, dims.back() the output width).
inline std::vector<std::size_t> validate_spec(const NetSpec& spec) {
  if (spec.empty()) throw std::invalid_argument("network spec is empty");
  if (spec.front().kind != LayerKind::Dense)
    throw std::invalid_argument("network spec must start with a Dense layer");
  std::vector<std::size_t> dims{spec.front().in_dim};
  std::map<std::string, std::size_t> open;
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const auto& l = spec[i];
    std::size_t cur = dims.back();
    switch (l.kind) {
      case LayerKind::Dense:
        if (l.in_dim == 0 || l.out_dim == 0)
          throw std::invalid_argument("Dense layer with zero dimension");
        if (l.in_dim != cur)
          throw std::invalid_argument("Dense layer " + std::to_string(i) + " expects input " +
                                      std::to_string(l.in_dim) + " but receives " +
                                      std::to_string(cur));
        cur = l.out_dim;
        break;
      case LayerKind::ReLU:
        break;
      case LayerKind::Swish:
        if (!(l.beta > 0.0)) throw std::invalid_argument("Swish beta must be positive");
        break;
      case LayerKind::Dropout:
        if (!(l.rate >= 0.0 && l.rate < 1.0))
          throw std::invalid_argument("Dropout rate must lie in [0, 1)");
        break;
      case LayerKind::MaxPool: {
        if (l.regions.empty()) throw std::invalid_argument("MaxPool without regions");
        std::vector<int> seen(cur, 0);
        for (const auto& r : l.regions) {
          if (r.empty()) throw std::invalid_argument("MaxPool region is empty");
          for (auto d : r) {
            if (d >= cur || seen[d]++)
              throw std::invalid_argument("MaxPool regions must partition the input");
          }
        }
        if (std::find(seen.begin(), seen.end(), 0) != seen.end())
          throw std::invalid_argument("MaxPool regions must cover every input dimension");
        cur = l.regions.size();
        break;
      }
      case LayerKind::SkipStart:
        if (!open.emplace(l.tag, cur).second)
          throw std::invalid_argument("duplicate open skip tag '" + l.tag + "'");
        break;
      case LayerKind::SkipEnd: {
        auto it = open.find(l.tag);
        if (it == open.end())
          throw std::invalid_argument("SkipEnd '" + l.tag + "' has no matching SkipStart");
        if (it->second != cur)
          throw std::invalid_argument("SkipEnd '" + l.tag + "' dimension mismatch");
        open.erase(it);
        break;
      }
    }
    dims.push_back(cur);
  }
  if (!open.empty()) throw std::invalid_argument("unclosed skip tag '" + open.begin()->first + "'");
  return dims;
}

struct DenseParams {
  Matrix weight;  // out x in
  std::vector<double> bias;
  friend bool operator==(const DenseParams&, const DenseParams&) = default;
};

struct Network {
  NetSpec spec;
  std::vector<DenseParams> params;  // one entry per Dense layer, in order
  std::uint64_t seed = 0;
  bool frozen = false;

  std::size_t input_dim() const { return spec.front().in_dim; }
  std::size_t output_dim() const { return validate_spec(spec).back(); }

  /// Spec indices of all gating layers, in forward order.
  std::vector<std::size_t> gating_layers() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < spec.size(); ++i)
      if (spec[i].is_gating()) out.push_back(i);
    return out;
  }
  bool has_sampling() const {
    return std::any_of(spec.begin(), spec.end(), [](const LayerSpec& l) {
      return l.kind == LayerKind::Dropout && l.rate > 0.0;
    });
  }
  bool has_swish() const {
    return std::any_of(spec.begin(), spec.end(),
                       [](const LayerSpec& l) { return l.kind == LayerKind::Swish; });
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.weight.size() + p.bias.size();
    return n;
  }
};

/// Fan-in scaled Gaussian weights (std = sqrt(2 / fan_in)), zero biases.
inline Network init_network(NetSpec spec, std::uint64_t seed) {
  validate_spec(spec);
  Network net;
  net.seed = seed;
  Rng rng(seed);
  for (const auto& l : spec) {
    if (l.kind != LayerKind::Dense) continue;
    DenseParams p{Matrix(l.out_dim, l.in_dim), std::vector<double>(l.out_dim, 0.0)};
    const double scale = std::sqrt(2.0 / static_cast<double>(l.in_dim));
    for (double& w : p.weight.data()) w = scale * rng.normal();
    net.params.push_back(std::move(p));
  }
  net.spec = std::move(spec);
  return net;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

enum class Mode { Train, Eval };

struct ForwardOptions {
  Mode mode = Mode::Eval;
  bool capture = true;
  /// Replace hard rectifier gates by sigmoid(beta * h).
  bool relaxed = false;
  /// Relaxation temperature for ReLU layers; Swish layers use their own beta.
  double relax_beta = 10.0;
  /// Source of dropout masks in train mode. Required when the net samples.
  Rng* rng = nullptr;
};

/// Options matching how a network is meant to be evaluated: relaxed iff it
/// contains Swish layers.
inline ForwardOptions natural_options(const Network& net, Mode mode = Mode::Eval,
                                      Rng* rng = nullptr) {
  ForwardOptions o;
  o.mode = mode;
  o.relaxed = net.has_swish();
  o.rng = rng;
  return o;
}

struct ForwardTrace {
  Mode mode = Mode::Eval;
  bool relaxed = false;
  double relax_beta = 10.0;
  bool captured = false;
  /// values[i] is the input of layer i (the pre-activation h for gating
  /// layers); values[i + 1] is its output t.
  std::vector<Matrix> values;
  /// Gate matrix s for rectifier and (train-mode) dropout layers.
  std::vector<Matrix> gates;
  /// Per-sample argmax input index of each MaxPool region.
  std::vector<std::vector<std::uint32_t>> argmax;

  const Matrix& pre_activation(std::size_t layer) const { return values.at(layer); }
  const Matrix& activation(std::size_t layer) const { return values.at(layer + 1); }
};

struct ForwardResult {
  Matrix output;
  ForwardTrace trace;
};

namespace detail {

inline double rectifier_beta(const LayerSpec& l, const ForwardOptions& o) {
  return l.kind == LayerKind::Swish ? l.beta : o.relax_beta;
}

inline Matrix dense_forward(const Matrix& x, const DenseParams& p) {
  const std::size_t n = x.rows(), in = p.weight.cols(), out = p.weight.rows();
  Matrix y(n, out);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x.row(i).data();
    double* yi = y.row(i).data();
    for (std::size_t o = 0; o < out; ++o) {
      const double* w = p.weight.row(o).data();
      double s = 0.0;
      for (std::size_t k = 0; k < in; ++k) s += xi[k] * w[k];
      yi[o] = s + p.bias[o];
    }
  }
  return y;
}

}  // namespace detail

inline ForwardResult forward(const Network& net, const Matrix& batch,
                             const ForwardOptions& opt = {}) {
  if (batch.cols() != net.input_dim())
    throw std::invalid_argument("forward: batch has " + std::to_string(batch.cols()) +
                                " columns, network expects " + std::to_string(net.input_dim()));
  if (!batch.all_finite()) throw std::invalid_argument("forward: non-finite input");
  if (opt.mode == Mode::Train && net.has_sampling() && opt.rng == nullptr)
    throw std::invalid_argument("forward: train mode with dropout needs an Rng");

  const std::size_t L = net.spec.size();
  const std::size_t n = batch.rows();
  ForwardTrace tr;
  tr.mode = opt.mode;
  tr.relaxed = opt.relaxed;
  tr.relax_beta = opt.relax_beta;
  tr.captured = opt.capture;
  tr.values.reserve(L + 1);
  tr.gates.resize(L);
  tr.argmax.resize(L);

  std::map<std::string, Matrix> stash;
  Matrix cur = batch;
  std::size_t dense_idx = 0;
  for (std::size_t li = 0; li < L; ++li) {
    const auto& l = net.spec[li];
    Matrix next;
    switch (l.kind) {
      case LayerKind::Dense:
        next = detail::dense_forward(cur, net.params[dense_idx++]);
        break;
      case LayerKind::ReLU:
      case LayerKind::Swish: {
        next = Matrix(n, cur.cols());
        Matrix gate(n, cur.cols());
        const double beta = detail::rectifier_beta(l, opt);
        for (std::size_t k = 0; k < cur.size(); ++k) {
          const double h = cur.data()[k];
          const double s = opt.relaxed ? sigmoid(beta * h) : (h > 0.0 ? 1.0 : 0.0);
          gate.data()[k] = s;
          next.data()[k] = opt.relaxed ? h * s : (h > 0.0 ? h : 0.0);
        }
        if (opt.capture) tr.gates[li] = std::move(gate);
        break;
      }
      case LayerKind::Dropout: {
        if (opt.mode == Mode::Eval || l.rate == 0.0) {
          next = cur;
          if (opt.mode == Mode::Train && opt.capture) tr.gates[li] = Matrix(n, cur.cols(), 1.0);
          break;
        }
        next = Matrix(n, cur.cols());
        Matrix mask(n, cur.cols());
        const double keep = 1.0 - l.rate;
        for (std::size_t k = 0; k < cur.size(); ++k) {
          const bool kept = opt.rng->bernoulli(keep);
          mask.data()[k] = kept ? 1.0 : 0.0;
          next.data()[k] = kept ? cur.data()[k] / keep : 0.0;
        }
        if (opt.capture) tr.gates[li] = std::move(mask);
        break;
      }
      case LayerKind::MaxPool: {
        const std::size_t R = l.regions.size();
        next = Matrix(n, R);
        std::vector<std::uint32_t> arg(n * R);
        for (std::size_t i = 0; i < n; ++i) {
          auto row = cur.row(i);
          for (std::size_t r = 0; r < R; ++r) {
            std::size_t best = l.regions[r].front();
            for (auto d : l.regions[r])
              if (row[d] > row[best] || (row[d] == row[best] && d < best)) best = d;
            arg[i * R + r] = static_cast<std::uint32_t>(best);
            next(i, r) = row[best];
          }
        }
        if (opt.capture) tr.argmax[li] = std::move(arg);
        break;
      }
      case LayerKind::SkipStart:
        stash[l.tag] = cur;
        next = cur;
        break;
      case LayerKind::SkipEnd: {
        const Matrix& skip = stash.at(l.tag);
        next = cur;
        for (std::size_t k = 0; k < next.size(); ++k) next.data()[k] += skip.data()[k];
        break;
      }
    }
    if (opt.capture) tr.values.push_back(std::move(cur));
    cur = std::move(next);
  }
  if (opt.capture) tr.values.push_back(cur);
  return {std::move(cur), std::move(tr)};
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

struct GradientSet {
  std::vector<DenseParams> params;
  /// dL/d(input batch).
  Matrix input;

  static GradientSet zeros_like(const Network& net) {
    GradientSet g;
    for (const auto& p : net.params)
      g.params.push_back({Matrix(p.weight.rows(), p.weight.cols()),
                          std::vector<double>(p.bias.size(), 0.0)});
    return g;
  }
  void add_scaled(const GradientSet& other, double s) {
    if (other.params.size() != params.size())
      throw std::invalid_argument("GradientSet::add_scaled: shape mismatch");
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& w = params[k].weight.data();
      const auto& ow = other.params[k].weight.data();
      for (std::size_t j = 0; j < w.size(); ++j) w[j] += s * ow[j];
      for (std::size_t j = 0; j < params[k].bias.size(); ++j)
        params[k].bias[j] += s * other.params[k].bias[j];
    }
  }
  bool all_finite() const {
    for (const auto& p : params) {
      if (!p.weight.all_finite()) return false;
      for (double b : p.bias)
        if (!std::isfinite(b)) return false;
    }
    return true;
  }
};

/// Extra upstream gradient on the gate matrix s of a rectifier layer, keyed
/// by spec index. Only meaningful for relaxed traces.
using GateGradients = std::map<std::size_t, Matrix>;

inline GradientSet backward(const Network& net, const ForwardTrace& tr, const Matrix& out_grad,
                            const GateGradients* gate_grads = nullptr) {
  const std::size_t L = net.spec.size();
  if (!tr.captured || tr.values.size() != L + 1)
    throw std::invalid_argument("backward: trace was not captured for this network");
  if (out_grad.rows() != tr.values.back().rows() || out_grad.cols() != tr.values.back().cols())
    throw std::invalid_argument("backward: output gradient shape mismatch");
  if (gate_grads && !gate_grads->empty() && !tr.relaxed)
    throw std::invalid_argument("backward: gate gradients need a relaxed trace");

  GradientSet g = GradientSet::zeros_like(net);
  std::map<std::string, Matrix> skip_grad;
  Matrix grad = out_grad;
  std::size_t dense_idx = net.params.size();
  for (std::size_t li = L; li-- > 0;) {
    const auto& l = net.spec[li];
    const Matrix& x = tr.values[li];
    const std::size_t n = x.rows();
    Matrix gin;
    switch (l.kind) {
      case LayerKind::Dense: {
        const auto& p = net.params[--dense_idx];
        auto& gp = g.params[dense_idx];
        const std::size_t in = p.weight.cols(), out = p.weight.rows();
        gin = Matrix(n, in);
        for (std::size_t i = 0; i < n; ++i) {
          const double* xi = x.row(i).data();
          const double* gi = grad.row(i).data();
          double* di = gin.row(i).data();
          for (std::size_t o = 0; o < out; ++o) {
            const double go = gi[o];
            if (go == 0.0) continue;
            const double* w = p.weight.row(o).data();
            double* gw = gp.weight.row(o).data();
            for (std::size_t k = 0; k < in; ++k) {
              di[k] += go * w[k];
              gw[k] += go * xi[k];
            }
            gp.bias[o] += go;
          }
        }
        break;
      }
      case LayerKind::ReLU:
      case LayerKind::Swish: {
        const Matrix& s = tr.gates[li];
        gin = Matrix(n, x.cols());
        const Matrix* gs = nullptr;
        if (gate_grads) {
          auto it = gate_grads->find(li);
          if (it != gate_grads->end()) gs = &it->second;
        }
        if (!tr.relaxed) {
          for (std::size_t k = 0; k < x.size(); ++k) gin.data()[k] = grad.data()[k] * s.data()[k];
        } else {
          const double beta = l.kind == LayerKind::Swish ? l.beta : tr.relax_beta;
          for (std::size_t k = 0; k < x.size(); ++k) {
            const double h = x.data()[k], sk = s.data()[k];
            const double ds_dh = beta * sk * (1.0 - sk);
            double d = grad.data()[k] * (sk + h * ds_dh);
            if (gs) d += gs->data()[k] * ds_dh;
            gin.data()[k] = d;
          }
        }
        break;
      }
      case LayerKind::Dropout: {
        if (tr.mode == Mode::Eval || l.rate == 0.0) {
          gin = grad;
          break;
        }
        const Matrix& m = tr.gates[li];
        const double keep = 1.0 - l.rate;
        gin = Matrix(n, x.cols());
        for (std::size_t k = 0; k < x.size(); ++k)
          gin.data()[k] = grad.data()[k] * m.data()[k] / keep;
        break;
      }
      case LayerKind::MaxPool: {
        const auto& arg = tr.argmax[li];
        const std::size_t R = l.regions.size();
        gin = Matrix(n, x.cols());
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t r = 0; r < R; ++r) gin(i, arg[i * R + r]) += grad(i, r);
        break;
      }
      case LayerKind::SkipEnd:
        skip_grad[l.tag] = grad;
        gin = std::move(grad);
        break;
      case LayerKind::SkipStart: {
        gin = std::move(grad);
        const Matrix& sg = skip_grad.at(l.tag);
        for (std::size_t k = 0; k < gin.size(); ++k) gin.data()[k] += sg.data()[k];
        break;
      }
    }
    grad = std::move(gin);
  }
  g.input = std::move(grad);
  return g;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

enum class LossKind { CrossEntropy, Mse, L1Reg, L2Reg };

struct LossValue {
  double value = 0.0;
  Matrix out_grad;
};

/// Mean softmax cross-entropy of logits against class indices.
inline LossValue cross_entropy(const Matrix& logits, std::span<const int> labels) {
  const std::size_t n = logits.rows(), M = logits.cols();
  if (labels.size() != n) throw std::invalid_argument("cross_entropy: label count mismatch");
  LossValue r{0.0, Matrix(n, M)};
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= M)
      throw std::invalid_argument("cross_entropy: label out of range");
    auto z = logits.row(i);
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - zmax);
    const double lse = zmax + std::log(sum);
    r.value += lse - z[labels[i]];
    for (std::size_t c = 0; c < M; ++c) {
      const double p = std::exp(z[c] - lse);
      r.out_grad(i, c) = (p - (static_cast<int>(c) == labels[i] ? 1.0 : 0.0)) / n;
    }
  }
  r.value /= static_cast<double>(n);
  return r;
}

/// Mean over all entries of squared error.
inline LossValue mse(const Matrix& outputs, const Matrix& targets) {
  if (outputs.rows() != targets.rows() || outputs.cols() != targets.cols())
    throw std::invalid_argument("mse: shape mismatch");
  LossValue r{0.0, Matrix(outputs.rows(), outputs.cols())};
  const double scale = 1.0 / static_cast<double>(outputs.size());
  for (std::size_t k = 0; k < outputs.size(); ++k) {
    const double d = outputs.data()[k] - targets.data()[k];
    r.value += d * d;
    r.out_grad.data()[k] = 2.0 * d * scale;
  }
  r.value *= scale;
  return r;
}

struct PenaltyValue {
  double value = 0.0;
  GradientSet grads;
};

/// Sum over Dense weight matrices of |W| (L1Reg) or W^2 (L2Reg). Biases are
/// not penalised.
inline PenaltyValue weight_penalty(LossKind kind, const Network& net) {
  if (kind != LossKind::L1Reg && kind != LossKind::L2Reg)
    throw std::invalid_argument("weight_penalty: kind must be L1Reg or L2Reg");
  PenaltyValue r{0.0, GradientSet::zeros_like(net)};
  for (std::size_t k = 0; k < net.params.size(); ++k) {
    const auto& w = net.params[k].weight.data();
    auto& gw = r.grads.params[k].weight.data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (kind == LossKind::L1Reg) {
        r.value += std::abs(w[j]);
        gw[j] = (w[j] > 0) - (w[j] < 0);
      } else {
        r.value += w[j] * w[j];
        gw[j] = 2.0 * w[j];
      }
    }
  }
  return r;
}

inline std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

enum class OptimizerKind { Sgd, Adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 1e-3;
  double momentum = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<DenseParams> m;
  std::vector<DenseParams> v;
};

inline void optimizer_step(Network& net, const GradientSet& grads, OptimizerState& st,
                           const OptimizerConfig& cfg) {
  if (net.frozen) throw std::logic_error("optimizer_step: network is frozen");
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("optimizer_step: lr must be positive");
  if (grads.params.size() != net.params.size())
    throw std::invalid_argument("optimizer_step: gradient shape mismatch");
  if (st.m.empty()) {
    st.m = GradientSet::zeros_like(net).params;
    st.v = st.m;
  }
  ++st.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));

  auto update = [&](std::vector<double>& p, const std::vector<double>& g, std::vector<double>& m,
                    std::vector<double>& v) {
    if (p.size() != g.size()) throw std::invalid_argument("optimizer_step: shape mismatch");
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (cfg.kind == OptimizerKind::Sgd) {
        if (cfg.momentum > 0.0) {
          m[j] = cfg.momentum * m[j] + g[j];
          p[j] -= cfg.lr * m[j];
        } else {
          p[j] -= cfg.lr * g[j];
        }
      } else {
        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
        p[j] -= cfg.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg.eps);
      }
    }
  };
  for (std::size_t k = 0; k < net.params.size(); ++k) {
    update(net.params[k].weight.data(), grads.params[k].weight.data(), st.m[k].weight.data(),
           st.v[k].weight.data());
    update(net.params[k].bias, grads.params[k].bias, st.m[k].bias, st.v[k].bias);
  }
}

// ---------------------------------------------------------------------------
// Persistence: binary "TCKP" checkpoints plus a one-layer-per-line spec file
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> encode_checkpoint(const Network& net) {
  ByteWriter w;
  w.tag("TCKP");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(net.params.size()));
  for (const auto& p : net.params) {
    w.u32(static_cast<std::uint32_t>(p.weight.rows()));
    w.u32(static_cast<std::uint32_t>(p.weight.cols()));
    for (double v : p.weight.data()) w.f64(v);
    for (double v : p.bias) w.f64(v);
  }
  w.seal();
  return w.buffer();
}

/// Decodes parameters and checks them against `spec`.
inline Network decode_checkpoint(std::span<const std::uint8_t> bytes, NetSpec spec) {
  ByteReader r(bytes);
  if (!r.tag("TCKP")) throw FormatError("checkpoint: bad magic");
  if (r.u32() != kCheckpointVersion) throw FormatError("checkpoint: unsupported version");
  const std::uint32_t count = r.u32();
  Network net;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t rows = r.u32(), cols = r.u32();
    DenseParams p{Matrix(rows, cols), std::vector<double>(rows)};
    for (double& v : p.weight.data()) v = r.f64();
    for (double& v : p.bias) v = r.f64();
    net.params.push_back(std::move(p));
  }
  r.check_seal();
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes");
  validate_spec(spec);
  std::size_t k = 0;
  for (const auto& l : spec) {
    if (l.kind != LayerKind::Dense) continue;
    if (k >= net.params.size() || net.params[k].weight.rows() != l.out_dim ||
        net.params[k].weight.cols() != l.in_dim)
      throw FormatError("checkpoint: parameter shapes do not match spec");
    ++k;
  }
  if (k != net.params.size()) throw FormatError("checkpoint: layer count does not match spec");
  for (const auto& p : net.params)
    if (!p.weight.all_finite()) throw FormatError("checkpoint: non-finite weights");
  net.spec = std::move(spec);
  return net;
}

inline std::uint64_t param_checksum(const Network& net) {
  return crc64(encode_checkpoint(net));
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

/// Text spec: optional "tag <name>" header then one layer per line, e.g.
/// "dense 4 8", "relu", "swish 10", "dropout 0.5", "maxpool 0,1;2,3",
/// "skip_start b1", "skip_end b1".
inline std::string spec_to_text(const NetSpec& spec, const std::string& tag = "network") {
  std::ostringstream os;
  os << "tag " << tag << "\n";
  for (const auto& l : spec) {
    switch (l.kind) {
      case LayerKind::Dense: os << "dense " << l.in_dim << " " << l.out_dim; break;
      case LayerKind::ReLU: os << "relu"; break;
      case LayerKind::Swish: os << "swish " << format_double(l.beta); break;
      case LayerKind::Dropout: os << "dropout " << format_double(l.rate); break;
      case LayerKind::MaxPool: {
        os << "maxpool ";
        for (std::size_t r = 0; r < l.regions.size(); ++r) {
          if (r) os << ";";
          for (std::size_t j = 0; j < l.regions[r].size(); ++j)
            os << (j ? "," : "") << l.regions[r][j];
        }
        break;
      }
      case LayerKind::SkipStart: os << "skip_start " << l.tag; break;
      case LayerKind::SkipEnd: os << "skip_end " << l.tag; break;
    }
    os << "\n";
  }
  return os.str();
}

inline NetSpec spec_from_text(const std::string& text, std::string* tag_out = nullptr) {
  NetSpec spec;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string word;
    if (!(ls >> word) || word.front() == '#') continue;
    if (word == "tag") {
      std::string t;
      ls >> t;
      if (tag_out) *tag_out = t;
    } else if (word == "dense") {
      std::size_t a = 0, b = 0;
      if (!(ls >> a >> b)) throw FormatError("spec: bad dense line '" + line + "'");
      spec.push_back(LayerSpec::dense(a, b));
    } else if (word == "relu") {
      spec.push_back(LayerSpec::relu());
    } else if (word == "swish" || word == "dropout") {
      double v = 0;
      if (!(ls >> v)) throw FormatError("spec: bad line '" + line + "'");
      spec.push_back(word == "swish" ? LayerSpec::swish(v) : LayerSpec::dropout(v));
    } else if (word == "maxpool") {
      std::string body;
      ls >> body;
      std::vector<std::vector<std::size_t>> regions;
      std::istringstream rs(body);
      std::string region;
      while (std::getline(rs, region, ';')) {
        std::vector<std::size_t> idx;
        std::istringstream is(region);
        std::string tok;
        while (std::getline(is, tok, ',')) idx.push_back(std::stoul(tok));
        regions.push_back(std::move(idx));
      }
      spec.push_back(LayerSpec::maxpool(std::move(regions)));
    } else if (word == "skip_start" || word == "skip_end") {
      std::string t;
      if (!(ls >> t)) throw FormatError("spec: skip without tag");
      spec.push_back(word == "skip_start" ? LayerSpec::skip_start(t) : LayerSpec::skip_end(t));
    } else {
      throw FormatError("spec: unknown layer '" + word + "'");
    }
  }
  return spec;
}

/// Writes `<prefix>.tckp` and `<prefix>.spec`.
inline void save_network(const Network& net, const std::string& prefix,
                         const std::string& tag = "network") {
  std::ofstream bin(prefix + ".tckp", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot write " + prefix + ".tckp");
  write_all(bin, encode_checkpoint(net));
  std::ofstream txt(prefix + ".spec");
  if (!txt) throw std::runtime_error("cannot write " + prefix + ".spec");
  txt << spec_to_text(net.spec, tag);
}

inline Network load_network(const std::string& prefix, std::string* tag_out = nullptr) {
  std::ifstream txt(prefix + ".spec");
  if (!txt) throw std::runtime_error("cannot read " + prefix + ".spec");
  std::stringstream ss;
  ss << txt.rdbuf();
  NetSpec spec = spec_from_text(ss.str(), tag_out);
  std::ifstream bin(prefix + ".tckp", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot read " + prefix + ".tckp");
  return decode_checkpoint(read_all(bin), std::move(spec));
}

// ---------------------------------------------------------------------------
// Common architectures
// ---------------------------------------------------------------------------

/// Dense(in, w) + [gate, Dense] x depth ... + Dense(w, out). `gate` is
/// either relu or swish(beta). depth counts gating layers.
inline NetSpec stacked_mlp(std::size_t in, const std::vector<std::size_t>& widths, std::size_t out,
                           const LayerSpec& gate = LayerSpec::relu()) {
  NetSpec s;
  std::size_t cur = in;
  for (auto w : widths) {
    s.push_back(LayerSpec::dense(cur, w));
    s.push_back(gate);
    cur = w;
  }
  s.push_back(LayerSpec::dense(cur, out));
  return s;
}

/// Dense(in, w), then `blocks` residual blocks x <- x + gate(Dense(x)),
/// then Dense(w, out). Each block contributes one gating layer.
inline NetSpec residual_mlp(std::size_t in, std::size_t width, std::size_t blocks, std::size_t out,
                            const LayerSpec& gate = LayerSpec::relu()) {
  NetSpec s{LayerSpec::dense(in, width)};
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::string tag = "b" + std::to_string(b);
    s.push_back(LayerSpec::skip_start(tag));
    s.push_back(LayerSpec::dense(width, width));
    s.push_back(gate);
    s.push_back(LayerSpec::skip_end(tag));
  }
  s.push_back(LayerSpec::dense(width, out));
  return s;
}

}  // namespace tcx::nn
