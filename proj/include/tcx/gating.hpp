#pragma once

// Binary gating states of gating layers. A GateMatrix holds one bit per
// (sample, gate) pair, packed LSB-first into 64-bit words per row so that
// squared Euclidean distances between rows are popcounts of XORs.

#include <bit>
#include <fstream>

#include "tcx/core.hpp"
#include "tcx/nn.hpp"

namespace tcx {

enum class GateKind : std::uint8_t { Relu = 0, SwishHardened = 1, Dropout = 2, MaxPool = 3 };

inline const char* to_string(GateKind k) {
  switch (k) {
    case GateKind::Relu: return "relu";
    case GateKind::SwishHardened: return "swish_hardened";
    case GateKind::Dropout: return "dropout";
    case GateKind::MaxPool: return "maxpool";
  }
  return "?";
}

class GateMatrix {
 public:
  GateMatrix(std::uint32_t layer_id, GateKind kind, std::size_t n, std::size_t dim)
      : layer_id_(layer_id), kind_(kind), n_(n), dim_(dim), words_((dim + 63) / 64),
        bits_(n * words_, 0) {
    if (n == 0 || dim == 0) throw std::invalid_argument("GateMatrix: n and D must be positive");
  }

  /// Test/literal helper: rows of 0/1 values.
  static GateMatrix from_rows(const std::vector<std::vector<int>>& rows, std::uint32_t layer_id = 1,
                              GateKind kind = GateKind::Relu) {
    if (rows.empty()) throw std::invalid_argument("GateMatrix::from_rows: no rows");
    GateMatrix g(layer_id, kind, rows.size(), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != g.dim_) throw std::invalid_argument("GateMatrix::from_rows: ragged");
      for (std::size_t d = 0; d < g.dim_; ++d) {
        if (rows[i][d] != 0 && rows[i][d] != 1)
          throw std::invalid_argument("GateMatrix::from_rows: entries must be 0 or 1");
        g.set(i, d, rows[i][d] != 0);
      }
    }
    return g;
  }

  std::uint32_t layer_id() const { return layer_id_; }
  GateKind kind() const { return kind_; }
  std::size_t n() const { return n_; }
  std::size_t dim() const { return dim_; }
  std::size_t words_per_row() const { return words_; }

  bool get(std::size_t i, std::size_t d) const {
    return (bits_[i * words_ + d / 64] >> (d % 64)) & 1u;
  }
  void set(std::size_t i, std::size_t d, bool v) {
    auto& w = bits_[i * words_ + d / 64];
    const std::uint64_t m = std::uint64_t{1} << (d % 64);
    w = v ? (w | m) : (w & ~m);
  }
  std::span<const std::uint64_t> row(std::size_t i) const {
    return {bits_.data() + i * words_, words_};
  }
  std::span<std::uint64_t> row(std::size_t i) { return {bits_.data() + i * words_, words_}; }

  /// Activation rate a_d of column d.
  double rate(std::size_t d) const {
    std::size_t c = 0;
    for (std::size_t i = 0; i < n_; ++i) c += get(i, d);
    return static_cast<double>(c) / static_cast<double>(n_);
  }
  std::vector<double> rates() const {
    std::vector<std::size_t> counts(dim_, 0);
    for (std::size_t i = 0; i < n_; ++i) {
      auto r = row(i);
      for (std::size_t d = 0; d < dim_; ++d) counts[d] += (r[d / 64] >> (d % 64)) & 1u;
    }
    std::vector<double> a(dim_);
    for (std::size_t d = 0; d < dim_; ++d)
      a[d] = static_cast<double>(counts[d]) / static_cast<double>(n_);
    return a;
  }

  GateMatrix select_rows(std::span<const std::size_t> idx) const {
    GateMatrix out(layer_id_, kind_, idx.size(), dim_);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto src = row(idx[i]);
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
  }

  /// Column-wise concatenation; rows must align.
  static GateMatrix concat(std::span<const GateMatrix> parts) {
    if (parts.empty()) throw std::invalid_argument("GateMatrix::concat: empty layer set");
    std::size_t dim = 0;
    for (const auto& p : parts) {
      if (p.n() != parts.front().n())
        throw std::invalid_argument("GateMatrix::concat: sample counts differ");
      dim += p.dim();
    }
    GateMatrix out(parts.front().layer_id(), parts.front().kind(), parts.front().n(), dim);
    for (std::size_t i = 0; i < out.n(); ++i) {
      std::size_t off = 0;
      for (const auto& p : parts) {
        for (std::size_t d = 0; d < p.dim(); ++d)
          if (p.get(i, d)) out.set(i, off + d, true);
        off += p.dim();
      }
    }
    return out;
  }

  friend bool operator==(const GateMatrix&, const GateMatrix&) = default;

 private:
  std::uint32_t layer_id_;
  GateKind kind_;
  std::size_t n_;
  std::size_t dim_;
  std::size_t words_;
  std::vector<std::uint64_t> bits_;
};

/// Number of differing gates; equals the squared L2 distance of 0/1 rows.
inline std::size_t hamming(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
  std::size_t d = 0;
  for (std::size_t w = 0; w < a.size(); ++w) d += static_cast<std::size_t>(std::popcount(a[w] ^ b[w]));
  return d;
}

// ---------------------------------------------------------------------------
// Extraction
// ---------------------------------------------------------------------------

/// Gate is open iff the pre-activation is strictly positive.
inline GateMatrix extract_relu_gates(const Matrix& pre_activation, std::uint32_t layer_id = 1,
                                     GateKind kind = GateKind::Relu) {
  if (!pre_activation.all_finite())
    throw std::invalid_argument("extract_relu_gates: non-finite pre-activation");
  GateMatrix g(layer_id, kind, pre_activation.rows(), pre_activation.cols());
  for (std::size_t i = 0; i < g.n(); ++i)
    for (std::size_t d = 0; d < g.dim(); ++d)
      if (pre_activation(i, d) > 0.0) g.set(i, d, true);
  return g;
}

/// Gate is open iff the unit was kept by the dropout mask.
inline GateMatrix extract_dropout_gates(const Matrix& mask, std::uint32_t layer_id = 1) {
  if (mask.empty())
    throw std::invalid_argument("extract_dropout_gates: no dropout mask (eval-mode trace?)");
  GateMatrix g(layer_id, GateKind::Dropout, mask.rows(), mask.cols());
  for (std::size_t i = 0; i < g.n(); ++i)
    for (std::size_t d = 0; d < g.dim(); ++d) {
      const double m = mask(i, d);
      if (m != 0.0 && m != 1.0) throw std::invalid_argument("extract_dropout_gates: mask not binary");
      if (m == 1.0) g.set(i, d, true);
    }
  return g;
}

/// Per sample, a regions x D selection matrix flattened row-major: bit
/// (r * D + d) is set iff input d is the argmax of region r. Ties go to the
/// lowest index.
inline GateMatrix extract_maxpool_gates(const Matrix& input,
                                        const std::vector<std::vector<std::size_t>>& regions,
                                        std::uint32_t layer_id = 1) {
  const std::size_t D = input.cols();
  for (const auto& r : regions)
    if (r.empty()) throw std::invalid_argument("extract_maxpool_gates: empty region");
  if (!input.all_finite()) throw std::invalid_argument("extract_maxpool_gates: non-finite input");
  GateMatrix g(layer_id, GateKind::MaxPool, input.rows(), regions.size() * D);
  for (std::size_t i = 0; i < input.rows(); ++i) {
    auto x = input.row(i);
    for (std::size_t r = 0; r < regions.size(); ++r) {
      std::size_t best = regions[r].front();
      for (auto d : regions[r]) {
        if (d >= D) throw std::invalid_argument("extract_maxpool_gates: region index out of range");
        if (x[d] > x[best] || (x[d] == x[best] && d < best)) best = d;
      }
      g.set(i, r * D + best, true);
    }
  }
  return g;
}

enum class Provenance : std::uint8_t { StochasticPass, DeterministicPass };

struct GateRecord {
  std::vector<GateMatrix> layers;
  Provenance provenance = Provenance::DeterministicPass;
  /// The producing network draws random masks (dropout with rate > 0).
  bool has_sampling = false;

  std::size_t n() const { return layers.empty() ? 0 : layers.front().n(); }
  std::size_t total_dim() const {
    std::size_t d = 0;
    for (const auto& g : layers) d += g.dim();
    return d;
  }
  /// Concatenation of layers [first, last] (1-based, inclusive).
  GateMatrix joint(std::size_t first, std::size_t last) const {
    if (first < 1 || last > layers.size() || first > last)
      throw std::invalid_argument("GateRecord::joint: invalid layer range");
    return GateMatrix::concat(std::span(layers).subspan(first - 1, last - first + 1));
  }
  void validate() const {
    for (std::size_t k = 0; k < layers.size(); ++k) {
      if (layers[k].n() != n()) throw std::invalid_argument("GateRecord: sample counts differ");
      if (k && layers[k].layer_id() <= layers[k - 1].layer_id())
        throw std::invalid_argument("GateRecord: layer ids must increase");
    }
  }
};

/// Runs the network over the analysis set and collects one GateMatrix per
/// gating layer (layer ids 1..L). A deterministic pass evaluates without
/// sampling, so dropout gates come out all-ones.
inline GateRecord capture_record(const nn::Network& net, const Matrix& analysis_set,
                                 Provenance provenance, std::uint64_t sampling_seed = 0) {
  const auto gating = net.gating_layers();
  if (gating.empty()) throw std::invalid_argument("capture_record: network has no gating layers");
  Rng rng(sampling_seed);
  const bool stochastic = provenance == Provenance::StochasticPass;
  auto opt = nn::natural_options(net, stochastic ? nn::Mode::Train : nn::Mode::Eval, &rng);
  const auto res = nn::forward(net, analysis_set, opt);
  const auto& tr = res.trace;

  GateRecord rec;
  rec.provenance = provenance;
  rec.has_sampling = net.has_sampling();
  std::uint32_t id = 0;
  for (auto li : gating) {
    ++id;
    const auto& l = net.spec[li];
    const Matrix& h = tr.pre_activation(li);
    switch (l.kind) {
      case nn::LayerKind::ReLU: rec.layers.push_back(extract_relu_gates(h, id)); break;
      case nn::LayerKind::Swish:
        rec.layers.push_back(extract_relu_gates(h, id, GateKind::SwishHardened));
        break;
      case nn::LayerKind::Dropout:
        if (stochastic) {
          rec.layers.push_back(extract_dropout_gates(tr.gates[li], id));
        } else {
          rec.layers.push_back(extract_dropout_gates(Matrix(h.rows(), h.cols(), 1.0), id));
        }
        break;
      case nn::LayerKind::MaxPool:
        rec.layers.push_back(extract_maxpool_gates(h, l.regions, id));
        break;
      default: break;
    }
  }
  return rec;
}

// ---------------------------------------------------------------------------
// "TCGD" gate dump
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kGateDumpVersion = 1;

inline void encode_gate_matrix(const GateMatrix& g, ByteWriter& w) {
  ByteWriter blob;
  blob.tag("TCGD");
  blob.u32(kGateDumpVersion);
  blob.u32(g.layer_id());
  blob.u8(static_cast<std::uint8_t>(g.kind()));
  blob.u32(static_cast<std::uint32_t>(g.n()));
  blob.u32(static_cast<std::uint32_t>(g.dim()));
  const std::size_t row_bytes = (g.dim() + 7) / 8;
  for (std::size_t i = 0; i < g.n(); ++i) {
    auto r = g.row(i);
    for (std::size_t b = 0; b < row_bytes; ++b)
      blob.u8(static_cast<std::uint8_t>(r[b / 8] >> (8 * (b % 8))));
  }
  blob.seal();
  w.bytes(blob.buffer());
}

inline std::vector<std::uint8_t> encode_gate_matrix(const GateMatrix& g) {
  ByteWriter w;
  encode_gate_matrix(g, w);
  return w.buffer();
}

/// Decodes one dump starting at `offset` and advances `offset` past it.
inline GateMatrix decode_gate_matrix(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  if (offset > bytes.size()) throw FormatError("gate dump: offset past end");
  ByteReader r(bytes.subspan(offset));
  if (!r.tag("TCGD")) throw FormatError("gate dump: bad magic");
  if (r.u32() != kGateDumpVersion) throw FormatError("gate dump: unsupported version");
  const std::uint32_t id = r.u32();
  const std::uint8_t kind = r.u8();
  if (kind > 3) throw FormatError("gate dump: unknown layer kind");
  const std::uint32_t n = r.u32(), D = r.u32();
  if (n == 0 || D == 0) throw FormatError("gate dump: empty matrix");
  const std::size_t row_bytes = (static_cast<std::size_t>(D) + 7) / 8;
  if (r.remaining() < static_cast<std::size_t>(n) * row_bytes + 8)
    throw FormatError("gate dump: truncated");
  GateMatrix g(id, static_cast<GateKind>(kind), n, D);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = r.bytes(row_bytes);
    auto w = g.row(i);
    for (std::size_t b = 0; b < row_bytes; ++b)
      w[b / 8] |= static_cast<std::uint64_t>(row[b]) << (8 * (b % 8));
    if (D % 8 != 0 && (row[row_bytes - 1] >> (D % 8)) != 0)
      throw FormatError("gate dump: nonzero padding bits");
  }
  r.check_seal();
  offset += r.position();
  return g;
}

inline GateMatrix decode_gate_matrix(std::span<const std::uint8_t> bytes) {
  std::size_t off = 0;
  auto g = decode_gate_matrix(bytes, off);
  if (off != bytes.size()) throw FormatError("gate dump: trailing bytes");
  return g;
}

/// A record file is the concatenation of its layers' dumps.
inline std::vector<GateMatrix> decode_gate_matrices(std::span<const std::uint8_t> bytes) {
  std::vector<GateMatrix> out;
  std::size_t off = 0;
  while (off < bytes.size()) out.push_back(decode_gate_matrix(bytes, off));
  return out;
}

inline std::vector<std::uint8_t> encode_gate_record(const GateRecord& rec) {
  ByteWriter w;
  for (const auto& g : rec.layers) encode_gate_matrix(g, w);
  return w.buffer();
}

}  // namespace tcx
