#pragma once

// Datasets: IDX ingestion, synthetic generators, grayscale conversion,
// normalisation and analysis-set sampling.

#include <fstream>
#include <optional>

#include "tcx/core.hpp"
#include "tcx/nn.hpp"

namespace tcx::data {

struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;
};

struct Dataset {
  Matrix features;
  /// Class indices for classification sets.
  std::vector<int> labels;
  int num_classes = 0;
  /// Real-valued targets for regression sets.
  std::optional<Matrix> targets;
  std::string split = "train";
  std::optional<Normalization> normalization;

  std::size_t size() const { return features.rows(); }
  std::size_t dim() const { return features.cols(); }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset d;
    d.features = features.select_rows(idx);
    if (!labels.empty())
      for (auto i : idx) d.labels.push_back(labels[i]);
    d.num_classes = num_classes;
    if (targets) d.targets = targets->select_rows(idx);
    d.split = split;
    d.normalization = normalization;
    return d;
  }
};

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;  // ubyte, 3 dims
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;  // ubyte, 1 dim
inline constexpr std::uint32_t kIdxDoubleMatrixMagic = 0x00000D02;  // f64, 2 dims

namespace detail {

inline std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t& pos) {
  if (pos + 4 > b.size()) throw FormatError("idx: truncated header");
  const std::uint32_t v = (std::uint32_t{b[pos]} << 24) | (std::uint32_t{b[pos + 1]} << 16) |
                          (std::uint32_t{b[pos + 2]} << 8) | std::uint32_t{b[pos + 3]};
  pos += 4;
  return v;
}

inline void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

inline std::vector<std::uint8_t> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_all(in);
}

}  // namespace detail

/// Parses an IDX feature file: ubyte images (n x rows x cols, scaled to
/// [0, 1]) or a big-endian f64 n x d matrix as written by write_idx_features.
inline Matrix parse_idx_features(std::span<const std::uint8_t> b) {
  std::size_t pos = 0;
  const std::uint32_t magic = detail::read_be32(b, pos);
  if (magic == kIdxImagesMagic) {
    const std::size_t n = detail::read_be32(b, pos), rows = detail::read_be32(b, pos),
                      cols = detail::read_be32(b, pos);
    const std::size_t d = rows * cols;
    if (b.size() - pos < n * d) throw FormatError("idx: truncated image data");
    Matrix m(n, d);
    for (std::size_t k = 0; k < n * d; ++k) m.data()[k] = b[pos + k] / 255.0;
    return m;
  }
  if (magic == kIdxDoubleMatrixMagic) {
    const std::size_t n = detail::read_be32(b, pos), d = detail::read_be32(b, pos);
    if (b.size() - pos < n * d * 8) throw FormatError("idx: truncated matrix data");
    Matrix m(n, d);
    for (std::size_t k = 0; k < n * d; ++k) {
      std::uint64_t u = 0;
      for (int j = 0; j < 8; ++j) u = (u << 8) | b[pos + 8 * k + j];
      m.data()[k] = std::bit_cast<double>(u);
    }
    return m;
  }
  throw FormatError("idx: bad image magic");
}

inline std::vector<int> parse_idx_labels(std::span<const std::uint8_t> b) {
  std::size_t pos = 0;
  if (detail::read_be32(b, pos) != kIdxLabelsMagic) throw FormatError("idx: bad label magic");
  const std::size_t n = detail::read_be32(b, pos);
  if (b.size() - pos < n) throw FormatError("idx: truncated label data");
  return {b.begin() + static_cast<std::ptrdiff_t>(pos),
          b.begin() + static_cast<std::ptrdiff_t>(pos + n)};
}

inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  Dataset ds;
  ds.features = parse_idx_features(detail::slurp(images_path));
  ds.labels = parse_idx_labels(detail::slurp(labels_path));
  if (ds.labels.size() != ds.features.rows())
    throw FormatError("idx: image/label count mismatch");
  int mx = -1;
  for (int y : ds.labels) mx = std::max(mx, y);
  ds.num_classes = mx + 1;
  return ds;
}

inline std::vector<std::uint8_t> encode_idx_images(const Matrix& m, std::uint32_t rows,
                                                   std::uint32_t cols) {
  if (static_cast<std::size_t>(rows) * cols != m.cols())
    throw std::invalid_argument("encode_idx_images: rows * cols must equal feature dim");
  std::vector<std::uint8_t> out;
  detail::write_be32(out, kIdxImagesMagic);
  detail::write_be32(out, static_cast<std::uint32_t>(m.rows()));
  detail::write_be32(out, rows);
  detail::write_be32(out, cols);
  for (double v : m.data())
    out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  return out;
}

/// Lossless export of real features (type code 0x0D).
inline std::vector<std::uint8_t> encode_idx_features(const Matrix& m) {
  std::vector<std::uint8_t> out;
  detail::write_be32(out, kIdxDoubleMatrixMagic);
  detail::write_be32(out, static_cast<std::uint32_t>(m.rows()));
  detail::write_be32(out, static_cast<std::uint32_t>(m.cols()));
  for (double v : m.data()) {
    const auto u = std::bit_cast<std::uint64_t>(v);
    for (int s = 56; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(u >> s));
  }
  return out;
}

inline std::vector<std::uint8_t> encode_idx_labels(std::span<const int> labels) {
  std::vector<std::uint8_t> out;
  detail::write_be32(out, kIdxLabelsMagic);
  detail::write_be32(out, static_cast<std::uint32_t>(labels.size()));
  for (int y : labels) {
    if (y < 0 || y > 255) throw std::invalid_argument("encode_idx_labels: label not a byte");
    out.push_back(static_cast<std::uint8_t>(y));
  }
  return out;
}

inline void write_idx(const Dataset& ds, const std::string& images_path,
                      const std::string& labels_path) {
  std::ofstream img(images_path, std::ios::binary), lab(labels_path, std::ios::binary);
  if (!img || !lab) throw std::runtime_error("cannot write IDX files");
  write_all(img, encode_idx_features(ds.features));
  write_all(lab, encode_idx_labels(ds.labels));
}

// ---------------------------------------------------------------------------
// Transformations
// ---------------------------------------------------------------------------

/// Channel-major RGB (n x 3hw) to grayscale by the mean of the channels.
inline Matrix to_grayscale(const Matrix& rgb) {
  if (rgb.cols() % 3 != 0) throw std::invalid_argument("to_grayscale: dim not divisible by 3");
  const std::size_t hw = rgb.cols() / 3;
  Matrix g(rgb.rows(), hw);
  for (std::size_t i = 0; i < rgb.rows(); ++i)
    for (std::size_t p = 0; p < hw; ++p)
      g(i, p) = (rgb(i, p) + rgb(i, hw + p) + rgb(i, 2 * hw + p)) / 3.0;
  return g;
}

/// Applies a normalisation fitted elsewhere (e.g. the training split).
inline void apply_normalization(Dataset& ds, const Normalization& z) {
  if (ds.normalization) throw std::logic_error("normalize: dataset already normalised");
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t j = 0; j < ds.dim(); ++j)
      ds.features(i, j) = (ds.features(i, j) - z.mean[j]) / z.stddev[j];
  ds.normalization = z;
}

/// Standardises every feature column in place; constant columns get std 1.
inline void normalize(Dataset& ds) {
  if (ds.normalization) throw std::logic_error("normalize: dataset already normalised");
  const std::size_t n = ds.size(), d = ds.dim();
  Normalization z{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) z.mean[j] += ds.features(i, j);
  for (auto& m : z.mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double c = ds.features(i, j) - z.mean[j];
      z.stddev[j] += c * c;
    }
  for (auto& s : z.stddev) {
    s = std::sqrt(s / static_cast<double>(n));
    if (s == 0.0) s = 1.0;
  }
  apply_normalization(ds, z);
}

inline void denormalize(Dataset& ds) {
  if (!ds.normalization) throw std::logic_error("denormalize: dataset is not normalised");
  const auto& z = *ds.normalization;
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t j = 0; j < ds.dim(); ++j)
      ds.features(i, j) = ds.features(i, j) * z.stddev[j] + z.mean[j];
  ds.normalization.reset();
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

struct BlobModel {
  Matrix centers;  // M x d
};

/// M isotropic unit-variance Gaussian blobs whose centres are drawn from
/// N(0, separation^2 I). Classes are balanced (sample i belongs to class
/// i mod M before shuffling).
inline Dataset make_synthetic_classification(std::uint64_t seed, std::size_t n, std::size_t d,
                                             int M, double separation,
                                             BlobModel* model_out = nullptr) {
  if (M < 2) throw std::invalid_argument("make_synthetic_classification: need M >= 2");
  if (n < static_cast<std::size_t>(M))
    throw std::invalid_argument("make_synthetic_classification: n < M");
  Rng rng(seed);
  BlobModel model{Matrix(static_cast<std::size_t>(M), d)};
  for (double& c : model.centers.data()) c = separation * rng.normal();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  Dataset ds;
  ds.features = Matrix(n, d);
  ds.labels.resize(n);
  ds.num_classes = M;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = order[k];
    const int y = static_cast<int>(k % static_cast<std::size_t>(M));
    ds.labels[i] = y;
    for (std::size_t j = 0; j < d; ++j)
      ds.features(i, j) = model.centers(static_cast<std::size_t>(y), j) + rng.normal();
  }
  if (model_out) *model_out = std::move(model);
  return ds;
}

/// Draws more samples from an existing blob model (e.g. a test split).
inline Dataset sample_blobs(const BlobModel& model, std::uint64_t seed, std::size_t n) {
  Rng rng(seed);
  const std::size_t M = model.centers.rows(), d = model.centers.cols();
  Dataset ds;
  ds.features = Matrix(n, d);
  ds.labels.resize(n);
  ds.num_classes = static_cast<int>(M);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = i % M;
    ds.labels[i] = static_cast<int>(y);
    for (std::size_t j = 0; j < d; ++j) ds.features(i, j) = model.centers(y, j) + rng.normal();
  }
  return ds;
}

/// Replaces a `fraction` of labels with uniformly drawn other classes.
inline void corrupt_labels(Dataset& ds, double fraction, std::uint64_t seed) {
  if (fraction <= 0.0) return;
  Rng rng(seed);
  const int M = ds.num_classes;
  for (auto& y : ds.labels)
    if (rng.bernoulli(fraction))
      y = static_cast<int>((static_cast<std::uint64_t>(y) + 1 + rng.below(M - 1)) %
                           static_cast<std::uint64_t>(M));
}

/// Smooth random RGB images (channel-major, values in [0, 1]): each channel
/// is a sum of a few Gaussian bumps.
inline Matrix make_synthetic_images(std::uint64_t seed, std::size_t n, std::size_t side,
                                    std::size_t bumps = 4) {
  Rng rng(seed);
  const std::size_t hw = side * side;
  Matrix img(n, 3 * hw);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      std::vector<double> plane(hw, 0.0);
      for (std::size_t b = 0; b < bumps; ++b) {
        const double cx = rng.uniform() * side, cy = rng.uniform() * side;
        const double w = 0.5 + rng.uniform() * side / 3.0, amp = rng.uniform();
        for (std::size_t y = 0; y < side; ++y)
          for (std::size_t x = 0; x < side; ++x) {
            const double dx = (x + 0.5 - cx) / w, dy = (y + 0.5 - cy) / w;
            plane[y * side + x] += amp * std::exp(-0.5 * (dx * dx + dy * dy));
          }
      }
      for (std::size_t p = 0; p < hw; ++p)
        img(i, c * hw + p) = std::clamp(plane[p] / 2.0, 0.0, 1.0);
    }
  return img;
}

/// Randomly initialised, frozen MLP with n_relu ReLU layers of the given
/// width: Dense [ReLU Dense]*n_relu. n_relu = 0 is a single linear map.
inline nn::Network make_task_mlp(std::size_t n_relu, std::size_t in_dim, std::size_t width,
                                 std::size_t out_dim, std::uint64_t seed) {
  nn::NetSpec spec;
  if (n_relu == 0) {
    spec.push_back(nn::LayerSpec::dense(in_dim, out_dim));
  } else {
    std::vector<std::size_t> widths(n_relu, width);
    spec = nn::stacked_mlp(in_dim, widths, out_dim);
  }
  auto net = nn::init_network(std::move(spec), seed);
  net.frozen = true;
  return net;
}

struct AnalysisSubset {
  std::vector<std::size_t> indices;
  /// k exceeded the dataset size, so every sample was taken.
  bool truncated = false;
};

/// k indices drawn without replacement, in a fixed (sorted) order.
inline AnalysisSubset subsample_indices(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k == 0) throw std::invalid_argument("subsample_analysis_set: k must be positive");
  AnalysisSubset s;
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (k >= n) {
    s.truncated = k > n;
    s.indices = std::move(idx);
    return s;
  }
  Rng rng(seed);
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  s.indices = std::move(idx);
  return s;
}

inline Dataset subsample_analysis_set(const Dataset& ds, std::size_t k, std::uint64_t seed,
                                      AnalysisSubset* chosen = nullptr) {
  auto s = subsample_indices(ds.size(), k, seed);
  Dataset out = ds.subset(s.indices);
  out.split = "analysis";
  if (chosen) *chosen = std::move(s);
  return out;
}

}  // namespace tcx::data
