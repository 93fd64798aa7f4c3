#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "tcx/data.hpp"

using namespace tcx;
using namespace tcx::data;

namespace {

std::string write_bytes(const std::string& name, const std::vector<std::uint8_t>& bytes) {
  const auto path = (std::filesystem::temp_directory_path() / ("tcx_test_" + name)).string();
  std::ofstream f(path, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  return path;
}

// Two 2x2 images, pixels 0,51,102,255 / 255,0,1,2; labels 3,7.
const std::vector<std::uint8_t> kImages{0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2,
                                        0, 51, 102, 255, 255, 0, 1, 2};
const std::vector<std::uint8_t> kLabels{0, 0, 8, 1, 0, 0, 0, 2, 3, 7};

}  // namespace

TEST(Idx, HandBuiltFixture) {
  const auto ds = load_idx(write_bytes("img", kImages), write_bytes("lab", kLabels));
  ASSERT_EQ(ds.size(), 2u);
  ASSERT_EQ(ds.dim(), 4u);
  const double expect[2][4] = {{0, 51 / 255.0, 102 / 255.0, 1}, {1, 0, 1 / 255.0, 2 / 255.0}};
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 4; ++j) EXPECT_EQ(ds.features(i, j), expect[i][j]);
  EXPECT_EQ(ds.labels, (std::vector<int>{3, 7}));
  EXPECT_EQ(ds.num_classes, 8);
}

TEST(Idx, Errors) {
  auto bad = kImages;
  bad[3] = 0x04;
  EXPECT_THROW(load_idx(write_bytes("bad", bad), write_bytes("lab2", kLabels)), FormatError);
  auto short_img = kImages;
  short_img.pop_back();
  EXPECT_THROW(load_idx(write_bytes("short", short_img), write_bytes("lab3", kLabels)), FormatError);
  auto one_label = std::vector<std::uint8_t>{0, 0, 8, 1, 0, 0, 0, 1, 3};
  EXPECT_THROW(load_idx(write_bytes("img2", kImages), write_bytes("one", one_label)), FormatError);
  EXPECT_THROW(load_idx("/nonexistent/x", "/nonexistent/y"), std::exception);
}

TEST(Idx, RealExportRoundTrip) {
  auto ds = make_synthetic_classification(3, 20, 5, 4, 2.0);
  const auto img = write_bytes("rt_img", {}), lab = write_bytes("rt_lab", {});
  write_idx(ds, img, lab);
  const auto back = load_idx(img, lab);
  EXPECT_EQ(back.features, ds.features);
  EXPECT_EQ(back.labels, ds.labels);
}

TEST(Grayscale, ChannelMean) {
  EXPECT_NEAR(to_grayscale(Matrix::from_rows({{0.4, 0.4, 0.4}}))(0, 0), 0.4, 1e-15);
  EXPECT_NEAR(to_grayscale(Matrix::from_rows({{0, 0, 1}}))(0, 0), 1.0 / 3.0, 1e-15);
  EXPECT_THROW(to_grayscale(Matrix(1, 4)), std::invalid_argument);
  const auto rgb = make_synthetic_images(2, 3, 5);
  const auto g = to_grayscale(rgb);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t p = 0; p < 25; ++p) {
      double s = 0;
      for (std::size_t c = 0; c < 3; ++c) s += rgb(i, c * 25 + p);
      EXPECT_NEAR(g(i, p), s / 3.0, 1e-12);
    }
}

TEST(Synthetic, WellSeparatedBlobsAreLinearlySeparable) {
  BlobModel model;
  const auto ds = make_synthetic_classification(5, 400, 6, 4, 100.0, &model);
  // Nearest-centroid oracle using the empirical class means.
  Matrix cent(4, 6);
  std::vector<double> cnt(4, 0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    cnt[ds.labels[i]] += 1;
    for (std::size_t j = 0; j < 6; ++j) cent(ds.labels[i], j) += ds.features(i, j);
  }
  for (std::size_t m = 0; m < 4; ++m)
    for (std::size_t j = 0; j < 6; ++j) cent(m, j) /= cnt[m];
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::size_t best = 0;
    double bd = 1e300;
    for (std::size_t m = 0; m < 4; ++m) {
      double d = 0;
      for (std::size_t j = 0; j < 6; ++j) d += std::pow(ds.features(i, j) - cent(m, j), 2);
      if (d < bd) bd = d, best = m;
    }
    correct += static_cast<int>(best) == ds.labels[i];
  }
  EXPECT_EQ(correct, ds.size());
  for (double c : cnt) EXPECT_EQ(c, 100.0);
}

TEST(Synthetic, DeterministicAndEdgeCases) {
  const auto a = make_synthetic_classification(9, 50, 3, 5, 2.0);
  const auto b = make_synthetic_classification(9, 50, 3, 5, 2.0);
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.labels, b.labels);
  auto one = make_synthetic_classification(1, 3, 2, 3, 1.0);
  std::vector<int> sorted = one.labels;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, (std::vector<int>{0, 1, 2}));
  EXPECT_THROW(make_synthetic_classification(1, 2, 2, 3, 1.0), std::invalid_argument);
  EXPECT_THROW(make_synthetic_classification(1, 2, 2, 1, 1.0), std::invalid_argument);
}

TEST(Synthetic, LabelCorruptionRate) {
  auto ds = make_synthetic_classification(2, 5000, 2, 4, 1.0);
  const auto clean = ds.labels;
  corrupt_labels(ds, 0.2, 7);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) changed += clean[i] != ds.labels[i];
  EXPECT_NEAR(changed / 5000.0, 0.2, 3 * std::sqrt(0.2 * 0.8 / 5000));
}

TEST(Normalize, InvertibleAndSingleUse) {
  auto ds = make_synthetic_classification(4, 100, 5, 3, 3.0);
  const auto orig = ds.features;
  normalize(ds);
  for (std::size_t j = 0; j < 5; ++j) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 100; ++i) m += ds.features(i, j);
    m /= 100;
    for (std::size_t i = 0; i < 100; ++i) v += std::pow(ds.features(i, j) - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 100, 1.0, 1e-12);
  }
  EXPECT_THROW(normalize(ds), std::logic_error);
  denormalize(ds);
  for (std::size_t k = 0; k < orig.size(); ++k) EXPECT_NEAR(ds.features.data()[k], orig.data()[k], 1e-12);
}

TEST(TaskMlp, ShapesAndFrozen) {
  const auto lin = make_task_mlp(0, 10, 8, 3, 1);
  EXPECT_EQ(lin.spec.size(), 1u);
  EXPECT_TRUE(lin.gating_layers().empty());
  auto deep = make_task_mlp(31, 10, 8, 3, 1);
  EXPECT_EQ(deep.gating_layers().size(), 31u);
  EXPECT_TRUE(deep.frozen);
  nn::OptimizerState st;
  EXPECT_THROW(nn::optimizer_step(deep, nn::GradientSet::zeros_like(deep), st, {}), std::logic_error);
}

TEST(AnalysisSet, SubsetsAndOverlap) {
  EXPECT_THROW(subsample_indices(10, 0, 1), std::invalid_argument);
  const auto all = subsample_indices(10, 10, 1);
  EXPECT_FALSE(all.truncated);
  EXPECT_EQ(all.indices.size(), 10u);
  EXPECT_TRUE(subsample_indices(10, 20, 1).truncated);

  const std::size_t N = 10000, k = 2000;
  const auto a = subsample_indices(N, k, 1), b = subsample_indices(N, k, 2);
  EXPECT_TRUE(std::is_sorted(a.indices.begin(), a.indices.end()));
  EXPECT_EQ(std::set<std::size_t>(a.indices.begin(), a.indices.end()).size(), k);
  std::vector<std::size_t> common;
  std::set_intersection(a.indices.begin(), a.indices.end(), b.indices.begin(), b.indices.end(),
                        std::back_inserter(common));
  // Hypergeometric: mean k^2/N, variance k (k/N)(1-k/N)(N-k)/(N-1).
  const double mean = double(k) * k / N;
  const double var = double(k) * (double(k) / N) * (1 - double(k) / N) * (N - k) / (N - 1.0);
  EXPECT_NEAR(static_cast<double>(common.size()), mean, 3 * std::sqrt(var));
  EXPECT_EQ(subsample_indices(N, k, 1).indices, a.indices);

  auto ds = make_synthetic_classification(1, 50, 2, 2, 1.0);
  const auto sub = subsample_analysis_set(ds, 50, 3);
  EXPECT_EQ(sub.features, ds.features);
  EXPECT_EQ(sub.split, "analysis");
}
