#include <gtest/gtest.h>
#include <sys/wait.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "tcx/cli.hpp"

using namespace tcx;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("tcx_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

Result run_cli(const fs::path& dir, const std::string& args) {
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string(TCX_CLI_PATH) + " " + args + " >" + out.string() + " 2>" +
                          err.string();
  const int st = std::system(cmd.c_str());
  return {WIFEXITED(st) ? WEXITSTATUS(st) : -1, slurp(out), slurp(err)};
}

const char* kSmall = R"(seed = 3
run_id = tiny

[model]
arch = stacked
widths = 8,8,8

[data]
n_train = 120
n_test = 60
dim = 5
classes = 3

[train]
epochs = 2
batch_size = 20

[estimate]
estimator = both
analysis_size = 100
analysis_every = 1
)";

fs::path write_manifest(const fs::path& dir, const std::string& text) {
  const auto p = dir / "m.ini";
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST(Manifest, UnknownKeyIsRejected) {
  const auto dir = fresh_dir("unknown");
  const auto m = write_manifest(dir, std::string(kSmall) + "bogus_knob = 4\n");
  const auto r = run_cli(dir, "train --manifest " + m.string() + " --out " + dir.string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("bogus_knob"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "train_log.csv"));
}

TEST(Manifest, BadValuesAndMissingFile) {
  EXPECT_THROW(Manifest::from_string("[train]\nepochs = many\n"), ConfigError);
  EXPECT_THROW(Manifest::from_string("[nosuch]\nx = 1\n"), ConfigError);
  const auto dir = fresh_dir("missing");
  EXPECT_EQ(run_cli(dir, "train --manifest /nonexistent.ini").code, 2);
  EXPECT_EQ(run_cli(dir, "frobnicate").code, 2);
}

TEST(Manifest, HashIgnoresOrderingAndComments) {
  const auto a = Manifest::from_string("seed = 1\n[train]\nepochs = 4\nlr = 0.01\n");
  const auto b = Manifest::from_string("; note\nseed = 1\n[train]\nlr = 0.01\nepochs = 4\n");
  EXPECT_EQ(a.hash_hex(), b.hash_hex());
  EXPECT_EQ(a.canonical(), b.canonical());
  const auto c = Manifest::from_string("seed = 2\n[train]\nepochs = 4\nlr = 0.01\n");
  EXPECT_NE(a.hash_hex(), c.hash_hex());
  EXPECT_EQ(a.hash_hex().size(), 16u);
}

TEST(Pipeline, TrainAnalyzeReport) {
  const auto dir = fresh_dir("pipeline");
  const auto m = write_manifest(dir, kSmall);
  const std::string common = " --manifest " + m.string() + " --out " + dir.string();
  auto r = run_cli(dir, "train" + common);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "model.tckp"));
  r = run_cli(dir, "analyze" + common);
  ASSERT_EQ(r.code, 0) << r.err;

  const auto t = report::read_table((dir / "analysis.csv").string());
  std::set<std::string> metrics, estimators;
  for (const auto& row : t.rows) {
    metrics.insert(row[t.column("metric")]);
    estimators.insert(row[t.column("estimator")]);
  }
  for (const char* name : {"H", "I_XS", "I_XSY", "TC", "TC_Y", "C_l", "C_lY", "prefix_H", "suffix_H"})
    EXPECT_TRUE(metrics.count(name)) << name;
  EXPECT_EQ(estimators, (std::set<std::string>{"exact", "kde"}));
  EXPECT_EQ(report::manifest_hashes(t).size(), 1u);

  r = run_cli(dir, "report " + (dir / "analysis.csv").string() + " --out " + dir.string());
  ASSERT_EQ(r.code, 0) << r.err;
  std::vector<fs::path> svgs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".svg") svgs.push_back(e.path());
  ASSERT_FALSE(svgs.empty());
  std::vector<std::string> first;
  for (const auto& p : svgs) first.push_back(slurp(p));
  r = run_cli(dir, "report " + (dir / "analysis.csv").string() + " --out " + dir.string());
  ASSERT_EQ(r.code, 0);
  for (std::size_t k = 0; k < svgs.size(); ++k) EXPECT_EQ(slurp(svgs[k]), first[k]);
}

TEST(Report, EmptyCsvIsAnError) {
  const auto dir = fresh_dir("empty");
  std::ofstream(dir / "e.csv") << "";
  EXPECT_NE(run_cli(dir, "report " + (dir / "e.csv").string() + " --out " + dir.string()).code, 0);
  std::ofstream(dir / "h.csv") << "a,b\n";
  EXPECT_NE(run_cli(dir, "report " + (dir / "h.csv").string() + " --out " + dir.string()).code, 0);
  EXPECT_THROW(report::parse_csv(""), FormatError);
}

TEST(Report, MixedManifestsNeedOptIn) {
  const auto dir = fresh_dir("mixed");
  std::ofstream(dir / "a.csv") << "epoch,value_nats,manifest_hash\n0,1,aaaa\n";
  std::ofstream(dir / "b.csv") << "epoch,value_nats,manifest_hash\n0,2,bbbb\n";
  const std::string in = (dir / "a.csv").string() + " " + (dir / "b.csv").string();
  const std::string plot = " --plot curve --x epoch --y value_nats --out " + dir.string();
  EXPECT_EQ(run_cli(dir, "report " + in + plot).code, 2);
  EXPECT_EQ(run_cli(dir, "report " + in + plot + " --allow-mixed").code, 0);
  EXPECT_NE(slurp(dir / "a.svg").find("aaaa;bbbb"), std::string::npos);
}

namespace {

std::size_t occurrences(const std::string& s, const std::string& what) {
  std::size_t n = 0;
  for (auto p = s.find(what); p != std::string::npos; p = s.find(what, p + 1)) ++n;
  return n;
}

}  // namespace

TEST(Svg, ScatterDrawsOneCirclePerPoint) {
  report::Table t{{"H", "TC"}, {{"1.5", "0.2"}, {"2.5", "0.1"}}};
  const auto svg = report::render_svg(t, {report::PlotKind::Scatter, "H", "TC", "", {}, "s"}, "abc");
  EXPECT_EQ(occurrences(svg, "<circle"), 2u);
  EXPECT_NE(svg.find("<desc>manifest_hash=abc</desc>"), std::string::npos);
  EXPECT_EQ(svg, report::render_svg(t, {report::PlotKind::Scatter, "H", "TC", "", {}, "s"}, "abc"));
}

TEST(Svg, CurveHasOnePolylinePerGroup) {
  report::Table t{{"epoch", "layer_id", "metric", "value_nats"}, {}};
  for (int e = 0; e < 4; ++e)
    for (int l = 1; l <= 3; ++l) {
      t.add({std::to_string(e), std::to_string(l), "H", std::to_string(e * l)});
      t.add({std::to_string(e), std::to_string(l), "TC", "0"});
    }
  report::PlotSpec s;
  s.group = "layer_id";
  s.where = {{"metric", "H"}};
  EXPECT_EQ(occurrences(report::render_svg(t, s), "<polyline"), 3u);
  s.where = {{"metric", "none"}};
  EXPECT_THROW(report::render_svg(t, s), std::exception);
}

TEST(Csv, RoundTripAndSeparatorsRejected) {
  report::Table t{{"a", "b"}, {{"x y", "1"}, {"-0.5", "nan"}}};
  const auto back = report::parse_csv(report::to_csv(t));
  EXPECT_EQ(back.header, t.header);
  EXPECT_EQ(back.rows, t.rows);
  EXPECT_THROW(report::to_csv({{"a"}, {{"x,y"}}}), std::invalid_argument);
  EXPECT_THROW(report::parse_csv("a,b\n1\n"), FormatError);
}
