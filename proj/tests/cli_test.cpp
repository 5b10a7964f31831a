#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dpt/cli.hpp"

namespace {

namespace fs = std::filesystem;

int run(std::initializer_list<const char*> args, std::string* out = nullptr) {
  std::vector<const char*> argv = {"dpt"};
  argv.insert(argv.end(), args.begin(), args.end());
  std::stringstream captured;
  std::streambuf* old = std::cout.rdbuf(captured.rdbuf());
  int rc = dpt::run_cli(static_cast<int>(argv.size()), argv.data());
  std::cout.rdbuf(old);
  if (out) *out = captured.str();
  return rc;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::path(::testing::TempDir()) / ("dpt_cli_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_test_ppm(const std::string& path, std::size_t hw) {
  std::ofstream f(path, std::ios::binary);
  f << "P6\n" << hw << " " << hw << "\n255\n";
  for (std::size_t y = 0; y < hw; ++y)
    for (std::size_t x = 0; x < hw; ++x) {
      f.put(static_cast<char>((x * 7) % 256));
      f.put(static_cast<char>((y * 5) % 256));
      f.put(static_cast<char>((x + y) % 256));
    }
}

std::vector<unsigned char> slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::vector<unsigned char>((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
}

TEST(Cli, DescribeReportsCountsAndShapes) {
  std::string out;
  int rc = run({"describe", "--preset", "toy", "--size", "64"}, &out);
  EXPECT_EQ(rc, dpt::kOk);
  EXPECT_NE(out.find("parameters: 875713"), std::string::npos) << out;
  EXPECT_NE(out.find("decode.final: [64x32x32]"), std::string::npos) << out;
  EXPECT_NE(out.find("head.depth: [1x64x64]"), std::string::npos) << out;
}

TEST(Cli, UnknownPresetIsConfigError) {
  EXPECT_EQ(run({"describe", "--preset", "gigantic"}), dpt::kConfigError);
}

TEST(Cli, ConvertRoundTrip) {
  TempDir tmp;
  write_test_ppm(tmp.file("in.ppm"), 16);
  EXPECT_EQ(run({"convert", "--input", tmp.file("in.ppm").c_str(), "--output",
                 tmp.file("mid.dptr").c_str()}),
            dpt::kOk);
  EXPECT_EQ(run({"convert", "--input", tmp.file("mid.dptr").c_str(), "--output",
                 tmp.file("back.ppm").c_str()}),
            dpt::kOk);
  EXPECT_EQ(slurp(tmp.file("in.ppm")), slurp(tmp.file("back.ppm")));
}

TEST(Cli, InferIsBitwiseDeterministic) {
  TempDir tmp;
  write_test_ppm(tmp.file("img.ppm"), 64);
  for (const char* out : {"a.dptr", "b.dptr"}) {
    int rc = run({"infer", "--preset", "toy", "--seed", "9", "--input",
                  tmp.file("img.ppm").c_str(), "--output", tmp.file(out).c_str()});
    ASSERT_EQ(rc, dpt::kOk);
  }
  auto a = slurp(tmp.file("a.dptr"));
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(tmp.file("b.dptr")));
}

TEST(Cli, InferRejectsIndivisibleWithoutAutoPad) {
  TempDir tmp;
  write_test_ppm(tmp.file("img.ppm"), 40);
  EXPECT_EQ(run({"infer", "--preset", "toy", "--input", tmp.file("img.ppm").c_str(),
                 "--output", tmp.file("o.dptr").c_str()}),
            dpt::kConfigError);
  std::string out;
  EXPECT_EQ(run({"infer", "--preset", "toy", "--auto-pad", "--input",
                 tmp.file("img.ppm").c_str(), "--output", tmp.file("o.dptr").c_str()},
                &out),
            dpt::kOk);
  EXPECT_NE(out.find("40x40"), std::string::npos);
}

TEST(Cli, InferSegWritesLabelsAndLogits) {
  TempDir tmp;
  write_test_ppm(tmp.file("img.ppm"), 32);
  int rc = run({"infer", "--preset", "toy-seg", "--seed", "4", "--input",
                tmp.file("img.ppm").c_str(), "--output", tmp.file("labels.pgm").c_str()});
  ASSERT_EQ(rc, dpt::kOk);
  EXPECT_TRUE(fs::exists(tmp.file("labels.pgm")));
  EXPECT_TRUE(fs::exists(tmp.file("labels.pgm") + ".logits.dptr"));
  auto logits = dpt::read_image(tmp.file("labels.pgm") + ".logits.dptr");
  EXPECT_EQ(logits.channels, 5u);
  EXPECT_EQ(logits.height, 32u);
}

TEST(Cli, MissingInputIsIoError) {
  TempDir tmp;
  EXPECT_EQ(run({"infer", "--preset", "toy", "--input", tmp.file("nope.ppm").c_str(),
                 "--output", tmp.file("o.dptr").c_str()}),
            dpt::kIoError);
}

TEST(Cli, EvalDepthEmitsKvAndJson) {
  TempDir tmp;
  dpt::Image gt;
  gt.channels = 1;
  gt.height = gt.width = 8;
  gt.data.assign(64, 0.0f);
  for (std::size_t i = 0; i < 64; ++i) gt.data[i] = 0.5f + 0.01f * static_cast<float>(i);
  dpt::write_image(tmp.file("gt.dptr"), gt);
  dpt::Image pred = gt;
  for (auto& v : pred.data) v = 2.0f * v + 1.0f;
  dpt::write_image(tmp.file("pred.dptr"), pred);
  std::string out;
  int rc = run({"eval", "--task", "depth", "--pred", tmp.file("pred.dptr").c_str(), "--gt",
                tmp.file("gt.dptr").c_str(), "--aligned", "--gt-inverse", "--json",
                tmp.file("rep.json").c_str()},
               &out);
  ASSERT_EQ(rc, dpt::kOk);
  EXPECT_NE(out.find("abs_rel="), std::string::npos);
  auto j = nlohmann::json::parse(std::ifstream(tmp.file("rep.json")));
  EXPECT_LT(j["abs_rel"].get<double>(), 1e-6);  // exact affine image of the gt
  EXPECT_NEAR(j["align_scale"].get<double>(), 0.5, 1e-6);
}

TEST(Cli, EvalDepthWithWhdrPairs) {
  TempDir tmp;
  dpt::Image pred;
  pred.channels = 1;
  pred.height = pred.width = 4;
  pred.data.assign(16, 0.1f);
  pred.data[0] = 1.0f;  // (0,0) much closer than everything else
  dpt::write_image(tmp.file("pred.dptr"), pred);
  dpt::write_image(tmp.file("gt.dptr"), pred);
  {
    std::ofstream f(tmp.file("pairs.txt"));
    f << "# ay ax by bx rel\n";
    f << "0 0 2 2 a\n";   // agrees
    f << "0 0 2 2 b\n";   // disagrees
    f << "1 1 2 2 a\n";   // inconclusive ratio -> disagreement
  }
  std::string out;
  int rc = run({"eval", "--task", "depth", "--pred", tmp.file("pred.dptr").c_str(), "--gt",
                tmp.file("gt.dptr").c_str(), "--pairs", tmp.file("pairs.txt").c_str()},
               &out);
  ASSERT_EQ(rc, dpt::kOk);
  EXPECT_NE(out.find("whdr=0.666666"), std::string::npos) << out;
}

TEST(Cli, EvalSegFromLabelMaps) {
  TempDir tmp;
  auto write_labels = [&](const std::string& path, std::initializer_list<int> labels) {
    std::ofstream f(path, std::ios::binary);
    f << "P5\n2 2\n255\n";
    for (int l : labels) f.put(static_cast<char>(l));
  };
  write_labels(tmp.file("pred.pgm"), {0, 0, 1, 1});
  write_labels(tmp.file("gt.pgm"), {0, 1, 1, 1});
  std::string out;
  int rc = run({"eval", "--task", "seg", "--pred", tmp.file("pred.pgm").c_str(), "--gt",
                tmp.file("gt.pgm").c_str(), "--classes", "2"},
               &out);
  ASSERT_EQ(rc, dpt::kOk);
  EXPECT_NE(out.find("pix_acc=0.75"), std::string::npos) << out;
  EXPECT_NE(out.find("miou=0.58333"), std::string::npos) << out;
}

TEST(Cli, BenchEmitsTable) {
  std::string out;
  int rc = run({"bench", "--preset", "toy", "--size", "32", "--runs", "2", "--warmup", "0"},
               &out);
  ASSERT_EQ(rc, dpt::kOk);
  EXPECT_NE(out.find("mean_ms"), std::string::npos);
  EXPECT_NE(out.find("32x32"), std::string::npos);
}

TEST(Cli, BenchResolutionSweepWithGroundTruth) {
  TempDir tmp;
  for (std::size_t s : {32u, 64u}) {
    dpt::Image gt;
    gt.channels = 1;
    gt.height = gt.width = s;
    gt.data.resize(s * s);
    for (std::size_t i = 0; i < s * s; ++i)
      gt.data[i] = 0.3f + 0.001f * static_cast<float>(i % 89);
    dpt::write_image(tmp.file("gt" + std::to_string(s) + ".dptr"), gt);
  }
  std::string out;
  int rc = run({"bench", "--preset", "toy", "--size", "32,64", "--runs", "1", "--warmup",
                "0", "--gt", tmp.file("gt32.dptr").c_str(), "--gt",
                tmp.file("gt64.dptr").c_str()},
               &out);
  ASSERT_EQ(rc, dpt::kOk) << out;
  EXPECT_NE(out.find("rel_change_pct"), std::string::npos) << out;
  EXPECT_NE(out.find("relative performance vs 32x32"), std::string::npos) << out;
}

TEST(Cli, BenchRejectsBadSize) {
  EXPECT_EQ(run({"bench", "--preset", "toy", "--size", "50", "--runs", "1"}),
            dpt::kConfigError);
}

TEST(Cli, WeightsRoundTripThroughInfer) {
  TempDir tmp;
  auto cfg = dpt::preset("toy");
  auto m = dpt::build_model<float>(cfg, 77);
  dpt::save_weights(m).save(tmp.file("w.dptw"));
  write_test_ppm(tmp.file("img.ppm"), 64);
  int rc = run({"infer", "--preset", "toy", "--weights", tmp.file("w.dptw").c_str(),
                "--input", tmp.file("img.ppm").c_str(), "--output",
                tmp.file("pred.dptr").c_str()});
  ASSERT_EQ(rc, dpt::kOk);
  // Same weights via --seed produce the identical map.
  int rc2 = run({"infer", "--preset", "toy", "--seed", "77", "--input",
                 tmp.file("img.ppm").c_str(), "--output", tmp.file("pred2.dptr").c_str()});
  ASSERT_EQ(rc2, dpt::kOk);
  EXPECT_EQ(slurp(tmp.file("pred.dptr")), slurp(tmp.file("pred2.dptr")));
}

TEST(Cli, GradcheckSpotCheckPasses) {
  std::string out;
  dpt::DptConfig cfg = dpt::micro_gradcheck_config(dpt::HeadKind::Depth);
  TempDir tmp;
  {
    std::ofstream f(tmp.file("micro.json"));
    f << dpt::to_json(cfg).dump();
  }
  int rc = run({"gradcheck", "--config", tmp.file("micro.json").c_str(), "--samples", "40"},
               &out);
  EXPECT_EQ(rc, dpt::kOk) << out;
  EXPECT_NE(out.find("gradcheck: PASS"), std::string::npos);
  EXPECT_NE(out.find("end_to_end.depth_masked_mse"), std::string::npos);
}

TEST(Cli, GradcheckGuardsLargeConfigs) {
  EXPECT_EQ(run({"gradcheck", "--preset", "base"}), dpt::kConfigError);
}

}  // namespace
