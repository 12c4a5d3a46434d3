#include "dicom/cli.hpp"
#include "dicom/config.hpp"
#include "support.hpp"

#include <fstream>
#include <sstream>

namespace dicom {
namespace {

using nlohmann::json;

void write_file(const std::filesystem::path& p, const std::string& s) {
  std::ofstream f(p);
  f << s;
}

TEST(Config, EmptyFileGivesValidDefaults) {
  test::TempDir dir;
  write_file(dir / "empty.json", "");
  const RunConfig c = parse_config(dir / "empty.json");
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(to_json(c), to_json(RunConfig{}));
  EXPECT_EQ(c.head.K, 8192);
  EXPECT_EQ(c.mask.ratio, 0.70);
  EXPECT_EQ(c.resolved_skip_layers(), (std::vector<int>{1, 3, 4, 6}));
}

TEST(Config, MaskRatioOutsideUnitIntervalNamesConstraint) {
  const std::string msg = test::expect_error([] { config_from_json(json::parse(R"({"mask":{"ratio":1.3}})")); },
                                             "config.invalid");
  EXPECT_NE(msg.find("mask.ratio"), std::string::npos);
  EXPECT_NE(msg.find("[0,1]"), std::string::npos);
}

TEST(Config, EveryProblemIsReported) {
  const std::string msg = test::expect_error(
      [] {
        config_from_json(json::parse(R"({"mask":{"ratio":-1},"backbone":{"heads":5},"bogus":1,"temp":{"student":"x"}})"));
      },
      "config.invalid");
  EXPECT_NE(msg.find("bogus"), std::string::npos);
  EXPECT_NE(msg.find("temp.student"), std::string::npos);
}

TEST(Config, ViolationsListEveryConstraint) {
  RunConfig c;
  c.mask.ratio = 2.0;
  c.backbone.heads = 5;
  c.temp.teacher_start = 0.5;
  const auto v = c.violations();
  EXPECT_GE(v.size(), 3u);
}

TEST(Config, RoundTripIsIdentity) {
  RunConfig c;
  c.seed = 42;
  c.backbone.embed_dim = 96;
  c.segment.skip_layers = {1, 2, 3, 6};
  c.loss.raw = true;
  c.augment.rotation = false;
  const json j = to_json(c);
  const RunConfig back = config_from_json(json::parse(j.dump()));
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(config_fingerprint(back), config_fingerprint(c));
  c.seed = 43;
  EXPECT_NE(config_fingerprint(back), config_fingerprint(c));
}

TEST(Config, MissingFileAndBadJson) {
  test::TempDir dir;
  test::expect_error([&] { parse_config(dir / "none.json"); }, "config.missing_file");
  write_file(dir / "bad.json", "{ nope");
  test::expect_error([&] { parse_config(dir / "bad.json"); }, "config.parse");
}

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

TEST(Cli, SocOnCurveFile) {
  test::TempDir dir;
  write_file(dir / "curve.csv", "epoch,AUPR\n0,0\n1,1\n2,1\n");
  const CliResult r = run({"soc", "--curve", (dir / "curve.csv").string(), "--column", "AUPR"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out).at("SoC").get<double>(), 0.75);
}

TEST(Cli, UnknownSubcommandPrintsUsage) {
  const CliResult r = run({"frobnicate"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("pretrain"), std::string::npos);
  EXPECT_EQ(run({}).code, 2);
}

TEST(Cli, ModuleErrorsAreMachineReadable) {
  const CliResult r = run({"soc", "--curve", "/nonexistent/curve.csv"});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(json::parse(r.err).at("error").at("code"), "data.missing_file");
}

TEST(Cli, PretrainThenProbeAndClusterEval) {
  test::TempDir dir;
  ASSERT_EQ(run({"gen-synth", "--classes", "2", "--per-class", "8", "--size", "16x16", "--seed", "3", "--out",
                 (dir / "data").string()})
                .code,
            0);
  RunConfig cfg = test::tiny_config();
  cfg.backbone.image_height = cfg.backbone.image_width = 16;
  cfg.train.epochs = 1;
  cfg.probe.epochs = 3;
  write_file(dir / "cfg.json", to_json(cfg).dump());
  const auto manifest = (dir / "data/manifest.csv").string();

  const CliResult pre = run({"pretrain", "--config", (dir / "cfg.json").string(), "--data", manifest, "--out",
                             (dir / "run").string()});
  ASSERT_EQ(pre.code, 0) << pre.err;
  const std::string ckpt = (dir / "run/ckpt_final").string();

  const CliResult probe = run({"probe", "--ckpt", ckpt, "--data", manifest, "--out", (dir / "rep/probe.json").string()});
  ASSERT_EQ(probe.code, 0) << probe.err;
  std::ifstream f(dir / "rep/probe.json");
  const json report = json::parse(f);
  EXPECT_EQ(report.at("mode"), "probe");
  EXPECT_EQ(report.at("backbone_hash_before"), report.at("backbone_hash_after"));
  EXPECT_TRUE(std::filesystem::exists(dir / "rep/config.resolved.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "rep/version.txt"));

  // Equal snapshots and seeds give equal reports.
  ASSERT_EQ(run({"probe", "--ckpt", ckpt, "--data", manifest, "--out", (dir / "rep2/probe.json").string()}).code, 0);
  std::ifstream g(dir / "rep2/probe.json");
  EXPECT_EQ(json::parse(g), report);

  const CliResult cl = run({"cluster-eval", "--ckpt", ckpt, "--data", manifest, "--embeddings",
                            (dir / "emb.csv").string()});
  ASSERT_EQ(cl.code, 0) << cl.err;
  EXPECT_TRUE(json::parse(cl.out).contains("Rand"));
  EXPECT_TRUE(std::filesystem::exists(dir / "emb.csv"));
}

}  // namespace
}  // namespace dicom
