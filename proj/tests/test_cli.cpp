#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dsg/checkpoint.hpp"
#include "dsg/netpbm.hpp"

using namespace dsg;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code;
  std::string out;
};

CliRun run(const std::string& args) {
  const std::string cmd = std::string(DSG_CLI_PATH) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return {-1, ""};
  std::string out;
  std::array<char, 4096> buf;
  while (std::size_t n = fread(buf.data(), 1, buf.size(), p)) out.append(buf.data(), n);
  const int status = pclose(p);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path work() {
  static const fs::path p = [] {
    const fs::path d = fs::temp_directory_path() / "dsg_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return p;
}

fs::path dataset() {
  static const fs::path d = [] {
    const fs::path p = work() / "data";
    const CliRun r = run("gen-data --out " + p.string() + " --seed 5 --domains 2 --per-domain 4 --size 16");
    EXPECT_EQ(r.code, 0) << r.out;
    return p;
  }();
  return d;
}

// A model whose classifier always prefers class 0.
fs::path background_checkpoint() {
  static const fs::path p = [] {
    ModelConfig c;
    c.base_channels = 4;
    c.low_channels = 4;
    c.num_fusion_blocks = 1;
    c.attn_dim = 4;
    c.num_domains = 2;
    Model<float> m(c);
    for (auto& v : m.tensor("cls.weight").data()) v = 0;
    m.tensor("cls.bias")[0] = 5;
    const fs::path f = work() / "background.ckpt";
    save_checkpoint(f, m);
    return f;
  }();
  return p;
}

}  // namespace

TEST(Cli, GenDataIsDeterministic) {
  const fs::path a = work() / "gen_a", b = work() / "gen_b";
  for (const auto& d : {a, b}) {
    const CliRun r = run("gen-data --out " + d.string() + " --seed 3 --domains 2 --per-domain 4 --size 16");
    ASSERT_EQ(r.code, 0) << r.out;
  }
  int files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(b / fs::relative(e.path(), a))) << e.path();
  }
  EXPECT_EQ(files, 1 + 2 * 2 * 4);  // manifest + image/mask per sample
}

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("gen-data --out x --bogus 3").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("eval --data x").code, 1);
  const CliRun r = run("eval --data " + dataset().string() + " --ckpt " + background_checkpoint().string() +
                    " --scales 0.5,0.75");
  EXPECT_EQ(r.code, 1) << r.out;
  EXPECT_NE(r.out.find("1.0"), std::string::npos) << r.out;
}

TEST(Cli, RuntimeErrorsExitTwo) {
  const CliRun r = run("eval --data " + dataset().string() + " --ckpt " + (work() / "missing.ckpt").string());
  EXPECT_EQ(r.code, 2) << r.out;
}

TEST(Cli, GradcheckPasses) {
  const CliRun r = run("gradcheck --seeds 2");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("cross_entropy"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos) << r.out;
}

TEST(Cli, InferWritesMaskAndOverlay) {
  const fs::path img = dataset() / "val" / "identity" / "img_0.ppm";
  const fs::path out = work() / "pred.ppm";
  const CliRun r = run("infer --ckpt " + background_checkpoint().string() + " --image " + img.string() + " --out " +
                    out.string());
  ASSERT_EQ(r.code, 0) << r.out;
  const Raster in = read_netpbm(img), mask = read_netpbm(out), overlay = read_netpbm(work() / "pred_overlay.ppm");
  EXPECT_EQ(mask.width, in.width);
  EXPECT_EQ(mask.height, in.height);
  for (auto v : mask.pixels) ASSERT_EQ(v, 0);
  EXPECT_EQ(overlay.width, 2 * in.width);
  EXPECT_EQ(overlay.height, in.height);
  // left half is the input unchanged
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width * 3; ++x)
      ASSERT_EQ(overlay.pixels[y * in.width * 6 + x], in.pixels[y * in.width * 3 + x]);
}

TEST(Cli, InferHandlesOddSizes) {
  Raster odd{7, 5, 3, std::vector<std::uint8_t>(7 * 5 * 3, 100)};
  const fs::path img = work() / "odd.ppm", out = work() / "odd_pred.ppm";
  write_netpbm(img, odd);
  const CliRun r = run("infer --ckpt " + background_checkpoint().string() + " --image " + img.string() + " --out " +
                    out.string() + " --scales 1.0");
  ASSERT_EQ(r.code, 0) << r.out;
  const Raster mask = read_netpbm(out);
  EXPECT_EQ(mask.width, 7);
  EXPECT_EQ(mask.height, 5);
}

TEST(Cli, EvalReportsBothScaleSettings) {
  const fs::path report = work() / "report.csv";
  const CliRun r = run("eval --data " + dataset().string() + " --ckpt " + background_checkpoint().string() +
                    " --report " + report.string());
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string csv = slurp(report);
  EXPECT_EQ(csv.rfind("scales,stats,domain,miou,", 0), 0u) << csv;
  EXPECT_NE(csv.find("0.5;1,running,overall,"), std::string::npos) << csv;
  EXPECT_NE(csv.find("\n1,running,overall,"), std::string::npos) << csv;

  const CliRun b = run("eval --data " + dataset().string() + " --ckpt " + background_checkpoint().string() +
                    " --stats batch --scales 0.25,0.5,1.0 --report " + report.string());
  ASSERT_EQ(b.code, 0) << b.out;
  const std::string csv2 = slurp(report);
  for (const char* row : {"0.25;0.5;1,batch,overall", "1,batch,overall", "0.25;0.5;1,running,overall",
                          "\n1,running,overall"})
    EXPECT_NE(csv2.find(row), std::string::npos) << row << "\n" << csv2;
}

TEST(Cli, TrainWritesRunDirectory) {
  const fs::path cfg = work() / "tiny.cfg";
  std::ofstream(cfg) << "# small network for a quick run\nbase_channels = 4\nlow_channels = 4\nfusion_blocks = 1\n"
                        "attn_dim = 4\nbatch_size = 2\ncrop_size = 12\n";
  const fs::path out = work() / "run";
  const CliRun r = run("train --data " + dataset().string() + " --out " + out.string() + " --config " + cfg.string() +
                    " --epochs 2 --seed 4");
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* f : {"metrics.csv", "config.txt", "last.ckpt", "best.ckpt"}) EXPECT_TRUE(fs::exists(out / f)) << f;
  const std::string metrics = slurp(out / "metrics.csv");
  EXPECT_EQ(metrics.substr(0, metrics.find('\n')), "epoch,iter,lr,loss,val_miou,val_miou_shifted_domain");
  EXPECT_EQ(std::count(metrics.begin(), metrics.end(), '\n'), 3);
  EXPECT_NE(slurp(out / "config.txt").find("epochs = 2"), std::string::npos);

  std::ofstream(work() / "bad.cfg") << "learning_rate = 0.1\n";
  const CliRun bad = run("train --data " + dataset().string() + " --out " + (work() / "bad").string() + " --config " +
                      (work() / "bad.cfg").string());
  EXPECT_EQ(bad.code, 1) << bad.out;
}
