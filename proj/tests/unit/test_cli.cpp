#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"

#include "brainage/cli.hpp"
#include "json.hpp"
#include "oracles.hpp"

using namespace brainage;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "brainage");
  return run_cli(args);
}

}  // namespace

TEST_CASE("phantom-gen writes volumes and a manifest") {
  ScratchDir dir("cli_gen");
  const std::string out = (dir.path / "cohort").string();
  REQUIRE(cli({"phantom-gen", "--n", "3", "--dims", "16", "--seed", "2", "--out", out}) == 0);
  std::ifstream m(dir.path / "cohort" / "manifest.csv");
  std::string line;
  int rows = 0;
  while (std::getline(m, line)) ++rows;
  CHECK(rows == 4);
  CHECK(fs::exists(dir.path / "cohort" / "ph0000_image.nii.gz"));
  CHECK(fs::exists(dir.path / "cohort" / "ph0002_tissues.nii.gz"));
  const auto run = nlohmann::json::parse(slurp(dir.path / "cohort" / "run.json"));
  CHECK(run.at("command") == "phantom-gen");
  CHECK(run.at("status") == "completed");
  CHECK(run.at("seed") == 2);
}

TEST_CASE("exit codes") {
  ScratchDir dir("cli_exit");
  const std::string out = dir.path.string();
  CHECK(cli({"--help"}) == 0);
  CHECK(cli({"phantom-gen", "--bogus", "--out", out}) == 1);
  CHECK(cli({"phantom-gen", "--n", "2", "--dims", "16", "--age-low", "60", "--age-high", "40", "--out", out}) == 1);
  CHECK(cli({"eval", "--checkpoint", (dir.path / "missing.ckpt").string(), "--testset",
             (dir.path / "missing.csv").string(), "--out", out}) == 1);
}

TEST_CASE("bias-fit and bias-apply") {
  ScratchDir dir("cli_bias");
  {
    std::ofstream pairs(dir.path / "pairs.csv");
    pairs << "age,predicted\n";
    for (int a = 20; a <= 80; a += 5) pairs << a << "," << (0.7 * a + 15.0) << "\n";
    std::ofstream input(dir.path / "input.csv");
    input << "id,age,predicted\ns1,40,43\ns2,85,70\n";
  }
  const std::string out = (dir.path / "fit").string();
  REQUIRE(cli({"bias-fit", "--pairs", (dir.path / "pairs.csv").string(), "--out", out}) == 0);
  const auto bc = nlohmann::json::parse(slurp(dir.path / "fit" / "bias.json"));
  CHECK(bc.at("slope").get<double>() == doctest::Approx(0.7));
  // s2 is older than every calibration subject.
  CHECK(cli({"bias-apply", "--bias", (dir.path / "fit" / "bias.json").string(), "--input",
             (dir.path / "input.csv").string(), "--out", (dir.path / "apply").string()}) == 1);
}

TEST_CASE("train, eval and stats run end to end and reproducibly") {
  ScratchDir dir("cli_train");
  const std::string data = (dir.path / "data").string();
  REQUIRE(cli({"phantom-gen", "--n", "8", "--dims", "16", "--seed", "1", "--out", data}) == 0);
  const std::string manifest = (dir.path / "data" / "manifest.csv").string();
  auto train = [&](const std::string& name) {
    return cli({"train", "--manifest", manifest, "--split-ratios", "0.5", "0.25", "0.25", "--epochs", "2",
                "--patch-size", "16", "--base-channels", "2", "--depth", "3", "--seed", "5", "--out",
                (dir.path / name).string()});
  };
  REQUIRE(train("t1") == 0);
  REQUIRE(train("t2") == 0);
  for (const char* f : {"epoch_log.csv", "train_log.csv", "split.json", "train_config.json"}) {
    CHECK(slurp(dir.path / "t1" / f) == slurp(dir.path / "t2" / f));
  }
  const auto r1 = nlohmann::json::parse(slurp(dir.path / "t1" / "run.json"));
  const auto r2 = nlohmann::json::parse(slurp(dir.path / "t2" / "run.json"));
  CHECK(r1.at("config_hash") == r2.at("config_hash"));
  CHECK(r1.at("status") == "completed");
  const std::string split = (dir.path / "t1" / "split.json").string();
  auto eval = [&](const std::string& name) {
    return cli({"eval", "--checkpoint", (dir.path / "t1" / "checkpoint_best.ckpt").string(), "--testset", manifest,
                "--split-file", split, "--split-list", "test", "--out", (dir.path / name).string()});
  };
  REQUIRE(eval("e1") == 0);
  REQUIRE(eval("e2") == 0);
  CHECK(slurp(dir.path / "e1" / "report.csv") == slurp(dir.path / "e2" / "report.csv"));
  CHECK(slurp(dir.path / "e1" / "report.txt").find("MAE_voxel") != std::string::npos);

  // Identical metric files: every difference is zero.
  const std::string rep = (dir.path / "e1" / "report.csv").string();
  CHECK(cli({"stats", "--metrics", "A=" + rep, "--metrics", "B=" + rep, "--out", (dir.path / "s").string()}) == 1);
}
