#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "tsd/cli.hpp"

using namespace tsd;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("cli_test_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string sub(const char* name) const { return (path / name).string(); }
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  return std::string((std::istreambuf_iterator<char>(is)), {});
}

int run(std::vector<std::string> args) { return run_cli(std::move(args)); }

}  // namespace

TEST_CASE("usage errors exit 2") {
  CHECK(run({"frobnicate"}) == 2);
  CHECK(run({}) == 2);
  CHECK(run({"gen", "nonsense", "--out", "/tmp/cli_nonsense"}) == 2);
  TempDir tmp;
  CHECK(run({"train", "--data", tmp.sub("missing"), "--out", tmp.sub("o")}) == 2);
  CHECK(run({"probe", "pca", "--checkpoint", tmp.sub("no.tsd"), "--data",
             tmp.sub("missing"), "--out", tmp.sub("o")}) == 2);
}

TEST_CASE("gen synth writes dataset, meta and config echo") {
  TempDir tmp;
  CHECK(run({"gen", "synth1", "--seed", "3", "--out", tmp.sub("s1")}) == 0);
  CHECK(fs::exists(tmp.path / "s1" / "dataset.csv"));
  CHECK(fs::exists(tmp.path / "s1" / "meta.csv"));
  CHECK(fs::exists(tmp.path / "s1" / "config.echo.json"));
  const std::string echo = slurp(tmp.path / "s1" / "config.echo.json");
  CHECK(echo.find("\"seed\": 3") != std::string::npos);
  CHECK(echo.find("\"gen_kind\": \"synth1\"") != std::string::npos);
}

TEST_CASE("gen is byte-identical across reruns") {
  TempDir tmp;
  REQUIRE(run({"gen", "capm", "--seed", "9", "--periods", "2", "--days", "5",
               "--assets", "3", "--out", tmp.sub("a")}) == 0);
  REQUIRE(run({"gen", "capm", "--seed", "9", "--periods", "2", "--days", "5",
               "--assets", "3", "--out", tmp.sub("b")}) == 0);
  for (const char* f :
       {"dataset.csv", "meta.csv", "returns.csv", "market.csv", "periods.csv"})
    CHECK(slurp(tmp.path / "a" / f) == slurp(tmp.path / "b" / f));

  REQUIRE(run({"gen", "capm", "--seed", "10", "--periods", "2", "--days", "5",
               "--assets", "3", "--out", tmp.sub("c")}) == 0);
  CHECK(slurp(tmp.path / "a" / "dataset.csv") !=
        slurp(tmp.path / "c" / "dataset.csv"));
}

TEST_CASE("end-to-end: gen, train, probe, backtest on a tiny panel") {
  TempDir tmp;
  REQUIRE(run({"gen", "capm", "--seed", "1", "--periods", "3", "--days", "50",
               "--assets", "8", "--out", tmp.sub("data")}) == 0);

  CHECK(run({"train", "--kind", "capm", "--data", tmp.sub("data"), "--seed", "1",
             "--batch", "16", "--stage1-epochs", "3", "--stage2-iters", "5",
             "--out", tmp.sub("run")}) == 0);
  CHECK(fs::exists(tmp.path / "run" / "checkpoint.tsd"));
  CHECK(fs::exists(tmp.path / "run" / "history.csv"));
  const std::string metrics = slurp(tmp.path / "run" / "metrics.json");
  CHECK(metrics.find("stage1_train_accuracy") != std::string::npos);
  CHECK(metrics.find("\"ablation\": false") != std::string::npos);

  // history follows the 1 encdec : 3 adversary schedule
  std::ifstream h(tmp.path / "run" / "history.csv");
  std::string line;
  std::getline(h, line);
  CHECK(line == "iter,phase,l_rec,l_adv,adv_acc");
  std::size_t encdec = 0, adversary = 0;
  while (std::getline(h, line)) {
    if (line.find(",encdec,") != std::string::npos) ++encdec;
    if (line.find(",adversary,") != std::string::npos) ++adversary;
  }
  CHECK(encdec == 5);
  CHECK(adversary == 15);

  // probes append into metrics.json
  CHECK(run({"probe", "pca", "--checkpoint", tmp.sub("run") + "/checkpoint.tsd",
             "--data", tmp.sub("data"), "--space", "Z", "--k", "5", "--out",
             tmp.sub("run")}) == 0);
  CHECK(run({"probe", "logreg", "--checkpoint", tmp.sub("run") + "/checkpoint.tsd",
             "--data", tmp.sub("data"), "--space", "S", "--target", "label",
             "--out", tmp.sub("run")}) == 0);
  CHECK(run({"probe", "market-corr", "--checkpoint",
             tmp.sub("run") + "/checkpoint.tsd", "--data", tmp.sub("data"),
             "--out", tmp.sub("run")}) == 0);
  const std::string m2 = slurp(tmp.path / "run" / "metrics.json");
  CHECK(m2.find("pca_Z_label") != std::string::npos);
  CHECK(m2.find("logreg_S_label") != std::string::npos);
  CHECK(m2.find("abs_r") != std::string::npos);
  CHECK(m2.find("stage1_train_accuracy") != std::string::npos);  // preserved

  CHECK(run({"probe", "bogus", "--checkpoint", tmp.sub("run") + "/checkpoint.tsd",
             "--data", tmp.sub("data"), "--out", tmp.sub("run")}) == 2);

  // backtest over the concatenated panel (150 days) with builtin classifiers
  CHECK(run({"backtest", "--classifier", "random", "--data", tmp.sub("data"),
             "--seed", "4", "--out", tmp.sub("bt")}) == 0);
  CHECK(fs::exists(tmp.path / "bt" / "backtest.csv"));
  const std::string bt = slurp(tmp.path / "bt" / "metrics.json");
  CHECK(bt.find("\"classifier\": \"random\"") != std::string::npos);
  CHECK(bt.find("traded_days") != std::string::npos);

  CHECK(run({"backtest", "--classifier", "oracle", "--data", tmp.sub("data"),
             "--out", tmp.sub("bt2")}) == 0);
  CHECK(run({"backtest", "--classifier", "zeppelin", "--data", tmp.sub("data"),
             "--out", tmp.sub("bt3")}) == 2);
  CHECK(run({"backtest", "--classifier", "z", "--data", tmp.sub("data"), "--out",
             tmp.sub("bt4")}) == 2);  // z requires --checkpoint
}

TEST_CASE("training reruns are byte-identical") {
  TempDir tmp;
  REQUIRE(run({"gen", "capm", "--seed", "2", "--periods", "2", "--days", "50",
               "--assets", "6", "--out", tmp.sub("data")}) == 0);
  for (const char* out : {"r1", "r2"})
    REQUIRE(run({"train", "--kind", "capm", "--data", tmp.sub("data"), "--seed",
                 "7", "--batch", "8", "--stage1-epochs", "2", "--stage2-iters",
                 "4", "--out", tmp.sub(out)}) == 0);
  CHECK(slurp(tmp.path / "r1" / "checkpoint.tsd") ==
        slurp(tmp.path / "r2" / "checkpoint.tsd"));
  CHECK(slurp(tmp.path / "r1" / "history.csv") ==
        slurp(tmp.path / "r2" / "history.csv"));
  CHECK(slurp(tmp.path / "r1" / "metrics.json") ==
        slurp(tmp.path / "r2" / "metrics.json"));
}

TEST_CASE("config file feeds defaults and bad values are usage errors") {
  TempDir tmp;
  {
    std::ofstream os(tmp.path / "run.toml");
    os << "# comment\n[generate]\nkind = \"capm\"\nperiods = 2\ndays = 5\n"
       << "assets = 3\n";
  }
  CHECK(run({"gen", "capm", "--config", tmp.sub("run.toml"), "--seed", "5",
             "--out", tmp.sub("g")}) == 0);
  // 2 periods x 3 assets from the config file
  std::ifstream is(tmp.path / "g" / "dataset.csv");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(is, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 7);  // header + 6 samples

  {
    std::ofstream os(tmp.path / "bad.toml");
    os << "periods = banana\n";
  }
  CHECK(run({"gen", "capm", "--config", tmp.sub("bad.toml"), "--out",
             tmp.sub("g2")}) == 2);
  {
    std::ofstream os(tmp.path / "bad2.toml");
    os << "this line has no equals sign\n";
  }
  CHECK(run({"gen", "capm", "--config", tmp.sub("bad2.toml"), "--out",
             tmp.sub("g3")}) == 2);
  CHECK(run({"gen", "capm", "--config", tmp.sub("nope.toml"), "--out",
             tmp.sub("g4")}) == 2);
}

TEST_CASE("gradcheck runs clean") { CHECK(run({"gradcheck", "--seed", "2"}) == 0); }
