#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "fgl/cli.hpp"
#include "support.hpp"

using namespace fgl;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "fgl");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string str(const std::filesystem::path& p) { return p.string(); }

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  const auto help = run({"--help"});
  EXPECT_EQ(help.code, kExitOk);
  EXPECT_NE(help.out.find("gen-data"), std::string::npos);
  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"frobnicate"}).code, kExitUsage);
  EXPECT_EQ(run({"gen-data", "--pairs", "2", "--out", "/tmp/x", "--bogus"}).code, kExitUsage);
  EXPECT_EQ(run({"gen-data", "--out", "/tmp/x"}).code, kExitUsage);
  EXPECT_EQ(run({"gen-data", "--pairs", "two", "--out", "/tmp/x"}).code, kExitUsage);
}

TEST(Cli, InvalidOutlierRatio) {
  fgl::testing::TempDir dir("cli_ratio");
  const auto r = run({"gen-data", "--pairs", "2", "--outlier-ratio-max", "1.5", "--out", str(dir.path() / "d")});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_FALSE(r.err.empty());
  EXPECT_FALSE(std::filesystem::exists(dir.path() / "d" / "manifest.json"));
}

TEST(Cli, MissingInputsAreDataErrors) {
  fgl::testing::TempDir dir("cli_missing");
  const auto d = str(dir.path() / "data");
  ASSERT_EQ(run({"gen-data", "--pairs", "3", "--points", "40", "--out", d}).code, kExitOk);
  EXPECT_EQ(run({"eval", "--data", d, "--checkpoint", str(dir.path() / "nope.bin"), "--report",
                 str(dir.path() / "r")})
                .code,
            kExitData);
  EXPECT_EQ(run({"fit-prior", "--data", str(dir.path() / "absent"), "--out", str(dir.path() / "p.json")}).code,
            kExitData);
  EXPECT_EQ(run({"train", "--data", d, "--prior", str(dir.path() / "p.json"), "--out", str(dir.path() / "o")}).code,
            kExitData);
  EXPECT_EQ(run({"eval", "--data", d, "--methods", "learned", "--report", str(dir.path() / "r")}).code, kExitUsage);
  EXPECT_EQ(run({"eval", "--data", d, "--post", "median", "--report", str(dir.path() / "r")}).code, kExitUsage);
}

TEST(Cli, VerifyTheory) {
  const auto r = run({"verify-theory", "--trials", "10000", "--seed", "7"});
  EXPECT_EQ(r.code, kExitOk) << r.out;
  EXPECT_NE(r.out.find("all invariants hold"), std::string::npos);
}

TEST(Cli, FullPipeline) {
  fgl::testing::TempDir dir("cli_pipe");
  const auto train_data = str(dir.path() / "train");
  const auto test_data = str(dir.path() / "test");
  const auto prior = str(dir.path() / "prior.json");
  const auto out = dir.path() / "run";
  ASSERT_EQ(run({"gen-data", "--pairs", "24", "--points", "64", "--seed", "1", "--out", train_data}).code, kExitOk);
  ASSERT_EQ(run({"gen-data", "--pairs", "6", "--points", "64", "--seed", "2", "--out", test_data}).code, kExitOk);
  ASSERT_EQ(run({"fit-prior", "--data", train_data, "--out", prior}).code, kExitOk);

  {
    std::ofstream cfg(dir.path() / "run.cfg");
    cfg << "# small run\niterations = 30\nbatch_size = 4\nvalidation_interval = 10\nvalidation_pairs = 4\n"
           "trunk_depth = 1\nrefine_depth = 1\nchannels = 8\ngroups = 2\nreduction = 2\nseed = 3\n";
  }
  const auto tr = run({"train", "--data", train_data, "--prior", prior, "--config", str(dir.path() / "run.cfg"),
                       "--out", str(out), "--threads", "2", "--quiet"});
  ASSERT_EQ(tr.code, kExitOk) << tr.err;
  ASSERT_TRUE(std::filesystem::exists(out / "checkpoint.bin"));

  std::ifstream log(out / "train_log.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["iteration"].get<std::size_t>(), lines);
    ++lines;
  }
  EXPECT_EQ(lines, 30u);
  const auto curve = detail::read_file(out / "curves.csv");
  EXPECT_EQ(std::count(curve.begin(), curve.end(), '\n'), 4);

  const auto ev = run({"eval", "--data", test_data, "--checkpoint", str(out / "checkpoint.bin"), "--methods",
                       "ransac,oracle,learned", "--report", str(dir.path() / "report")});
  ASSERT_EQ(ev.code, kExitOk) << ev.err;
  const auto csv = detail::read_file(dir.path() / "report.csv");
  EXPECT_EQ(std::string(csv.begin(), csv.end()), ev.out);
  EXPECT_EQ(std::count(ev.out.begin(), ev.out.end(), '\n'), 7);
  EXPECT_EQ(nlohmann::json::parse(std::ifstream(dir.path() / "report.json")).size(), 6u);

  // Resume to 40 iterations appends to the log.
  {
    std::ofstream cfg(dir.path() / "run.cfg", std::ios::app);
    cfg << "iterations = 40\n";
  }
  const auto re = run({"train", "--data", train_data, "--prior", prior, "--config", str(dir.path() / "run.cfg"),
                       "--out", str(out), "--resume", str(out / "checkpoint.bin"), "--quiet"});
  ASSERT_EQ(re.code, kExitOk) << re.err;
  std::ifstream log2(out / "train_log.jsonl");
  lines = 0;
  while (std::getline(log2, line)) ++lines;
  EXPECT_EQ(lines, 40u);

  const auto gen_again = run({"gen-data", "--pairs", "24", "--points", "64", "--seed", "1", "--out",
                              str(dir.path() / "again")});
  ASSERT_EQ(gen_again.code, kExitOk);
  for (const auto& entry : std::filesystem::directory_iterator(train_data)) {
    EXPECT_EQ(detail::read_file(entry.path()), detail::read_file(dir.path() / "again" / entry.path().filename()))
        << entry.path();
  }
}
