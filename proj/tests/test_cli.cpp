#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <numbers>
#include <string>

#include "json.hpp"
#include "mflow/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kSmall =
    " -q --set network.hidden=12,12 --set network.time_embed_dim=4 --set trainer.epochs=4"
    " --set trainer.eval_every=2 --set data.n_train=48 --set data.n_eval=24 --set trainer.batch_size=16"
    " --set trainer.lr=1e-3 --set sampler.n=6";

struct Outcome {
  int status;
  std::string err;
};

Outcome run(const std::string& args) {
  const fs::path err = fs::temp_directory_path() / ("mflow_cli_stderr_" + std::to_string(getpid()) + ".txt");
  const std::string cmd = std::string(MFLOW_CLI) + " " + args + " > /dev/null 2> " + err.string();
  const int raw = std::system(cmd.c_str());
  return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, mflow::read_file(err)};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("mflow_cli_" + name);
  fs::remove_all(d);
  return d;
}

json manifest(const fs::path& d) { return json::parse(mflow::read_file(d / "manifest.json")); }

}  // namespace

TEST(Cli, TrainThenEvalUsesManifestCheckpoints) {
  const fs::path d = fresh_dir("train_eval");
  ASSERT_EQ(run("gen-data -o " + d.string() + kSmall).status, 0);
  ASSERT_EQ(run("train -o " + d.string() + kSmall + " --seeds 3,4 --emit-csv").status, 0);
  const json m = manifest(d);
  ASSERT_TRUE(m["commands"].contains("train"));
  EXPECT_EQ(m["commands"]["train"]["seeds"], json({3, 4}));
  for (const auto& [seed, rel] : m["commands"]["train"]["checkpoints"].items()) {
    EXPECT_TRUE(fs::exists(d / rel.get<std::string>())) << seed;
  }
  for (const auto& f : m["commands"]["train"]["files"]) EXPECT_TRUE(fs::exists(d / f.get<std::string>()));
  EXPECT_TRUE(fs::exists(d / "train/seed_3/curve.csv"));

  ASSERT_EQ(run("eval -o " + d.string() + kSmall).status, 0);
  const json report = json::parse(mflow::read_file(d / "eval/report.json"));
  EXPECT_EQ(report["task"], "gmm2d");
  EXPECT_EQ(report["success"]["all"]["n"], 2);
  EXPECT_LT(report["tape_nodes"]["dde_mode"].get<int>(), report["tape_nodes"]["jvp_mode"].get<int>());
  EXPECT_EQ(manifest(d)["commands"]["eval"]["seeds"], json({3, 4}));

  ASSERT_EQ(run("sample -o " + d.string() + kSmall + " --seed 4").status, 0);
  EXPECT_TRUE(fs::exists(d / "samples/seed_4.csv"));
  EXPECT_EQ(run("sample -o " + d.string() + kSmall + " --seed 9").status, 3);
}

TEST(Cli, RerunIsBitIdentical) {
  const fs::path a = fresh_dir("rerun_a"), b = fresh_dir("rerun_b");
  for (const auto& d : {a, b}) ASSERT_EQ(run("train -o " + d.string() + kSmall + " --seeds 0 --jobs 2").status, 0);
  ASSERT_EQ(run("train -o " + a.string() + kSmall + " --seeds 0").status, 0);  // overwrite in place
  for (const char* f : {"train/seed_0/checkpoint.json", "train/seed_0/metrics.jsonl", "manifest.json", "config/train.ini"}) {
    EXPECT_EQ(mflow::read_file(a / f), mflow::read_file(b / f)) << f;
  }
}

TEST(Cli, ProbeStarvationDefaults) {
  const fs::path d = fresh_dir("starvation");
  ASSERT_EQ(run("probe-starvation -q --emit-csv -o " + d.string()).status, 0);
  const json rows = json::parse(mflow::read_file(d / "probes/starvation.json"));
  ASSERT_EQ(rows.size(), 100u);
  bool found = false;
  for (const auto& r : rows) {
    if (r["rho_star"] == 1.0 && r["alpha"] == std::numbers::pi / 2) {
      found = true;
      EXPECT_DOUBLE_EQ(r["d_mse_analytic"].get<double>(), 2.0);
      EXPECT_NEAR(r["d_mse"].get<double>(), 2.0, 1e-9);
    }
  }
  EXPECT_TRUE(found);
  EXPECT_TRUE(fs::exists(d / "probes/starvation.csv"));
}

TEST(Cli, ProbesPass) {
  const fs::path d = fresh_dir("probes");
  EXPECT_EQ(run("probe-memory -q -o " + d.string() + " --set probe.width=16").status, 0);
  EXPECT_EQ(run("probe-dde -q -o " + d.string() + " --set probe.width=16").status, 0);
  const json m = manifest(d);
  EXPECT_TRUE(m["commands"].contains("probe-memory"));
  EXPECT_TRUE(m["commands"].contains("probe-dde"));
}

TEST(Cli, AblateProducesFourRowsWithSeedSpread) {
  const fs::path d = fresh_dir("ablate");
  const std::string args = "ablate -o " + d.string() + kSmall +
                           " --set ablation.tasks=reach --set ablation.hidden=8,8 --set ablation.epochs=2"
                           " --set ablation.eval_every=1 --seeds 0,1,2 --emit-csv --jobs 2";
  ASSERT_EQ(run(args).status, 0);
  const json t = json::parse(mflow::read_file(d / "ablation/table.json"));
  ASSERT_EQ(t["cells"].size(), 4u);
  for (const auto& c : t["cells"]) {
    EXPECT_TRUE(c["present"].get<bool>());
    EXPECT_EQ(c["seeds"].size(), 3u);
    EXPECT_EQ(c["success"]["all"]["n"], 3);
    EXPECT_TRUE(c["success"]["all"].contains("std"));
  }
  EXPECT_TRUE(fs::exists(d / "ablation/table.csv"));
  EXPECT_TRUE(fs::exists(d / "ablation/runs/reach/no_dis_no_cos/seed_2/metrics.jsonl"));
}

TEST(Cli, ErrorsAndExitCodes) {
  const fs::path d = fresh_dir("errors");
  Outcome r = run("train -o " + d.string() + " --set trainer.lrr=1");
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.err.find("'trainer.lr'"), std::string::npos);
  EXPECT_FALSE(fs::exists(d / "manifest.json"));
  EXPECT_EQ(run("eval -o " + d.string()).status, 3);
  EXPECT_EQ(run("nonsense -o " + d.string()).status, 2);
  EXPECT_EQ(run("train").status, 2);
  // Divergence is a failed check.
  EXPECT_EQ(run("train -o " + d.string() + kSmall + " --seeds 0 --set trainer.divergence_threshold=1e-9").status, 1);
}

TEST(Cli, ConfigFileAndOverridesCompose) {
  const fs::path d = fresh_dir("config");
  fs::create_directories(d);
  mflow::write_file_atomic(d / "run.ini", "[data]\ntask = reach\n[trainer]\nseeds = 7\n");
  ASSERT_EQ(run("train -o " + d.string() + " -c " + (d / "run.ini").string() + kSmall).status, 0);
  const json m = manifest(d);
  EXPECT_EQ(m["commands"]["train"]["seeds"], json({7}));
  EXPECT_NE(mflow::read_file(d / "config/train.ini").find("task = reach"), std::string::npos);
  mflow::write_file_atomic(d / "bad.ini", "[trainer]\nbatchsize = 3\n");
  const Outcome bad = run("train -o " + d.string() + " -c " + (d / "bad.ini").string());
  EXPECT_EQ(bad.status, 2);
  EXPECT_NE(bad.err.find("trainer.batch_size"), std::string::npos);
}
