#include <gtest/gtest.h>

#include "mflow/config.hpp"

using namespace mflow;

TEST(Config, DefaultsBuildDefaultStructs) {
  const Config c = Config::defaults();
  EXPECT_EQ(objective_config(c), ObjectiveConfig{});
  const TrainConfig t = train_config(c);
  EXPECT_EQ(t.adam, AdamConfig{});
  EXPECT_EQ(t.batch_size, 128u);
  EXPECT_EQ(t.seeds, (std::vector<std::uint64_t>{0, 1, 2}));
  EXPECT_EQ(t.arch, Architecture{});
  EXPECT_EQ(task_spec(c), default_task("gmm2d"));
}

TEST(Config, IniMergesOverDefaults) {
  const Config c = Config::from_ini(
      "; comment\n"
      "[trainer]\n"
      "lr = 0.001\n"
      "seeds = 3, 4\n"
      "[objective]\n"
      "derivative_mode = DDE_full\n"
      "[network]\n"
      "hidden = 32,32\n");
  const TrainConfig t = train_config(c);
  EXPECT_EQ(t.adam.lr, 1e-3);
  EXPECT_EQ(t.seeds, (std::vector<std::uint64_t>{3, 4}));
  EXPECT_EQ(t.objective.derivative_mode, DerivativeMode::DdeFull);
  EXPECT_EQ(t.arch.hidden_dims, (std::vector<std::size_t>{32, 32}));
  EXPECT_EQ(t.batch_size, 128u);
}

TEST(Config, IniRoundTrips) {
  Config c = Config::defaults();
  c.apply_overrides({"trainer.epochs=40", "task.m_small=0.05", "ablation.tasks=reach"});
  const Config back = Config::from_ini(c.to_ini());
  EXPECT_EQ(back, c);
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_NE(back.hash(), Config::defaults().hash());
}

TEST(Config, UnknownKeyNamesNearestValidKey) {
  try {
    Config::from_ini("[trainer]\nlrr = 0.1\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("trainer.lrr"), std::string::npos);
    EXPECT_NE(msg.find("trainer.lr'"), std::string::npos);
  }
  Config c = Config::defaults();
  try {
    c.apply_overrides({"objective.lamda_cos=1"});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("objective.lambda_cos"), std::string::npos);
  }
}

TEST(Config, BadValuesNameTheKey) {
  Config c = Config::defaults();
  c.set("trainer.batch_size", "12x");
  try {
    train_config(c);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("trainer.batch_size"), std::string::npos);
  }
  c = Config::defaults();
  c.set("objective.derivative_mode", "fd");
  EXPECT_THROW(objective_config(c), ConfigError);
  c = Config::defaults();
  c.set("trainer.eval_every", "500");
  EXPECT_THROW(train_config(c), ConfigError);
  EXPECT_THROW(c.apply_overrides({"trainer.lr"}), ConfigError);
  EXPECT_THROW(Config::from_ini("orphan = 1\n"), ConfigError);
}

TEST(Config, TaskOverrides) {
  Config c = Config::defaults();
  c.apply_overrides({"task.m_small=0.05", "task.success_angle_deg=10"});
  const TaskSpec dock = task_spec(c, "precision_dock");
  EXPECT_EQ(dock.m_small, 0.05);
  EXPECT_EQ(dock.success_angle_deg, 10.0);
  EXPECT_EQ(dock.magnitude, default_task("precision_dock").magnitude);
  EXPECT_THROW(task_spec(c, "peg"), ConfigError);
}

TEST(Config, AblationBudget) {
  const TrainConfig t = ablation_train_config(Config::defaults());
  EXPECT_EQ(t.arch.hidden_dims, (std::vector<std::size_t>{64, 64, 64}));
  EXPECT_EQ(t.epochs, 500u);
  EXPECT_EQ(t.adam.lr, 1e-4);
}

TEST(EditDistance, Basics) {
  EXPECT_EQ(edit_distance("", "abc"), 3u);
  EXPECT_EQ(edit_distance("kitten", "sitting"), 3u);
  EXPECT_EQ(edit_distance("same", "same"), 0u);
  EXPECT_EQ(nearest_config_key("trainer.epocs"), "trainer.epochs");
}
