#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "gradleak/container.hpp"
#include "gradleak/pipeline.hpp"

namespace gradleak {
namespace {

namespace fs = std::filesystem;

nlohmann::json tiny_json() {
  return nlohmann::json::parse(R"({
    "name": "tiny",
    "seed": 3,
    "dataset": {"source": "synthetic", "classes": 8, "per_class": 6, "size": 28},
    "model": {"arch": "mlp-small"},
    "train": {"epochs": 1, "batch_size": 16, "optimizer": {"kind": "adam", "learning_rate": 0.003}},
    "capture": {"batch_size": 2, "anchors": 2, "batches_per_anchor": 2},
    "attack": {"steps": 10, "restarts": 1}
  })");
}

fs::path fresh(const std::string& name) {
  auto p = fs::path(::testing::TempDir()) / name;
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

TEST(Config, JsonRoundTrip) {
  const ExperimentConfig c = experiment_from_json(tiny_json());
  EXPECT_EQ(c.name, "tiny");
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.dataset.synthetic.classes, 8u);
  EXPECT_EQ(c.capture.batches_per_anchor, 2u);
  const ExperimentConfig back = experiment_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(Config, UnknownKeysAreRejected) {
  auto j = tiny_json();
  j["atack"] = nlohmann::json::object();
  EXPECT_THROW(experiment_from_json(j), ValidationError);
  j = tiny_json();
  j["train"]["epoch"] = 3;
  EXPECT_THROW(experiment_from_json(j), ValidationError);
}

TEST(Config, HashTracksContent) {
  const ExperimentConfig a = experiment_from_json(tiny_json());
  ExperimentConfig b = a;
  b.seed = 4;
  EXPECT_NE(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 64u);
}

TEST(Config, MissingFileIsAValidationError) {
  EXPECT_THROW(load_experiment(fresh("no_such_config.json")), ValidationError);
}

TEST(Sweep, TwoByTwoGridGivesFourCells) {
  nlohmann::json grid;
  grid["base"] = tiny_json();
  grid["grid"]["/seed"] = {1, 2};
  grid["grid"]["/train/at/epsilon"] = {0.0, 0.5};
  const auto cells = expand_sweep(grid);
  ASSERT_EQ(cells.size(), 4u);
  std::set<std::pair<std::uint64_t, double>> seen;
  for (const auto& c : cells) {
    const double eps = c.config.train.at ? c.config.train.at->epsilon : 0.0;
    seen.insert({c.config.seed, eps});
  }
  EXPECT_EQ(seen.size(), 4u);
  EXPECT_EQ(cells[0].name, "cell-000");
  EXPECT_EQ(cells[3].name, "cell-003");
}

TEST(Sweep, BadGridIsRejected) {
  nlohmann::json grid;
  grid["base"] = tiny_json();
  grid["grid"]["/seed"] = nlohmann::json::array();
  EXPECT_THROW(expand_sweep(grid), ValidationError);
}

TEST(Stages, MissingUpstreamNamesThePath) {
  const auto c = experiment_from_json(tiny_json());
  const auto out = fresh("pipeline_missing");
  try {
    run_train_stage(c, out);
    FAIL() << "expected MissingArtifact";
  } catch (const MissingArtifact& e) {
    EXPECT_EQ(e.path(), out / "dataset" / "train.glds");
    EXPECT_NE(std::string(e.what()).find("train.glds"), std::string::npos);
  }
}

TEST(Logging, InvalidLevelIsRejected) {
  ::setenv("GRADLEAK_LOG", "verbose", 1);
  EXPECT_THROW(configure_logging(), ValidationError);
  ::setenv("GRADLEAK_LOG", "error", 1);
  EXPECT_NO_THROW(configure_logging());
}

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    ::setenv("GRADLEAK_LOG", "error", 1);
    configure_logging();
    config_ = new ExperimentConfig(experiment_from_json(tiny_json()));
    root_ = new fs::path(fresh("pipeline_run"));
    run_all_stages(*config_, *root_);
  }
  static void TearDownTestSuite() {
    delete config_;
    delete root_;
  }
  static ExperimentConfig* config_;
  static fs::path* root_;
};
ExperimentConfig* Pipeline::config_ = nullptr;
fs::path* Pipeline::root_ = nullptr;

TEST_F(Pipeline, ManifestsCarryTheConfigHashAndOutputHashes) {
  for (const char* stage : {"dataset", "train", "capture", "attack", "report"}) {
    const auto m = nlohmann::json::parse(slurp(*root_ / stage / "manifest.json"));
    EXPECT_EQ(m["config_hash"], config_hash(*config_)) << stage;
    EXPECT_EQ(config_hash(experiment_from_json(m["config"])), config_hash(*config_)) << stage;
    for (auto it = m["outputs"].begin(); it != m["outputs"].end(); ++it) {
      EXPECT_EQ(it.value(), sha256_file(*root_ / it.key())) << it.key();
    }
  }
  EXPECT_TRUE(fs::exists(*root_ / "report" / "summary.json"));
  EXPECT_TRUE(fs::exists(*root_ / "report" / "curves.svg"));
}

TEST_F(Pipeline, RetrainingGivesTheSameCheckpoint) {
  const auto out = fresh("pipeline_retrain");
  fs::create_directories(out);
  fs::copy(*root_ / "dataset", out / "dataset");
  run_train_stage(*config_, out);
  EXPECT_EQ(sha256_file(out / "train" / "model.glck"), sha256_file(*root_ / "train" / "model.glck"));
}

TEST_F(Pipeline, DownstreamStagesRerunByteIdentically) {
  const auto out = fresh("pipeline_rerun");
  fs::create_directories(out);
  fs::copy(*root_ / "dataset", out / "dataset");
  fs::copy(*root_ / "train", out / "train");
  run_capture_stage(*config_, out);
  run_attack_stage(*config_, out);
  run_evaluate_stage(*config_, out);
  for (const char* f : {"attack/results.glar", "report/summary.json", "report/curves.csv"}) {
    EXPECT_EQ(slurp(out / f), slurp(*root_ / f)) << f;
  }
}

TEST_F(Pipeline, SummaryCountsMatchTheCaptureConfig) {
  const auto s = nlohmann::json::parse(slurp(*root_ / "report" / "summary.json"));
  const auto& cfg = s["configs"].begin().value();
  EXPECT_EQ(cfg["anchors"].get<int>(), 2);
  EXPECT_EQ(cfg["batches"].get<int>(), 4);
}

}  // namespace
}  // namespace gradleak
