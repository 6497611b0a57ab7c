#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "gradleak/report.hpp"

namespace gradleak {
namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t count(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) ++n;
  return n;
}

AnchorMetrics anchor(std::size_t index, double cosine) {
  AnchorMetrics a;
  a.anchor = index;
  a.label = static_cast<int>(index);
  BatchScore b;
  b.label_set_exact = true;
  b.anchor_recovered = true;
  b.feature_cosine = cosine;
  a.batches.push_back(b);
  a.oracle_batch = 0;
  a.best_cosine_oracle = cosine;
  a.target_image = Tensor({1, 4, 4}, 0.25f);
  a.clean_image = Tensor({1, 4, 4}, 0.75f);
  return a;
}

std::filesystem::path fresh_dir(const std::string& name) {
  auto p = std::filesystem::path(::testing::TempDir()) / name;
  std::filesystem::remove_all(p);
  return p;
}

TEST(Report, SingleAnchorDrawsAMarker) {
  const auto dir = fresh_dir("report_single");
  const std::vector<ConfigResult> results{{"only", {anchor(0, 0.9)}}};
  emit_report(results, dir);
  const std::string svg = slurp(dir / "curves.svg");
  EXPECT_EQ(count(svg, "<circle"), 1u);
  EXPECT_EQ(count(svg, "<polyline"), 1u);
  EXPECT_TRUE(std::filesystem::exists(dir / "anchors" / "only-anchor0.ppm"));
}

TEST(Report, TwoConfigsGiveTwoCurvesWithLegend) {
  const auto dir = fresh_dir("report_two");
  const std::vector<ConfigResult> results{
      {"vanilla", {anchor(0, 0.5), anchor(1, 0.9), anchor(2, 0.7)}},
      {"at-eps1", {anchor(0, 0.95), anchor(1, 0.99)}}};
  emit_report(results, dir);
  const std::string svg = slurp(dir / "curves.svg");
  EXPECT_EQ(count(svg, "<polyline"), 2u);
  EXPECT_NE(svg.find(">vanilla</text>"), std::string::npos);
  EXPECT_NE(svg.find(">at-eps1</text>"), std::string::npos);

  std::istringstream csv(slurp(dir / "curves.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "config,anchor_rank,cosine");
  std::map<std::string, std::vector<double>> curves;
  while (std::getline(csv, line)) {
    const auto c1 = line.find(','), c2 = line.rfind(',');
    curves[line.substr(0, c1)].push_back(std::stod(line.substr(c2 + 1)));
  }
  ASSERT_EQ(curves["vanilla"].size(), 3u);
  ASSERT_EQ(curves["at-eps1"].size(), 2u);
  for (const auto& [name, v] : curves) EXPECT_TRUE(std::is_sorted(v.rbegin(), v.rend())) << name;

  const auto summary = nlohmann::json::parse(slurp(dir / "summary.json"));
  EXPECT_NEAR(summary["configs"]["vanilla"]["cosine_best_oracle"]["mean"].get<double>(), 0.7, 1e-6);
  EXPECT_NEAR(summary["configs"]["vanilla"]["cosine_best_oracle"]["median"].get<double>(), 0.7, 1e-6);
  EXPECT_EQ(summary["configs"]["at-eps1"]["anchors"].get<int>(), 2);
  EXPECT_TRUE(summary["configs"]["at-eps1"]["psnr_target"].is_null());
}

TEST(Report, EmptyResultsAreRejected) {
  EXPECT_THROW(emit_report({}, fresh_dir("report_empty")), std::invalid_argument);
}

TEST(DumpFixed, SortedKeysSixDecimalsAndNonFinite) {
  nlohmann::json j;
  j["b"] = 1.0 / 3.0;
  j["a"] = std::numeric_limits<double>::infinity();
  j["c"] = {std::nan(""), -std::numeric_limits<double>::infinity(), 2, "x", -0.0};
  EXPECT_EQ(dump_fixed(j), R"({"a":"inf","b":0.333333,"c":["nan","-inf",2,"x",0.000000]})");
  const nlohmann::json copy = j;
  EXPECT_EQ(dump_fixed(copy), dump_fixed(j));
}

TEST(ScoreAnchor, PicksOracleAndAttackerBatches) {
  AnchorAttack attack;
  attack.anchor = 0;
  attack.anchor_label = 2;
  std::vector<ClientRoundRecord> records;
  const std::vector<std::vector<float>> restored{{1, 0, 0}, {1, 1, 0}};
  const std::vector<double> objectives{0.1, 0.4};
  for (std::size_t b = 0; b < 2; ++b) {
    ClientRoundRecord rec;
    rec.labels = {2, static_cast<int>(b)};
    rec.clean_images = Tensor({2, 1, 8, 8}, 0.5f);
    rec.features = Tensor({2, 3}, {1, 1, 0, 0, 0, 1});
    records.push_back(rec);

    BatchAttack ba;
    ba.recovery.labels = {std::min(2, int(b)), std::max(2, int(b))};
    RestoredFeature f;
    f.label = 2;
    f.feature = Tensor({3}, restored[b]);
    ba.features.push_back(f);
    ba.inverted_labels = {2};
    InversionResult inv;
    inv.image = Tensor({1, 1, 8, 8}, 0.25f);
    inv.objective = objectives[b];
    ba.inversions.push_back(inv);
    attack.batches.push_back(ba);
  }
  attack.best_by_objective = 0;
  const auto m = score_anchor(attack, records);
  EXPECT_EQ(m.oracle_batch, std::optional<std::size_t>{1});
  EXPECT_NEAR(*m.best_cosine_oracle, 1.0, 1e-6);
  EXPECT_EQ(m.attacker_batch, std::optional<std::size_t>{0});
  EXPECT_NEAR(*m.attacker_cosine, 1.0 / std::sqrt(2.0), 1e-6);
  EXPECT_NEAR(*m.psnr_target, -10.0 * std::log10(0.0625), 1e-4);
  EXPECT_TRUE(m.batches[0].label_set_exact);
  EXPECT_TRUE(m.batches[1].label_set_exact);

  records.pop_back();
  EXPECT_THROW(score_anchor(attack, records), std::invalid_argument);
}

}  // namespace
}  // namespace gradleak
