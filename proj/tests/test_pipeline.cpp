#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "relspray/errors.hpp"
#include "relspray/parallel.hpp"
#include "relspray/pipeline.hpp"

using namespace relspray;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "relspray_pipeline_tests" / name;
  fs::remove_all(d);
  fs::create_directories(d.parent_path());
  return d;
}

PipelineConfig smoke() { return load_pipeline_config(fs::path(RELSPRAY_SOURCE_DIR) / "configs" / "smoke.toml"); }

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("config digest tracks content") {
    PipelineConfig a = smoke(), b = smoke();
    CHECK(a.digest() == b.digest());
    CHECK(a.digest().size() == 16);
    b.seed += 1;
    CHECK(a.digest() != b.digest());
    CHECK(run_directory(a, "base").filename().string() == "smoke-" + a.digest());
  }

  TEST_CASE("heatmap targets") {
    CHECK(heatmap_class(HeatmapTarget::Predicted, 0) == -1);
    CHECK(heatmap_class(HeatmapTarget::True, 1) == 1);
    CHECK(heatmap_class(HeatmapTarget::AD, 0) == 1);
    CHECK(parse_heatmap_target("true") == HeatmapTarget::True);
    CHECK_THROWS_AS(parse_heatmap_target("other"), ConfigError);
  }

  TEST_CASE("report on an empty directory says there are no artifacts") {
    const fs::path d = scratch("empty");
    fs::create_directories(d);
    const fs::path r = write_report(d);
    CHECK(slurp(r).find("No artifacts") != std::string::npos);
  }

  TEST_CASE("smoke study writes every listed artifact") {
    set_deterministic(true);
    const fs::path d = scratch("smoke");
    const RunResult res = run_experiment(smoke(), d);
    CHECK_FALSE(res.failed());
    write_report(d);
    const auto run = nlohmann::json::parse(slurp(d / "run.json"));
    for (const auto& a : run["artifacts"]) CHECK_MESSAGE(fs::exists(d / a.get<std::string>()), a);
    for (const char* f : {"metrics.csv", "labels.csv", "summary.json", "table1.csv", "report.md", "config.json"})
      CHECK(fs::exists(d / f));
    CHECK(slurp(d / "report.md").find("Missing artifacts") == std::string::npos);

    // Composition tables account for every clustered scan exactly once.
    const fs::path sd = d / "repeat_00" / "C" / "spray_warped";
    std::ifstream comp(sd / "composition.csv"), labels(sd / "labels.csv");
    std::string line;
    std::getline(comp, line);
    CHECK(line == "cluster,group,TP,FP,TN,FN,total");
    int total = 0;
    while (std::getline(comp, line)) {
      std::stringstream ss(line);
      std::string cell;
      int sum = 0, col = 0, last = 0;
      while (std::getline(ss, cell, ',')) {
        if (col >= 2 && col <= 5) sum += std::stoi(cell);
        if (col == 6) last = std::stoi(cell);
        ++col;
      }
      CHECK(sum == last);
      total += sum;
    }
    int rows = -1;
    while (std::getline(labels, line)) ++rows;
    CHECK(total == rows);

    const SprayArtifacts art = read_spray_outputs(sd);
    CHECK(art.manifest.size() == static_cast<std::size_t>(rows));
    CHECK(art.eigen.values.size() == art.manifest.size());
  }

  TEST_CASE("in-mask fraction") {
    Heatmap h;
    h.relevance = Volume3D(Grid::make({2, 1, 1}, {1, 1, 1}));
    h.relevance.data = {3.0, 1.0};
    const std::vector<float> m{1.f, 0.f};
    CHECK(in_mask_fraction({h}, {&m}) == doctest::Approx(0.75));
    h.relevance.data = {3.0, -5.0};
    CHECK(in_mask_fraction({h}, {&m}) == doctest::Approx(1.0));
  }
}
