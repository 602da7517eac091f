#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "relspray/config.hpp"
#include "relspray/dataset.hpp"
#include "relspray/relevance.hpp"
#include "relspray/spray.hpp"
#include "relspray/training.hpp"
#include "relspray/tsne.hpp"

namespace relspray {

enum class HeatmapTarget { Predicted, True, AD };
std::string to_string(HeatmapTarget t);
HeatmapTarget parse_heatmap_target(const std::string& s);
int heatmap_class(HeatmapTarget t, int label);  // -1: predicted

struct PipelineConfig {
  std::string name = "study";
  std::uint64_t seed = 0;
  int n_repeats = 10;
  std::vector<Variant> variants{Variant::A, Variant::B, Variant::C};
  CohortConfig cohort;
  PhantomSpec phantom = PhantomSpec::standard();
  PreprocessConfig preprocess;
  SplitRatios splits;
  ArchSpec arch;
  TrainConfig train;
  RelevanceConfig relevance;
  HeatmapTarget heatmap_target = HeatmapTarget::Predicted;
  bool write_heatmaps = false;
  SprayConfig spray;
  std::vector<Space> spaces{Space::Native, Space::Warped};
  bool tsne_enabled = true;
  TsneConfig tsne;

  void validate() const;
  /// Canonical JSON of every resolved setting.
  std::string to_json() const;
  /// FNV-1a of to_json(), as 16 hex digits.
  std::string digest() const;
};

/// Unknown keys are a ConfigError. The network input extent follows the phantom grid.
PipelineConfig load_pipeline_config(const ConfigFile& file);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

PhantomSpec load_phantom_spec(const ConfigFile& file);

using LogFn = std::function<void(const std::string&)>;

/// Heatmaps of every scan in `data`, in scan order.
std::vector<Heatmap> compute_heatmaps(const NetworkParams<float>& params, const Dataset& data, Variant variant,
                                      HeatmapTarget target, const RelevanceConfig& cfg,
                                      std::vector<int>* predicted = nullptr);

/// Sum of relevance inside the mask over the total, averaged over scans with
/// non-zero relevance.
double in_mask_fraction(const std::vector<Heatmap>& heatmaps, const std::vector<const std::vector<float>*>& masks);

/// eigenvalues.csv, labels.csv, composition.csv, affinity.csv, spectrum.bin and
/// cluster_mean_<i>.nii. `volumes` are the heatmaps in the clustering space.
/// Returns the written paths.
std::vector<std::filesystem::path> write_spray_outputs(const SprayResult& r, const DataMatrix& X,
                                                       const std::vector<Volume3D>& volumes,
                                                       const std::filesystem::path& dir);

struct SprayArtifacts {
  std::vector<double> laplacian;
  EigenDecomposition eigen;
  std::vector<SampleInfo> manifest;
  std::vector<int> clusters;
};
SprayArtifacts read_spray_outputs(const std::filesystem::path& dir);

/// t-SNE of the Laplacian rows with the spectral layout as initialisation.
Embedding2D embed_spectrum(const std::vector<double>& laplacian, const EigenDecomposition& eigen, const TsneConfig& cfg);

struct StageRecord {
  std::string name;
  std::string status;  // ok | failed | skipped
  std::string error;
  double seconds = 0.0;
};

struct VariantRepeatResult {
  Variant variant = Variant::A;
  int repeat = 0;
  bool trained = false;
  Metrics test;
  double in_mask = 0.0;
  int best_epoch = 0;
  struct SpaceResult {
    Space space = Space::Native;
    int k = 0;
    double ari_confound = 0.0, ari_group = 0.0;
    bool ok = false;
  };
  std::vector<SpaceResult> spaces;
};

struct RunResult {
  std::filesystem::path dir;
  std::vector<VariantRepeatResult> results;
  std::vector<StageRecord> stages;
  std::vector<std::string> artifacts;  // relative to dir
  double cpu_seconds = 0.0, wall_seconds = 0.0;
  bool failed() const;
};

/// base/<name>-<digest> unless `exact_dir` is set.
std::filesystem::path run_directory(const PipelineConfig& cfg, const std::filesystem::path& base);

/// Full study. Stage failures are recorded in run.json and the remaining
/// stages continue where they can; the first failure is rethrown at the end.
RunResult run_experiment(const PipelineConfig& cfg, const std::filesystem::path& dir, const LogFn& log = {});

/// Writes <dir>/report.md and returns its path. Missing artifacts are listed.
std::filesystem::path write_report(const std::filesystem::path& dir);

}  // namespace relspray
