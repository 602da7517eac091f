#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "relspray/cohort.hpp"
#include "relspray/relaxometry.hpp"
#include "relspray/training.hpp"

namespace relspray {

/// Synthetic demographics: AD cases are drawn older than the control pool, and
/// the control pool is propensity matched down to one control per case.
struct CohortConfig {
  int n_per_class = 100;
  double control_pool_factor = 2.0;
  bool with_replacement = false;
  double ad_age_mean = 72.0, ad_age_sd = 6.0;
  double nc_age_mean = 68.0, nc_age_sd = 8.0;
  double ad_female = 0.55, nc_female = 0.5;

  void validate() const;
};

/// Fitted R2* (1/s) becomes network input as clamp(r2, 0, clamp) / scale.
/// Voxels whose first echo is at or below `signal_threshold` are not fitted.
struct PreprocessConfig {
  double signal_threshold = 100.0;
  double clamp = 200.0;
  double scale = 50.0;

  void validate() const;
};

struct ScanRecord {
  std::string subject_id, scan_id;
  ClassLabel group = ClassLabel::NC;
  double age = 0.0;
  Sex sex = Sex::F;
  bool confound = false;
  std::uint64_t phantom_seed = 0;
  std::string path;  // scan directory, relative to the dataset root
};

struct Cohort {
  std::vector<SubjectRecord> subjects;
  std::vector<ScanRecord> scans;
  MatchResult matching;
};

/// Deterministic in (cfg, seed). One scan per subject.
Cohort simulate_cohort(const CohortConfig& cfg, std::uint64_t seed);

/// In-memory study data, aligned by scan index.
struct Dataset {
  Cohort cohort;
  std::vector<Sample> samples;
  std::vector<Grid> grids;
  std::vector<DisplacementField> warps;  // reference grid <- subject
  std::vector<double> echo_times;        // seconds

  std::size_t index_of(const std::string& scan_id) const;
  std::vector<Sample> select(const std::vector<std::string>& scan_ids) const;
};

Sample make_sample(const ScanRecord& scan, const MultiEchoSeries& series, const Volume3D& brain_mask,
                   const Volume3D& guidance, const PreprocessConfig& pre);

/// Generates every phantom of the cohort and hands it to `visit` in scan order.
/// Sets ScanRecord::confound.
void for_each_phantom(Cohort& cohort, const PhantomSpec& spec,
                      const std::function<void(const ScanRecord&, const Phantom&)>& visit);

Dataset build_dataset(const CohortConfig& cohort_cfg, const PhantomSpec& spec, const PreprocessConfig& pre,
                      std::uint64_t seed);

/// Directory layout: labels.csv, dataset.json and per scan <scan_id>/ with
/// echoes.nii (4D), brain_mask.nii, guidance.nii, warp.nii, truth_r2star.nii.
void write_phantom_dataset(const CohortConfig& cohort_cfg, const PhantomSpec& spec, std::uint64_t seed,
                           const std::filesystem::path& dir);

/// Reads a directory written by write_phantom_dataset. Scans with an r2star.nii
/// use it; otherwise the echoes are fitted.
Dataset load_dataset(const std::filesystem::path& dir, const PreprocessConfig& pre);

void write_labels_csv(const std::vector<ScanRecord>& scans, const std::filesystem::path& path);
std::vector<ScanRecord> read_labels_csv(const std::filesystem::path& path);

std::string to_string(ClassLabel c);
ClassLabel parse_class(const std::string& s);

/// Minimal CSV reader: comma separated, no quoting, first row is the header.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::size_t column(const std::string& name) const;
};
CsvTable read_csv(const std::filesystem::path& path);

}  // namespace relspray
