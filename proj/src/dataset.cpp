#include "relspray/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "relspray/errors.hpp"
#include "relspray/nifti.hpp"

namespace relspray {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string pad_id(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%04d", prefix, i);
  return buf;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

std::string to_string(ClassLabel c) { return c == ClassLabel::AD ? "AD" : "NC"; }

ClassLabel parse_class(const std::string& s) {
  if (s == "AD" || s == "1") return ClassLabel::AD;
  if (s == "NC" || s == "0") return ClassLabel::NC;
  throw DataError("unknown class label '" + s + "'");
}

void CohortConfig::validate() const {
  if (n_per_class < 3) throw ConfigError("n_per_class must be at least 3");
  if (!(control_pool_factor >= 1.0)) throw ConfigError("control_pool_factor must be >= 1");
  if (!(ad_age_sd > 0) || !(nc_age_sd > 0)) throw ConfigError("age sd must be positive");
  for (double p : {ad_female, nc_female})
    if (p < 0 || p > 1) throw ConfigError("female fraction must lie in [0, 1]");
}

void PreprocessConfig::validate() const {
  if (!(clamp > 0)) throw ConfigError("preprocess clamp must be positive");
  if (!(scale > 0)) throw ConfigError("preprocess scale must be positive");
}

Cohort simulate_cohort(const CohortConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0xc040u};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto draw = [&](int n, double mean, double sd, double female, ClassLabel g) {
    std::normal_distribution<double> age(mean, sd);
    std::vector<SubjectRecord> out(n);
    for (auto& s : out) {
      s.group = g;
      s.age = std::round(age(rng) * 10.0) / 10.0;
      s.sex = u01(rng) < female ? Sex::F : Sex::M;
    }
    return out;
  };
  auto cases = draw(cfg.n_per_class, cfg.ad_age_mean, cfg.ad_age_sd, cfg.ad_female, ClassLabel::AD);
  const int pool = static_cast<int>(std::ceil(cfg.n_per_class * cfg.control_pool_factor));
  auto controls = draw(pool, cfg.nc_age_mean, cfg.nc_age_sd, cfg.nc_female, ClassLabel::NC);

  Cohort c;
  c.matching = propensity_match(cases, controls, cfg.with_replacement);
  std::vector<std::size_t> chosen;
  std::set<std::size_t> seen;
  for (const auto& p : c.matching.pairs)
    if (seen.insert(p.control_index).second) chosen.push_back(p.control_index);

  int next = 1;
  auto add = [&](SubjectRecord s) {
    s.subject_id = pad_id("sub-", next);
    s.scan_ids = {pad_id("scan-", next)};
    ++next;
    c.subjects.push_back(s);
  };
  // Interleaved so that any prefix of the cohort stays roughly balanced.
  for (std::size_t i = 0; i < std::max(cases.size(), chosen.size()); ++i) {
    if (i < chosen.size()) add(controls[chosen[i]]);
    if (i < cases.size()) add(cases[i]);
  }
  for (std::size_t i = 0; i < c.subjects.size(); ++i) {
    const auto& s = c.subjects[i];
    ScanRecord r;
    r.subject_id = s.subject_id;
    r.scan_id = s.scan_ids.front();
    r.group = s.group;
    r.age = s.age;
    r.sex = s.sex;
    r.phantom_seed = splitmix(seed ^ splitmix(i + 1));
    r.path = r.scan_id;
    c.scans.push_back(r);
  }
  return c;
}

std::size_t Dataset::index_of(const std::string& scan_id) const {
  for (std::size_t i = 0; i < cohort.scans.size(); ++i)
    if (cohort.scans[i].scan_id == scan_id) return i;
  throw DataError("unknown scan id " + scan_id);
}

std::vector<Sample> Dataset::select(const std::vector<std::string>& scan_ids) const {
  std::vector<Sample> out;
  out.reserve(scan_ids.size());
  for (const auto& id : scan_ids) out.push_back(samples[index_of(id)]);
  return out;
}

Sample make_sample(const ScanRecord& scan, const MultiEchoSeries& series, const Volume3D& brain_mask,
                   const Volume3D& guidance, const PreprocessConfig& pre) {
  series.validate();
  const Grid& g = series.grid();
  if (!brain_mask.grid.same_as(g) || !guidance.grid.same_as(g))
    throw DataError("scan " + scan.scan_id + ": masks do not match the echo grid");
  Volume3D fit_mask(g);
  for (std::size_t v = 0; v < fit_mask.size(); ++v)
    fit_mask.data[v] = series.volumes.front().data[v] > pre.signal_threshold ? 1.0 : 0.0;
  const auto fit = fit_r2star_map(series, &fit_mask);
  Sample s;
  s.scan_id = scan.scan_id;
  s.label = static_cast<int>(scan.group);
  const std::size_t n = g.voxel_count();
  s.input.resize(n);
  s.brain_mask.resize(n);
  s.guidance.resize(n);
  for (std::size_t v = 0; v < n; ++v) {
    s.input[v] = static_cast<float>(std::clamp(fit.r2star.data[v], 0.0, pre.clamp) / pre.scale);
    s.brain_mask[v] = static_cast<float>(brain_mask.data[v]);
    s.guidance[v] = static_cast<float>(guidance.data[v]);
  }
  return s;
}

void for_each_phantom(Cohort& cohort, const PhantomSpec& spec,
                      const std::function<void(const ScanRecord&, const Phantom&)>& visit) {
  spec.validate();
  for (auto& scan : cohort.scans) {
    const Phantom ph = generate_phantom(spec, scan.group, scan.phantom_seed);
    scan.confound = ph.confound;
    visit(scan, ph);
  }
}

Dataset build_dataset(const CohortConfig& cohort_cfg, const PhantomSpec& spec, const PreprocessConfig& pre,
                      std::uint64_t seed) {
  pre.validate();
  Dataset d;
  d.cohort = simulate_cohort(cohort_cfg, seed);
  d.echo_times = spec.echo_times;
  for_each_phantom(d.cohort, spec, [&](const ScanRecord& scan, const Phantom& ph) {
    d.samples.push_back(make_sample(scan, ph.series, ph.brain_mask, ph.guidance_mask, pre));
    d.grids.push_back(ph.series.grid());
    d.warps.push_back(ph.to_reference);
  });
  return d;
}

void write_labels_csv(const std::vector<ScanRecord>& scans, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << "subject_id,scan_id,class,age,sex,confound,seed,path\n";
  for (const auto& s : scans)
    os << s.subject_id << ',' << s.scan_id << ',' << to_string(s.group) << ',' << fmt(s.age) << ','
       << (s.sex == Sex::F ? "f" : "m") << ',' << (s.confound ? 1 : 0) << ',' << s.phantom_seed << ',' << s.path
       << '\n';
}

CsvTable read_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  CsvTable t;
  std::string line;
  auto split = [](const std::string& l) {
    std::vector<std::string> out;
    std::stringstream ss(l);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!l.empty() && l.back() == ',') out.emplace_back();
    return out;
  };
  if (!std::getline(is, line)) throw DataError(path.string() + ": empty csv");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  t.header = split(line);
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto row = split(line);
    if (row.size() != t.header.size())
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                      std::to_string(t.header.size()) + " columns");
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return i;
  throw DataError("csv is missing column '" + name + "'");
}

std::vector<ScanRecord> read_labels_csv(const fs::path& path) {
  const CsvTable t = read_csv(path);
  const auto c_sub = t.column("subject_id"), c_scan = t.column("scan_id"), c_cls = t.column("class"),
             c_path = t.column("path");
  std::vector<ScanRecord> out;
  for (const auto& r : t.rows) {
    ScanRecord s;
    s.subject_id = r[c_sub];
    s.scan_id = r[c_scan];
    s.group = parse_class(r[c_cls]);
    s.path = r[c_path];
    for (std::size_t i = 0; i < t.header.size(); ++i) {
      const auto& h = t.header[i];
      try {
        if (h == "age") s.age = std::stod(r[i]);
        if (h == "sex") s.sex = r[i] == "m" || r[i] == "M" ? Sex::M : Sex::F;
        if (h == "confound") s.confound = r[i] == "1";
        if (h == "seed") s.phantom_seed = std::stoull(r[i]);
      } catch (const std::logic_error&) {
        throw DataError(path.string() + ": bad value '" + r[i] + "' in column " + h);
      }
    }
    out.push_back(s);
  }
  return out;
}

void write_phantom_dataset(const CohortConfig& cohort_cfg, const PhantomSpec& spec, std::uint64_t seed,
                           const fs::path& dir) {
  Cohort cohort = simulate_cohort(cohort_cfg, seed);
  fs::create_directories(dir);
  for_each_phantom(cohort, spec, [&](const ScanRecord& scan, const Phantom& ph) {
    const fs::path sd = dir / scan.path;
    fs::create_directories(sd);
    nifti::write_series(ph.series.volumes, sd / "echoes.nii");
    nifti::write(ph.brain_mask, sd / "brain_mask.nii", nifti::Datatype::UInt8);
    nifti::write(ph.guidance_mask, sd / "guidance.nii", nifti::Datatype::UInt8);
    nifti::write(ph.truth.r2star, sd / "truth_r2star.nii");
    nifti::write_displacement(ph.to_reference, sd / "warp.nii");
  });
  write_labels_csv(cohort.scans, dir / "labels.csv");
  json meta;
  meta["format"] = "relspray-phantoms";
  std::vector<double> te_ms;
  for (double t : spec.echo_times) te_ms.push_back(t * 1e3);
  meta["echo_times_ms"] = te_ms;
  meta["dims"] = spec.dims;
  meta["seed"] = seed;
  meta["scans"] = cohort.scans.size();
  std::ofstream(dir / "dataset.json") << meta.dump(2) << '\n';
}

Dataset load_dataset(const fs::path& dir, const PreprocessConfig& pre) {
  pre.validate();
  Dataset d;
  d.cohort.scans = read_labels_csv(dir / "labels.csv");
  if (d.cohort.scans.empty()) throw DataError(dir.string() + ": labels.csv lists no scans");
  std::ifstream ms(dir / "dataset.json");
  if (!ms) throw DataError("missing " + (dir / "dataset.json").string());
  json meta;
  try {
    meta = json::parse(ms);
    for (double t : meta.at("echo_times_ms").get<std::vector<double>>()) d.echo_times.push_back(t * 1e-3);
  } catch (const json::exception& e) {
    throw DataError("dataset.json: " + std::string(e.what()));
  }
  for (const auto& scan : d.cohort.scans) {
    auto it = std::find_if(d.cohort.subjects.begin(), d.cohort.subjects.end(),
                           [&](const SubjectRecord& s) { return s.subject_id == scan.subject_id; });
    if (it == d.cohort.subjects.end()) {
      SubjectRecord s;
      s.subject_id = scan.subject_id;
      s.group = scan.group;
      s.age = scan.age;
      s.sex = scan.sex;
      d.cohort.subjects.push_back(s);
      it = d.cohort.subjects.end() - 1;
    }
    it->scan_ids.push_back(scan.scan_id);

    const fs::path sd = dir / scan.path;
    MultiEchoSeries series;
    series.echo_times = d.echo_times;
    series.volumes = nifti::read_series(sd / "echoes.nii");
    const Volume3D brain = nifti::read(sd / "brain_mask.nii");
    const Volume3D guidance = fs::exists(sd / "guidance.nii") ? nifti::read(sd / "guidance.nii") : brain;
    if (fs::exists(sd / "r2star.nii")) {
      const Volume3D r2 = nifti::read(sd / "r2star.nii");
      Sample s;
      s.scan_id = scan.scan_id;
      s.label = static_cast<int>(scan.group);
      for (std::size_t v = 0; v < r2.size(); ++v) {
        s.input.push_back(static_cast<float>(std::clamp(r2.data[v], 0.0, pre.clamp) / pre.scale));
        s.brain_mask.push_back(static_cast<float>(brain.data[v]));
        s.guidance.push_back(static_cast<float>(guidance.data[v]));
      }
      d.samples.push_back(std::move(s));
    } else {
      d.samples.push_back(make_sample(scan, series, brain, guidance, pre));
    }
    d.grids.push_back(series.grid());
    d.warps.push_back(fs::exists(sd / "warp.nii") ? nifti::read_displacement(sd / "warp.nii")
                                                   : DisplacementField::zeros(series.grid()));
  }
  return d;
}

}  // namespace relspray
