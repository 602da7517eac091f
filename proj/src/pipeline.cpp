#include "relspray/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <exception>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "relspray/checkpoint.hpp"
#include "relspray/errors.hpp"
#include "relspray/nifti.hpp"

namespace relspray {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(HeatmapTarget t) {
  switch (t) {
    case HeatmapTarget::Predicted: return "predicted";
    case HeatmapTarget::True: return "true";
    default: return "ad";
  }
}

HeatmapTarget parse_heatmap_target(const std::string& s) {
  if (s == "predicted") return HeatmapTarget::Predicted;
  if (s == "true") return HeatmapTarget::True;
  if (s == "ad" || s == "AD") return HeatmapTarget::AD;
  throw ConfigError("heatmap target must be predicted, true or ad (got '" + s + "')");
}

int heatmap_class(HeatmapTarget t, int label) {
  switch (t) {
    case HeatmapTarget::Predicted: return -1;
    case HeatmapTarget::True: return label;
    default: return 1;
  }
}

namespace {

std::string fmt(double v) { return format_real(v); }

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

json vec3(const Vec3& v) { return json::array({v[0], v[1], v[2]}); }

json ellipsoid_json(const Ellipsoid& e) {
  return {{"center", vec3(e.center)}, {"radii", vec3(e.radii)}, {"r2star", e.r2star}, {"class_delta", e.class_delta}};
}

Vec3 get_vec3(const ConfigFile& f, const std::string& key, const Vec3& fallback) {
  const auto v = f.get_reals(key, {fallback[0], fallback[1], fallback[2]});
  if (v.size() != 3) throw ConfigError("config key '" + key + "' needs 3 numbers");
  return {v[0], v[1], v[2]};
}

int get_int_checked(const ConfigFile& f, const std::string& key, int fallback) {
  const long long v = f.get_int(key, fallback);
  if (v < -2147483647LL || v > 2147483647LL) throw ConfigError("config key '" + key + "' is out of range");
  return static_cast<int>(v);
}

std::uint64_t get_seed(const ConfigFile& f, const std::string& key, std::uint64_t fallback) {
  const long long v = f.get_int(key, static_cast<long long>(fallback));
  if (v < 0) throw ConfigError("config key '" + key + "' must be non-negative");
  return static_cast<std::uint64_t>(v);
}

}  // namespace

void PipelineConfig::validate() const {
  if (n_repeats < 2) throw ConfigError("n_repeats must be at least 2 for aggregation");
  if (variants.empty()) throw ConfigError("no variants selected");
  std::set<Variant> uniq(variants.begin(), variants.end());
  if (uniq.size() != variants.size()) throw ConfigError("duplicate variant in run.variants");
  if (spaces.empty()) throw ConfigError("no clustering space selected");
  cohort.validate();
  phantom.validate();
  preprocess.validate();
  arch.validate();
  if (arch.input.x != phantom.dims[0] || arch.input.y != phantom.dims[1] || arch.input.z != phantom.dims[2])
    throw ConfigError("network input must match the phantom grid");
  if (arch.classes != 2) throw ConfigError("the study is binary (NC/AD)");
  train.validate();
  relevance.validate();
  if (spray.k_neighbors < 1) throw ConfigError("spray.k_neighbors must be >= 1");
  if (spray.k_max < 2) throw ConfigError("spray.k_max must be >= 2");
  if (!(spray.target_spacing > 0)) throw ConfigError("spray.target_spacing must be positive");
  const std::size_t n = static_cast<std::size_t>(2 * cohort.n_per_class);
  if (static_cast<std::size_t>(spray.k_neighbors) >= n)
    throw ConfigError("spray.k_neighbors must be smaller than the number of scans");
  if (tsne_enabled) tsne.validate(n);
}

std::string PipelineConfig::to_json() const {
  json j;
  std::vector<std::string> vs;
  for (auto v : variants) vs.push_back(to_string(v));
  std::vector<std::string> sp;
  for (auto s : spaces) sp.push_back(to_string(s));
  j["run"] = {{"name", name}, {"seed", seed}, {"n_repeats", n_repeats}, {"variants", vs},
              {"heatmap_target", to_string(heatmap_target)}, {"write_heatmaps", write_heatmaps}, {"spaces", sp}};
  j["cohort"] = {{"n_per_class", cohort.n_per_class},     {"control_pool_factor", cohort.control_pool_factor},
                 {"with_replacement", cohort.with_replacement}, {"ad_age_mean", cohort.ad_age_mean},
                 {"ad_age_sd", cohort.ad_age_sd},         {"nc_age_mean", cohort.nc_age_mean},
                 {"nc_age_sd", cohort.nc_age_sd},         {"ad_female", cohort.ad_female},
                 {"nc_female", cohort.nc_female}};
  const auto& p = phantom;
  std::vector<double> te_ms;
  for (double t : p.echo_times) te_ms.push_back(t * 1e3);
  json rois = json::array();
  for (const auto& r : p.rois) rois.push_back(ellipsoid_json(r));
  j["phantom"] = {{"dims", p.dims},
                  {"spacing", vec3(p.spacing)},
                  {"echo_times_ms", te_ms},
                  {"s0", p.s0_value},
                  {"noise_sigma", p.noise_sigma},
                  {"brain", ellipsoid_json(p.brain)},
                  {"shell_thickness", p.shell_thickness},
                  {"shell_r2star", p.shell_r2star},
                  {"rois", rois},
                  {"confound",
                   {{"enabled", p.confound.enabled},
                    {"offset", p.confound.offset},
                    {"center", vec3(p.confound.center)},
                    {"radius", p.confound.radius},
                    {"prevalence_nc", p.confound.prevalence_nc},
                    {"prevalence_ad", p.confound.prevalence_ad}}},
                  {"jitter",
                   {{"translation", p.jitter.translation},
                    {"scale", p.jitter.scale},
                    {"rotation_deg", p.jitter.rotation_deg},
                    {"warp_amplitude", p.jitter.warp_amplitude}}},
                  {"guidance_dilation", p.guidance_dilation}};
  j["preprocess"] = {{"signal_threshold", preprocess.signal_threshold},
                     {"clamp", preprocess.clamp},
                     {"scale", preprocess.scale}};
  j["splits"] = {{"train", splits.train}, {"val", splits.val}, {"test", splits.test}};
  j["network"] = {{"input", {arch.input.x, arch.input.y, arch.input.z}},
                  {"blocks", arch.blocks},
                  {"channels", arch.channels},
                  {"hidden", arch.hidden},
                  {"classes", arch.classes},
                  {"parameters", parameter_count(arch)}};
  j["train"] = {{"epochs", train.epochs},
                {"batch_size", train.batch_size},
                {"lr", train.lr_init},
                {"lr_factor", train.lr_factor},
                {"patience", train.patience},
                {"lr_floor", train.lr_floor},
                {"beta1", train.beta1},
                {"beta2", train.beta2},
                {"adam_eps", train.adam_eps},
                {"improvement_tol", train.improvement_tol},
                {"guided_lambda", train.guided_lambda},
                {"bias_init", train.bias_init}};
  j["relevance"] = {{"alpha", relevance.alpha}, {"beta", relevance.beta}, {"epsilon", relevance.epsilon}};
  j["spray"] = {{"k_neighbors", spray.k_neighbors}, {"k_max", spray.k_max}, {"target_spacing", spray.target_spacing}};
  j["tsne"] = {{"enabled", tsne_enabled},
               {"perplexity", tsne.perplexity},
               {"iterations", tsne.iterations},
               {"exaggeration", tsne.exaggeration},
               {"exaggeration_iterations", tsne.exaggeration_iterations},
               {"learning_rate", tsne.learning_rate},
               {"momentum", tsne.momentum},
               {"final_momentum", tsne.final_momentum},
               {"init", tsne.init == TsneInit::Spectral ? "spectral" : "random"}};
  return j.dump(2);
}

std::string PipelineConfig::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : to_json()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

PhantomSpec load_phantom_spec(const ConfigFile& f) {
  PhantomSpec p = PhantomSpec::standard();
  const auto dims = f.get_reals("phantom.dims", {double(p.dims[0]), double(p.dims[1]), double(p.dims[2])});
  if (dims.size() != 3) throw ConfigError("phantom.dims needs 3 integers");
  for (int a = 0; a < 3; ++a) {
    if (dims[a] != std::floor(dims[a]) || dims[a] < 1 || dims[a] > 4096) throw ConfigError("phantom.dims must be positive integers");
    p.dims[a] = static_cast<int>(dims[a]);
  }
  p.spacing = get_vec3(f, "phantom.spacing", p.spacing);
  std::vector<double> te_ms;
  for (double t : p.echo_times) te_ms.push_back(t * 1e3);
  te_ms = f.get_reals("phantom.echo_times_ms", te_ms);
  p.echo_times.clear();
  for (double t : te_ms) p.echo_times.push_back(t * 1e-3);
  p.s0_value = f.get_real("phantom.s0", p.s0_value);
  p.noise_sigma = f.get_real("phantom.noise_sigma", p.noise_sigma);
  p.brain.center = get_vec3(f, "phantom.brain_center", p.brain.center);
  p.brain.radii = get_vec3(f, "phantom.brain_radii", p.brain.radii);
  p.brain.r2star = f.get_real("phantom.brain_r2star", p.brain.r2star);
  p.shell_thickness = f.get_real("phantom.shell_thickness", p.shell_thickness);
  p.shell_r2star = f.get_real("phantom.shell_r2star", p.shell_r2star);
  const double roi_r2 = f.get_real("phantom.roi_r2star", p.rois.front().r2star);
  const double roi_delta = f.get_real("phantom.roi_delta", p.rois.front().class_delta);
  std::vector<double> centers, radii;
  for (const auto& r : p.rois) {
    centers.insert(centers.end(), r.center.begin(), r.center.end());
    radii.insert(radii.end(), r.radii.begin(), r.radii.end());
  }
  centers = f.get_reals("phantom.roi_centers", centers);
  radii = f.get_reals("phantom.roi_radii", radii);
  if (centers.size() % 3 != 0 || centers.size() != radii.size())
    throw ConfigError("phantom.roi_centers and phantom.roi_radii need matching triples");
  p.rois.clear();
  for (std::size_t i = 0; i < centers.size(); i += 3)
    p.rois.push_back(Ellipsoid{{centers[i], centers[i + 1], centers[i + 2]}, {radii[i], radii[i + 1], radii[i + 2]},
                               roi_r2, roi_delta});
  p.confound.enabled = f.get_bool("phantom.confound", p.confound.enabled);
  p.confound.offset = f.get_real("phantom.confound_offset", p.confound.offset);
  p.confound.center = get_vec3(f, "phantom.confound_center", p.confound.center);
  p.confound.radius = f.get_real("phantom.confound_radius", p.confound.radius);
  p.confound.prevalence_nc = f.get_real("phantom.prevalence_nc", p.confound.prevalence_nc);
  p.confound.prevalence_ad = f.get_real("phantom.prevalence_ad", p.confound.prevalence_ad);
  p.jitter.translation = f.get_real("phantom.jitter_translation", p.jitter.translation);
  p.jitter.scale = f.get_real("phantom.jitter_scale", p.jitter.scale);
  p.jitter.rotation_deg = f.get_real("phantom.jitter_rotation_deg", p.jitter.rotation_deg);
  p.jitter.warp_amplitude = f.get_real("phantom.warp_amplitude", p.jitter.warp_amplitude);
  const long long dil = f.get_int("phantom.guidance_dilation", static_cast<long long>(p.guidance_dilation));
  if (dil < 0 || dil > 64) throw ConfigError("phantom.guidance_dilation must lie in [0, 64]");
  p.guidance_dilation = static_cast<std::size_t>(dil);
  p.validate();
  return p;
}

PipelineConfig load_pipeline_config(const ConfigFile& f) {
  PipelineConfig c;
  c.name = f.get_string("run.name", c.name);
  for (char ch : c.name)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_'))
      throw ConfigError("run.name may only contain letters, digits, '-' and '_'");
  c.seed = get_seed(f, "run.seed", c.seed);
  c.n_repeats = get_int_checked(f, "run.n_repeats", c.n_repeats);
  if (f.has("run.variants")) {
    c.variants.clear();
    for (const auto& v : f.get_strings("run.variants", {})) c.variants.push_back(parse_variant(v));
  }
  if (f.has("run.spaces")) {
    c.spaces.clear();
    for (const auto& s : f.get_strings("run.spaces", {})) {
      try {
        c.spaces.push_back(parse_space(s));
      } catch (const std::exception& e) {
        throw ConfigError(e.what());
      }
    }
  }
  c.heatmap_target = parse_heatmap_target(f.get_string("run.heatmap_target", to_string(c.heatmap_target)));
  c.write_heatmaps = f.get_bool("run.write_heatmaps", c.write_heatmaps);

  auto& co = c.cohort;
  co.n_per_class = get_int_checked(f, "cohort.n_per_class", co.n_per_class);
  co.control_pool_factor = f.get_real("cohort.control_pool_factor", co.control_pool_factor);
  co.with_replacement = f.get_bool("cohort.with_replacement", co.with_replacement);
  co.ad_age_mean = f.get_real("cohort.ad_age_mean", co.ad_age_mean);
  co.ad_age_sd = f.get_real("cohort.ad_age_sd", co.ad_age_sd);
  co.nc_age_mean = f.get_real("cohort.nc_age_mean", co.nc_age_mean);
  co.nc_age_sd = f.get_real("cohort.nc_age_sd", co.nc_age_sd);
  co.ad_female = f.get_real("cohort.ad_female", co.ad_female);
  co.nc_female = f.get_real("cohort.nc_female", co.nc_female);

  c.phantom = load_phantom_spec(f);

  c.preprocess.signal_threshold = f.get_real("preprocess.signal_threshold", c.preprocess.signal_threshold);
  c.preprocess.clamp = f.get_real("preprocess.clamp", c.preprocess.clamp);
  c.preprocess.scale = f.get_real("preprocess.scale", c.preprocess.scale);

  c.splits.train = get_int_checked(f, "splits.train", c.splits.train);
  c.splits.val = get_int_checked(f, "splits.val", c.splits.val);
  c.splits.test = get_int_checked(f, "splits.test", c.splits.test);

  c.arch.input = Shape3{c.phantom.dims[0], c.phantom.dims[1], c.phantom.dims[2]};
  c.arch.blocks = get_int_checked(f, "network.blocks", c.arch.blocks);
  c.arch.channels = get_int_checked(f, "network.channels", c.arch.channels);
  c.arch.hidden = get_int_checked(f, "network.hidden", c.arch.hidden);

  auto& t = c.train;
  t.epochs = get_int_checked(f, "train.epochs", t.epochs);
  t.batch_size = get_int_checked(f, "train.batch_size", t.batch_size);
  t.lr_init = f.get_real("train.lr", t.lr_init);
  t.lr_factor = f.get_real("train.lr_factor", t.lr_factor);
  t.patience = get_int_checked(f, "train.patience", t.patience);
  t.lr_floor = f.get_real("train.lr_floor", t.lr_floor);
  t.beta1 = f.get_real("train.beta1", t.beta1);
  t.beta2 = f.get_real("train.beta2", t.beta2);
  t.adam_eps = f.get_real("train.adam_eps", t.adam_eps);
  t.improvement_tol = f.get_real("train.improvement_tol", t.improvement_tol);
  t.guided_lambda = f.get_real("train.guided_lambda", t.guided_lambda);
  t.bias_init = f.get_real("train.bias_init", t.bias_init);

  c.relevance.alpha = f.get_real("relevance.alpha", c.relevance.alpha);
  c.relevance.beta = f.get_real("relevance.beta", c.relevance.beta);
  c.relevance.epsilon = f.get_real("relevance.epsilon", c.relevance.epsilon);

  c.spray.k_neighbors = get_int_checked(f, "spray.k_neighbors", c.spray.k_neighbors);
  c.spray.k_max = get_int_checked(f, "spray.k_max", c.spray.k_max);
  c.spray.target_spacing = f.get_real("spray.target_spacing", c.spray.target_spacing);

  c.tsne_enabled = f.get_bool("tsne.enabled", c.tsne_enabled);
  c.tsne.perplexity = f.get_real("tsne.perplexity", c.tsne.perplexity);
  c.tsne.iterations = get_int_checked(f, "tsne.iterations", c.tsne.iterations);
  c.tsne.exaggeration = f.get_real("tsne.exaggeration", c.tsne.exaggeration);
  c.tsne.exaggeration_iterations = get_int_checked(f, "tsne.exaggeration_iterations", c.tsne.exaggeration_iterations);
  c.tsne.learning_rate = f.get_real("tsne.learning_rate", c.tsne.learning_rate);
  c.tsne.momentum = f.get_real("tsne.momentum", c.tsne.momentum);
  c.tsne.final_momentum = f.get_real("tsne.final_momentum", c.tsne.final_momentum);
  const std::string init = f.get_string("tsne.init", "spectral");
  if (init == "spectral") c.tsne.init = TsneInit::Spectral;
  else if (init == "random") c.tsne.init = TsneInit::Random;
  else throw ConfigError("tsne.init must be spectral or random");

  const auto unused = f.unused_keys();
  if (!unused.empty()) {
    std::string msg = "unknown config key";
    for (const auto& k : unused) msg += " '" + k + "'";
    throw ConfigError(msg);
  }
  c.validate();
  return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) { return load_pipeline_config(ConfigFile::load(path)); }

std::vector<Heatmap> compute_heatmaps(const NetworkParams<float>& params, const Dataset& data, Variant variant,
                                      HeatmapTarget target, const RelevanceConfig& cfg, std::vector<int>* predicted) {
  std::vector<Heatmap> out;
  out.reserve(data.samples.size());
  if (predicted) predicted->clear();
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const Sample& s = data.samples[i];
    const Grid& g = data.grids[i];
    if (g.dims[0] != params.arch.input.x || g.dims[1] != params.arch.input.y || g.dims[2] != params.arch.input.z)
      throw DataError("scan " + s.scan_id + " does not match the network input grid");
    const auto x = network_input<float>(s, variant);
    const ForwardCache<float> cache = forward<float>(params, x);
    const int pred = cache.predicted();
    const int cls = heatmap_class(target, s.label);
    const int t = cls < 0 ? pred : cls;
    const auto rr = propagate_relevance<float>(params, cache, t, cfg);
    Heatmap h;
    h.scan_id = s.scan_id;
    h.variant = to_string(variant);
    h.target_class = t;
    h.dead = rr.dead;
    h.relevance = Volume3D(g);
    for (std::size_t v = 0; v < rr.input.size(); ++v) h.relevance.data[v] = rr.input[v];
    out.push_back(std::move(h));
    if (predicted) predicted->push_back(pred);
  }
  return out;
}

double in_mask_fraction(const std::vector<Heatmap>& heatmaps, const std::vector<const std::vector<float>*>& masks) {
  if (heatmaps.size() != masks.size()) throw DataError("in-mask fraction: heatmaps and masks differ in count");
  double acc = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < heatmaps.size(); ++i) {
    const auto& r = heatmaps[i].relevance.data;
    const auto& m = *masks[i];
    if (m.size() != r.size()) throw DataError("in-mask fraction: mask size mismatch");
    double tot = 0.0, in = 0.0;
    for (std::size_t v = 0; v < r.size(); ++v) {
      const double p = r[v] > 0.0 ? r[v] : 0.0;
      tot += p;
      in += p * m[v];
    }
    if (tot > 0.0) {
      acc += in / tot;
      ++n;
    }
  }
  return n > 0 ? acc / n : 0.0;
}

namespace {

constexpr char kSpectrumMagic[8] = {'R', 'S', 'P', 'Y', 'S', 'P', 'E', 'C'};

template <class T>
void put(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T take(std::ifstream& is, const fs::path& p) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw DataError(p.string() + ": truncated");
  return v;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError("cannot write " + p.string());
  os << s;
}

std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::vector<fs::path> write_spray_outputs(const SprayResult& r, const DataMatrix& X, const std::vector<Volume3D>& volumes,
                                          const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<fs::path> out;
  const auto& ev = r.spectrum.eigen;
  {
    std::ostringstream os;
    os << "index,eigenvalue\n";
    for (std::size_t i = 0; i < ev.values.size(); ++i) os << i + 1 << ',' << fmt(ev.values[i]) << '\n';
    write_text(dir / "eigenvalues.csv", os.str());
    out.push_back(dir / "eigenvalues.csv");
  }
  std::vector<SampleInfo> kept;
  {
    std::ostringstream os;
    os << "scan_id,cluster,group,outcome\n";
    for (std::size_t j = 0; j < r.rows.size(); ++j) {
      const SampleInfo& s = X.manifest[r.rows[j]];
      kept.push_back(s);
      os << s.scan_id << ',' << r.clusters.labels[j] << ',' << to_string(s.group) << ',' << to_string(s.outcome)
         << '\n';
    }
    write_text(dir / "labels.csv", os.str());
    out.push_back(dir / "labels.csv");
  }
  {
    std::ostringstream os;
    os << "cluster,group,TP,FP,TN,FN,total\n";
    for (int c = 0; c < r.clusters.k; ++c)
      for (int g = 0; g < 2; ++g) {
        const auto& row = r.clusters.composition[c][g];
        os << c << ',' << (g ? "AD" : "NC") << ',' << row[0] << ',' << row[1] << ',' << row[2] << ',' << row[3] << ','
           << row[0] + row[1] + row[2] + row[3] << '\n';
      }
    write_text(dir / "composition.csv", os.str());
    out.push_back(dir / "composition.csv");
  }
  {
    std::ostringstream os;
    os << "i,j,weight\n";
    const std::size_t n = r.affinity.n;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (r.affinity.w[i * n + j] != 0.0) os << i << ',' << j << ',' << fmt(r.affinity.w[i * n + j]) << '\n';
    write_text(dir / "affinity.csv", os.str());
    out.push_back(dir / "affinity.csv");
  }
  {
    std::ofstream os(dir / "spectrum.bin", std::ios::binary);
    if (!os) throw DataError("cannot write spectrum.bin");
    os.write(kSpectrumMagic, 8);
    put(os, static_cast<std::uint64_t>(ev.n));
    os.write(reinterpret_cast<const char*>(r.spectrum.laplacian.data()),
             static_cast<std::streamsize>(r.spectrum.laplacian.size() * sizeof(double)));
    os.write(reinterpret_cast<const char*>(ev.values.data()), static_cast<std::streamsize>(ev.values.size() * sizeof(double)));
    os.write(reinterpret_cast<const char*>(ev.vectors.data()),
             static_cast<std::streamsize>(ev.vectors.size() * sizeof(double)));
    out.push_back(dir / "spectrum.bin");
  }
  {
    std::vector<Volume3D> sub;
    for (auto i : r.rows) sub.push_back(volumes.at(i));
    const ClusterMeans means = cluster_mean_heatmaps(sub, r.clusters.labels, r.clusters.k, kept);
    for (int c = 0; c < r.clusters.k; ++c) {
      const fs::path p = dir / ("cluster_mean_" + std::to_string(c) + ".nii");
      nifti::write(means.means[c], p);
      out.push_back(p);
    }
  }
  {
    json j = {{"k", r.clusters.k},
              {"eigengap", r.clusters.eigengap},
              {"sigma", r.affinity.sigma},
              {"binary", r.affinity.binary},
              {"k_neighbors", r.affinity.k},
              {"rows", r.rows.size()},
              {"dropped", X.rows - r.rows.size()},
              {"space", to_string(X.space)},
              {"jacobi_sweeps", ev.sweeps}};
    write_text(dir / "spray.json", j.dump(2) + "\n");
    out.push_back(dir / "spray.json");
  }
  return out;
}

SprayArtifacts read_spray_outputs(const fs::path& dir) {
  SprayArtifacts a;
  const fs::path sp = dir / "spectrum.bin";
  std::ifstream is(sp, std::ios::binary);
  if (!is) throw DataError("missing " + sp.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kSpectrumMagic, 8) != 0) throw DataError(sp.string() + ": bad magic");
  const auto n = take<std::uint64_t>(is, sp);
  if (n == 0 || n > 100000) throw DataError(sp.string() + ": implausible size");
  a.laplacian.resize(n * n);
  a.eigen.n = n;
  a.eigen.values.resize(n);
  a.eigen.vectors.resize(n * n);
  auto rd = [&](std::vector<double>& v) {
    if (!is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double))))
      throw DataError(sp.string() + ": truncated");
  };
  rd(a.laplacian);
  rd(a.eigen.values);
  rd(a.eigen.vectors);
  const CsvTable t = read_csv(dir / "labels.csv");
  const auto cs = t.column("scan_id"), cc = t.column("cluster"), cg = t.column("group"), co = t.column("outcome");
  for (const auto& row : t.rows) {
    SampleInfo s;
    s.scan_id = row[cs];
    s.group = parse_class(row[cg]);
    s.outcome = parse_outcome(row[co]);
    a.manifest.push_back(s);
    try {
      a.clusters.push_back(std::stoi(row[cc]));
    } catch (const std::logic_error&) {
      throw DataError("labels.csv: bad cluster '" + row[cc] + "'");
    }
  }
  if (a.manifest.size() != n) throw DataError(dir.string() + ": labels.csv does not match spectrum.bin");
  return a;
}

Embedding2D embed_spectrum(const std::vector<double>& laplacian, const EigenDecomposition& eigen, const TsneConfig& cfg) {
  const std::size_t n = eigen.n;
  if (cfg.init == TsneInit::Spectral) {
    const auto init = spectral_layout(eigen);
    return tsne(laplacian, n, n, cfg, &init);
  }
  return tsne(laplacian, n, n, cfg);
}

bool RunResult::failed() const {
  return std::any_of(stages.begin(), stages.end(), [](const StageRecord& s) { return s.status == "failed"; });
}

fs::path run_directory(const PipelineConfig& cfg, const fs::path& base) {
  return base / (cfg.name + "-" + cfg.digest());
}

namespace {

class Runner {
 public:
  Runner(const PipelineConfig& cfg, const fs::path& dir, const LogFn& log) : cfg_(cfg), dir_(dir), log_(log) {}

  RunResult run();

 private:
  template <class F>
  bool stage(const std::string& name, F&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    StageRecord rec;
    rec.name = name;
    try {
      f();
      rec.status = "ok";
    } catch (const std::exception& e) {
      rec.status = "failed";
      rec.error = e.what();
      if (!first_error_) first_error_ = std::current_exception();
      say("stage " + name + " failed: " + e.what());
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res_.stages.push_back(rec);
    return rec.status == "ok";
  }
  void skip(const std::string& name, const std::string& why) {
    res_.stages.push_back({name, "skipped", why, 0.0});
  }
  void say(const std::string& s) const {
    if (log_) log_(s);
  }
  void artifact(const fs::path& p) { res_.artifacts.push_back(fs::relative(p, dir_).generic_string()); }
  void text(const fs::path& p, const std::string& s) {
    write_text(p, s);
    artifact(p);
  }

  void variant_repeat(const SplitPlan& plan, Variant v);
  void write_tables();
  void write_run_json();

  const PipelineConfig& cfg_;
  fs::path dir_;
  LogFn log_;
  RunResult res_;
  Dataset data_;
  std::exception_ptr first_error_;
  std::ostringstream cluster_labels_;
};

void Runner::variant_repeat(const SplitPlan& plan, Variant v) {
  char sub[32];
  std::snprintf(sub, sizeof sub, "repeat_%02d/%s", plan.repeat_index, to_string(v).c_str());
  const fs::path vdir = dir_ / sub;
  fs::create_directories(vdir);
  const std::string tag = std::string(sub);
  VariantRepeatResult vr;
  vr.variant = v;
  vr.repeat = plan.repeat_index;

  TrainConfig tc = cfg_.train;
  tc.seed = mix(cfg_.seed, 0x7472u + static_cast<std::uint64_t>(plan.repeat_index));
  NetworkParams<float> params;
  const auto train_set = data_.select(plan.train), val_set = data_.select(plan.val), test_set = data_.select(plan.test);
  bool ok = stage(tag + "/train", [&] {
    say(tag + ": training on " + std::to_string(train_set.size()) + " scans");
    TrainResult<float> tr;
    try {
      tr = train<float>(cfg_.arch, train_set, val_set, v, tc, [&](const EpochRecord& e) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s epoch %d lr %.1e train %.4f/%.3f val %.4f/%.3f", tag.c_str(), e.epoch, e.lr,
                      e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy);
        say(buf);
      });
    } catch (const TrainingAborted& e) {
      text(vdir / "history.json", history_json(e.history) + "\n");
      throw;
    }
    params = tr.params;
    vr.best_epoch = tr.history.best_epoch;
    save_checkpoint({tr.params, v, tc, tr.history}, vdir / "model");
    artifact(vdir / "model" / "model.bin");
    artifact(vdir / "model" / "model.json");
  });
  if (!ok) {
    res_.results.push_back(vr);
    return;
  }
  vr.trained = true;

  ok = stage(tag + "/evaluate", [&] {
    const Evaluation ev = evaluate<float>(params, test_set, v, tc);
    std::vector<int> labels;
    for (const auto& s : test_set) labels.push_back(s.label);
    vr.test = compute_metrics(ev.scores, labels);
    std::ostringstream os;
    os << "scan_id,label,score,predicted\n";
    for (std::size_t i = 0; i < test_set.size(); ++i)
      os << test_set[i].scan_id << ',' << labels[i] << ',' << fmt(ev.scores[i]) << ',' << ev.predicted[i] << '\n';
    text(vdir / "test_predictions.csv", os.str());
  });

  std::vector<Heatmap> maps;
  std::vector<int> predicted;
  ok = stage(tag + "/heatmap", [&] {
    maps = compute_heatmaps(params, data_, v, cfg_.heatmap_target, cfg_.relevance, &predicted);
    std::vector<Heatmap> test_maps;
    std::vector<const std::vector<float>*> masks;
    for (const auto& id : plan.test) {
      const auto i = data_.index_of(id);
      test_maps.push_back(maps[i]);
      masks.push_back(&data_.samples[i].brain_mask);
    }
    vr.in_mask = in_mask_fraction(test_maps, masks);
    std::ostringstream os;
    os << "scan_id,variant,class,target,predicted,outcome,dead\n";
    for (std::size_t i = 0; i < maps.size(); ++i) {
      const auto& sc = data_.cohort.scans[i];
      os << sc.scan_id << ',' << to_string(v) << ',' << to_string(sc.group) << ',' << maps[i].target_class << ','
         << predicted[i] << ',' << to_string(outcome_of(static_cast<int>(sc.group), predicted[i])) << ','
         << (maps[i].dead ? 1 : 0) << '\n';
    }
    text(vdir / "heatmaps.csv", os.str());
    if (cfg_.write_heatmaps) {
      fs::create_directories(vdir / "heatmaps");
      for (const auto& h : maps) {
        const fs::path p = vdir / "heatmaps" / (h.scan_id + ".nii");
        nifti::write(h.relevance, p);
        artifact(p);
      }
    }
  });

  if (!ok) {
    for (auto sp : cfg_.spaces) skip(tag + "/spray_" + to_string(sp), "no heatmaps");
    res_.results.push_back(vr);
    return;
  }

  std::vector<SampleInfo> manifest;
  std::vector<Volume3D> volumes;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const auto& sc = data_.cohort.scans[i];
    manifest.push_back({sc.scan_id, sc.group, outcome_of(static_cast<int>(sc.group), predicted[i])});
    volumes.push_back(maps[i].relevance);
  }
  for (Space sp : cfg_.spaces) {
    VariantRepeatResult::SpaceResult sr;
    sr.space = sp;
    const fs::path sdir = vdir / ("spray_" + to_string(sp));
    SprayResult spray;
    const bool sok = stage(tag + "/spray_" + to_string(sp), [&] {
      const DataMatrix X = prepare_heatmaps(volumes, manifest, sp, cfg_.spray.target_spacing, &data_.warps);
      SprayConfig sc = cfg_.spray;
      sc.seed = mix(cfg_.seed, 0x7370u + static_cast<std::uint64_t>(plan.repeat_index));
      spray = run_spray(X, sc);
      std::vector<Volume3D> space_vols;
      if (sp == Space::Warped)
        for (std::size_t i = 0; i < volumes.size(); ++i) space_vols.push_back(apply_displacement(volumes[i], data_.warps[i]));
      for (const auto& p : write_spray_outputs(spray, X, sp == Space::Warped ? space_vols : volumes, sdir)) artifact(p);
      std::vector<int> conf, grp;
      for (auto i : spray.rows) {
        conf.push_back(data_.cohort.scans[i].confound ? 1 : 0);
        grp.push_back(static_cast<int>(data_.cohort.scans[i].group));
      }
      sr.k = spray.clusters.k;
      sr.ari_confound = adjusted_rand_index(spray.clusters.labels, conf);
      sr.ari_group = adjusted_rand_index(spray.clusters.labels, grp);
      sr.ok = true;
      for (std::size_t j = 0; j < spray.rows.size(); ++j) {
        const auto& s = manifest[spray.rows[j]];
        cluster_labels_ << to_string(v) << ',' << plan.repeat_index << ',' << to_string(sp) << ',' << s.scan_id << ','
                        << spray.clusters.labels[j] << ',' << to_string(s.group) << ',' << to_string(s.outcome) << '\n';
      }
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s %s: k=%d ARI confound %.3f group %.3f", tag.c_str(), to_string(sp).c_str(),
                    sr.k, sr.ari_confound, sr.ari_group);
      say(buf);
    });
    if (sok && cfg_.tsne_enabled) {
      stage(tag + "/embed_" + to_string(sp), [&] {
        TsneConfig tc2 = cfg_.tsne;
        tc2.seed = mix(cfg_.seed, 0x7473u + static_cast<std::uint64_t>(plan.repeat_index));
        const Embedding2D e = embed_spectrum(spray.spectrum.laplacian, spray.spectrum.eigen, tc2);
        std::vector<SampleInfo> kept;
        for (auto i : spray.rows) kept.push_back(manifest[i]);
        export_scatter(e, kept, spray.clusters.labels, sdir / "scatter.csv", sdir / "scatter.svg",
                       "variant " + to_string(v) + ", " + to_string(sp) + ", repeat " +
                           std::to_string(plan.repeat_index));
        artifact(sdir / "scatter.csv");
        artifact(sdir / "scatter.svg");
      });
    } else if (cfg_.tsne_enabled) {
      skip(tag + "/embed_" + to_string(sp), "spray failed");
    }
    vr.spaces.push_back(sr);
  }
  res_.results.push_back(vr);
}

void Runner::write_tables() {
  std::ostringstream m;
  m << "variant,repeat,accuracy,sensitivity,specificity,auc,tp,fp,tn,fn,in_mask_fraction,best_epoch\n";
  std::ostringstream t;
  t << "id,skull_stripping,relevance_guided,accuracy,sensitivity,specificity,auc,in_mask_fraction,runs\n";
  json summary = json::object();
  for (Variant v : cfg_.variants) {
    std::vector<Metrics> runs;
    std::vector<double> inmask;
    json jv;
    json per = json::array();
    for (const auto& r : res_.results) {
      if (r.variant != v || !r.trained) continue;
      const auto& x = r.test;
      m << to_string(v) << ',' << r.repeat << ',' << fmt(x.accuracy) << ',' << fmt(x.sensitivity) << ','
        << fmt(x.specificity) << ',' << fmt(x.auc) << ',' << x.tp << ',' << x.fp << ',' << x.tn << ',' << x.fn << ','
        << fmt(r.in_mask) << ',' << r.best_epoch << '\n';
      runs.push_back(x);
      inmask.push_back(r.in_mask);
      json jr = {{"repeat", r.repeat}, {"accuracy", x.accuracy}, {"auc", x.auc}, {"in_mask_fraction", r.in_mask},
                 {"best_epoch", r.best_epoch}};
      for (const auto& s : r.spaces)
        if (s.ok)
          jr[to_string(s.space)] = {{"k", s.k}, {"ari_confound", s.ari_confound}, {"ari_group", s.ari_group}};
      per.push_back(jr);
    }
    jv["repeats"] = per;
    if (runs.size() >= 2) {
      const AggregateMetrics a = aggregate_runs(runs);
      const Summary im = summarize(inmask);
      long tp = 0, fp = 0, tn = 0, fn = 0;
      for (const auto& x : runs) {
        tp += x.tp;
        fp += x.fp;
        tn += x.tn;
        fn += x.fn;
      }
      m << to_string(v) << ",aggregate," << fmt(a.accuracy.mean) << ',' << fmt(a.sensitivity.mean) << ','
        << fmt(a.specificity.mean) << ',' << fmt(a.auc.mean) << ',' << tp << ',' << fp << ',' << tn << ',' << fn << ','
        << fmt(im.mean) << ",\n";
      t << to_string(v) << ',' << (v == Variant::B ? "yes" : "no") << ',' << (v == Variant::C ? "yes" : "no") << ','
        << csv_quote(format_percent(a.accuracy)) << ',' << csv_quote(format_percent(a.sensitivity)) << ','
        << csv_quote(format_percent(a.specificity)) << ',' << csv_quote(format_fraction(a.auc)) << ','
        << csv_quote(format_fraction(im)) << ',' << runs.size() << '\n';
      jv["accuracy_mean"] = a.accuracy.mean;
      jv["auc_mean"] = a.auc.mean;
      jv["in_mask_mean"] = im.mean;
      for (Space sp : cfg_.spaces) {
        std::vector<double> ac, ag;
        for (const auto& r : res_.results)
          if (r.variant == v)
            for (const auto& s : r.spaces)
              if (s.ok && s.space == sp) {
                ac.push_back(s.ari_confound);
                ag.push_back(s.ari_group);
              }
        if (ac.empty()) continue;
        auto mean = [](const std::vector<double>& x) {
          double s = 0;
          for (double y : x) s += y;
          return s / x.size();
        };
        jv[to_string(sp)] = {{"ari_confound_mean", mean(ac)},
                             {"ari_confound_min", *std::min_element(ac.begin(), ac.end())},
                             {"ari_group_mean", mean(ag)},
                             {"ari_group_min", *std::min_element(ag.begin(), ag.end())}};
      }
    }
    summary[to_string(v)] = jv;
  }
  text(dir_ / "metrics.csv", m.str());
  text(dir_ / "table1.csv", t.str());
  text(dir_ / "labels.csv", "variant,repeat,space,scan_id,cluster,group,outcome\n" + cluster_labels_.str());
  text(dir_ / "summary.json", summary.dump(2) + "\n");
}

void Runner::write_run_json() {
  json j;
  j["name"] = cfg_.name;
  j["digest"] = cfg_.digest();
  j["config"] = json::parse(cfg_.to_json());
  json st = json::array();
  for (const auto& s : res_.stages) {
    json e = {{"name", s.name}, {"status", s.status}, {"seconds", s.seconds}};
    if (!s.error.empty()) e["error"] = s.error;
    st.push_back(e);
  }
  j["stages"] = st;
  j["cpu_seconds"] = res_.cpu_seconds;
  j["wall_seconds"] = res_.wall_seconds;
  j["failed"] = res_.failed();
  res_.artifacts.push_back("run.json");
  j["artifacts"] = res_.artifacts;
  write_text(dir_ / "run.json", j.dump(2) + "\n");
}

RunResult Runner::run() {
  const std::clock_t c0 = std::clock();
  const auto w0 = std::chrono::steady_clock::now();
  res_.dir = dir_;
  fs::create_directories(dir_);
  text(dir_ / "config.json", cfg_.to_json() + "\n");

  std::vector<SplitPlan> plans;
  const bool data_ok = stage("data", [&] {
    say("generating " + std::to_string(2 * cfg_.cohort.n_per_class) + " phantoms");
    data_ = build_dataset(cfg_.cohort, cfg_.phantom, cfg_.preprocess, cfg_.seed);
    write_labels_csv(data_.cohort.scans, dir_ / "cohort.csv");
    artifact(dir_ / "cohort.csv");
    std::ostringstream mo;
    mo << "case_index,control_index,distance\n";
    for (const auto& p : data_.cohort.matching.pairs)
      mo << p.case_index << ',' << p.control_index << ',' << fmt(p.distance) << '\n';
    text(dir_ / "matching.csv", mo.str());
    plans = make_splits(data_.cohort.subjects, cfg_.splits, cfg_.n_repeats, cfg_.seed);
    std::ostringstream so;
    so << "repeat,scan_id,partition\n";
    for (const auto& p : plans) {
      for (const auto& id : p.train) so << p.repeat_index << ',' << id << ",train\n";
      for (const auto& id : p.val) so << p.repeat_index << ',' << id << ",val\n";
      for (const auto& id : p.test) so << p.repeat_index << ',' << id << ",test\n";
    }
    text(dir_ / "splits.csv", so.str());
  });
  if (data_ok) {
    for (const auto& plan : plans)
      for (Variant v : cfg_.variants) variant_repeat(plan, v);
  }
  stage("tables", [&] { write_tables(); });
  res_.cpu_seconds = static_cast<double>(std::clock() - c0) / CLOCKS_PER_SEC;
  res_.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - w0).count();
  write_run_json();
  if (first_error_) std::rethrow_exception(first_error_);
  return res_;
}

}  // namespace

RunResult run_experiment(const PipelineConfig& cfg, const fs::path& dir, const LogFn& log) {
  cfg.validate();
  Runner r(cfg, dir, log);
  return r.run();
}

namespace {

std::string md_table_from_csv(const fs::path& p) {
  std::ifstream is(p);
  std::string line;
  std::ostringstream os;
  bool first = true;
  auto cells = [](const std::string& l) {
    std::vector<std::string> out;
    std::string cur;
    bool q = false;
    for (char c : l) {
      if (c == '"') q = !q;
      else if (c == ',' && !q) {
        out.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    out.push_back(cur);
    return out;
  };
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto c = cells(line);
    os << '|';
    for (const auto& x : c) os << ' ' << x << " |";
    os << '\n';
    if (first) {
      os << '|';
      for (std::size_t i = 0; i < c.size(); ++i) os << " --- |";
      os << '\n';
      first = false;
    }
  }
  return os.str();
}

}  // namespace

fs::path write_report(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("run directory " + dir.string() + " does not exist");
  std::ostringstream md;
  const fs::path rj = dir / "run.json";
  json run = json::object();
  std::vector<std::string> artifacts;
  if (fs::exists(rj)) {
    std::ifstream is(rj);
    try {
      run = json::parse(is);
      artifacts = run.value("artifacts", std::vector<std::string>{});
    } catch (const json::exception& e) {
      throw DataError("run.json: " + std::string(e.what()));
    }
  }
  md << "# Run report: " << run.value("name", dir.filename().string()) << "\n\n";
  if (artifacts.empty()) {
    md << "## No artifacts\n\nThe run directory holds no run.json artifact list.\n";
    write_text(dir / "report.md", md.str());
    return dir / "report.md";
  }
  std::set<std::string> have;
  std::vector<std::string> missing;
  for (const auto& a : artifacts) {
    if (fs::exists(dir / a)) have.insert(a);
    else missing.push_back(a);
  }
  if (run.contains("cpu_seconds"))
    md << "CPU time " << fmt(run["cpu_seconds"].get<double>()) << " s, wall time "
       << fmt(run["wall_seconds"].get<double>()) << " s.\n\n";
  if (have.count("table1.csv")) md << "## Classification\n\n" << md_table_from_csv(dir / "table1.csv") << '\n';
  if (have.count("metrics.csv")) md << "### Per repeat\n\n" << md_table_from_csv(dir / "metrics.csv") << '\n';

  // Spray sections grouped by repeat/variant/space directory.
  std::map<std::string, std::set<std::string>> spray_dirs;
  for (const auto& a : have) {
    const fs::path p(a);
    if (p.parent_path().filename().string().rfind("spray_", 0) == 0)
      spray_dirs[p.parent_path().generic_string()].insert(p.filename().string());
  }
  if (!spray_dirs.empty()) md << "## Spectral relevance analysis\n\n";
  for (const auto& [d, files] : spray_dirs) {
    md << "### " << d << "\n\n";
    if (files.count("eigenvalues.csv")) {
      std::ifstream is(dir / d / "eigenvalues.csv");
      std::string line;
      std::getline(is, line);
      md << "Smallest eigenvalues:";
      for (int i = 0; i < 10 && std::getline(is, line); ++i) md << ' ' << line.substr(line.find(',') + 1);
      md << "\n\n";
    }
    if (files.count("scatter.svg")) md << "![" << d << "](" << d << "/scatter.svg)\n\n";
    if (files.count("composition.csv")) md << md_table_from_csv(dir / d / "composition.csv") << '\n';
  }
  if (run.contains("stages")) {
    std::vector<std::string> failed;
    for (const auto& s : run["stages"])
      if (s.value("status", "") != "ok") failed.push_back(s.value("name", "?") + ": " + s.value("status", "") + " " + s.value("error", ""));
    if (!failed.empty()) {
      md << "## Incomplete stages\n\n";
      for (const auto& f : failed) md << "- " << f << '\n';
      md << '\n';
    }
  }
  if (!missing.empty()) {
    md << "## Missing artifacts\n\n";
    for (const auto& m : missing) md << "- " << m << '\n';
    md << '\n';
  }
  write_text(dir / "report.md", md.str());
  if (std::find(artifacts.begin(), artifacts.end(), "report.md") == artifacts.end()) {
    run["artifacts"].push_back("report.md");
    write_text(rj, run.dump(2) + "\n");
  }
  return dir / "report.md";
}

}  // namespace relspray
