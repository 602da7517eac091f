#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "relspray/checkpoint.hpp"
#include "relspray/config.hpp"
#include "relspray/dataset.hpp"
#include "relspray/errors.hpp"
#include "relspray/nifti.hpp"
#include "relspray/parallel.hpp"
#include "relspray/pipeline.hpp"
#include "relspray/relaxometry.hpp"
#include "relspray/spray.hpp"
#include "relspray/tsne.hpp"

namespace fs = std::filesystem;
using namespace relspray;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  int threads = 0;
  bool deterministic = false;
  bool quiet = false;
};

void log_line(const Globals& g, const std::string& s) {
  if (!g.quiet) std::cerr << s << std::endl;
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::logic_error&) {
      throw ConfigError("cannot parse '" + tok + "' as a number");
    }
  }
  return out;
}

PipelineConfig config_or_default(const std::string& path) {
  if (path.empty()) {
    PipelineConfig c;
    c.arch.input = Shape3{c.phantom.dims[0], c.phantom.dims[1], c.phantom.dims[2]};
    return c;
  }
  return load_pipeline_config(fs::path(path));
}

void write_file(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError("cannot write " + p.string());
  os << s;
}

// phantom ------------------------------------------------------------------

struct PhantomArgs {
  std::string spec, out;
  int n_per_class = 10;
};

void cmd_phantom(const PhantomArgs& a, const Globals& g) {
  PhantomSpec spec = PhantomSpec::standard();
  CohortConfig cohort;
  if (!a.spec.empty()) {
    const ConfigFile f = ConfigFile::load(a.spec);
    spec = load_phantom_spec(f);
    cohort.control_pool_factor = f.get_real("cohort.control_pool_factor", cohort.control_pool_factor);
    cohort.with_replacement = f.get_bool("cohort.with_replacement", cohort.with_replacement);
  }
  cohort.n_per_class = a.n_per_class;
  write_phantom_dataset(cohort, spec, g.seed.value_or(0), a.out);
  log_line(g, "wrote " + std::to_string(2 * a.n_per_class) + " phantoms to " + a.out);
}

// fit ----------------------------------------------------------------------

struct FitArgs {
  std::vector<std::string> echoes;
  std::string te, mask, out;
  bool refine = false;
};

void cmd_fit(const FitArgs& a, const Globals& g) {
  MultiEchoSeries s;
  for (double t : parse_list(a.te)) s.echo_times.push_back(t * 1e-3);
  for (const auto& p : a.echoes)
    for (auto& v : nifti::read_series(p)) s.volumes.push_back(std::move(v));
  if (s.volumes.size() != s.echo_times.size())
    throw ConfigError("got " + std::to_string(s.volumes.size()) + " echo volumes but " +
                      std::to_string(s.echo_times.size()) + " echo times");
  std::optional<Volume3D> mask;
  if (!a.mask.empty()) mask = nifti::read(a.mask);
  FitOptions opt;
  opt.nonlinear_refine = a.refine;
  const R2StarMap m = fit_r2star_map(s, mask ? &*mask : nullptr, opt);
  fs::create_directories(a.out);
  nifti::write(m.r2star, fs::path(a.out) / "r2star.nii");
  nifti::write(m.s0, fs::path(a.out) / "s0.nii");
  nifti::write(m.r_squared, fs::path(a.out) / "rsq.nii");
  log_line(g, "wrote r2star.nii, s0.nii, rsq.nii to " + a.out);
}

// train --------------------------------------------------------------------

struct TrainArgs {
  std::string config, variant = "A", data, out;
  int repeat = 0;
};

void cmd_train(const TrainArgs& a, const Globals& g) {
  PipelineConfig cfg = config_or_default(a.config);
  if (g.seed) cfg.seed = *g.seed;
  const Variant v = parse_variant(a.variant);
  const Dataset data = load_dataset(a.data, cfg.preprocess);
  const Grid& grid = data.grids.front();
  cfg.arch.input = Shape3{grid.dims[0], grid.dims[1], grid.dims[2]};
  const int repeats = std::max(cfg.n_repeats, a.repeat + 1);
  const auto plans = make_splits(data.cohort.subjects, cfg.splits, repeats, cfg.seed);
  const SplitPlan& plan = plans.at(a.repeat);
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed + static_cast<std::uint64_t>(a.repeat);
  const auto tr = train<float>(cfg.arch, data.select(plan.train), data.select(plan.val), v, tc, [&](const EpochRecord& e) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch %d lr %.1e train %.4f/%.3f val %.4f/%.3f", e.epoch, e.lr, e.train_loss,
                  e.train_accuracy, e.val_loss, e.val_accuracy);
    log_line(g, buf);
  });
  save_checkpoint({tr.params, v, tc, tr.history}, a.out);
  const Evaluation ev = evaluate<float>(tr.params, data.select(plan.test), v, tc);
  char buf[96];
  std::snprintf(buf, sizeof buf, "best epoch %d, test accuracy %.3f", tr.history.best_epoch, ev.accuracy);
  log_line(g, buf);
}

// heatmap ------------------------------------------------------------------

struct HeatmapArgs {
  std::string ckpt, data, variant, out, target = "predicted", config;
};

void cmd_heatmap(const HeatmapArgs& a, const Globals& g) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const Variant v = a.variant.empty() ? ck.variant : parse_variant(a.variant);
  PipelineConfig cfg = config_or_default(a.config);
  const Dataset data = load_dataset(a.data, cfg.preprocess);
  std::vector<int> predicted;
  const auto maps = compute_heatmaps(ck.params, data, v, parse_heatmap_target(a.target), cfg.relevance, &predicted);
  fs::create_directories(a.out);
  std::ostringstream man;
  man << "scan_id,variant,class,target,predicted,outcome,warp\n";
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const auto& sc = data.cohort.scans[i];
    nifti::write(maps[i].relevance, fs::path(a.out) / (sc.scan_id + ".nii"));
    const fs::path warp = fs::absolute(fs::path(a.data) / sc.path / "warp.nii");
    man << sc.scan_id << ',' << to_string(v) << ',' << to_string(sc.group) << ',' << maps[i].target_class << ','
        << predicted[i] << ',' << to_string(outcome_of(static_cast<int>(sc.group), predicted[i])) << ','
        << (fs::exists(warp) ? warp.string() : "") << '\n';
  }
  write_file(fs::path(a.out) / "manifest.csv", man.str());
  std::vector<const std::vector<float>*> masks;
  for (const auto& s : data.samples) masks.push_back(&s.brain_mask);
  char buf[96];
  std::snprintf(buf, sizeof buf, "wrote %zu heatmaps, in-mask fraction %.3f", maps.size(), in_mask_fraction(maps, masks));
  log_line(g, buf);
}

// spray --------------------------------------------------------------------

struct SprayArgs {
  std::string heatmaps, space = "native", out;
  int k_neighbors = 10, k_max = 10;
  double target_spacing = 2.0;
};

void cmd_spray(const SprayArgs& a, const Globals& g) {
  const fs::path dir(a.heatmaps);
  const CsvTable t = read_csv(dir / "manifest.csv");
  const auto cs = t.column("scan_id"), cc = t.column("class"), co = t.column("outcome"), cw = t.column("warp");
  const Space space = parse_space(a.space);
  std::vector<Volume3D> vols;
  std::vector<SampleInfo> manifest;
  std::vector<DisplacementField> warps;
  for (const auto& row : t.rows) {
    vols.push_back(nifti::read(dir / (row[cs] + ".nii")));
    manifest.push_back({row[cs], parse_class(row[cc]), parse_outcome(row[co])});
    if (space == Space::Warped) {
      if (row[cw].empty()) throw DataError("scan " + row[cs] + " has no warp for warped clustering");
      warps.push_back(nifti::read_displacement(row[cw]));
    }
  }
  SprayConfig sc;
  sc.k_neighbors = a.k_neighbors;
  sc.k_max = a.k_max;
  sc.target_spacing = a.target_spacing;
  sc.seed = g.seed.value_or(0);
  const DataMatrix X = prepare_heatmaps(vols, manifest, space, sc.target_spacing, &warps);
  const SprayResult r = run_spray(X, sc);
  std::vector<Volume3D> space_vols;
  if (space == Space::Warped)
    for (std::size_t i = 0; i < vols.size(); ++i) space_vols.push_back(apply_displacement(vols[i], warps[i]));
  write_spray_outputs(r, X, space == Space::Warped ? space_vols : vols, a.out);
  log_line(g, "k = " + std::to_string(r.clusters.k) + " clusters over " + std::to_string(r.rows.size()) + " heatmaps");
}

// embed --------------------------------------------------------------------

struct EmbedArgs {
  std::string spray, out, init = "spectral";
  double perplexity = 15.0;
  int iterations = 1000;
};

void cmd_embed(const EmbedArgs& a, const Globals& g) {
  const SprayArtifacts s = read_spray_outputs(a.spray);
  TsneConfig cfg;
  cfg.perplexity = a.perplexity;
  cfg.iterations = a.iterations;
  cfg.seed = g.seed.value_or(0);
  if (a.init == "random") cfg.init = TsneInit::Random;
  else if (a.init != "spectral") throw ConfigError("--init must be spectral or random");
  const Embedding2D e = embed_spectrum(s.laplacian, s.eigen, cfg);
  fs::create_directories(a.out);
  export_scatter(e, s.manifest, s.clusters, fs::path(a.out) / "scatter.csv", fs::path(a.out) / "scatter.svg");
  log_line(g, "final KL " + format_real(e.kl_trace.empty() ? 0.0 : e.kl_trace.back()));
}

// run / report -------------------------------------------------------------

struct RunArgs {
  std::string config, out, base = "runs";
};

void cmd_run(const RunArgs& a, const Globals& g) {
  PipelineConfig cfg = load_pipeline_config(fs::path(a.config));
  if (g.seed) cfg.seed = *g.seed;
  const fs::path dir = a.out.empty() ? run_directory(cfg, a.base) : fs::path(a.out);
  log_line(g, "run directory " + dir.string());
  const RunResult r = run_experiment(cfg, dir, [&](const std::string& s) { log_line(g, s); });
  write_report(dir);
  char buf[128];
  std::snprintf(buf, sizeof buf, "done in %.1f s CPU, %.1f s wall", r.cpu_seconds, r.wall_seconds);
  log_line(g, buf);
  std::cout << dir.string() << std::endl;
}

void cmd_report(const std::string& run, const Globals& g) {
  const fs::path p = write_report(run);
  log_line(g, "wrote " + p.string());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Relevance-guided CNN study on synthetic R2* phantoms"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "Random seed");
  app.add_option("--threads", g.threads, "OpenMP threads (0: runtime default)")->check(CLI::NonNegativeNumber);
  app.add_flag("--deterministic", g.deterministic, "Single-threaded, reproducible execution");
  app.add_flag("-q,--quiet", g.quiet, "Suppress progress output");

  PhantomArgs pa;
  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic multi-echo cohort");
  phantom->add_option("--spec", pa.spec, "Config file with a [phantom] section");
  phantom->add_option("--n-per-class", pa.n_per_class, "Subjects per class")->check(CLI::Range(3, 100000));
  phantom->add_option("--out", pa.out, "Output directory")->required();

  FitArgs fa;
  auto* fit = app.add_subcommand("fit", "Fit R2* and S0 maps");
  fit->add_option("--echoes", fa.echoes, "Echo volumes (3D files in echo order, or one 4D file)")->required();
  fit->add_option("--te", fa.te, "Echo times in ms, comma separated")->required();
  fit->add_option("--mask", fa.mask, "Fit mask");
  fit->add_flag("--refine", fa.refine, "Levenberg-Marquardt refinement");
  fit->add_option("--out", fa.out, "Output directory")->required();

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train one variant on a phantom directory");
  trn->add_option("--config", ta.config, "Run config");
  trn->add_option("--variant", ta.variant, "A, B or C");
  trn->add_option("--data", ta.data, "Phantom directory")->required();
  trn->add_option("--repeat", ta.repeat, "Split repeat index")->check(CLI::NonNegativeNumber);
  trn->add_option("--out", ta.out, "Checkpoint directory")->required();

  HeatmapArgs ha;
  auto* hm = app.add_subcommand("heatmap", "LRP heatmaps for every scan");
  hm->add_option("--ckpt", ha.ckpt, "Checkpoint directory")->required();
  hm->add_option("--data", ha.data, "Phantom directory")->required();
  hm->add_option("--variant", ha.variant, "Override the checkpoint variant");
  hm->add_option("--target", ha.target, "predicted, true or ad");
  hm->add_option("--config", ha.config, "Run config (relevance and preprocessing)");
  hm->add_option("--out", ha.out, "Output directory")->required();

  SprayArgs sa;
  auto* spray = app.add_subcommand("spray", "Spectral relevance analysis");
  spray->add_option("--heatmaps", sa.heatmaps, "Heatmap directory with manifest.csv")->required();
  spray->add_option("--space", sa.space, "native or warped");
  spray->add_option("--k-neighbors", sa.k_neighbors, "k of the k-NN graph")->check(CLI::PositiveNumber);
  spray->add_option("--kmax", sa.k_max, "Largest cluster count considered")->check(CLI::Range(2, 1000));
  spray->add_option("--target-spacing", sa.target_spacing, "Downsampled spacing in mm")->check(CLI::PositiveNumber);
  spray->add_option("--out", sa.out, "Output directory")->required();

  EmbedArgs ea;
  auto* embed = app.add_subcommand("embed", "t-SNE of a spray result");
  embed->add_option("--spray", ea.spray, "Spray output directory")->required();
  embed->add_option("--perplexity", ea.perplexity, "Perplexity")->check(CLI::PositiveNumber);
  embed->add_option("--iterations", ea.iterations, "Iterations")->check(CLI::PositiveNumber);
  embed->add_option("--init", ea.init, "spectral or random");
  embed->add_option("--out", ea.out, "Output directory")->required();

  RunArgs ra;
  auto* run = app.add_subcommand("run", "Full A/B/C study");
  run->add_option("--config", ra.config, "Run config")->required();
  run->add_option("--out", ra.out, "Exact run directory");
  run->add_option("--base", ra.base, "Parent of the content-addressed run directory");

  std::string report_dir;
  auto* report = app.add_subcommand("report", "Markdown summary of a run directory");
  report->add_option("--run", report_dir, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  if (seed_opt->count() > 0) g.seed = seed_value;

  try {
    if (g.threads > 0) set_threads(g.threads);
    set_deterministic(g.deterministic);
    if (*phantom) cmd_phantom(pa, g);
    else if (*fit) cmd_fit(fa, g);
    else if (*trn) cmd_train(ta, g);
    else if (*hm) cmd_heatmap(ha, g);
    else if (*spray) cmd_spray(sa, g);
    else if (*embed) cmd_embed(ea, g);
    else if (*run) cmd_run(ra, g);
    else if (*report) cmd_report(report_dir, g);
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << std::endl;
    return 3;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << std::endl;
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << std::endl;
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}
