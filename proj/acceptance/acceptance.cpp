#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "relspray/network.hpp"
#include "relspray/nifti.hpp"
#include "relspray/relaxometry.hpp"
#include "relspray/relevance.hpp"
#include "relspray/spray.hpp"
#include "relspray/tsne.hpp"

using namespace relspray;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int sh(const std::string& cmd) {
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<double> fit_errors(const Phantom& ph, bool relative) {
  const R2StarMap fit = fit_r2star_map(ph.series, &ph.brain_mask);
  std::vector<double> e;
  for (std::size_t v = 0; v < fit.r2star.size(); ++v)
    if (ph.brain_mask.data[v] > 0.5) {
      const double d = std::abs(fit.r2star.data[v] - ph.truth.r2star.data[v]);
      e.push_back(relative ? d / ph.truth.r2star.data[v] : d);
    }
  return e;
}

Verdict r2star_fit() {
  Verdict o;
  PhantomSpec clean = PhantomSpec::standard();
  clean.noise_sigma = 0.0;
  const double noiseless = median(fit_errors(generate_phantom(clean, ClassLabel::AD, 1), true));
  o.pass = noiseless < 1e-6;

  PhantomSpec noisy = PhantomSpec::standard();
  noisy.noise_sigma = 0.02 * noisy.s0_value;
  double worst = 0;
  for (unsigned seed = 0; seed < 20; ++seed) {
    const Phantom ph = generate_phantom(noisy, seed % 2 ? ClassLabel::AD : ClassLabel::NC, 1000 + seed);
    worst = std::max(worst, median(fit_errors(ph, true)));
  }
  o.pass = o.pass && worst < 0.05;

  PhantomSpec big = PhantomSpec::standard();
  big.dims = {64, 64, 64};
  big.brain.radii = {22, 24, 20};
  for (auto& r : big.rois) {
    for (auto& c : r.center) c *= 2;
    for (auto& x : r.radii) x *= 2;
  }
  big.confound.center = {0, 28, 0};
  const Phantom ph = generate_phantom(big, ClassLabel::NC, 7);
  const auto t0 = std::chrono::steady_clock::now();
  const R2StarMap fit = fit_r2star_map(ph.series);
  const double secs = seconds_since(t0);
  o.pass = o.pass && secs < 10.0 && fit.r2star.size() == 64u * 64u * 64u;
  o.detail = "noiseless median rel err " + fmt("%.2e", noiseless) + ", 2% noise worst median rel err " +
             fmt("%.4f", worst) + " over 20 seeds, 64^3x6 fit " + fmt("%.2f", secs) + " s";
  return o;
}

Verdict gradient_check() {
  const auto t0 = std::chrono::steady_clock::now();
  ArchSpec arch;
  arch.input = {8, 8, 8};
  arch.blocks = 2;
  auto p = NetworkParams<double>::he_uniform(arch, 42, -0.01);
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> x(512);
  for (auto& v : x) v = u(rng);
  const int target = 1;
  auto loss = [&] { return cross_entropy<double>(forward<double>(p, x).probs, target); };
  const auto c = forward<double>(p, x);
  std::vector<double> gl(2);
  for (int k = 0; k < 2; ++k) gl[k] = c.probs[k] - (k == target ? 1.0 : 0.0);
  auto g = NetworkParams<double>::zeros(arch);
  backward<double>(p, c, gl, g);
  const double h = 1e-5;
  double worst = 0;
  std::size_t n = 0;
  auto probe = [&](double& param, double analytic) {
    const double v0 = param;
    param = v0 + h;
    const double lp = loss();
    param = v0 - h;
    const double lm = loss();
    param = v0;
    const double fd = (lp - lm) / (2 * h);
    worst = std::max(worst, std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-8}));
    ++n;
  };
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    for (std::size_t i = 0; i < p.weights[l].size(); ++i) probe(p.weights[l][i], g.weights[l][i]);
    for (std::size_t i = 0; i < p.biases[l].size(); ++i) probe(p.biases[l][i], g.biases[l][i]);
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0, "max rel err " + fmt("%.2e", worst) + " over " + std::to_string(n) +
                                           " parameters in " + fmt("%.1f", secs) + " s"};
}

Verdict lrp_conservation() {
  ArchSpec arch;
  arch.input = {16, 16, 16};
  double worst_free = 0, worst_neg = -1e300;
  for (unsigned seed = 1; seed <= 10; ++seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> x(arch.input.size());
    for (auto& v : x) v = u(rng);

    auto pos = NetworkParams<double>::he_uniform(arch, seed, 0.0);
    for (auto& w : pos.weights)
      for (auto& v : w) v = std::abs(v);
    const auto cp = forward<double>(pos, x);
    const auto rp = propagate_relevance<double>(pos, cp, cp.predicted(), {});
    worst_free = std::max(worst_free, std::abs(std::accumulate(rp.input.begin(), rp.input.end(), 0.0) - 1.0));

    auto neg = NetworkParams<double>::he_uniform(arch, seed + 100, -0.05);
    const auto cn = forward<double>(neg, x);
    for (int t = 0; t < 2; ++t) {
      const auto rn = propagate_relevance<double>(neg, cn, t, {});
      worst_neg = std::max(worst_neg, std::accumulate(rn.input.begin(), rn.input.end(), 0.0));
    }
  }
  return {worst_free < 1e-6 && worst_neg <= 1.0 + 1e-9,
          "bias-free positive max |sum R - 1| " + fmt("%.2e", worst_free) + ", negative-bias max sum R " +
              fmt("%.9f", worst_neg)};
}

Verdict parameter_total() {
  ArchSpec arch;
  arch.input = {176, 224, 256};
  const std::size_t n = parameter_count(arch);
  return {n == 327818, std::to_string(n) + " parameters"};
}

int count_components(const AffinityGraph& g) {
  std::vector<int> seen(g.n, 0);
  int comps = 0;
  for (std::size_t s = 0; s < g.n; ++s) {
    if (seen[s]) continue;
    ++comps;
    std::vector<std::size_t> stack{s};
    seen[s] = 1;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      for (std::size_t j = 0; j < g.n; ++j)
        if (!seen[j] && g.w[i * g.n + j] > 0) {
          seen[j] = 1;
          stack.push_back(j);
        }
    }
  }
  return comps;
}

Verdict laplacian_spectrum() {
  std::mt19937 rng(2024);
  int bad_range = 0, bad_mult = 0, multi = 0;
  double lo = 1e300, hi = -1e300;
  for (int t = 0; t < 50; ++t) {
    // Random weighted graph; vertices left isolated are attached to a random neighbour.
    std::uniform_int_distribution<int> nd(4, 30);
    const std::size_t n = nd(rng);
    std::uniform_real_distribution<double> u(0, 1);
    const double p = 0.6 / static_cast<double>(n) + 0.2 * u(rng) / std::sqrt(static_cast<double>(n));
    AffinityGraph g;
    g.n = n;
    g.w.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (u(rng) < p) g.w[i * n + j] = g.w[j * n + i] = 0.05 + u(rng);
    for (std::size_t i = 0; i < n; ++i) {
      double d = 0;
      for (std::size_t j = 0; j < n; ++j) d += g.w[i * n + j];
      if (d == 0) {
        std::uniform_int_distribution<std::size_t> pick(0, n - 2);
        std::size_t j = pick(rng);
        if (j >= i) ++j;
        g.w[i * n + j] = g.w[j * n + i] = 0.05 + u(rng);
      }
    }
    const auto sd = spectral_decompose(g);
    int zeros = 0;
    for (double v : sd.eigen.values) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      if (v < -1e-10 || v > 2.0 + 1e-10) ++bad_range;
      zeros += std::abs(v) < 1e-9;
    }
    const int comps = count_components(g);
    multi += comps > 1;
    if (zeros != comps) ++bad_mult;
  }
  AffinityGraph k3;
  k3.n = 3;
  k3.w = {0, 1, 1, 1, 0, 1, 1, 1, 0};
  const auto e = spectral_decompose(k3).eigen.values;
  const double k3err = std::max({std::abs(e[0]), std::abs(e[1] - 1.5), std::abs(e[2] - 1.5)});
  return {bad_range == 0 && bad_mult == 0 && k3err < 1e-10,
          "50 graphs: eigenvalues in [" + fmt("%.2e", lo) + ", " + fmt("%.6f", hi) + "], " + std::to_string(multi) +
              " disconnected, multiplicity mismatches " + std::to_string(bad_mult) + ", K3 max err " + fmt("%.1e", k3err)};
}

std::vector<double> blobs(const std::vector<std::vector<double>>& centers, int per, double sd, unsigned seed,
                          std::vector<int>& truth) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> n(0, sd);
  std::vector<double> x;
  truth.clear();
  for (int i = 0; i < per; ++i)
    for (std::size_t c = 0; c < centers.size(); ++c) {
      for (double v : centers[c]) x.push_back(v + n(rng));
      truth.push_back(static_cast<int>(c));
    }
  return x;
}

std::pair<int, double> spray_blobs(const std::vector<double>& x, std::size_t n, std::size_t d,
                                   const std::vector<int>& truth, std::uint64_t seed) {
  const AffinityGraph g = build_affinity(x, n, d, 10);
  const SpectralDecomposition sd = spectral_decompose(g);
  const int k = eigengap_select(sd.eigen.values, 10);
  const ClusterResult c = spectral_cluster(sd, k, seed);
  return {k, adjusted_rand_index(c.labels, truth)};
}

Verdict clustering() {
  std::vector<int> t;
  const auto two = blobs({{0, 0, 0}, {10, 10, 10}}, 15, 1.0, 1, t);
  const auto [k2, ari2] = spray_blobs(two, 30, 3, t, 1);
  double worst = 1.0;
  int k3_ok = 0;
  for (unsigned seed = 0; seed < 10; ++seed) {
    const auto three = blobs({{0, 0, 0, 0}, {8, 0, 0, 0}, {0, 8, 0, 0}}, 20, 1.0, 500 + seed, t);
    const auto [k3, ari3] = spray_blobs(three, 60, 4, t, seed);
    worst = std::min(worst, ari3);
    k3_ok += k3 == 3;
  }
  return {k2 == 2 && ari2 == 1.0 && worst >= 0.95,
          "two blobs k=" + std::to_string(k2) + " ARI " + fmt("%.3f", ari2) + ", three blobs min ARI " +
              fmt("%.3f", worst) + " over 10 seeds (k=3 in " + std::to_string(k3_ok) + ")"};
}

Verdict phantom_study(const fs::path& source) {
  const fs::path dir = fs::current_path() / "acceptance_study";
  const fs::path cfg = source / "configs" / "phantom_study.toml";
  fs::remove_all(dir);
  const int rc = sh(std::string(RELSPRAY_CLI) + " --deterministic -q run --config \"" + cfg.string() + "\" --out \"" +
                    dir.string() + "\" > \"" + (dir.string() + ".log") + "\" 2>&1");
  if (rc != 0) return {false, "run exited with " + std::to_string(rc) + ", see " + dir.string() + ".log"};
  const json s = json::parse(slurp(dir / "summary.json"));
  const json r = json::parse(slurp(dir / "run.json"));
  const double cpu = r.at("cpu_seconds").get<double>();
  const double accB = s.at("B").at("accuracy_mean"), accC = s.at("C").at("accuracy_mean");
  const double ariA = s.at("A").at("warped").at("ari_confound_mean");
  const double inA = s.at("A").at("in_mask_mean"), inC = s.at("C").at("in_mask_mean");
  const double ariC = s.at("C").at("warped").at("ari_group_mean");
  auto min_of = [&](const char* v, const char* key) {
    double m = 1e300;
    for (const auto& rep : s.at(v).at("repeats")) m = std::min(m, rep.at(key).get<double>());
    return m;
  };
  const bool a = accB >= 0.90 && accC >= 0.90;
  const bool b = ariA >= 0.8;
  const bool c = inC >= 0.9 && inC - inA >= 0.2;
  const bool d = ariC >= 0.6;
  const bool t = cpu < 45 * 60;
  auto mark = [](bool ok) { return ok ? "ok" : "FAIL"; };
  std::string detail = "(a) acc B " + fmt("%.3f", accB) + " C " + fmt("%.3f", accC) + " [min " +
                       fmt("%.3f", min_of("B", "accuracy")) + "/" + fmt("%.3f", min_of("C", "accuracy")) + "] " +
                       mark(a) + "; (b) A warped ARI confound " + fmt("%.3f", ariA) + " [min " +
                       fmt("%.3f", s.at("A").at("warped").at("ari_confound_min").get<double>()) + "] " + mark(b) +
                       "; (c) in-mask C " + fmt("%.3f", inC) + " A " + fmt("%.3f", inA) + " " + mark(c) +
                       "; (d) C warped ARI group " + fmt("%.3f", ariC) + " [min " +
                       fmt("%.3f", s.at("C").at("warped").at("ari_group_min").get<double>()) + "] " + mark(d) +
                       "; cpu " + fmt("%.0f", cpu) + " s " + mark(t);
  return {a && b && c && d && t, detail};
}

Verdict tsne_checks() {
  std::vector<int> truth;
  auto two = [&](unsigned seed) {
    std::mt19937 rng(seed);
    std::normal_distribution<double> n(0, 1);
    std::vector<double> x;
    truth.clear();
    for (int i = 0; i < 60; ++i) {
      for (int d = 0; d < 10; ++d) x.push_back(n(rng) + (i % 2 && d == 0 ? 8.0 : 0.0));
      truth.push_back(i % 2);
    }
    return x;
  };
  TsneConfig cfg;
  cfg.perplexity = 15;
  cfg.iterations = 1000;
  cfg.init = TsneInit::Random;
  double search = 0;
  for (double perp : {5.0, 15.0, 19.0}) {
    TsneConfig c = cfg;
    c.perplexity = perp;
    const auto a = tsne_affinities(two(1), 60, 10, c);
    for (double h : a.entropy_bits) search = std::max(search, std::abs(h - std::log2(perp)));
  }
  double min_sil = 1e300;
  int kl_violations = 0;
  for (unsigned seed = 0; seed < 5; ++seed) {
    cfg.seed = seed;
    const auto x = two(100 + seed);
    const Embedding2D e = tsne(x, 60, 10, cfg);
    min_sil = std::min(min_sil, silhouette(e.y, 60, 2, truth));
    for (std::size_t i = cfg.exaggeration_iterations + 1; i < e.kl_trace.size(); ++i)
      kl_violations += e.kl_trace[i] > e.kl_trace[i - 1];
  }
  return {search < 1e-5 && min_sil > 0.5 && kl_violations == 0,
          "perplexity search max |H - log2 perp| " + fmt("%.1e", search) + " bits, min silhouette " +
              fmt("%.3f", min_sil) + " over 5 seeds, KL increases " + std::to_string(kl_violations)};
}

Verdict determinism(const fs::path& source) {
  const fs::path base = fs::temp_directory_path() / "relspray_acceptance_determinism";
  fs::remove_all(base);
  fs::create_directories(base);
  const std::string cfg = (source / "configs" / "smoke.toml").string();
  for (const char* r : {"one", "two"}) {
    const int rc = sh(std::string(RELSPRAY_CLI) + " --deterministic -q run --config \"" + cfg + "\" --out \"" +
                      (base / r).string() + "\" > /dev/null 2>&1");
    if (rc != 0) return {false, std::string("run ") + r + " exited with " + std::to_string(rc)};
  }
  bool ok = true;
  std::string detail;
  for (const char* f : {"metrics.csv", "labels.csv"}) {
    const std::string a = slurp(base / "one" / f), b = slurp(base / "two" / f);
    const bool same = !a.empty() && a == b;
    ok = ok && same;
    detail += std::string(detail.empty() ? "" : ", ") + f + (same ? " identical" : " differs") + " (" +
              std::to_string(a.size()) + " bytes)";
  }
  return {ok, detail};
}

Verdict nifti_roundtrip() {
  const fs::path p = fs::temp_directory_path() / "relspray_acceptance.nii";
  Volume3D v(Grid::make({17, 19, 23}, {1.0, 0.9, 1.2}, {-8.0, -9.0, -13.0}));
  std::mt19937 rng(5);
  std::uniform_real_distribution<float> u(-1e3f, 1e3f);
  for (auto& x : v.data) x = static_cast<double>(u(rng));
  v.data[0] = static_cast<double>(std::numeric_limits<float>::denorm_min());
  v.data[1] = static_cast<double>(std::numeric_limits<float>::max());
  nifti::write(v, p);
  const Volume3D r = nifti::read(p);
  const bool exact = r.data.size() == v.data.size() &&
                     std::memcmp(r.data.data(), v.data.data(), v.data.size() * sizeof(double)) == 0;
  const std::string bytes = slurp(p);
  std::int32_t sizeof_hdr = 0;
  std::memcpy(&sizeof_hdr, bytes.data(), 4);
  const bool magic = bytes.size() > 348 && std::memcmp(bytes.data() + 344, "n+1\0", 4) == 0;
  return {exact && sizeof_hdr == 348 && magic,
          std::string("float32 roundtrip ") + (exact ? "bit-exact" : "differs") + ", sizeof_hdr " +
              std::to_string(sizeof_hdr) + ", magic " + (magic ? "n+1\\0" : "wrong")};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path source = RELSPRAY_SOURCE_DIR;
  const std::map<int, std::pair<std::string, std::function<Verdict()>>> criteria{
      {1, {"R2* fit", r2star_fit}},
      {2, {"gradient check", gradient_check}},
      {3, {"LRP conservation", lrp_conservation}},
      {4, {"parameter count", parameter_total}},
      {5, {"Laplacian spectrum", laplacian_spectrum}},
      {6, {"clustering", clustering}},
      {7, {"end-to-end phantom study", [&] { return phantom_study(source); }}},
      {8, {"t-SNE", tsne_checks}},
      {9, {"determinism", [&] { return determinism(source); }}},
      {10, {"NIfTI", nifti_roundtrip}},
  };
  std::vector<int> which;
  for (int i = 1; i < argc; ++i) which.push_back(std::atoi(argv[i]));
  if (which.empty())
    for (const auto& [k, _] : criteria) which.push_back(k);
  int failed = 0;
  for (int k : which) {
    const auto it = criteria.find(k);
    if (it == criteria.end()) {
      std::printf("FAIL %2d unknown criterion\n", k);
      ++failed;
      continue;
    }
    Verdict o;
    try {
      o = it->second.second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s %2d %s: %s\n", o.pass ? "PASS" : "FAIL", k, it->second.first.c_str(), o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
