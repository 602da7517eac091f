#include "relspray/spray.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>

#include "relspray/errors.hpp"

namespace relspray {

std::string to_string(Space s) { return s == Space::Native ? "native" : "warped"; }

Space parse_space(const std::string& s) {
  if (s == "native") return Space::Native;
  if (s == "warped") return Space::Warped;
  throw ConfigError("unknown space '" + s + "' (expected native or warped)");
}

std::string to_string(Outcome o) {
  static const char* names[] = {"TP", "FP", "TN", "FN"};
  return names[static_cast<int>(o)];
}

Outcome parse_outcome(const std::string& s) {
  if (s == "TP") return Outcome::TP;
  if (s == "FP") return Outcome::FP;
  if (s == "TN") return Outcome::TN;
  if (s == "FN") return Outcome::FN;
  throw DataError("unknown outcome '" + s + "'");
}

Outcome outcome_of(int label, int predicted) {
  if (label == 1) return predicted == 1 ? Outcome::TP : Outcome::FN;
  return predicted == 1 ? Outcome::FP : Outcome::TN;
}

DataMatrix prepare_heatmaps(const std::vector<Volume3D>& heatmaps, const std::vector<SampleInfo>& manifest, Space space,
                            double target_spacing, const std::vector<DisplacementField>* warps) {
  if (heatmaps.empty()) throw DataError("no heatmaps to prepare");
  if (manifest.size() != heatmaps.size()) throw DataError("heatmap manifest length mismatch");
  if (space == Space::Warped && (!warps || warps->size() != heatmaps.size()))
    throw DataError("warped space needs one displacement field per heatmap");
  if (!(target_spacing > 0.0)) throw ConfigError("target spacing must be positive");

  DataMatrix m;
  m.rows = heatmaps.size();
  m.space = space;
  m.manifest = manifest;
  m.zero_row.assign(m.rows, false);
  for (std::size_t i = 0; i < m.rows; ++i) {
    Volume3D v = space == Space::Warped ? apply_displacement(heatmaps[i], (*warps)[i]) : heatmaps[i];
    const Grid coarse = downsampled_grid(v.grid, target_spacing);
    const Volume3D d = resample(v, coarse, AffineTransform::identity());
    if (i == 0) {
      m.grid = coarse;
      m.cols = d.size();
      m.x.assign(m.rows * m.cols, 0.0);
    } else if (!coarse.same_as(m.grid)) {
      throw DataError("heatmap " + manifest[i].scan_id + " is on an incompatible grid");
    }
    double l1 = 0.0;
    for (double val : d.data) l1 += std::abs(val);
    double* row = m.x.data() + i * m.cols;
    if (!(l1 > 0.0) || !std::isfinite(l1)) {
      m.zero_row[i] = true;
      continue;
    }
    for (std::size_t j = 0; j < m.cols; ++j) row[j] = d.data[j] / l1;
  }
  return m;
}

DataMatrix drop_zero_rows(const DataMatrix& m, std::vector<std::size_t>* kept) {
  DataMatrix out;
  out.cols = m.cols;
  out.space = m.space;
  out.grid = m.grid;
  if (kept) kept->clear();
  for (std::size_t i = 0; i < m.rows; ++i) {
    if (m.zero_row[i]) continue;
    out.x.insert(out.x.end(), m.x.begin() + i * m.cols, m.x.begin() + (i + 1) * m.cols);
    out.manifest.push_back(m.manifest[i]);
    out.zero_row.push_back(false);
    if (kept) kept->push_back(i);
    ++out.rows;
  }
  return out;
}

namespace {

std::vector<double> sq_distances(std::span<const double> x, std::size_t n, std::size_t m) {
  std::vector<double> d(n * n, 0.0);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double* a = x.data() + i * m;
      const double* b = x.data() + j * m;
      double s = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        const double t = a[k] - b[k];
        s += t * t;
      }
      d[i * n + j] = s;
      d[j * n + i] = s;
    }
  return d;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

AffinityGraph build_affinity(std::span<const double> x, std::size_t n, std::size_t m, int k) {
  if (k < 1) throw ConfigError("k_neighbors must be >= 1");
  if (n < static_cast<std::size_t>(k) + 1)
    throw DataError("affinity needs at least k+1 = " + std::to_string(k + 1) + " samples, got " + std::to_string(n));
  if (x.size() != n * m) throw DataError("affinity input size mismatch");
  const std::vector<double> d2 = sq_distances(x, n, m);

  std::vector<std::vector<std::size_t>> nbrs(n);
  std::vector<double> kth(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) idx.push_back(j);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return d2[i * n + a] < d2[i * n + b]; });
    idx.resize(k);
    kth[i] = std::sqrt(d2[i * n + idx.back()]);
    nbrs[i] = std::move(idx);
  }
  AffinityGraph g;
  g.n = n;
  g.k = k;
  g.sigma = median(kth);
  g.binary = !(g.sigma > 0.0);
  g.w.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j : nbrs[i]) {
      const double w = g.binary ? 1.0 : std::exp(-d2[i * n + j] / (g.sigma * g.sigma));
      g.w[i * n + j] = std::max(g.w[i * n + j], w);
      g.w[j * n + i] = std::max(g.w[j * n + i], w);
    }
  return g;
}

AffinityGraph build_affinity(const DataMatrix& X, int k) { return build_affinity(X.x, X.rows, X.cols, k); }

EigenDecomposition jacobi_eigen(std::vector<double> a, std::size_t n, double tol, int max_sweeps) {
  if (a.size() != n * n) throw DataError("eigensolver input is not n x n");
  EigenDecomposition out;
  out.n = n;
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;

  double scale = 0.0;
  for (double x : a) scale += x * x;
  scale = std::sqrt(scale);

  // Round-robin schedule over an even number of slots; slot n (if any) is a dummy.
  const std::size_t m = n + (n % 2);
  std::vector<std::size_t> slots(m);
  std::iota(slots.begin(), slots.end(), 0);
  struct Rot {
    std::size_t p, q;
    double c, s;
  };
  std::vector<Rot> rots;

  for (int sweep = 0; sweep < max_sweeps && n > 1; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) off += a[i * n + j] * a[i * n + j];
    if (std::sqrt(off) <= tol * std::max(scale, 1e-300)) break;
    out.sweeps = sweep + 1;

    for (std::size_t round = 0; round + 1 < m; ++round) {
      rots.clear();
      for (std::size_t t = 0; t < m / 2; ++t) {
        std::size_t p = slots[t], q = slots[m - 1 - t];
        if (p >= n || q >= n) continue;
        if (p > q) std::swap(p, q);
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t_ = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t_ * t_ + 1.0);
        rots.push_back({p, q, c, t_ * c});
      }
      const long nr = static_cast<long>(rots.size());
      // Rows: A <- J^T A.
#pragma omp parallel for schedule(static) if (n > 64)
      for (long r = 0; r < nr; ++r) {
        const auto [p, q, c, s] = rots[r];
        double* rp = a.data() + p * n;
        double* rq = a.data() + q * n;
        for (std::size_t j = 0; j < n; ++j) {
          const double x = rp[j], y = rq[j];
          rp[j] = c * x - s * y;
          rq[j] = s * x + c * y;
        }
      }
      // Columns: A <- A J, V <- V J (V stored with eigenvectors as rows of v^T).
#pragma omp parallel for schedule(static) if (n > 64)
      for (long r = 0; r < nr; ++r) {
        const auto [p, q, c, s] = rots[r];
        for (std::size_t i = 0; i < n; ++i) {
          const double x = a[i * n + p], y = a[i * n + q];
          a[i * n + p] = c * x - s * y;
          a[i * n + q] = s * x + c * y;
        }
        double* vp = v.data() + p * n;
        double* vq = v.data() + q * n;
        for (std::size_t i = 0; i < n; ++i) {
          const double x = vp[i], y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
      std::rotate(slots.begin() + 1, slots.end() - 1, slots.end());
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a[x * n + x] < a[y * n + y]; });
  out.values.resize(n);
  out.vectors.resize(n * n);
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = a[order[j] * n + order[j]];
    std::copy(v.begin() + order[j] * n, v.begin() + (order[j] + 1) * n, out.vectors.begin() + j * n);
  }
  return out;
}

std::vector<double> normalized_laplacian(const AffinityGraph& g, const std::vector<std::string>* ids) {
  const std::size_t n = g.n;
  std::vector<double> deg(n, 0.0);
  std::string isolated;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) deg[i] += g.w[i * n + j];
    if (!(deg[i] > 0.0)) {
      if (!isolated.empty()) isolated += ", ";
      isolated += ids && i < ids->size() ? (*ids)[i] : std::to_string(i);
    }
  }
  if (!isolated.empty()) throw DataError("isolated vertices in affinity graph: " + isolated);
  std::vector<double> L(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      L[i * n + j] = (i == j ? 1.0 : 0.0) - g.w[i * n + j] / std::sqrt(deg[i] * deg[j]);
  return L;
}

SpectralDecomposition spectral_decompose(const AffinityGraph& g, const std::vector<std::string>* ids) {
  SpectralDecomposition d;
  d.laplacian = normalized_laplacian(g, ids);
  d.eigen = jacobi_eigen(d.laplacian, g.n);
  return d;
}

int eigengap_select(std::span<const double> ev, int k_max) {
  const int n = static_cast<int>(ev.size());
  if (n < 2) throw DataError("eigengap needs at least two eigenvalues");
  k_max = std::min(k_max, n - 1);
  int best = 2;
  double gap = -std::numeric_limits<double>::infinity();
  for (int i = 2; i <= k_max; ++i) {
    const double g = ev[i] - ev[i - 1];
    if (g > gap) {
      gap = g;
      best = i;
    }
  }
  return std::min(best, n);
}

namespace {

double sqdist(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

}  // namespace

KMeansResult kmeans(std::span<const double> x, std::size_t n, std::size_t d, int k, std::uint64_t seed, int restarts,
                    int max_iter, double tol) {
  if (k < 1 || static_cast<std::size_t>(k) > n) throw DataError("k-means needs 1 <= k <= n");
  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int r = 0; r < restarts; ++r) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(r), 0x6b6du};
    std::mt19937_64 rng(seq);
    std::vector<double> c(static_cast<std::size_t>(k) * d);
    std::vector<double> dmin(n, std::numeric_limits<double>::infinity());
    std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    std::copy_n(x.data() + first * d, d, c.begin());
    for (int j = 1; j < k; ++j) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        dmin[i] = std::min(dmin[i], sqdist(x.data() + i * d, c.data() + (j - 1) * d, d));
        total += dmin[i];
      }
      std::size_t pick = 0;
      if (total > 0.0) {
        double u = std::uniform_real_distribution<double>(0.0, total)(rng);
        for (pick = 0; pick + 1 < n; ++pick) {
          u -= dmin[pick];
          if (u < 0.0) break;
        }
      } else {
        pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
      }
      std::copy_n(x.data() + pick * d, d, c.begin() + j * d);
    }

    std::vector<int> lab(n, -1);
    bool empty = false;
    double inertia = 0.0;
    for (int it = 0; it < max_iter; ++it) {
      bool changed = false;
      inertia = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        int bj = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (int j = 0; j < k; ++j) {
          const double dd = sqdist(x.data() + i * d, c.data() + j * d, d);
          if (dd < bd) {
            bd = dd;
            bj = j;
          }
        }
        changed = changed || lab[i] != bj;
        lab[i] = bj;
        inertia += bd;
      }
      std::vector<double> nc(c.size(), 0.0);
      std::vector<int> cnt(k, 0);
      for (std::size_t i = 0; i < n; ++i) {
        ++cnt[lab[i]];
        for (std::size_t t = 0; t < d; ++t) nc[lab[i] * d + t] += x[i * d + t];
      }
      empty = std::find(cnt.begin(), cnt.end(), 0) != cnt.end();
      if (empty) break;
      double shift = 0.0;
      for (int j = 0; j < k; ++j) {
        for (std::size_t t = 0; t < d; ++t) nc[j * d + t] /= cnt[j];
        shift = std::max(shift, sqdist(nc.data() + j * d, c.data() + j * d, d));
      }
      c.swap(nc);
      if (!changed || shift <= tol) break;
    }
    if (empty) continue;
    // Final inertia against the final centres.
    inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) inertia += sqdist(x.data() + i * d, c.data() + lab[i] * d, d);
    ++best.restarts_used;
    if (inertia < best.inertia) {
      best.inertia = inertia;
      best.labels = lab;
      best.centers = c;
    }
  }
  if (best.labels.empty()) throw NumericError("k-means produced an empty cluster in every restart");
  return best;
}

std::vector<Composition> composition_table(const std::vector<int>& labels, int k,
                                           const std::vector<SampleInfo>& manifest) {
  if (labels.size() != manifest.size()) throw DataError("labels and manifest differ in length");
  std::vector<Composition> comp(k, Composition{});
  for (std::size_t i = 0; i < labels.size(); ++i)
    ++comp[labels[i]][static_cast<int>(manifest[i].group)][static_cast<int>(manifest[i].outcome)];
  return comp;
}

ClusterResult spectral_cluster(const SpectralDecomposition& dec, int k, std::uint64_t seed,
                               const std::vector<SampleInfo>* manifest) {
  const std::size_t n = dec.eigen.n;
  if (k < 2) throw ConfigError("spectral clustering needs k >= 2");
  if (static_cast<std::size_t>(k) > n) throw DataError("more clusters than samples");
  std::vector<double> u(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (int j = 0; j < k; ++j) {
      u[i * k + j] = dec.eigen.vectors[j * n + i];
      norm += u[i * k + j] * u[i * k + j];
    }
    norm = std::sqrt(norm);
    if (norm > 0.0)
      for (int j = 0; j < k; ++j) u[i * k + j] /= norm;
  }
  const KMeansResult km = kmeans(u, n, k, k, seed);
  ClusterResult res;
  res.k = k;
  std::map<int, int> rename;
  for (int l : km.labels) {
    auto it = rename.find(l);
    if (it == rename.end()) it = rename.emplace(l, static_cast<int>(rename.size())).first;
    res.labels.push_back(it->second);
  }
  const auto& ev = dec.eigen.values;
  if (static_cast<std::size_t>(k) < ev.size()) res.eigengap = ev[k] - ev[k - 1];
  if (manifest) res.composition = composition_table(res.labels, k, *manifest);
  return res;
}

ClusterMeans cluster_mean_heatmaps(const std::vector<Volume3D>& heatmaps, const std::vector<int>& labels, int k,
                                   const std::vector<SampleInfo>& manifest) {
  if (heatmaps.size() != labels.size()) throw DataError("labels do not align with heatmaps");
  if (heatmaps.empty()) throw DataError("no heatmaps");
  ClusterMeans out;
  std::vector<int> count(k, 0);
  for (int j = 0; j < k; ++j) out.means.emplace_back(heatmaps.front().grid);
  for (std::size_t i = 0; i < heatmaps.size(); ++i) {
    if (!heatmaps[i].grid.same_as(heatmaps.front().grid)) throw DataError("heatmap grids differ");
    const int l = labels[i];
    if (l < 0 || l >= k) throw DataError("cluster label out of range");
    ++count[l];
    auto& m = out.means[l].data;
    for (std::size_t v = 0; v < m.size(); ++v) m[v] += heatmaps[i].data[v];
  }
  for (int j = 0; j < k; ++j)
    if (count[j] > 0)
      for (double& v : out.means[j].data) v /= count[j];
  out.composition = composition_table(labels, k, manifest);
  return out;
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw DataError("partitions differ in length");
  const std::size_t n = a.size();
  if (n < 2) return 1.0;
  std::map<std::pair<int, int>, long> cont;
  std::map<int, long> ra, rb;
  for (std::size_t i = 0; i < n; ++i) {
    ++cont[{a[i], b[i]}];
    ++ra[a[i]];
    ++rb[b[i]];
  }
  auto c2 = [](double x) { return x * (x - 1.0) / 2.0; };
  double index = 0.0, sa = 0.0, sb = 0.0;
  for (const auto& [_, v] : cont) index += c2(static_cast<double>(v));
  for (const auto& [_, v] : ra) sa += c2(static_cast<double>(v));
  for (const auto& [_, v] : rb) sb += c2(static_cast<double>(v));
  const double expected = sa * sb / c2(static_cast<double>(n));
  const double maxi = 0.5 * (sa + sb);
  if (maxi == expected) return 1.0;
  return (index - expected) / (maxi - expected);
}

double silhouette(std::span<const double> x, std::size_t n, std::size_t d, const std::vector<int>& labels) {
  if (labels.size() != n) throw DataError("labels do not match points");
  std::map<int, std::size_t> size;
  for (int l : labels) ++size[l];
  if (size.size() < 2) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::map<int, double> sum;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) sum[labels[j]] += std::sqrt(sqdist(x.data() + i * d, x.data() + j * d, d));
    const std::size_t own = size[labels[i]];
    if (own < 2) continue;
    const double a = sum[labels[i]] / static_cast<double>(own - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [l, s] : size)
      if (l != labels[i]) b = std::min(b, sum[l] / static_cast<double>(s));
    total += (b - a) / std::max(a, b);
  }
  return total / static_cast<double>(n);
}

SprayResult run_spray(const DataMatrix& X, const SprayConfig& cfg) {
  SprayResult r;
  const DataMatrix kept = drop_zero_rows(X, &r.rows);
  std::vector<std::string> ids;
  for (const auto& s : kept.manifest) ids.push_back(s.scan_id);
  r.affinity = build_affinity(kept, cfg.k_neighbors);
  r.spectrum = spectral_decompose(r.affinity, &ids);
  const int k = eigengap_select(r.spectrum.eigen.values, cfg.k_max);
  r.clusters = spectral_cluster(r.spectrum, k, cfg.seed, &kept.manifest);
  return r;
}

}  // namespace relspray
