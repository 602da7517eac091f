#include "relspray/tsne.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <sstream>

#include "relspray/errors.hpp"

namespace relspray {

void TsneConfig::validate(std::size_t n) const {
  if (n < 5) throw DataError("t-SNE needs at least 5 points");
  if (!(perplexity > 1.0)) throw ConfigError("perplexity must exceed 1");
  if (!(perplexity < (static_cast<double>(n) - 1.0) / 3.0))
    throw ConfigError("perplexity " + format_real(perplexity) + " infeasible for " + std::to_string(n) +
                      " points (needs < (n-1)/3)");
  if (iterations < 1 || exaggeration_iterations < 0 || exaggeration_iterations > iterations)
    throw ConfigError("invalid t-SNE iteration budget");
  if (!(learning_rate > 0.0) || !(exaggeration >= 1.0)) throw ConfigError("invalid t-SNE step parameters");
  if (search_iterations < 1 || !(search_tol > 0.0)) throw ConfigError("invalid perplexity search settings");
}

std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v == 0.0 ? 0.0 : v);
  return buf;
}

Affinities tsne_affinities(std::span<const double> x, std::size_t n, std::size_t m, const TsneConfig& cfg) {
  cfg.validate(n);
  if (x.size() != n * m) throw DataError("t-SNE feature size mismatch");
  std::vector<double> d(n * n, 0.0);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        const double t = x[i * m + k] - x[j * m + k];
        s += t * t;
      }
      d[i * n + j] = s;
    }

  Affinities a;
  a.conditional.assign(n * n, 0.0);
  a.entropy_bits.assign(n, 0.0);
  a.beta.assign(n, 1.0);
  const double target = std::log2(cfg.perplexity);
  const double ln2 = std::log(2.0);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) dmin = std::min(dmin, d[i * n + j]);
    double* p = a.conditional.data() + i * n;
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    double h = 0.0;
    for (int it = 0; it < cfg.search_iterations; ++it) {
      double sum = 0.0, dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) {
          p[j] = 0.0;
          continue;
        }
        const double dj = d[i * n + j] - dmin;
        p[j] = std::exp(-beta * dj);
        sum += p[j];
        dot += dj * p[j];
      }
      h = (std::log(sum) + beta * dot / sum) / ln2;
      for (std::size_t j = 0; j < n; ++j) p[j] /= sum;
      const double diff = h - target;
      if (std::abs(diff) < cfg.search_tol) break;
      if (diff > 0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
    a.entropy_bits[i] = h;
    a.beta[i] = beta;
  }
  a.joint.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      a.joint[i * n + j] = (a.conditional[i * n + j] + a.conditional[j * n + i]) / (2.0 * static_cast<double>(n));
  return a;
}

std::vector<double> spectral_layout(const EigenDecomposition& eig) {
  const std::size_t n = eig.n;
  if (n < 3) throw DataError("spectral layout needs at least three eigenvectors");
  std::vector<double> y(n * 2);
  for (std::size_t i = 0; i < n; ++i) {
    y[i * 2] = eig.vectors[1 * n + i];
    y[i * 2 + 1] = eig.vectors[2 * n + i];
  }
  return y;
}

namespace {

struct Kernel {
  std::vector<double> num;  // 1 / (1 + |yi - yj|^2), zero diagonal
  double z = 0.0;
};

Kernel student_t(const std::vector<double>& y, std::size_t n) {
  Kernel k;
  k.num.assign(n * n, 0.0);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double dx = y[i * 2] - y[j * 2], dy = y[i * 2 + 1] - y[j * 2 + 1];
      k.num[i * n + j] = 1.0 / (1.0 + dx * dx + dy * dy);
    }
  for (double v : k.num) k.z += v;
  return k;
}

double kl_divergence(const std::vector<double>& p, const Kernel& k) {
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) kl += p[i] * std::log(p[i] / std::max(k.num[i] / k.z, 1e-300));
  return kl;
}

}  // namespace

Embedding2D tsne(std::span<const double> x, std::size_t n, std::size_t m, const TsneConfig& cfg,
                 const std::vector<double>* init) {
  const Affinities aff = tsne_affinities(x, n, m, cfg);
  const std::vector<double>& P = aff.joint;

  std::vector<double> y(n * 2);
  if (init) {
    if (init->size() != n * 2) throw DataError("t-SNE init must be n x 2");
    y = *init;
  } else {
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32), 0x75e3u};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> g(0.0, 1.0);
    for (auto& v : y) v = g(rng);
  }
  for (int a = 0; a < 2; ++a) {
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += y[i * 2 + a];
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) var += (y[i * 2 + a] - mean) * (y[i * 2 + a] - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) y[i * 2 + a] = sd > 0.0 ? (y[i * 2 + a] - mean) / sd * 1e-4 : 0.0;
  }

  Embedding2D out;
  std::vector<double> vel(n * 2, 0.0), gains(n * 2, 1.0), grad(n * 2);
  double lr = cfg.learning_rate;
  Kernel k = student_t(y, n);
  double kl = kl_divergence(P, k);

  for (int it = 0; it < cfg.iterations; ++it) {
    const bool exag = it < cfg.exaggeration_iterations;
    const double ex = exag ? cfg.exaggeration : 1.0;
    const double mom = exag ? cfg.momentum : cfg.final_momentum;
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < n; ++i) {
      double gx = 0.0, gy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const double nij = k.num[i * n + j];
        const double f = (ex * P[i * n + j] - nij / k.z) * nij;
        gx += f * (y[i * 2] - y[j * 2]);
        gy += f * (y[i * 2 + 1] - y[j * 2 + 1]);
      }
      grad[i * 2] = 4.0 * gx;
      grad[i * 2 + 1] = 4.0 * gy;
    }
    for (double g : grad)
      if (!std::isfinite(g)) throw NumericError("non-finite t-SNE gradient at iteration " + std::to_string(it));

    std::vector<double> ny(y), nvel(vel), ngains(gains);
    for (std::size_t t = 0; t < y.size(); ++t) {
      ngains[t] = (grad[t] > 0) != (vel[t] > 0) ? gains[t] + 0.2 : gains[t] * 0.8;
      ngains[t] = std::max(ngains[t], 0.01);
      nvel[t] = mom * vel[t] - lr * ngains[t] * grad[t];
      ny[t] = y[t] + nvel[t];
    }
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mx += ny[i * 2];
      my += ny[i * 2 + 1];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      ny[i * 2] -= mx;
      ny[i * 2 + 1] -= my;
    }
    Kernel nk = student_t(ny, n);
    const double nkl = kl_divergence(P, nk);
    if (!exag && nkl > kl) {
      ++out.rejected_steps;
      lr *= 0.5;
      std::fill(vel.begin(), vel.end(), 0.0);
      std::fill(gains.begin(), gains.end(), 1.0);
      out.kl_trace.push_back(kl);
      continue;
    }
    y.swap(ny);
    vel.swap(nvel);
    gains.swap(ngains);
    k = std::move(nk);
    kl = nkl;
    out.kl_trace.push_back(kl);
  }
  out.y = std::move(y);
  return out;
}

namespace {

std::string outcome_color(Outcome o) {
  switch (o) {
    case Outcome::TN: return "#1f77b4";
    case Outcome::FN: return "#ff7f0e";
    case Outcome::TP: return "#2ca02c";
    case Outcome::FP: return "#d62728";
  }
  return "#000000";
}

std::string marker(int cluster, double cx, double cy, const std::string& color) {
  std::ostringstream s;
  const double r = 4.0;
  switch (cluster % 4) {
    case 0:
      s << "<circle cx=\"" << format_real(cx) << "\" cy=\"" << format_real(cy) << "\" r=\"" << r << "\" fill=\"" << color
        << "\"/>";
      break;
    case 1:
      s << "<rect x=\"" << format_real(cx - r) << "\" y=\"" << format_real(cy - r) << "\" width=\"" << 2 * r
        << "\" height=\"" << 2 * r << "\" fill=\"" << color << "\"/>";
      break;
    case 2:
      s << "<polygon points=\"" << format_real(cx) << "," << format_real(cy - r) << " " << format_real(cx - r) << ","
        << format_real(cy + r) << " " << format_real(cx + r) << "," << format_real(cy + r) << "\" fill=\"" << color
        << "\"/>";
      break;
    default:
      s << "<polygon points=\"" << format_real(cx) << "," << format_real(cy - r) << " " << format_real(cx + r) << ","
        << format_real(cy) << " " << format_real(cx) << "," << format_real(cy + r) << " " << format_real(cx - r) << ","
        << format_real(cy) << "\" fill=\"" << color << "\"/>";
  }
  return s.str();
}

}  // namespace

void export_scatter(const Embedding2D& e, const std::vector<SampleInfo>& manifest, const std::vector<int>& clusters,
                    const std::filesystem::path& csv_path, const std::filesystem::path& svg_path,
                    const std::string& title) {
  const std::size_t n = manifest.size();
  if (e.y.size() != n * 2 || clusters.size() != n) throw DataError("scatter inputs differ in length");
  {
    std::ofstream os(csv_path);
    if (!os) throw DataError("cannot write " + csv_path.string());
    os << "scan_id,x,y,cluster,group,outcome\n";
    for (std::size_t i = 0; i < n; ++i)
      os << manifest[i].scan_id << ',' << format_real(e.y[i * 2]) << ',' << format_real(e.y[i * 2 + 1]) << ','
         << clusters[i] << ',' << (manifest[i].group == ClassLabel::AD ? "AD" : "NC") << ','
         << to_string(manifest[i].outcome) << '\n';
  }
  double x0 = 0, x1 = 0, y0 = 0, y1 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    x0 = i ? std::min(x0, e.y[i * 2]) : e.y[i * 2];
    x1 = i ? std::max(x1, e.y[i * 2]) : e.y[i * 2];
    y0 = i ? std::min(y0, e.y[i * 2 + 1]) : e.y[i * 2 + 1];
    y1 = i ? std::max(y1, e.y[i * 2 + 1]) : e.y[i * 2 + 1];
  }
  const double W = 480, H = 480, pad = 30, legend = 140;
  const double sx = x1 > x0 ? (W - 2 * pad) / (x1 - x0) : 1.0, sy = y1 > y0 ? (H - 2 * pad) / (y1 - y0) : 1.0;
  std::ofstream os(svg_path);
  if (!os) throw DataError("cannot write " + svg_path.string());
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W + legend << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!title.empty()) os << "<text x=\"" << pad << "\" y=\"18\" font-size=\"13\">" << title << "</text>\n";
  for (std::size_t i = 0; i < n; ++i) {
    const double cx = pad + (e.y[i * 2] - x0) * sx;
    const double cy = H - pad - (e.y[i * 2 + 1] - y0) * sy;
    os << marker(clusters[i], cx, cy, outcome_color(manifest[i].outcome)) << '\n';
  }
  double ly = 40;
  for (Outcome o : {Outcome::TN, Outcome::FN, Outcome::TP, Outcome::FP}) {
    os << "<circle cx=\"" << W + 10 << "\" cy=\"" << ly << "\" r=\"5\" fill=\"" << outcome_color(o) << "\"/>";
    os << "<text x=\"" << W + 22 << "\" y=\"" << ly + 4 << "\" font-size=\"12\">" << to_string(o) << "</text>\n";
    ly += 20;
  }
  int kmax = 0;
  for (int c : clusters) kmax = std::max(kmax, c + 1);
  ly += 10;
  for (int c = 0; c < kmax; ++c) {
    os << marker(c, W + 10, ly, "#555555");
    os << "<text x=\"" << W + 22 << "\" y=\"" << ly + 4 << "\" font-size=\"12\">cluster " << c << "</text>\n";
    ly += 20;
  }
  os << "</svg>\n";
}

}  // namespace relspray
