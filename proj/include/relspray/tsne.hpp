#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "relspray/spray.hpp"

namespace relspray {

enum class TsneInit { Spectral, Random };

struct TsneConfig {
  double perplexity = 15.0;
  int iterations = 1000;
  double exaggeration = 12.0;
  int exaggeration_iterations = 250;
  double learning_rate = 200.0;
  double momentum = 0.5, final_momentum = 0.8;
  int search_iterations = 50;
  double search_tol = 1e-5;
  std::uint64_t seed = 0;
  TsneInit init = TsneInit::Spectral;

  void validate(std::size_t n) const;
};

struct Affinities {
  std::vector<double> conditional;  // row-stochastic P(j | i)
  std::vector<double> joint;        // symmetric, sums to 1
  std::vector<double> entropy_bits; // achieved log2-perplexity per row
  std::vector<double> beta;         // precision per row
};

/// Per-row binary search on the Gaussian precision so that each row's entropy
/// (bits) matches log2(perplexity).
Affinities tsne_affinities(std::span<const double> x, std::size_t n, std::size_t m, const TsneConfig& cfg);

struct Embedding2D {
  std::vector<double> y;         // n x 2
  std::vector<double> kl_trace;  // KL(P || Q) per iteration, unexaggerated P
  int rejected_steps = 0;
};

/// Eigenvectors 2 and 3 (ascending eigenvalue order) as an n x 2 layout.
std::vector<double> spectral_layout(const EigenDecomposition& eig);

/// Exact-gradient t-SNE. `init` (n x 2) is rescaled to standard deviation 1e-4
/// per axis; without it the layout is drawn from N(0, 1e-4^2). After the
/// exaggeration phase a step that raises the KL divergence is discarded, the
/// learning rate is halved and the velocity cleared.
Embedding2D tsne(std::span<const double> x, std::size_t n, std::size_t m, const TsneConfig& cfg,
                 const std::vector<double>* init = nullptr);

/// scatter.csv (scan_id,x,y,cluster,group,outcome) and scatter.svg.
void export_scatter(const Embedding2D& e, const std::vector<SampleInfo>& manifest, const std::vector<int>& clusters,
                    const std::filesystem::path& csv_path, const std::filesystem::path& svg_path,
                    const std::string& title = "");

/// "%.9g"
std::string format_real(double v);

}  // namespace relspray
