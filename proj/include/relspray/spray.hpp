#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "relspray/relaxometry.hpp"
#include "relspray/volume.hpp"

namespace relspray {

enum class Space { Native, Warped };
std::string to_string(Space s);
Space parse_space(const std::string& s);

enum class Outcome { TP = 0, FP = 1, TN = 2, FN = 3 };
std::string to_string(Outcome o);
Outcome parse_outcome(const std::string& s);
/// AD is the positive class.
Outcome outcome_of(int label, int predicted);

struct SampleInfo {
  std::string scan_id;
  ClassLabel group = ClassLabel::NC;
  Outcome outcome = Outcome::TN;
};

/// Row-major n x m matrix of flattened, downsampled, L1-normalised heatmaps.
struct DataMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> x;
  std::vector<SampleInfo> manifest;
  std::vector<bool> zero_row;
  Space space = Space::Native;
  Grid grid;  // grid of one row reshaped

  std::span<const double> row(std::size_t i) const { return {x.data() + i * cols, cols}; }
};

/// Optional warp to the reference grid, then trilinear resampling to
/// `target_spacing`, flattening and L1 normalisation. Zero-sum rows are kept
/// but flagged.
DataMatrix prepare_heatmaps(const std::vector<Volume3D>& heatmaps, const std::vector<SampleInfo>& manifest, Space space,
                            double target_spacing = 2.0, const std::vector<DisplacementField>* warps = nullptr);

/// Rows not flagged as zero, with their original indices.
DataMatrix drop_zero_rows(const DataMatrix& m, std::vector<std::size_t>* kept = nullptr);

struct AffinityGraph {
  std::size_t n = 0;
  std::vector<double> w;  // dense n x n
  int k = 0;
  double sigma = 0.0;
  bool binary = false;  // sigma was 0: unit weights on k-NN edges
};

/// Euclidean k-NN graph, W_ij = exp(-d^2 / sigma^2) with sigma the median k-th
/// neighbour distance, symmetrised with max. Ties in distance go to the lower index.
AffinityGraph build_affinity(std::span<const double> x, std::size_t n, std::size_t m, int k = 10);
AffinityGraph build_affinity(const DataMatrix& X, int k = 10);

struct EigenDecomposition {
  std::size_t n = 0;
  std::vector<double> values;   // ascending
  std::vector<double> vectors;  // column j is the j-th eigenvector: vectors[j * n + i]
  int sweeps = 0;
};

/// Cyclic Jacobi for a dense symmetric matrix (row-major). Rotations are
/// applied in round-robin rounds of disjoint pairs, so the result does not
/// depend on the thread count.
EigenDecomposition jacobi_eigen(std::vector<double> a, std::size_t n, double tol = 1e-14, int max_sweeps = 100);

/// L_sym = I - D^-1/2 W D^-1/2. Throws DataError naming isolated vertices.
std::vector<double> normalized_laplacian(const AffinityGraph& g, const std::vector<std::string>* ids = nullptr);

struct SpectralDecomposition {
  std::vector<double> laplacian;
  EigenDecomposition eigen;
};

SpectralDecomposition spectral_decompose(const AffinityGraph& g, const std::vector<std::string>* ids = nullptr);

/// argmax over 2 <= i <= k_max of lambda_{i+1} - lambda_i (1-based), smallest i on ties.
/// k_max is clamped to n - 1.
int eigengap_select(std::span<const double> eigenvalues, int k_max = 10);

struct KMeansResult {
  std::vector<int> labels;
  std::vector<double> centers;  // k x d
  double inertia = 0.0;
  int restarts_used = 0;
};

/// k-means++ seeding, best of `restarts` Lloyd runs by inertia. Restarts that end
/// with an empty cluster are discarded.
KMeansResult kmeans(std::span<const double> x, std::size_t n, std::size_t d, int k, std::uint64_t seed,
                    int restarts = 50, int max_iter = 300, double tol = 1e-10);

using Composition = std::array<std::array<int, 4>, 2>;  // [group][outcome]

struct ClusterResult {
  int k = 0;
  std::vector<int> labels;
  double eigengap = 0.0;
  std::vector<Composition> composition;
};

/// Rows of the first k eigenvectors, L2-normalised, clustered by k-means.
/// Labels are renumbered by first appearance.
ClusterResult spectral_cluster(const SpectralDecomposition& d, int k, std::uint64_t seed,
                               const std::vector<SampleInfo>* manifest = nullptr);

std::vector<Composition> composition_table(const std::vector<int>& labels, int k,
                                           const std::vector<SampleInfo>& manifest);

struct ClusterMeans {
  std::vector<Volume3D> means;
  std::vector<Composition> composition;
};

ClusterMeans cluster_mean_heatmaps(const std::vector<Volume3D>& heatmaps, const std::vector<int>& labels, int k,
                                   const std::vector<SampleInfo>& manifest);

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

/// Mean silhouette with Euclidean distances; singleton clusters score 0.
double silhouette(std::span<const double> x, std::size_t n, std::size_t d, const std::vector<int>& labels);

struct SprayConfig {
  int k_neighbors = 10;
  int k_max = 10;
  double target_spacing = 2.0;
  std::uint64_t seed = 0;
};

struct SprayResult {
  AffinityGraph affinity;
  SpectralDecomposition spectrum;
  ClusterResult clusters;
  std::vector<std::size_t> rows;  // indices into the input matrix that were clustered
};

/// Affinity, spectrum, eigengap choice and clustering of the non-zero rows.
SprayResult run_spray(const DataMatrix& X, const SprayConfig& cfg);

}  // namespace relspray
