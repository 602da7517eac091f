#pragma once

#include <span>
#include <string>
#include <vector>

#include "relspray/network.hpp"
#include "relspray/volume.hpp"

namespace relspray {

enum class OutputInit { OneHotUnit, LogitValue };

/// Layer-wise relevance propagation with the alpha-beta rule. alpha = 1,
/// beta = 0 is the z+ rule used throughout. Bias terms only enter the
/// denominators (positive part for the alpha term), so relevance they would
/// carry is absorbed rather than passed down.
struct RelevanceConfig {
  double alpha = 1.0;
  double beta = 0.0;
  double epsilon = 1e-9;
  OutputInit output_init = OutputInit::OneHotUnit;

  void validate() const;
};

/// Redistribute the relevance at a linear layer's outputs onto its inputs.
/// Output units without any positive contribution pass on nothing.
template <class T>
std::vector<T> lrp_layer(const LinearLayer& layer, std::span<const T> x, std::span<const T> weights,
                         std::span<const T> biases, std::span<const T> relevance_out, const RelevanceConfig& cfg);

template <class T>
struct RelevanceResult {
  std::vector<T> input;                   // relevance on the network input
  std::vector<std::vector<T>> per_layer;  // per_layer[l]: relevance at inputs of linear layer l
  bool dead = false;                      // no relevance reached the input
};

/// Full propagation from the target logit down to the input. ReLU layers pass
/// relevance unchanged; flatten is a reshape.
template <class T>
RelevanceResult<T> propagate_relevance(const NetworkParams<T>& params, const ForwardCache<T>& cache, int target,
                                       const RelevanceConfig& cfg);

struct Heatmap {
  Volume3D relevance;
  std::string scan_id;
  std::string variant;
  int target_class = 0;
  bool dead = false;
};

/// Heatmap for `input` (the network input on its grid). target < 0 explains
/// the predicted class.
template <class T>
Heatmap lrp_heatmap(const NetworkParams<T>& params, const Volume3D& input, int target, const RelevanceConfig& cfg);

/// Fraction of positive relevance that falls outside the mask:
/// sum (1 - M) R+ / (sum R+ + eps).
double relevance_guided_loss(std::span<const double> relevance, std::span<const double> mask, double eps = 1e-9);

template <class T>
struct GuidedLossGradient {
  T loss = 0;
  /// Adjoints of each linear layer's input activation (index 0 unused).
  std::vector<std::vector<T>> injected;
  /// Extra adjoint on the logits (non-zero only for LogitValue init).
  std::vector<T> logits;
};

/// Reverse-mode derivative of the guided loss through the z+ propagation.
/// Adds scale * dL/dtheta for the direct parameter paths to `grads`; the
/// activation paths are returned (already scaled) for `backward` to finish.
template <class T>
GuidedLossGradient<T> guided_loss_gradient(const NetworkParams<T>& params, const ForwardCache<T>& cache, int target,
                                           std::span<const T> mask, const RelevanceConfig& cfg, T scale,
                                           NetworkParams<T>& grads);

}  // namespace relspray
