#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "relspray/kernels.hpp"

namespace relspray {

enum class LayerKind { Conv3, DownConv3, Dense, ReLU, Flatten, Softmax };

std::string to_string(LayerKind k);

/// One entry of the full layer list, including parameter-free layers.
struct LayerSpec {
  LayerKind kind;
  int in_channels = 0, out_channels = 0;  // channels, or units for Dense
  Shape3 in_dims, out_dims;               // spatial extent (1x1x1 after flatten)
  int stride = 1;
};

/// blocks x (conv3 + relu + strided conv3 + relu), flatten, dense + relu, dense, softmax.
struct ArchSpec {
  Shape3 input{32, 32, 32};
  int in_channels = 1;
  int blocks = 4;
  int channels = 8;
  int hidden = 16;
  int classes = 2;

  void validate() const;
  bool operator==(const ArchSpec&) const = default;
};

std::vector<LayerSpec> describe(const ArchSpec& arch);

/// A parameterised layer: convolution (either stride) or dense.
struct LinearLayer {
  LayerKind kind = LayerKind::Dense;
  ConvGeometry conv;  // valid for convolutions
  int in_units = 0, out_units = 0;
  bool relu_after = true;

  bool is_conv() const { return kind != LayerKind::Dense; }
  std::size_t in_size() const { return is_conv() ? conv.in_size() : static_cast<std::size_t>(in_units); }
  std::size_t out_size() const { return is_conv() ? conv.out_size() : static_cast<std::size_t>(out_units); }
  std::size_t weight_count() const {
    return is_conv() ? conv.weight_count() : static_cast<std::size_t>(in_units) * out_units;
  }
  std::size_t bias_count() const { return is_conv() ? static_cast<std::size_t>(conv.out_ch) : out_units; }
  std::size_t fan_in() const { return is_conv() ? static_cast<std::size_t>(conv.in_ch) * 27 : in_units; }
};

std::vector<LinearLayer> linear_layers(const ArchSpec& arch);
std::size_t parameter_count(const ArchSpec& arch);

// Bias-free linear maps of a layer, shared by training and relevance propagation.
template <class T>
void layer_apply(const LinearLayer& l, const T* x, const T* w, T* y);
template <class T>
void layer_transpose(const LinearLayer& l, const T* gy, const T* w, T* gx);
template <class T>
void layer_weight_grad(const LinearLayer& l, const T* x, const T* gy, T* gw);

template <class T>
struct NetworkParams {
  ArchSpec arch;
  std::vector<LinearLayer> layers;
  std::vector<std::vector<T>> weights, biases;

  static NetworkParams zeros(const ArchSpec& arch);
  /// He-uniform weights (limit sqrt(6 / fan_in)), constant bias.
  static NetworkParams he_uniform(const ArchSpec& arch, std::uint64_t seed, double bias_init = -0.01);

  std::size_t count() const;
  void fill(T v);
  void add_scaled(const NetworkParams& other, T scale);
  T max_bias() const;
  bool all_finite() const;

  template <class U>
  NetworkParams<U> cast() const {
    NetworkParams<U> out;
    out.arch = arch;
    out.layers = layers;
    for (const auto& w : weights) out.weights.emplace_back(w.begin(), w.end());
    for (const auto& b : biases) out.biases.emplace_back(b.begin(), b.end());
    return out;
  }
};

/// Per-layer activations retained for backprop and relevance propagation.
/// inputs[l] is the input of linear layer l; pre[l] its pre-activation.
template <class T>
struct ForwardCache {
  std::vector<std::vector<T>> inputs, pre;
  std::vector<T> logits, probs;
  int predicted() const;
};

/// Throws NumericError naming the layer on non-finite activations.
template <class T>
ForwardCache<T> forward(const NetworkParams<T>& p, std::span<const T> input);

template <class T>
std::vector<T> softmax(std::span<const T> logits);

/// -log p[target]
template <class T>
T cross_entropy(std::span<const T> probs, int target);

/// Accumulates gradients into `grads`, seeded with dL/dlogits. `injected`, when
/// given, holds extra adjoints for each layer's input activation (index l is
/// the input of layer l, entry 0 is ignored) that are added before the ReLU
/// derivative of the layer below.
template <class T>
void backward(const NetworkParams<T>& p, const ForwardCache<T>& cache, std::span<const T> grad_logits,
              NetworkParams<T>& grads, const std::vector<std::vector<T>>* injected = nullptr);

}  // namespace relspray
