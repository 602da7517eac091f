#include "relspray/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "relspray/errors.hpp"

namespace relspray {

std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Conv3: return "conv3";
    case LayerKind::DownConv3: return "downconv3";
    case LayerKind::Dense: return "dense";
    case LayerKind::ReLU: return "relu";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Softmax: return "softmax";
  }
  return "?";
}

void ArchSpec::validate() const {
  if (input.x < 1 || input.y < 1 || input.z < 1) throw ConfigError("network input dims must be positive");
  if (in_channels < 1 || blocks < 1 || channels < 1 || hidden < 1 || classes < 2)
    throw ConfigError("invalid network architecture");
}

std::vector<LayerSpec> describe(const ArchSpec& arch) {
  arch.validate();
  std::vector<LayerSpec> out;
  Shape3 dims = arch.input;
  int ch = arch.in_channels;
  for (int b = 0; b < arch.blocks; ++b) {
    const auto c1 = ConvGeometry::same(ch, arch.channels, dims, 1);
    out.push_back({LayerKind::Conv3, ch, arch.channels, dims, c1.out, 1});
    out.push_back({LayerKind::ReLU, arch.channels, arch.channels, c1.out, c1.out, 1});
    const auto c2 = ConvGeometry::same(arch.channels, arch.channels, c1.out, 2);
    out.push_back({LayerKind::DownConv3, arch.channels, arch.channels, c1.out, c2.out, 2});
    out.push_back({LayerKind::ReLU, arch.channels, arch.channels, c2.out, c2.out, 1});
    dims = c2.out;
    ch = arch.channels;
  }
  const int flat = static_cast<int>(dims.size()) * ch;
  out.push_back({LayerKind::Flatten, ch, flat, dims, {1, 1, 1}, 1});
  out.push_back({LayerKind::Dense, flat, arch.hidden, {1, 1, 1}, {1, 1, 1}, 1});
  out.push_back({LayerKind::ReLU, arch.hidden, arch.hidden, {1, 1, 1}, {1, 1, 1}, 1});
  out.push_back({LayerKind::Dense, arch.hidden, arch.classes, {1, 1, 1}, {1, 1, 1}, 1});
  out.push_back({LayerKind::Softmax, arch.classes, arch.classes, {1, 1, 1}, {1, 1, 1}, 1});
  return out;
}

std::vector<LinearLayer> linear_layers(const ArchSpec& arch) {
  std::vector<LinearLayer> out;
  for (const auto& s : describe(arch)) {
    LinearLayer l;
    switch (s.kind) {
      case LayerKind::Conv3:
      case LayerKind::DownConv3:
        l.kind = s.kind;
        l.conv = ConvGeometry::same(s.in_channels, s.out_channels, s.in_dims, s.stride);
        out.push_back(l);
        break;
      case LayerKind::Dense:
        l.kind = LayerKind::Dense;
        l.in_units = s.in_channels;
        l.out_units = s.out_channels;
        out.push_back(l);
        break;
      default: break;
    }
  }
  out.back().relu_after = false;
  return out;
}

std::size_t parameter_count(const ArchSpec& arch) {
  std::size_t n = 0;
  for (const auto& l : linear_layers(arch)) n += l.weight_count() + l.bias_count();
  return n;
}

template <class T>
void layer_apply(const LinearLayer& l, const T* x, const T* w, T* y) {
  if (l.is_conv()) conv3d_forward<T>(l.conv, x, w, nullptr, y);
  else dense_forward<T>(l.in_units, l.out_units, x, w, nullptr, y);
}

template <class T>
void layer_transpose(const LinearLayer& l, const T* gy, const T* w, T* gx) {
  if (l.is_conv()) conv3d_backward_data<T>(l.conv, gy, w, gx);
  else dense_backward_data<T>(l.in_units, l.out_units, gy, w, gx);
}

template <class T>
void layer_weight_grad(const LinearLayer& l, const T* x, const T* gy, T* gw) {
  if (l.is_conv()) conv3d_backward_weights<T>(l.conv, x, gy, gw, nullptr);
  else dense_backward_weights<T>(l.in_units, l.out_units, x, gy, gw, nullptr);
}

namespace {

template <class T>
void bias_grad(const LinearLayer& l, const T* gy, T* gb) {
  if (!l.is_conv()) {
    for (int o = 0; o < l.out_units; ++o) gb[o] += gy[o];
    return;
  }
  const std::size_t plane = l.conv.out.size();
  for (int c = 0; c < l.conv.out_ch; ++c) {
    T acc = 0;
    const T* p = gy + c * plane;
    for (std::size_t i = 0; i < plane; ++i) acc += p[i];
    gb[c] += acc;
  }
}

template <class T>
void add_bias(const LinearLayer& l, const T* b, T* y) {
  if (!l.is_conv()) {
    for (int o = 0; o < l.out_units; ++o) y[o] += b[o];
    return;
  }
  const std::size_t plane = l.conv.out.size();
  for (int c = 0; c < l.conv.out_ch; ++c) {
    T* p = y + c * plane;
    for (std::size_t i = 0; i < plane; ++i) p[i] += b[c];
  }
}

}  // namespace

template <class T>
NetworkParams<T> NetworkParams<T>::zeros(const ArchSpec& arch) {
  NetworkParams p;
  p.arch = arch;
  p.layers = linear_layers(arch);
  for (const auto& l : p.layers) {
    p.weights.emplace_back(l.weight_count(), T(0));
    p.biases.emplace_back(l.bias_count(), T(0));
  }
  return p;
}

template <class T>
NetworkParams<T> NetworkParams<T>::he_uniform(const ArchSpec& arch, std::uint64_t seed, double bias_init) {
  NetworkParams p = zeros(arch);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x1417u};
  std::mt19937_64 rng(seq);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const double limit = std::sqrt(6.0 / static_cast<double>(p.layers[i].fan_in()));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (auto& w : p.weights[i]) w = static_cast<T>(dist(rng));
    std::fill(p.biases[i].begin(), p.biases[i].end(), static_cast<T>(bias_init));
  }
  return p;
}

template <class T>
std::size_t NetworkParams<T>::count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) n += weights[i].size() + biases[i].size();
  return n;
}

template <class T>
void NetworkParams<T>::fill(T v) {
  for (auto& w : weights) std::fill(w.begin(), w.end(), v);
  for (auto& b : biases) std::fill(b.begin(), b.end(), v);
}

template <class T>
void NetworkParams<T>::add_scaled(const NetworkParams& o, T scale) {
  for (std::size_t i = 0; i < weights.size(); ++i) {
    for (std::size_t k = 0; k < weights[i].size(); ++k) weights[i][k] += scale * o.weights[i][k];
    for (std::size_t k = 0; k < biases[i].size(); ++k) biases[i][k] += scale * o.biases[i][k];
  }
}

template <class T>
T NetworkParams<T>::max_bias() const {
  T m = -std::numeric_limits<T>::infinity();
  for (const auto& b : biases)
    for (T v : b) m = std::max(m, v);
  return m;
}

template <class T>
bool NetworkParams<T>::all_finite() const {
  for (const auto& w : weights)
    for (T v : w)
      if (!std::isfinite(v)) return false;
  for (const auto& b : biases)
    for (T v : b)
      if (!std::isfinite(v)) return false;
  return true;
}

template <class T>
int ForwardCache<T>::predicted() const {
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

template <class T>
std::vector<T> softmax(std::span<const T> logits) {
  const T m = *std::max_element(logits.begin(), logits.end());
  std::vector<T> p(logits.size());
  T s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    s += p[i];
  }
  for (auto& v : p) v /= s;
  return p;
}

template <class T>
T cross_entropy(std::span<const T> probs, int target) {
  return -std::log(std::max(probs[target], std::numeric_limits<T>::min()));
}

template <class T>
ForwardCache<T> forward(const NetworkParams<T>& p, std::span<const T> input) {
  if (input.size() != p.layers.front().in_size())
    throw DataError("network input has " + std::to_string(input.size()) + " values, expected " +
                    std::to_string(p.layers.front().in_size()));
  ForwardCache<T> c;
  c.inputs.resize(p.layers.size());
  c.pre.resize(p.layers.size());
  c.inputs[0].assign(input.begin(), input.end());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& L = p.layers[l];
    auto& h = c.pre[l];
    h.resize(L.out_size());
    layer_apply<T>(L, c.inputs[l].data(), p.weights[l].data(), h.data());
    add_bias<T>(L, p.biases[l].data(), h.data());
    for (T v : h)
      if (!std::isfinite(v)) throw NumericError("non-finite activation in layer " + std::to_string(l));
    if (l + 1 < p.layers.size()) {
      auto& a = c.inputs[l + 1];
      a.resize(h.size());
      for (std::size_t i = 0; i < h.size(); ++i) a[i] = h[i] > T(0) ? h[i] : T(0);
    }
  }
  c.logits = c.pre.back();
  c.probs = softmax<T>(c.logits);
  return c;
}

template <class T>
void backward(const NetworkParams<T>& p, const ForwardCache<T>& cache, std::span<const T> grad_logits,
              NetworkParams<T>& grads, const std::vector<std::vector<T>>* injected) {
  std::vector<T> g(grad_logits.begin(), grad_logits.end());
  std::vector<T> gin;
  for (std::size_t l = p.layers.size(); l-- > 0;) {
    const auto& L = p.layers[l];
    layer_weight_grad<T>(L, cache.inputs[l].data(), g.data(), grads.weights[l].data());
    bias_grad<T>(L, g.data(), grads.biases[l].data());
    if (l == 0) break;
    gin.resize(L.in_size());
    layer_transpose<T>(L, g.data(), p.weights[l].data(), gin.data());
    if (injected && !(*injected)[l].empty()) {
      const auto& inj = (*injected)[l];
      for (std::size_t i = 0; i < gin.size(); ++i) gin[i] += inj[i];
    }
    const auto& h = cache.pre[l - 1];
    for (std::size_t i = 0; i < gin.size(); ++i)
      if (!(h[i] > T(0))) gin[i] = T(0);
    g.swap(gin);
  }
}

#define RELSPRAY_INSTANTIATE(T)                                                                              \
  template void layer_apply<T>(const LinearLayer&, const T*, const T*, T*);                                   \
  template void layer_transpose<T>(const LinearLayer&, const T*, const T*, T*);                               \
  template void layer_weight_grad<T>(const LinearLayer&, const T*, const T*, T*);                             \
  template struct NetworkParams<T>;                                                                           \
  template struct ForwardCache<T>;                                                                            \
  template std::vector<T> softmax<T>(std::span<const T>);                                                     \
  template T cross_entropy<T>(std::span<const T>, int);                                                       \
  template ForwardCache<T> forward<T>(const NetworkParams<T>&, std::span<const T>);                           \
  template void backward<T>(const NetworkParams<T>&, const ForwardCache<T>&, std::span<const T>,            \
                            NetworkParams<T>&, const std::vector<std::vector<T>>*);

RELSPRAY_INSTANTIATE(float)
RELSPRAY_INSTANTIATE(double)

#undef RELSPRAY_INSTANTIATE

}  // namespace relspray
