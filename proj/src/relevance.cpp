#include "relspray/relevance.hpp"

#include <algorithm>
#include <cmath>

#include "relspray/errors.hpp"

namespace relspray {

void RelevanceConfig::validate() const {
  if (std::abs(alpha - beta - 1.0) > 1e-12) throw ConfigError("LRP requires alpha - beta = 1");
  if (beta < 0.0) throw ConfigError("LRP beta must be >= 0");
  if (!(epsilon > 0.0)) throw ConfigError("LRP stabilizer must be positive");
}

namespace {

// Adds a per-output-channel (or per-unit) value to y.
template <class T, class F>
void add_channel(const LinearLayer& l, std::span<const T> b, F f, std::vector<T>& y) {
  const std::size_t plane = l.is_conv() ? l.conv.out.size() : 1;
  for (std::size_t c = 0; c < b.size(); ++c) {
    const T v = f(b[c]);
    if (v == T(0)) continue;
    T* p = y.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) p[i] += v;
  }
}

template <class T>
void split_sign(std::span<const T> v, std::vector<T>& pos, std::vector<T>& neg, bool& any_neg) {
  pos.resize(v.size());
  neg.resize(v.size());
  any_neg = false;
  for (std::size_t i = 0; i < v.size(); ++i) {
    pos[i] = v[i] > T(0) ? v[i] : T(0);
    neg[i] = v[i] < T(0) ? v[i] : T(0);
    any_neg = any_neg || v[i] < T(0);
  }
}

template <class T>
std::vector<T> apply(const LinearLayer& l, const std::vector<T>& x, const std::vector<T>& w) {
  std::vector<T> y(l.out_size());
  layer_apply<T>(l, x.data(), w.data(), y.data());
  return y;
}

template <class T>
std::vector<T> transpose(const LinearLayer& l, const std::vector<T>& gy, const std::vector<T>& w) {
  std::vector<T> gx(l.in_size());
  layer_transpose<T>(l, gy.data(), w.data(), gx.data());
  return gx;
}

template <class T>
void accumulate(std::vector<T>& a, const std::vector<T>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

}  // namespace

template <class T>
std::vector<T> lrp_layer(const LinearLayer& layer, std::span<const T> x, std::span<const T> weights,
                         std::span<const T> biases, std::span<const T> relevance_out, const RelevanceConfig& cfg) {
  cfg.validate();
  if (x.size() != layer.in_size() || relevance_out.size() != layer.out_size() ||
      weights.size() != layer.weight_count() || biases.size() != layer.bias_count())
    throw DataError("lrp_layer: shape mismatch");
  const T eps = static_cast<T>(cfg.epsilon);
  std::vector<T> xp, xn, wp, wn;
  bool x_neg = false, w_neg = false;
  split_sign(x, xp, xn, x_neg);
  split_sign(weights, wp, wn, w_neg);

  std::vector<T> zp = apply(layer, xp, wp);
  if (x_neg) accumulate(zp, apply(layer, xn, wn));
  add_channel<T>(layer, biases, [](T b) { return b > T(0) ? b : T(0); }, zp);
  std::vector<T> sp(zp.size());
  for (std::size_t k = 0; k < zp.size(); ++k) sp[k] = zp[k] > T(0) ? relevance_out[k] / (zp[k] + eps) : T(0);

  std::vector<T> r(x.size(), T(0));
  const T alpha = static_cast<T>(cfg.alpha);
  {
    const std::vector<T> cp = transpose(layer, sp, wp);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += alpha * xp[j] * cp[j];
    if (x_neg) {
      const std::vector<T> cn = transpose(layer, sp, wn);
      for (std::size_t j = 0; j < r.size(); ++j) r[j] += alpha * xn[j] * cn[j];
    }
  }
  if (cfg.beta > 0.0) {
    std::vector<T> zn = apply(layer, xp, wn);
    if (x_neg) accumulate(zn, apply(layer, xn, wp));
    add_channel<T>(layer, biases, [](T b) { return b < T(0) ? b : T(0); }, zn);
    std::vector<T> sn(zn.size());
    for (std::size_t k = 0; k < zn.size(); ++k) sn[k] = zn[k] < T(0) ? relevance_out[k] / (zn[k] - eps) : T(0);
    const T beta = static_cast<T>(cfg.beta);
    const std::vector<T> c1 = transpose(layer, sn, wn);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] -= beta * xp[j] * c1[j];
    if (x_neg) {
      const std::vector<T> c2 = transpose(layer, sn, wp);
      for (std::size_t j = 0; j < r.size(); ++j) r[j] -= beta * xn[j] * c2[j];
    }
  }
  return r;
}

namespace {

template <class T>
std::vector<T> output_relevance(const ForwardCache<T>& cache, int target, const RelevanceConfig& cfg) {
  if (target < 0 || target >= static_cast<int>(cache.logits.size())) throw DataError("LRP target class out of range");
  std::vector<T> r(cache.logits.size(), T(0));
  r[target] = cfg.output_init == OutputInit::OneHotUnit ? T(1) : cache.logits[target];
  return r;
}

}  // namespace

template <class T>
RelevanceResult<T> propagate_relevance(const NetworkParams<T>& params, const ForwardCache<T>& cache, int target,
                                       const RelevanceConfig& cfg) {
  RelevanceResult<T> res;
  const std::size_t L = params.layers.size();
  res.per_layer.resize(L);
  std::vector<T> r = output_relevance(cache, target, cfg);
  for (std::size_t l = L; l-- > 0;) {
    r = lrp_layer<T>(params.layers[l], cache.inputs[l], params.weights[l], params.biases[l], r, cfg);
    res.per_layer[l] = r;
  }
  res.input = std::move(r);
  T total = 0;
  for (T v : res.input) total += v > T(0) ? v : -v;
  res.dead = total == T(0);
  return res;
}

template <class T>
Heatmap lrp_heatmap(const NetworkParams<T>& params, const Volume3D& input, int target, const RelevanceConfig& cfg) {
  input.validate();
  const Shape3 want = params.arch.input;
  if (input.grid.dims[0] != want.x || input.grid.dims[1] != want.y || input.grid.dims[2] != want.z ||
      params.arch.in_channels != 1)
    throw DataError("heatmap input grid does not match the network input");
  std::vector<T> x(input.data.begin(), input.data.end());
  const ForwardCache<T> cache = forward<T>(params, x);
  const int t = target < 0 ? cache.predicted() : target;
  const RelevanceResult<T> rr = propagate_relevance<T>(params, cache, t, cfg);
  Heatmap h;
  h.relevance = Volume3D(input.grid);
  for (std::size_t i = 0; i < rr.input.size(); ++i) h.relevance.data[i] = static_cast<double>(rr.input[i]);
  h.target_class = t;
  h.dead = rr.dead;
  return h;
}

double relevance_guided_loss(std::span<const double> relevance, std::span<const double> mask, double eps) {
  if (relevance.size() != mask.size()) throw DataError("relevance and guidance mask differ in size");
  double total = 0.0, outside = 0.0;
  for (std::size_t v = 0; v < relevance.size(); ++v) {
    const double r = relevance[v] > 0.0 ? relevance[v] : 0.0;
    total += r;
    outside += (1.0 - mask[v]) * r;
  }
  return outside / (total + eps);
}

namespace {

template <class T>
struct Tape {
  std::vector<T> wp, wn, xp, xn;
  bool x_neg = false;
  std::vector<T> zraw, z, s, cp, cn, rho;
};

}  // namespace

template <class T>
GuidedLossGradient<T> guided_loss_gradient(const NetworkParams<T>& params, const ForwardCache<T>& cache, int target,
                                           std::span<const T> mask, const RelevanceConfig& cfg, T scale,
                                           NetworkParams<T>& grads) {
  cfg.validate();
  if (cfg.beta != 0.0) throw ConfigError("guided relevance loss is implemented for the z+ rule (beta = 0)");
  const std::size_t L = params.layers.size();
  if (mask.size() != params.layers.front().in_size()) throw DataError("guidance mask does not match network input");
  const T eps = static_cast<T>(cfg.epsilon);

  // Relevance pass, top-down, keeping every intermediate.
  std::vector<Tape<T>> tape(L);
  std::vector<T> rho = output_relevance(cache, target, cfg);
  for (std::size_t l = L; l-- > 0;) {
    const auto& layer = params.layers[l];
    Tape<T>& t = tape[l];
    bool w_neg = false;
    split_sign<T>(params.weights[l], t.wp, t.wn, w_neg);
    split_sign<T>(cache.inputs[l], t.xp, t.xn, t.x_neg);
    t.zraw = apply(layer, t.xp, t.wp);
    if (t.x_neg) accumulate(t.zraw, apply(layer, t.xn, t.wn));
    add_channel<T>(layer, params.biases[l], [](T b) { return b > T(0) ? b : T(0); }, t.zraw);
    t.z.resize(t.zraw.size());
    t.s.resize(t.zraw.size());
    for (std::size_t k = 0; k < t.z.size(); ++k) {
      t.z[k] = t.zraw[k] + eps;
      t.s[k] = t.zraw[k] > T(0) ? rho[k] / t.z[k] : T(0);
    }
    t.cp = transpose(layer, t.s, t.wp);
    if (t.x_neg) t.cn = transpose(layer, t.s, t.wn);
    t.rho = std::move(rho);
    rho.assign(t.xp.size(), T(0));
    for (std::size_t j = 0; j < rho.size(); ++j) {
      rho[j] = t.xp[j] * t.cp[j];
      if (t.x_neg) rho[j] += t.xn[j] * t.cn[j];
    }
  }
  const std::vector<T>& r_in = rho;

  GuidedLossGradient<T> out;
  out.injected.resize(L);
  out.logits.assign(cache.logits.size(), T(0));
  double total = 0.0, outside = 0.0;
  for (std::size_t v = 0; v < r_in.size(); ++v) {
    const double r = r_in[v] > T(0) ? static_cast<double>(r_in[v]) : 0.0;
    total += r;
    outside += (1.0 - static_cast<double>(mask[v])) * r;
  }
  const double S = total + cfg.epsilon;
  const double loss = outside / S;
  out.loss = static_cast<T>(loss);

  // dL/dR_v, then the adjoint pass bottom-up.
  std::vector<T> rbar(r_in.size());
  for (std::size_t v = 0; v < r_in.size(); ++v)
    rbar[v] = r_in[v] > T(0) ? static_cast<T>(scale * ((1.0 - static_cast<double>(mask[v])) - loss) / S) : T(0);

  for (std::size_t l = 0; l < L; ++l) {
    const auto& layer = params.layers[l];
    const Tape<T>& t = tape[l];
    const std::size_t nin = layer.in_size();
    const bool need_x = l > 0;
    std::vector<T> xbar;
    if (need_x) {
      xbar.assign(nin, T(0));
      for (std::size_t j = 0; j < nin; ++j) {
        if (t.xp[j] > T(0)) xbar[j] = rbar[j] * t.cp[j];
        else if (t.x_neg && t.xn[j] < T(0)) xbar[j] = rbar[j] * t.cn[j];
      }
    }
    std::vector<T> cpbar(nin), cnbar;
    for (std::size_t j = 0; j < nin; ++j) cpbar[j] = rbar[j] * t.xp[j];
    std::vector<T> sbar = apply(layer, cpbar, t.wp);
    std::vector<T> gwp(layer.weight_count(), T(0)), gwn;
    layer_weight_grad<T>(layer, cpbar.data(), t.s.data(), gwp.data());
    if (t.x_neg) {
      cnbar.resize(nin);
      for (std::size_t j = 0; j < nin; ++j) cnbar[j] = rbar[j] * t.xn[j];
      accumulate(sbar, apply(layer, cnbar, t.wn));
      gwn.assign(layer.weight_count(), T(0));
      layer_weight_grad<T>(layer, cnbar.data(), t.s.data(), gwn.data());
    }

    std::vector<T> rhobar(t.z.size(), T(0)), zbar(t.z.size(), T(0));
    for (std::size_t k = 0; k < t.z.size(); ++k) {
      if (!(t.zraw[k] > T(0))) continue;
      rhobar[k] = sbar[k] / t.z[k];
      zbar[k] = -sbar[k] * t.s[k] / t.z[k];
    }

    layer_weight_grad<T>(layer, t.xp.data(), zbar.data(), gwp.data());
    if (t.x_neg) layer_weight_grad<T>(layer, t.xn.data(), zbar.data(), gwn.data());
    if (need_x) {
      const std::vector<T> gp = transpose(layer, zbar, t.wp);
      std::vector<T> gn;
      if (t.x_neg) gn = transpose(layer, zbar, t.wn);
      for (std::size_t j = 0; j < nin; ++j) {
        if (t.xp[j] > T(0)) xbar[j] += gp[j];
        else if (t.x_neg && t.xn[j] < T(0)) xbar[j] += gn[j];
      }
      out.injected[l] = std::move(xbar);
    }
    // Bias enters through b+ only.
    {
      const std::size_t plane = layer.is_conv() ? layer.conv.out.size() : 1;
      for (std::size_t c = 0; c < params.biases[l].size(); ++c) {
        if (!(params.biases[l][c] > T(0))) continue;
        T acc = 0;
        for (std::size_t i = 0; i < plane; ++i) acc += zbar[c * plane + i];
        grads.biases[l][c] += acc;
      }
    }
    auto& gw = grads.weights[l];
    const auto& w = params.weights[l];
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (w[i] > T(0)) gw[i] += gwp[i];
      else if (w[i] < T(0) && t.x_neg) gw[i] += gwn[i];
    }
    rbar = std::move(rhobar);
  }
  if (cfg.output_init == OutputInit::LogitValue) out.logits[target] = rbar[target];
  return out;
}

#define RELSPRAY_INSTANTIATE(T)                                                                                    \
  template std::vector<T> lrp_layer<T>(const LinearLayer&, std::span<const T>, std::span<const T>,                 \
                                       std::span<const T>, std::span<const T>, const RelevanceConfig&);            \
  template RelevanceResult<T> propagate_relevance<T>(const NetworkParams<T>&, const ForwardCache<T>&, int,         \
                                                     const RelevanceConfig&);                                      \
  template Heatmap lrp_heatmap<T>(const NetworkParams<T>&, const Volume3D&, int, const RelevanceConfig&);          \
  template GuidedLossGradient<T> guided_loss_gradient<T>(const NetworkParams<T>&, const ForwardCache<T>&, int,    \
                                                         std::span<const T>, const RelevanceConfig&, T,           \
                                                         NetworkParams<T>&);

RELSPRAY_INSTANTIATE(float)
RELSPRAY_INSTANTIATE(double)

#undef RELSPRAY_INSTANTIATE

}  // namespace relspray
