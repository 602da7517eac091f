#include "relspray/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace relspray {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::A: return "A";
    case Variant::B: return "B";
    case Variant::C: return "C";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "A" || s == "a") return Variant::A;
  if (s == "B" || s == "b") return Variant::B;
  if (s == "C" || s == "c") return Variant::C;
  throw ConfigError("unknown variant '" + s + "' (expected A, B or C)");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr_init > 0.0)) throw ConfigError("lr_init must be positive");
  if (!(lr_factor > 0.0 && lr_factor < 1.0)) throw ConfigError("lr_factor must be in (0, 1)");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (!(lr_floor > 0.0) || lr_floor > lr_init) throw ConfigError("lr_floor must be in (0, lr_init]");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("Adam epsilon must be positive");
  if (guided_lambda < 0.0) throw ConfigError("guided_lambda must be >= 0");
  if (bias_init > 0.0) throw ConfigError("bias_init must be <= 0");
}

template <class T>
std::vector<T> network_input(const Sample& s, Variant variant) {
  std::vector<T> x(s.input.begin(), s.input.end());
  if (variant == Variant::B) {
    if (s.brain_mask.size() != x.size()) throw DataError("variant B needs a brain mask for " + s.scan_id);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] *= static_cast<T>(s.brain_mask[i]);
  }
  return x;
}

template <class T>
AdamState<T> AdamState<T>::zeros(const ArchSpec& arch) {
  return {NetworkParams<T>::zeros(arch), NetworkParams<T>::zeros(arch), 0};
}

template <class T>
void AdamState<T>::reset() {
  m.fill(T(0));
  v.fill(T(0));
  step = 0;
}

namespace {

template <class T>
void adam_update(std::vector<T>& p, const std::vector<T>& g, std::vector<T>& m, std::vector<T>& v, double lr,
                 double b1, double b2, double eps, double c1, double c2) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = g[i];
    const double mi = b1 * m[i] + (1.0 - b1) * gi;
    const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    p[i] = static_cast<T>(p[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + eps));
  }
}

}  // namespace

template <class T>
void adam_step(NetworkParams<T>& params, const NetworkParams<T>& grads, AdamState<T>& state, double lr,
               const TrainConfig& cfg) {
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    adam_update(params.weights[l], grads.weights[l], state.m.weights[l], state.v.weights[l], lr, cfg.beta1, cfg.beta2,
                cfg.adam_eps, c1, c2);
    adam_update(params.biases[l], grads.biases[l], state.m.biases[l], state.v.biases[l], lr, cfg.beta1, cfg.beta2,
                cfg.adam_eps, c1, c2);
    for (auto& b : params.biases[l]) b = std::min(b, T(0));
  }
}

PlateauScheduler::PlateauScheduler(const TrainConfig& cfg)
    : lr_(cfg.lr_init),
      factor_(cfg.lr_factor),
      floor_(cfg.lr_floor),
      tol_(cfg.improvement_tol),
      patience_(cfg.patience),
      best_(std::numeric_limits<double>::infinity()) {}

std::optional<PlateauEvent> PlateauScheduler::observe(int epoch, double val_loss) {
  improved_ = val_loss < best_ - tol_;
  if (improved_) {
    best_ = val_loss;
    best_epoch_ = epoch;
    bad_ = 0;
    return std::nullopt;
  }
  if (++bad_ < patience_) return std::nullopt;
  bad_ = 0;
  PlateauEvent ev;
  ev.epoch = epoch;
  ev.lr_before = lr_;
  if (lr_ <= floor_) {
    ev.lr_after = lr_;
    return ev;
  }
  lr_ = std::max(lr_ * factor_, floor_);
  ev.lr_after = lr_;
  ev.reset_to_epoch = best_epoch_;
  return ev;
}

PlateauEvent PlateauScheduler::shrink(int epoch, int reset_to_epoch) {
  PlateauEvent ev;
  ev.epoch = epoch;
  ev.lr_before = lr_;
  lr_ = std::max(lr_ * factor_, floor_);
  ev.lr_after = lr_;
  ev.reset_to_epoch = reset_to_epoch;
  bad_ = 0;
  return ev;
}

namespace {

// No unit feeding the output layer is active, so the logits are the output bias.
template <class T>
bool output_dead(const ForwardCache<T>& cache) {
  const auto& h = cache.inputs.back();
  return std::all_of(h.begin(), h.end(), [](T a) { return a == T(0); });
}

template <class T>
int dead_count(const NetworkParams<T>& params, const std::vector<Sample>& samples, Variant variant) {
  int n = 0;
  for (const auto& s : samples) n += output_dead(forward<T>(params, network_input<T>(s, variant)));
  return n;
}

constexpr int kMaxInitDraws = 32;

template <class T>
struct SampleStep {
  double loss = 0, guided = 0;
  bool correct = false;
};

// Accumulates the gradient of (CE + lambda * L_rel) / batch into `grads`.
template <class T>
SampleStep<T> sample_gradient(const NetworkParams<T>& params, const Sample& s, Variant variant, const TrainConfig& cfg,
                              T inv_batch, NetworkParams<T>& grads) {
  const std::vector<T> x = network_input<T>(s, variant);
  const ForwardCache<T> cache = forward<T>(params, x);
  SampleStep<T> out;
  out.loss = static_cast<double>(cross_entropy<T>(cache.probs, s.label));
  out.correct = cache.predicted() == s.label;
  std::vector<T> gl(cache.probs.size());
  for (std::size_t k = 0; k < gl.size(); ++k)
    gl[k] = (cache.probs[k] - (static_cast<int>(k) == s.label ? T(1) : T(0))) * inv_batch;
  if (variant == Variant::C && cfg.guided_lambda > 0.0) {
    if (s.guidance.size() != x.size()) throw DataError("variant C needs a guidance mask for " + s.scan_id);
    const std::vector<T> mask(s.guidance.begin(), s.guidance.end());
    const T scale = static_cast<T>(cfg.guided_lambda) * inv_batch;
    auto gg = guided_loss_gradient<T>(params, cache, s.label, mask, RelevanceConfig{}, scale, grads);
    out.guided = static_cast<double>(gg.loss);
    out.loss += cfg.guided_lambda * out.guided;
    for (std::size_t k = 0; k < gl.size(); ++k) gl[k] += gg.logits[k];
    backward<T>(params, cache, gl, grads, &gg.injected);
  } else {
    backward<T>(params, cache, gl, grads);
  }
  return out;
}

}  // namespace

template <class T>
Evaluation evaluate(const NetworkParams<T>& params, const std::vector<Sample>& samples, Variant variant,
                    const TrainConfig& cfg) {
  Evaluation ev;
  if (samples.empty()) return ev;
  double loss = 0.0, guided = 0.0;
  int correct = 0;
  for (const auto& s : samples) {
    const std::vector<T> x = network_input<T>(s, variant);
    const ForwardCache<T> cache = forward<T>(params, x);
    double l = static_cast<double>(cross_entropy<T>(cache.probs, s.label));
    if (variant == Variant::C && cfg.guided_lambda > 0.0) {
      const RelevanceResult<T> rr = propagate_relevance<T>(params, cache, s.label, RelevanceConfig{});
      const std::vector<double> r(rr.input.begin(), rr.input.end());
      const std::vector<double> m(s.guidance.begin(), s.guidance.end());
      const double g = relevance_guided_loss(r, m);
      guided += g;
      l += cfg.guided_lambda * g;
    }
    loss += l;
    ev.dead += output_dead(cache);
    const int pred = cache.predicted();
    correct += pred == s.label;
    ev.scores.push_back(static_cast<double>(cache.probs[1]));
    ev.predicted.push_back(pred);
  }
  const double n = static_cast<double>(samples.size());
  ev.loss = loss / n;
  ev.guided = guided / n;
  ev.accuracy = correct / n;
  return ev;
}

template <class T>
TrainResult<T> train(const ArchSpec& arch, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                     Variant variant, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (train_set.empty() || val_set.empty()) throw DataError("training needs non-empty train and validation sets");
  TrainHistory hist;
  NetworkParams<T> params = NetworkParams<T>::he_uniform(arch, cfg.seed, cfg.bias_init);
  // A draw that is dead on most of the training set rarely recovers.
  while (2 * dead_count(params, train_set, variant) > static_cast<int>(train_set.size())) {
    if (hist.init_draws == kMaxInitDraws)
      throw TrainingAborted("no live initialisation in " + std::to_string(kMaxInitDraws) + " draws", hist);
    const std::uint64_t seed = cfg.seed ^ (0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(hist.init_draws));
    params = NetworkParams<T>::he_uniform(arch, seed, cfg.bias_init);
    ++hist.init_draws;
  }
  NetworkParams<T> best = params;
  AdamState<T> adam = AdamState<T>::zeros(arch);
  NetworkParams<T> grads = NetworkParams<T>::zeros(arch);
  PlateauScheduler sched(cfg);

  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32), 0x7a11u};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  const int n_val = static_cast<int>(val_set.size());
  int start_dead = dead_count(params, val_set, variant);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = sched.lr();
    std::shuffle(order.begin(), order.end(), rng);
    const NetworkParams<T> start = params;
    double loss = 0.0, guided = 0.0;
    int correct = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      const T inv = T(1) / static_cast<T>(b1 - b0);
      grads.fill(T(0));
      for (std::size_t i = b0; i < b1; ++i) {
        const auto st = sample_gradient<T>(params, train_set[order[i]], variant, cfg, inv, grads);
        loss += st.loss;
        guided += st.guided;
        correct += st.correct;
      }
      if (!std::isfinite(loss) || !grads.all_finite()) {
        hist.epochs.push_back(rec);
        throw TrainingAborted("non-finite training loss in epoch " + std::to_string(epoch), hist);
      }
      adam_step<T>(params, grads, adam, sched.lr(), cfg);
    }
    const double n = static_cast<double>(train_set.size());
    rec.train_loss = loss / n;
    rec.train_guided = guided / n;
    rec.train_accuracy = correct / n;

    const Evaluation val = evaluate<T>(params, val_set, variant, cfg);
    rec.val_loss = val.loss;
    rec.val_guided = val.guided;
    rec.val_accuracy = val.accuracy;
    hist.epochs.push_back(rec);
    if (!std::isfinite(val.loss)) throw TrainingAborted("non-finite validation loss in epoch " + std::to_string(epoch), hist);

    // An epoch that kills every unit cannot recover (all gradients vanish), so
    // it is undone and retried from its starting weights at a lower LR.
    if (val.dead == n_val && start_dead < n_val && sched.lr() > cfg.lr_floor) {
      hist.collapses.push_back(sched.shrink(epoch, epoch - 1));
      params = start;
      adam.reset();
      if (on_epoch) on_epoch(rec);
      continue;
    }

    const auto ev = sched.observe(epoch, val.loss);
    if (sched.improved()) best = params;
    if (ev) {
      hist.plateaus.push_back(*ev);
      if (ev->reset_to_epoch > 0) {
        params = best;
        adam.reset();
      }
    }
    start_dead = ev && ev->reset_to_epoch > 0 ? dead_count(params, val_set, variant) : val.dead;
    if (on_epoch) on_epoch(rec);
  }
  hist.best_epoch = sched.best_epoch();
  hist.best_val_loss = sched.best_loss();
  return {std::move(best), std::move(hist)};
}

#define RELSPRAY_INSTANTIATE(T)                                                                                 \
  template std::vector<T> network_input<T>(const Sample&, Variant);                                             \
  template struct AdamState<T>;                                                                                 \
  template void adam_step<T>(NetworkParams<T>&, const NetworkParams<T>&, AdamState<T>&, double,               \
                             const TrainConfig&);                                                              \
  template TrainResult<T> train<T>(const ArchSpec&, const std::vector<Sample>&, const std::vector<Sample>&,    \
                                   Variant, const TrainConfig&, const EpochCallback&);                         \
  template Evaluation evaluate<T>(const NetworkParams<T>&, const std::vector<Sample>&, Variant,                \
                                  const TrainConfig&);

RELSPRAY_INSTANTIATE(float)
RELSPRAY_INSTANTIATE(double)

#undef RELSPRAY_INSTANTIATE

}  // namespace relspray
