#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "relspray/errors.hpp"
#include "relspray/network.hpp"
#include "relspray/relevance.hpp"

namespace relspray {

/// A: native input. B: input multiplied by the brain mask. C: native input
/// plus the relevance-guided loss.
enum class Variant { A, B, C };

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);

struct TrainConfig {
  int epochs = 60;
  int batch_size = 6;
  double lr_init = 1e-3;
  double lr_factor = 0.3;
  int patience = 5;
  double lr_floor = 1e-6;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double improvement_tol = 1e-6;
  double guided_lambda = 1.0;
  double bias_init = -0.01;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Sample {
  std::string scan_id;
  std::vector<float> input;
  int label = 0;
  std::vector<float> brain_mask;  // required for variant B
  std::vector<float> guidance;    // required for variant C
};

/// The tensor the network sees for this sample under `variant`.
template <class T>
std::vector<T> network_input(const Sample& s, Variant variant);

template <class T>
struct AdamState {
  NetworkParams<T> m, v;
  long step = 0;

  static AdamState zeros(const ArchSpec& arch);
  void reset();
};

/// Bias-corrected Adam update followed by b = min(b, 0).
template <class T>
void adam_step(NetworkParams<T>& params, const NetworkParams<T>& grads, AdamState<T>& state, double lr,
               const TrainConfig& cfg);

struct PlateauEvent {
  int epoch = 0;
  double lr_before = 0, lr_after = 0;
  int reset_to_epoch = -1;  // -1: no weight reset
};

/// Reduce-on-plateau with a weight reset to the epoch of the last improvement.
/// Epochs are 1-based.
class PlateauScheduler {
 public:
  explicit PlateauScheduler(const TrainConfig& cfg);

  /// Record the validation loss of `epoch`; returns an event when the LR changes
  /// or the weights should be reset.
  std::optional<PlateauEvent> observe(int epoch, double val_loss);

  double lr() const { return lr_; }
  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_; }
  bool improved() const { return improved_; }
  /// Multiply the LR by the factor (not below the floor) outside the plateau logic.
  PlateauEvent shrink(int epoch, int reset_to_epoch);

 private:
  double lr_, factor_, floor_, tol_;
  int patience_;
  double best_;
  int best_epoch_ = 0;
  int bad_ = 0;
  bool improved_ = false;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0, train_accuracy = 0;
  double val_loss = 0, val_accuracy = 0;
  double train_guided = 0, val_guided = 0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::vector<PlateauEvent> plateaus;
  std::vector<PlateauEvent> collapses;  // epochs that left the network dead, rolled back
  int init_draws = 1;
  int best_epoch = 0;
  double best_val_loss = 0;
};

class TrainingAborted : public NumericError {
 public:
  TrainingAborted(const std::string& what, TrainHistory h) : NumericError(what), history(std::move(h)) {}
  TrainHistory history;
};

template <class T>
struct TrainResult {
  NetworkParams<T> params;  // weights of the best validation epoch
  TrainHistory history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

template <class T>
TrainResult<T> train(const ArchSpec& arch, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                     Variant variant, const TrainConfig& cfg, const EpochCallback& on_epoch = {});

struct Evaluation {
  double loss = 0, accuracy = 0, guided = 0;
  int dead = 0;  // samples with no active unit feeding the output layer
  std::vector<double> scores;  // P(class 1)
  std::vector<int> predicted;
};

/// Loss is the training objective (cross-entropy, plus lambda times the guided
/// term for variant C).
template <class T>
Evaluation evaluate(const NetworkParams<T>& params, const std::vector<Sample>& samples, Variant variant,
                    const TrainConfig& cfg);

}  // namespace relspray
