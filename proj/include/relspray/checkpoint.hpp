#pragma once

#include <filesystem>
#include <string>

#include "relspray/training.hpp"

namespace relspray {

struct Checkpoint {
  NetworkParams<float> params;
  Variant variant = Variant::A;
  TrainConfig config;
  TrainHistory history;
};

/// <dir>/model.bin holds a layer table (name, shape, dtype, offset) and the raw
/// tensors; <dir>/model.json carries architecture, config and history.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

std::string history_json(const TrainHistory& h);

}  // namespace relspray
