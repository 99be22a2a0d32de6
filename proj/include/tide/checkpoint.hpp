#pragma once

#include <string>

#include "tide/model.hpp"

namespace tide {

/// Checkpoint container: magic "TIDECKPT", version byte, config block, then
/// named parameter records (name, shape, little-endian f64 payload).
/// Round-trips bit-exactly.
void save_checkpoint(const std::string& path, const TideModel& model);
TideModel load_checkpoint(const std::string& path);

/// Writes arbitrary named tensors in the same container format (used for
/// compressed memory tables: mem.k.{i}.U / mem.k.{i}.V / mem.k.{i}.q{bits}).
void save_tensor_records(const std::string& path, const ModelConfig& cfg,
                         const TideConfig& tide_cfg,
                         const std::vector<std::pair<std::string, Tensor>>& records);

}  // namespace tide
