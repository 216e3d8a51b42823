#pragma once

// Checkpoint = text manifest + raw blob.
//
// <stem>.manifest
//   mscreen-checkpoint 1
//   kind = multiscreen | baseline
//   blob = <stem file name>.bin
//   <config key> = <value>           one line per config field
//   tile.<l>.<h>.inference_infinite = 0|1   (multiscreen only)
//   optimizer.step = <n>             (only if optimizer state is present)
//   tensor <name> f64 <d0>,<d1>,... <byte offset>
//
// <stem>.bin holds the tensors in manifest order as little-endian IEEE-754
// binary64. Optimizer moments are stored as tensors "adam.m.<name>" and
// "adam.v.<name>" after the model tensors. Reals in the manifest use the
// shortest round-trip decimal form, so save -> load -> save is byte-identical.

#include <filesystem>
#include <optional>

#include "mscreen/lm.hpp"
#include "mscreen/optim.hpp"

namespace mscreen {

struct Checkpoint {
  AnyModel model;
  std::optional<AdamState> optimizer;
};

/// Writes <stem>.manifest and <stem>.bin. Throws std::runtime_error on I/O failure.
void save_checkpoint(const std::filesystem::path& stem, const AnyModel& model,
                     const AdamState* optimizer = nullptr);

/// Accepts the stem or either file path. Throws std::runtime_error on I/O or
/// format errors.
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::filesystem::path manifest_path(const std::filesystem::path& stem);
std::filesystem::path blob_path(const std::filesystem::path& stem);

}  // namespace mscreen
