#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "norm3d/datapipe.hpp"
#include "norm3d/net.hpp"

namespace norm3d {

enum class OptimizerKind { Adam, Sgd };

struct TrainConfig {
  std::size_t epochs = 10;
  double learning_rate = 1e-3;
  std::size_t batch_size = 1;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double sgd_momentum = 0.0;
  std::uint64_t seed = 1;
  double divergence_threshold = 1e3;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double seconds = 0.0;
  bool diverged = false;
};

/// First/second-moment state for Adam, one slot per trainable parameter.
struct AdamState {
  std::vector<Tensor5> m;
  std::vector<Tensor5> v;
  std::size_t step = 0;

  static AdamState init(const ParamStore& params);
};

/// One bias-corrected Adam update over all trainable entries.
void adam_step(ParamStore& params, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

struct SgdState {
  std::vector<Tensor5> velocity;

  static SgdState init(const ParamStore& params);
};

void sgd_step(ParamStore& params, SgdState& state, double lr, double momentum);

/// Batch-size-1 slab training with per-epoch shuffling, BatchNorm running
/// statistic updates, and divergence detection (non-finite loss/parameters
/// or loss above the configured threshold flags the epoch and stops).
std::vector<EpochRecord> train(UNet& net, const std::vector<Volume>& dataset,
                               const TrainConfig& config);

struct EvalResult {
  double mean_dice = 0.0;
  double seconds = 0.0;
};

/// Slab-slice -> infer -> compose -> threshold -> Dice, averaged over the
/// volumes; seconds is the wall-clock time of the whole prediction pass.
EvalResult evaluate(UNet& net, const std::vector<Volume>& volumes);

/// Checkpoint container: magic, version, record count, then repeated
/// (name length, name bytes, tensor blob) records, all little-endian.
void save_checkpoint(const ParamStore& params, const NormMethod& method,
                     const std::string& path);

/// Loads into an existing store; every name and shape must match, and the
/// stored normalization method must equal `method`.
void load_checkpoint(const std::string& path, ParamStore& params,
                     const NormMethod& method);

}  // namespace norm3d
