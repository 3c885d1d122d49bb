#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "norm3d/errors.hpp"
#include "norm3d/partition.hpp"
#include "norm3d/tensor.hpp"

namespace norm3d {

/// Normalization method selector. `groups` is meaningful only for Group;
/// epsilon is the small constant added under the square root.
struct NormMethod {
  NormKind kind = NormKind::None;
  std::size_t groups = 1;
  double epsilon = 1e-5;

  static NormMethod none() { return {NormKind::None, 1, 1e-5}; }
  static NormMethod batch(double eps = 1e-5) { return {NormKind::Batch, 1, eps}; }
  static NormMethod group(std::size_t g, double eps = 1e-5) {
    return {NormKind::Group, g, eps};
  }
  static NormMethod instance(double eps = 1e-5) {
    return {NormKind::Instance, 1, eps};
  }

  /// True when the method can normalize a tensor with `channels` channels.
  bool compatible_with(std::size_t channels) const {
    if (kind != NormKind::Group) return true;
    return groups >= 1 && groups <= channels && channels % groups == 0;
  }

  std::string label() const {
    switch (kind) {
      case NormKind::None: return "none";
      case NormKind::Batch: return "batch";
      case NormKind::Group: return "group" + std::to_string(groups);
      case NormKind::Instance: return "instance";
    }
    return "?";
  }
};

/// Per-channel scale/shift applied after standardization.
template <std::floating_point T>
struct AffineParamsT {
  std::vector<T> gamma;
  std::vector<T> beta;

  static AffineParamsT identity(std::size_t channels) {
    AffineParamsT a;
    a.gamma.assign(channels, T(1));
    a.beta.assign(channels, T(0));
    return a;
  }
};

using AffineParams = AffineParamsT<double>;

/// Exponentially averaged batch statistics for BatchNorm inference.
struct RunningStats {
  std::vector<double> mean;
  std::vector<double> var;
  double momentum = 0.99;

  static RunningStats init(std::size_t channels, double momentum = 0.99) {
    RunningStats s;
    s.mean.assign(channels, 0.0);
    s.var.assign(channels, 1.0);
    s.momentum = momentum;
    return s;
  }
};

/// Forward-pass byproducts retained for the backward pass. The partition
/// pointer must outlive the cache (callers own the partition).
template <std::floating_point T>
struct NormCacheT {
  const NormPartition* partition = nullptr;
  std::vector<T> mu;     // per-set mean
  std::vector<T> sigma;  // per-set sqrt(var + eps)
  std::vector<T> var;    // per-set biased variance (without eps)
  BasicTensor5<T> xhat;  // normalized tensor
};

using NormCache = NormCacheT<double>;

/// Builds the statistics sets of the chosen method over the given shape.
///   Batch:    one set per channel, spanning (N, D, H, W).
///   Group:    one set per (sample, channel group), spanning (D, H, W, C/G).
///   Instance: one set per (sample, channel), spanning (D, H, W).
NormPartition build_partition(const NormMethod& method, const Shape5& shape);

namespace detail {

template <std::floating_point T>
void check_affine(const AffineParamsT<T>& affine, std::size_t channels,
                  const char* who) {
  if (affine.gamma.size() != channels || affine.beta.size() != channels) {
    throw ShapeError(std::string(who) + ": affine parameter length (" +
                     std::to_string(affine.gamma.size()) +
                     ") != channel count (" + std::to_string(channels) + ")");
  }
}

}  // namespace detail

/// Standardizes x per statistics set, then applies the per-channel affine:
/// y = gamma * (x - mu) / sqrt(var + eps) + beta. Variance is biased (1/m).
template <std::floating_point T>
std::pair<BasicTensor5<T>, NormCacheT<T>> norm_forward(
    const BasicTensor5<T>& x, const NormPartition& partition,
    const AffineParamsT<T>& affine, double epsilon,
    ReduceMode mode = ReduceMode::Deterministic) {
  const Shape5& shape = x.shape();
  if (!(partition.shape == shape)) {
    throw PartitionError("norm_forward: partition shape mismatch");
  }
  detail::check_affine(affine, shape.c, "norm_forward");

  NormCacheT<T> cache;
  cache.partition = &partition;
  cache.mu.resize(partition.set_count);
  cache.sigma.resize(partition.set_count);
  cache.var.resize(partition.set_count);

  const auto sums = reduce_over(x, partition, mode);
  for (std::size_t s = 0; s < partition.set_count; ++s) {
    cache.mu[s] = sums[s].sum / static_cast<T>(sums[s].count);
  }
  const auto sqdev = reduce_squared_deviation(
      x, partition, std::span<const T>(cache.mu), mode);
  for (std::size_t s = 0; s < partition.set_count; ++s) {
    cache.var[s] = sqdev[s] / static_cast<T>(partition.set_size[s]);
    cache.sigma[s] = std::sqrt(cache.var[s] + static_cast<T>(epsilon));
  }

  cache.xhat = BasicTensor5<T>(shape);
  BasicTensor5<T> y(shape);
  const auto px = x.data();
  auto ph = cache.xhat.data();
  auto py = y.data();
  const auto& ids = partition.set_of;
  const std::size_t channels = shape.c;
  const std::size_t n = px.size();
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < static_cast<long long>(n); ++i) {
    const std::uint32_t s = ids[static_cast<std::size_t>(i)];
    const std::size_t c = static_cast<std::size_t>(i) % channels;
    const T xh = (px[i] - cache.mu[s]) / cache.sigma[s];
    ph[i] = xh;
    py[i] = affine.gamma[c] * xh + affine.beta[c];
  }
  return {std::move(y), std::move(cache)};
}

template <std::floating_point T>
struct NormGradsT {
  BasicTensor5<T> grad_x;
  std::vector<T> grad_gamma;
  std::vector<T> grad_beta;
};

using NormGrads = NormGradsT<double>;

/// Full chain-rule backward through the per-set statistics:
///   dL/dx_i = (1/sigma_s) * (g_i - mean_s(g) - xhat_i * mean_s(g * xhat)),
/// with g_i = grad_y_i * gamma_{c(i)}.
template <std::floating_point T>
NormGradsT<T> norm_backward(const BasicTensor5<T>& grad_y,
                            const NormCacheT<T>& cache,
                            const AffineParamsT<T>& affine,
                            ReduceMode mode = ReduceMode::Deterministic) {
  if (cache.partition == nullptr) {
    throw UsageError("norm_backward: cache has no partition");
  }
  const NormPartition& partition = *cache.partition;
  const Shape5& shape = cache.xhat.shape();
  if (!(grad_y.shape() == shape)) {
    throw ShapeError("norm_backward: grad_y shape " +
                     grad_y.shape().to_string() + " does not match cache " +
                     shape.to_string());
  }
  detail::check_affine(affine, shape.c, "norm_backward");

  const std::size_t channels = shape.c;
  const std::size_t n = grad_y.size();
  const auto pg = grad_y.data();
  const auto ph = cache.xhat.data();
  const auto& ids = partition.set_of;

  // Per-set sums of g and g*xhat; per-channel sums for the affine grads.
  std::vector<T> sum_g(partition.set_count, T(0));
  std::vector<T> sum_gx(partition.set_count, T(0));
  std::vector<T> grad_gamma(channels, T(0));
  std::vector<T> grad_beta(channels, T(0));
  if (mode == ReduceMode::Deterministic) {
    std::vector<T> comp_g(partition.set_count, T(0));
    std::vector<T> comp_gx(partition.set_count, T(0));
    std::vector<T> comp_gamma(channels, T(0)), comp_beta(channels, T(0));
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint32_t s = ids[i];
      const std::size_t c = i % channels;
      const T g = pg[i] * affine.gamma[c];
      detail::neumaier_add(sum_g[s], comp_g[s], g);
      detail::neumaier_add(sum_gx[s], comp_gx[s], g * ph[i]);
      detail::neumaier_add(grad_beta[c], comp_beta[c], pg[i]);
      detail::neumaier_add(grad_gamma[c], comp_gamma[c], pg[i] * ph[i]);
    }
    for (std::size_t s = 0; s < partition.set_count; ++s) {
      sum_g[s] += comp_g[s];
      sum_gx[s] += comp_gx[s];
    }
    for (std::size_t c = 0; c < channels; ++c) {
      grad_beta[c] += comp_beta[c];
      grad_gamma[c] += comp_gamma[c];
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint32_t s = ids[i];
      const std::size_t c = i % channels;
      const T g = pg[i] * affine.gamma[c];
      sum_g[s] += g;
      sum_gx[s] += g * ph[i];
      grad_beta[c] += pg[i];
      grad_gamma[c] += pg[i] * ph[i];
    }
  }

  NormGradsT<T> grads;
  grads.grad_gamma = std::move(grad_gamma);
  grads.grad_beta = std::move(grad_beta);
  grads.grad_x = BasicTensor5<T>(shape);
  auto po = grads.grad_x.data();
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < static_cast<long long>(n); ++i) {
    const std::uint32_t s = ids[static_cast<std::size_t>(i)];
    const std::size_t c = static_cast<std::size_t>(i) % channels;
    const T m = static_cast<T>(partition.set_size[s]);
    const T g = pg[i] * affine.gamma[c];
    po[i] = (g - sum_g[s] / m - ph[i] * sum_gx[s] / m) / cache.sigma[s];
  }
  return grads;
}

/// EMA update of BatchNorm inference statistics from a Batch-partition
/// cache: stat <- momentum * stat + (1 - momentum) * batch_stat.
RunningStats batchnorm_update_running(const RunningStats& stats,
                                      const NormCache& cache);

/// Inference-mode normalization. Batch consumes the running statistics;
/// Group/Instance recompute per-input statistics exactly as in training;
/// None is the identity.
Tensor5 norm_infer(const Tensor5& x, const NormMethod& method,
                   const AffineParams& affine, const RunningStats& stats,
                   ReduceMode mode = ReduceMode::Deterministic);

}  // namespace norm3d
