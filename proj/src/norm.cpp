#include "norm3d/norm.hpp"

#include <algorithm>
#include <cmath>

namespace norm3d {

NormPartition build_partition(const NormMethod& method, const Shape5& shape) {
  const std::size_t numel = shape.numel();
  const std::size_t spatial = shape.d * shape.h * shape.w;

  NormPartition p;
  p.shape = shape;
  p.built_from = method.kind;
  p.set_of.resize(numel);

  switch (method.kind) {
    case NormKind::None:
      throw ConfigError("build_partition: the identity method has no statistics sets");
    case NormKind::Batch: {
      // S_i = { k | k_C = i_C }: one set per channel across (N, D, H, W).
      p.set_count = shape.c;
      p.set_size.assign(shape.c, shape.n * spatial);
      for (std::size_t i = 0; i < numel; ++i) {
        p.set_of[i] = static_cast<std::uint32_t>(i % shape.c);
      }
      break;
    }
    case NormKind::Group: {
      // S_i = { k | k_N = i_N, floor(k_C/(C/G)) = floor(i_C/(C/G)) }:
      // contiguous channel blocks of width C/G, one block set per sample.
      if (!method.compatible_with(shape.c)) {
        throw ConfigError("build_partition: C=" + std::to_string(shape.c) +
                          " is not divisible into G=" +
                          std::to_string(method.groups) + " groups");
      }
      const std::size_t g = method.groups;
      const std::size_t block = shape.c / g;
      p.set_count = shape.n * g;
      p.set_size.assign(p.set_count, spatial * block);
      for (std::size_t i = 0; i < numel; ++i) {
        const std::size_t c = i % shape.c;
        const std::size_t n = i / (spatial * shape.c);
        p.set_of[i] = static_cast<std::uint32_t>(n * g + c / block);
      }
      break;
    }
    case NormKind::Instance: {
      // S_i = { k | k_N = i_N, k_C = i_C }: one set per (sample, channel).
      p.set_count = shape.n * shape.c;
      p.set_size.assign(p.set_count, spatial);
      for (std::size_t i = 0; i < numel; ++i) {
        const std::size_t c = i % shape.c;
        const std::size_t n = i / (spatial * shape.c);
        p.set_of[i] = static_cast<std::uint32_t>(n * shape.c + c);
      }
      break;
    }
  }
  return p;
}

RunningStats batchnorm_update_running(const RunningStats& stats,
                                      const NormCache& cache) {
  if (cache.partition == nullptr ||
      cache.partition->built_from != NormKind::Batch) {
    throw UsageError(
        "batchnorm_update_running: cache was not produced by a Batch partition");
  }
  const std::size_t channels = cache.partition->shape.c;
  if (stats.mean.size() != channels || stats.var.size() != channels) {
    throw ShapeError("batchnorm_update_running: stats length != channel count");
  }
  RunningStats out = stats;
  const double m = stats.momentum;
  for (std::size_t c = 0; c < channels; ++c) {
    out.mean[c] = m * stats.mean[c] + (1.0 - m) * cache.mu[c];
    out.var[c] = m * stats.var[c] + (1.0 - m) * cache.var[c];
  }
  return out;
}

Tensor5 norm_infer(const Tensor5& x, const NormMethod& method,
                   const AffineParams& affine, const RunningStats& stats,
                   ReduceMode mode) {
  switch (method.kind) {
    case NormKind::None:
      return x;
    case NormKind::Batch: {
      const std::size_t channels = x.shape().c;
      detail::check_affine(affine, channels, "norm_infer");
      if (stats.mean.size() != channels || stats.var.size() != channels) {
        throw ShapeError("norm_infer: running stats length != channel count");
      }
      std::vector<double> inv_sigma(channels);
      for (std::size_t c = 0; c < channels; ++c) {
        inv_sigma[c] = 1.0 / std::sqrt(stats.var[c] + method.epsilon);
      }
      Tensor5 y(x.shape());
      const auto px = x.data();
      auto py = y.data();
      for (std::size_t i = 0; i < px.size(); ++i) {
        const std::size_t c = i % channels;
        py[i] = affine.gamma[c] * (px[i] - stats.mean[c]) * inv_sigma[c] +
                affine.beta[c];
      }
      return y;
    }
    case NormKind::Group:
    case NormKind::Instance: {
      const NormPartition partition = build_partition(method, x.shape());
      auto [y, cache] = norm_forward(x, partition, affine, method.epsilon, mode);
      return std::move(y);
    }
  }
  throw ConfigError("norm_infer: unknown method");
}

}  // namespace norm3d
