#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

#include "norm3d/errors.hpp"
#include "norm3d/tensor.hpp"

namespace norm3d {

enum class NormKind { None, Batch, Group, Instance };

/// Explicit decomposition of a tensor's flat index space into disjoint
/// statistics sets. set_of[i] is the set id of flat index i; sets must be
/// non-empty and together cover every index.
struct NormPartition {
  Shape5 shape;
  std::vector<std::uint32_t> set_of;
  std::size_t set_count = 0;
  std::vector<std::size_t> set_size;
  NormKind built_from = NormKind::None;  // None for hand-built partitions

  /// Checks disjoint-cover structure; throws PartitionError on violation.
  void validate() const {
    if (set_of.size() != shape.numel()) {
      throw PartitionError("partition: set_of length does not cover the index space");
    }
    if (set_size.size() != set_count) {
      throw PartitionError("partition: set_size length != set_count");
    }
    std::vector<std::size_t> counts(set_count, 0);
    for (std::uint32_t s : set_of) {
      if (s >= set_count) {
        throw PartitionError("partition: set id " + std::to_string(s) +
                             " out of range");
      }
      ++counts[s];
    }
    for (std::size_t s = 0; s < set_count; ++s) {
      if (counts[s] == 0) {
        throw PartitionError("partition: set " + std::to_string(s) + " is empty");
      }
      if (counts[s] != set_size[s]) {
        throw PartitionError("partition: declared cardinality mismatch for set " +
                             std::to_string(s));
      }
    }
  }
};

/// Reduction execution mode. Deterministic uses one fixed accumulation
/// order with Neumaier compensation; Fast splits the scan into fixed
/// chunks that may run in parallel.
enum class ReduceMode { Deterministic, Fast };

template <std::floating_point T>
struct SetSum {
  T sum = T(0);
  std::size_t count = 0;
};

namespace detail {

template <std::floating_point T>
inline void neumaier_add(T& sum, T& comp, T value) {
  const T t = sum + value;
  if (std::abs(sum) >= std::abs(value)) {
    comp += (sum - t) + value;
  } else {
    comp += (value - t) + sum;
  }
  sum = t;
}

}  // namespace detail

/// Per-set (sum, count) over an arbitrary partition of x's index space.
template <std::floating_point T>
std::vector<SetSum<T>> reduce_over(const BasicTensor5<T>& x,
                                   const NormPartition& sets,
                                   ReduceMode mode = ReduceMode::Deterministic) {
  if (!(sets.shape == x.shape())) {
    throw PartitionError("reduce_over: partition shape " +
                         sets.shape.to_string() + " does not match tensor " +
                         x.shape().to_string());
  }
  const auto px = x.data();
  const auto& ids = sets.set_of;
  std::vector<SetSum<T>> out(sets.set_count);
  for (std::size_t s = 0; s < sets.set_count; ++s) out[s].count = sets.set_size[s];

  if (mode == ReduceMode::Deterministic) {
    std::vector<T> sum(sets.set_count, T(0)), comp(sets.set_count, T(0));
    for (std::size_t i = 0; i < px.size(); ++i) {
      const std::uint32_t s = ids[i];
      if (s >= sets.set_count) {
        throw PartitionError("reduce_over: set id out of range at index " +
                             std::to_string(i));
      }
      detail::neumaier_add(sum[s], comp[s], px[i]);
    }
    for (std::size_t s = 0; s < sets.set_count; ++s) out[s].sum = sum[s] + comp[s];
    return out;
  }

  // Fast path: fixed chunk grid combined in chunk order, so results do not
  // depend on the number of worker threads.
  constexpr std::size_t kChunks = 16;
  const std::size_t n = px.size();
  const std::size_t chunk = (n + kChunks - 1) / kChunks;
  std::vector<std::vector<T>> partial(kChunks,
                                      std::vector<T>(sets.set_count, T(0)));
  bool out_of_range = false;
#pragma omp parallel for schedule(static) reduction(|| : out_of_range)
  for (long long ci = 0; ci < static_cast<long long>(kChunks); ++ci) {
    const std::size_t lo = static_cast<std::size_t>(ci) * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    auto& acc = partial[static_cast<std::size_t>(ci)];
    for (std::size_t i = lo; i < hi; ++i) {
      if (ids[i] >= sets.set_count) {
        out_of_range = true;
        break;
      }
      acc[ids[i]] += px[i];
    }
  }
  if (out_of_range) throw PartitionError("reduce_over: set id out of range");
  for (std::size_t ci = 0; ci < kChunks; ++ci) {
    for (std::size_t s = 0; s < sets.set_count; ++s) out[s].sum += partial[ci][s];
  }
  return out;
}

/// Per-set sum of squared deviations from the provided per-set centers.
template <std::floating_point T>
std::vector<T> reduce_squared_deviation(const BasicTensor5<T>& x,
                                        const NormPartition& sets,
                                        std::span<const T> center,
                                        ReduceMode mode = ReduceMode::Deterministic) {
  if (!(sets.shape == x.shape())) {
    throw PartitionError("reduce_squared_deviation: partition/tensor shape mismatch");
  }
  if (center.size() != sets.set_count) {
    throw PartitionError("reduce_squared_deviation: center length != set_count");
  }
  const auto px = x.data();
  const auto& ids = sets.set_of;
  std::vector<T> out(sets.set_count, T(0));

  if (mode == ReduceMode::Deterministic) {
    std::vector<T> comp(sets.set_count, T(0));
    for (std::size_t i = 0; i < px.size(); ++i) {
      const std::uint32_t s = ids[i];
      const T dev = px[i] - center[s];
      detail::neumaier_add(out[s], comp[s], dev * dev);
    }
    for (std::size_t s = 0; s < sets.set_count; ++s) out[s] += comp[s];
    return out;
  }

  constexpr std::size_t kChunks = 16;
  const std::size_t n = px.size();
  const std::size_t chunk = (n + kChunks - 1) / kChunks;
  std::vector<std::vector<T>> partial(kChunks,
                                      std::vector<T>(sets.set_count, T(0)));
  bool out_of_range = false;
#pragma omp parallel for schedule(static) reduction(|| : out_of_range)
  for (long long ci = 0; ci < static_cast<long long>(kChunks); ++ci) {
    const std::size_t lo = static_cast<std::size_t>(ci) * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    auto& acc = partial[static_cast<std::size_t>(ci)];
    for (std::size_t i = lo; i < hi; ++i) {
      if (ids[i] >= sets.set_count) {
        out_of_range = true;
        break;
      }
      const T dev = px[i] - center[ids[i]];
      acc[ids[i]] += dev * dev;
    }
  }
  if (out_of_range) {
    throw PartitionError("reduce_squared_deviation: set id out of range");
  }
  for (std::size_t ci = 0; ci < kChunks; ++ci) {
    for (std::size_t s = 0; s < sets.set_count; ++s) out[s] += partial[ci][s];
  }
  return out;
}

}  // namespace norm3d
