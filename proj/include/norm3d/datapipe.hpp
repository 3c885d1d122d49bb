#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "norm3d/tensor.hpp"

namespace norm3d {

/// Dense 3D grid, slice-major: value(s, y, x) at index (s*H + y)*W + x.
struct Grid3 {
  std::size_t slices = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  Grid3() = default;
  Grid3(std::size_t s, std::size_t h, std::size_t w)
      : slices(s), height(h), width(w), values(s * h * w, 0.0) {}

  std::size_t index(std::size_t s, std::size_t y, std::size_t x) const {
    return (s * height + y) * width + x;
  }
  double& at(std::size_t s, std::size_t y, std::size_t x) {
    return values[index(s, y, x)];
  }
  double at(std::size_t s, std::size_t y, std::size_t x) const {
    return values[index(s, y, x)];
  }
  std::size_t size() const { return values.size(); }
};

/// A full scan plus its binary mask; intensities are scaled to [0,1].
struct Volume {
  Grid3 intensities;
  Grid3 mask;
};

enum class SlabPosition { First, Interior, Last };

/// One overlapping 16-slice training window. `data` and `mask` have shape
/// (1, 16, H, W, 1); consecutive slabs start 8 slices apart except for a
/// final slab anchored at S-16 when S-16 is not a multiple of 8.
struct SlabBatch {
  Tensor5 data;
  Tensor5 mask;
  std::size_t start_slice = 0;
  SlabPosition position = SlabPosition::Interior;
};

inline constexpr std::size_t kSlabDepth = 16;
inline constexpr std::size_t kSlabStride = 8;

/// Synthetic volume family: a wobbling tube of ellipsoids over a noisy
/// background, with per-volume base intensity and foreground contrast drawn
/// from the stated ranges. The mask is exact analytic ellipsoid membership.
struct SynthSpec {
  std::size_t slices = 16;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t ellipsoids = 5;
  double radius_min = 3.5;
  double radius_max = 6.0;
  double wobble = 0.15;  // center sway as a fraction of (H, W)
  double noise = 0.06;   // Gaussian sigma added to intensities
  double base_min = 0.15;
  double base_max = 0.45;
  double contrast_min = 0.25;
  double contrast_max = 0.55;
  std::uint64_t seed = 1;
};

Volume generate_synthetic(const SynthSpec& spec);

/// Key=value manifest describing a reproducible synthetic dataset.
struct DatasetManifest {
  std::size_t volumes = 20;
  SynthSpec proto;  // per-volume seeds are derived from proto.seed
};

DatasetManifest parse_manifest(const std::string& text);
DatasetManifest load_manifest(const std::string& path);
std::string manifest_to_text(const DatasetManifest& manifest);

/// Deterministic expansion of a manifest into its volumes.
std::vector<Volume> generate_dataset(const DatasetManifest& manifest);

/// Linear [0,1] rescale: min -> 0, max -> 1; constant input -> all zeros.
/// NaN values raise DataError.
void rescale_to_unit(Grid3& grid);

/// Minimal NRRD reader: 3D scalar volumes, attached header, raw or gzip
/// encoding, little-endian data. The slowest axis (last in `sizes`) is
/// taken as the slice axis. Intensities are rescaled to [0,1]; the mask is
/// left empty (all zeros).
Volume read_nrrd(const std::string& path);

std::vector<SlabBatch> slice_slabs(const Volume& vol);

/// Stitches per-slab predictions back into a volume-shaped soft grid.
/// Interior slabs contribute their middle 8 slices; the first and last
/// slabs additionally contribute their outer 4; when slabs overlap by more
/// than 8 slices the later slab wins. Each output slice is written once.
Grid3 stitch_soft(const std::vector<SlabBatch>& slabs,
                  const std::vector<Tensor5>& predictions);

/// stitch_soft followed by the 128/255 threshold (after scaling to [0,255]).
Grid3 compose_prediction(const std::vector<SlabBatch>& slabs,
                         const std::vector<Tensor5>& predictions);

struct OwnedSpan {
  std::size_t slab_index = 0;
  std::size_t begin = 0;  // inclusive slice
  std::size_t end = 0;    // exclusive slice
};

/// The definitive slice interval contributed by each slab, in slab order.
/// Useful as an independent coverage/uniqueness check.
std::vector<OwnedSpan> owner_intervals(std::size_t slices);

std::vector<std::size_t> slab_starts(std::size_t slices);

/// Converts a volume-shaped grid to the (1, S, H, W, 1) tensor layout.
Tensor5 grid_to_tensor(const Grid3& grid);
Grid3 tensor_to_grid(const Tensor5& t);

/// ASCII (P2) PGM dump of one slice, values scaled to [0,255].
void write_slice_pgm(const Grid3& grid, std::size_t slice,
                     const std::string& path);

}  // namespace norm3d
