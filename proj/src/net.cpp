#include "norm3d/net.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "norm3d/errors.hpp"

namespace norm3d {

namespace {

void validate_conv_spec(const Conv3dSpec& spec) {
  for (std::size_t k : spec.kernel) {
    if (k == 0 || k % 2 == 0) {
      throw ConfigError("conv3d: kernel extents must be odd, got " +
                        std::to_string(k));
    }
  }
  for (std::size_t d : spec.dilation) {
    if (d == 0) throw ConfigError("conv3d: dilation must be >= 1");
  }
  if (spec.in_channels == 0 || spec.out_channels == 0) {
    throw ConfigError("conv3d: channel counts must be >= 1");
  }
}

}  // namespace

Shape5 conv3d_weight_shape(const Conv3dSpec& spec) {
  return Shape5{spec.kernel[0], spec.kernel[1], spec.kernel[2],
                spec.in_channels, spec.out_channels};
}

Shape5 conv3d_bias_shape(const Conv3dSpec& spec) {
  return Shape5{1, 1, 1, 1, spec.out_channels};
}

Tensor5 conv3d_forward(const Tensor5& x, const Conv3dSpec& spec,
                       const Tensor5& weights, const Tensor5& bias,
                       Conv3dCache* cache) {
  validate_conv_spec(spec);
  const Shape5& in = x.shape();
  if (in.c != spec.in_channels) {
    throw ShapeError("conv3d_forward: input has " + std::to_string(in.c) +
                     " channels, spec expects " +
                     std::to_string(spec.in_channels));
  }
  if (!(weights.shape() == conv3d_weight_shape(spec))) {
    throw ShapeError("conv3d_forward: weight tensor shape mismatch");
  }
  if (!(bias.shape() == conv3d_bias_shape(spec))) {
    throw ShapeError("conv3d_forward: bias tensor shape mismatch");
  }

  const std::size_t N = in.n, D = in.d, H = in.h, W = in.w;
  const std::size_t Cin = spec.in_channels, Cout = spec.out_channels;
  const std::size_t KD = spec.kernel[0], KH = spec.kernel[1], KW = spec.kernel[2];
  const long long dd = static_cast<long long>(spec.dilation[0]);
  const long long dh = static_cast<long long>(spec.dilation[1]);
  const long long dw = static_cast<long long>(spec.dilation[2]);

  Tensor5 out(Shape5{N, D, H, W, Cout});
  const double* px = x.data().data();
  const double* pw = weights.data().data();
  const double* pb = bias.data().data();
  double* po = out.data().data();

  const long long rows = static_cast<long long>(N * D * H);
#pragma omp parallel for schedule(static)
  for (long long row = 0; row < rows; ++row) {
    const std::size_t n = static_cast<std::size_t>(row) / (D * H);
    const std::size_t z = (static_cast<std::size_t>(row) / H) % D;
    const std::size_t y = static_cast<std::size_t>(row) % H;

    // Taps whose (z, y) offsets stay inside the volume for this row.
    struct RowTap {
      std::size_t in_row_base;  // flat (n, iz, iy, 0, 0)
      std::size_t w_base;       // flat (dz, dy, 0, 0, 0)
    };
    std::vector<RowTap> taps;
    taps.reserve(KD * KH);
    for (std::size_t dz = 0; dz < KD; ++dz) {
      const long long iz =
          static_cast<long long>(z) + (static_cast<long long>(dz) -
                                       static_cast<long long>(KD / 2)) * dd;
      if (iz < 0 || iz >= static_cast<long long>(D)) continue;
      for (std::size_t dy = 0; dy < KH; ++dy) {
        const long long iy =
            static_cast<long long>(y) + (static_cast<long long>(dy) -
                                         static_cast<long long>(KH / 2)) * dh;
        if (iy < 0 || iy >= static_cast<long long>(H)) continue;
        taps.push_back(
            {((n * D + static_cast<std::size_t>(iz)) * H +
              static_cast<std::size_t>(iy)) * W,
             (dz * KH + dy) * KW});
      }
    }

    std::vector<double> acc(Cout);
    for (std::size_t xx = 0; xx < W; ++xx) {
      for (std::size_t co = 0; co < Cout; ++co) acc[co] = pb[co];
      for (const RowTap& tap : taps) {
        for (std::size_t dx = 0; dx < KW; ++dx) {
          const long long ix = static_cast<long long>(xx) +
                               (static_cast<long long>(dx) -
                                static_cast<long long>(KW / 2)) * dw;
          if (ix < 0 || ix >= static_cast<long long>(W)) continue;
          const double* xin =
              px + (tap.in_row_base + static_cast<std::size_t>(ix)) * Cin;
          const double* wt = pw + (tap.w_base + dx) * Cin * Cout;
          for (std::size_t ci = 0; ci < Cin; ++ci) {
            const double xv = xin[ci];
            const double* wrow = wt + ci * Cout;
            for (std::size_t co = 0; co < Cout; ++co) acc[co] += xv * wrow[co];
          }
        }
      }
      double* orow = po + (static_cast<std::size_t>(row) * W + xx) * Cout;
      std::memcpy(orow, acc.data(), Cout * sizeof(double));
    }
  }

  if (cache != nullptr) {
    cache->spec = spec;
    cache->input = x;
  }
  return out;
}

Conv3dGrads conv3d_backward(const Tensor5& grad_y, const Conv3dCache& cache,
                            const Tensor5& weights) {
  const Conv3dSpec& spec = cache.spec;
  validate_conv_spec(spec);
  const Shape5& in = cache.input.shape();
  const Shape5 out_shape{in.n, in.d, in.h, in.w, spec.out_channels};
  if (!(grad_y.shape() == out_shape)) {
    throw ShapeError("conv3d_backward: grad_y shape " +
                     grad_y.shape().to_string() + " does not match " +
                     out_shape.to_string());
  }
  if (!(weights.shape() == conv3d_weight_shape(spec))) {
    throw ShapeError("conv3d_backward: weight tensor shape mismatch");
  }

  const std::size_t N = in.n, D = in.d, H = in.h, W = in.w;
  const std::size_t Cin = spec.in_channels, Cout = spec.out_channels;
  const std::size_t KD = spec.kernel[0], KH = spec.kernel[1], KW = spec.kernel[2];
  const long long dd = static_cast<long long>(spec.dilation[0]);
  const long long dh = static_cast<long long>(spec.dilation[1]);
  const long long dw = static_cast<long long>(spec.dilation[2]);

  Conv3dGrads grads{Tensor5(in), Tensor5(conv3d_weight_shape(spec)),
                    Tensor5(conv3d_bias_shape(spec))};
  const double* pg = grad_y.data().data();
  const double* px = cache.input.data().data();
  const double* pw = weights.data().data();

  // grad_x: gather formulation, one independent write per input voxel.
  {
    double* pgx = grads.grad_x.data().data();
    const long long rows = static_cast<long long>(N * D * H);
#pragma omp parallel for schedule(static)
    for (long long row = 0; row < rows; ++row) {
      const std::size_t n = static_cast<std::size_t>(row) / (D * H);
      const std::size_t z = (static_cast<std::size_t>(row) / H) % D;
      const std::size_t y = static_cast<std::size_t>(row) % H;

      struct RowTap {
        std::size_t out_row_base;
        std::size_t w_base;
      };
      std::vector<RowTap> taps;
      taps.reserve(KD * KH);
      for (std::size_t dz = 0; dz < KD; ++dz) {
        const long long oz =
            static_cast<long long>(z) - (static_cast<long long>(dz) -
                                         static_cast<long long>(KD / 2)) * dd;
        if (oz < 0 || oz >= static_cast<long long>(D)) continue;
        for (std::size_t dy = 0; dy < KH; ++dy) {
          const long long oy =
              static_cast<long long>(y) - (static_cast<long long>(dy) -
                                           static_cast<long long>(KH / 2)) * dh;
          if (oy < 0 || oy >= static_cast<long long>(H)) continue;
          taps.push_back(
              {((n * D + static_cast<std::size_t>(oz)) * H +
                static_cast<std::size_t>(oy)) * W,
               (dz * KH + dy) * KW});
        }
      }

      std::vector<double> acc(Cin);
      for (std::size_t xx = 0; xx < W; ++xx) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (const RowTap& tap : taps) {
          for (std::size_t dx = 0; dx < KW; ++dx) {
            const long long ox = static_cast<long long>(xx) -
                                 (static_cast<long long>(dx) -
                                  static_cast<long long>(KW / 2)) * dw;
            if (ox < 0 || ox >= static_cast<long long>(W)) continue;
            const double* g =
                pg + (tap.out_row_base + static_cast<std::size_t>(ox)) * Cout;
            const double* wt = pw + (tap.w_base + dx) * Cin * Cout;
            for (std::size_t ci = 0; ci < Cin; ++ci) {
              const double* wrow = wt + ci * Cout;
              double s = 0.0;
              for (std::size_t co = 0; co < Cout; ++co) s += g[co] * wrow[co];
              acc[ci] += s;
            }
          }
        }
        double* orow = pgx + (static_cast<std::size_t>(row) * W + xx) * Cin;
        std::memcpy(orow, acc.data(), Cin * sizeof(double));
      }
    }
  }

  // grad_w: each tap owns a disjoint (cin x cout) slice, accumulated over
  // output voxels in a fixed order for bit-stable results.
  {
    double* pgw = grads.grad_w.data().data();
    const long long ntaps = static_cast<long long>(KD * KH * KW);
#pragma omp parallel for schedule(dynamic)
    for (long long tap = 0; tap < ntaps; ++tap) {
      const std::size_t dz = static_cast<std::size_t>(tap) / (KH * KW);
      const std::size_t dy = (static_cast<std::size_t>(tap) / KW) % KH;
      const std::size_t dx = static_cast<std::size_t>(tap) % KW;
      const long long offz =
          (static_cast<long long>(dz) - static_cast<long long>(KD / 2)) * dd;
      const long long offy =
          (static_cast<long long>(dy) - static_cast<long long>(KH / 2)) * dh;
      const long long offx =
          (static_cast<long long>(dx) - static_cast<long long>(KW / 2)) * dw;

      // Output voxel ranges with in-bounds input taps.
      const std::size_t z_lo = static_cast<std::size_t>(std::max(0LL, -offz));
      const std::size_t z_hi = static_cast<std::size_t>(
          std::min(static_cast<long long>(D), static_cast<long long>(D) - offz));
      const std::size_t y_lo = static_cast<std::size_t>(std::max(0LL, -offy));
      const std::size_t y_hi = static_cast<std::size_t>(
          std::min(static_cast<long long>(H), static_cast<long long>(H) - offy));
      const std::size_t x_lo = static_cast<std::size_t>(std::max(0LL, -offx));
      const std::size_t x_hi = static_cast<std::size_t>(
          std::min(static_cast<long long>(W), static_cast<long long>(W) - offx));

      double* gw = pgw + static_cast<std::size_t>(tap) * Cin * Cout;
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t z = z_lo; z < z_hi; ++z) {
          for (std::size_t y = y_lo; y < y_hi; ++y) {
            const std::size_t out_row = ((n * D + z) * H + y) * W;
            const std::size_t in_row =
                ((n * D + static_cast<std::size_t>(
                              static_cast<long long>(z) + offz)) * H +
                 static_cast<std::size_t>(static_cast<long long>(y) + offy)) * W;
            for (std::size_t xx = x_lo; xx < x_hi; ++xx) {
              const double* g = pg + (out_row + xx) * Cout;
              const double* xin =
                  px + (in_row + static_cast<std::size_t>(
                                     static_cast<long long>(xx) + offx)) * Cin;
              for (std::size_t ci = 0; ci < Cin; ++ci) {
                const double xv = xin[ci];
                double* grow = gw + ci * Cout;
                for (std::size_t co = 0; co < Cout; ++co) grow[co] += xv * g[co];
              }
            }
          }
        }
      }
    }
  }

  // grad_b: plain channel sums.
  {
    double* pgb = grads.grad_b.data().data();
    const std::size_t voxels = N * D * H * W;
    for (std::size_t v = 0; v < voxels; ++v) {
      const double* g = pg + v * Cout;
      for (std::size_t co = 0; co < Cout; ++co) pgb[co] += g[co];
    }
  }

  return grads;
}

Tensor5 maxpool2_forward(const Tensor5& x, MaxPoolCache* cache) {
  const Shape5& in = x.shape();
  if (in.d % 2 || in.h % 2 || in.w % 2) {
    throw ShapeError("maxpool2: spatial extents must be even, got " +
                     in.to_string());
  }
  const Shape5 out_shape{in.n, in.d / 2, in.h / 2, in.w / 2, in.c};
  Tensor5 out(out_shape);
  if (cache != nullptr) {
    cache->in_shape = in;
    cache->argmax.assign(out_shape.numel(), 0);
  }
  const double* px = x.data().data();
  double* po = out.data().data();
  const std::size_t C = in.c;

  const long long out_voxels =
      static_cast<long long>(out_shape.n * out_shape.d * out_shape.h * out_shape.w);
#pragma omp parallel for schedule(static)
  for (long long v = 0; v < out_voxels; ++v) {
    std::size_t rest = static_cast<std::size_t>(v);
    const std::size_t ox = rest % out_shape.w;
    rest /= out_shape.w;
    const std::size_t oy = rest % out_shape.h;
    rest /= out_shape.h;
    const std::size_t oz = rest % out_shape.d;
    const std::size_t n = rest / out_shape.d;
    for (std::size_t c = 0; c < C; ++c) {
      double best = -std::numeric_limits<double>::infinity();
      std::size_t best_idx = 0;
      for (std::size_t dz = 0; dz < 2; ++dz) {
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx =
                (((n * in.d + 2 * oz + dz) * in.h + 2 * oy + dy) * in.w +
                 2 * ox + dx) * C + c;
            if (px[idx] > best) {  // ties keep the first scan position
              best = px[idx];
              best_idx = idx;
            }
          }
        }
      }
      const std::size_t out_idx = static_cast<std::size_t>(v) * C + c;
      po[out_idx] = best;
      if (cache != nullptr) cache->argmax[out_idx] = best_idx;
    }
  }
  return out;
}

Tensor5 maxpool2_backward(const Tensor5& grad_y, const MaxPoolCache& cache) {
  const Shape5 out_shape{cache.in_shape.n, cache.in_shape.d / 2,
                         cache.in_shape.h / 2, cache.in_shape.w / 2,
                         cache.in_shape.c};
  if (!(grad_y.shape() == out_shape)) {
    throw ShapeError("maxpool2_backward: grad shape mismatch");
  }
  Tensor5 grad_x(cache.in_shape);
  auto gx = grad_x.data();
  const auto gy = grad_y.data();
  for (std::size_t i = 0; i < gy.size(); ++i) gx[cache.argmax[i]] += gy[i];
  return grad_x;
}

Tensor5 upsample2_forward(const Tensor5& x) {
  const Shape5& in = x.shape();
  const Shape5 out_shape{in.n, in.d * 2, in.h * 2, in.w * 2, in.c};
  Tensor5 out(out_shape);
  const double* px = x.data().data();
  double* po = out.data().data();
  const std::size_t C = in.c;
  const long long out_voxels =
      static_cast<long long>(out_shape.n * out_shape.d * out_shape.h * out_shape.w);
#pragma omp parallel for schedule(static)
  for (long long v = 0; v < out_voxels; ++v) {
    std::size_t rest = static_cast<std::size_t>(v);
    const std::size_t ox = rest % out_shape.w;
    rest /= out_shape.w;
    const std::size_t oy = rest % out_shape.h;
    rest /= out_shape.h;
    const std::size_t oz = rest % out_shape.d;
    const std::size_t n = rest / out_shape.d;
    const double* src =
        px + (((n * in.d + oz / 2) * in.h + oy / 2) * in.w + ox / 2) * C;
    double* dst = po + static_cast<std::size_t>(v) * C;
    std::memcpy(dst, src, C * sizeof(double));
  }
  return out;
}

Tensor5 upsample2_backward(const Tensor5& grad_y, const Shape5& in_shape) {
  const Shape5 out_shape{in_shape.n, in_shape.d * 2, in_shape.h * 2,
                         in_shape.w * 2, in_shape.c};
  if (!(grad_y.shape() == out_shape)) {
    throw ShapeError("upsample2_backward: grad shape mismatch");
  }
  Tensor5 grad_x(in_shape);
  const double* pg = grad_y.data().data();
  double* po = grad_x.data().data();
  const std::size_t C = in_shape.c;
  const long long in_voxels =
      static_cast<long long>(in_shape.n * in_shape.d * in_shape.h * in_shape.w);
#pragma omp parallel for schedule(static)
  for (long long v = 0; v < in_voxels; ++v) {
    std::size_t rest = static_cast<std::size_t>(v);
    const std::size_t ix = rest % in_shape.w;
    rest /= in_shape.w;
    const std::size_t iy = rest % in_shape.h;
    rest /= in_shape.h;
    const std::size_t iz = rest % in_shape.d;
    const std::size_t n = rest / in_shape.d;
    double* dst = po + static_cast<std::size_t>(v) * C;
    for (std::size_t dz = 0; dz < 2; ++dz) {
      for (std::size_t dy = 0; dy < 2; ++dy) {
        for (std::size_t dx = 0; dx < 2; ++dx) {
          const double* src =
              pg + (((n * out_shape.d + 2 * iz + dz) * out_shape.h + 2 * iy + dy) *
                        out_shape.w +
                    2 * ix + dx) * C;
          for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
        }
      }
    }
  }
  return grad_x;
}

Tensor5 concat_channels(const Tensor5& a, const Tensor5& b) {
  const Shape5& sa = a.shape();
  const Shape5& sb = b.shape();
  if (sa.n != sb.n || sa.d != sb.d || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat_channels: spatial/batch extents differ");
  }
  Tensor5 out(Shape5{sa.n, sa.d, sa.h, sa.w, sa.c + sb.c});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  const std::size_t voxels = sa.n * sa.d * sa.h * sa.w;
  for (std::size_t v = 0; v < voxels; ++v) {
    std::memcpy(po + v * (sa.c + sb.c), pa + v * sa.c, sa.c * sizeof(double));
    std::memcpy(po + v * (sa.c + sb.c) + sa.c, pb + v * sb.c,
                sb.c * sizeof(double));
  }
  return out;
}

std::pair<Tensor5, Tensor5> split_channels(const Tensor5& x,
                                           std::size_t a_channels) {
  const Shape5& s = x.shape();
  if (a_channels == 0 || a_channels >= s.c) {
    throw ShapeError("split_channels: split point out of range");
  }
  const std::size_t b_channels = s.c - a_channels;
  Tensor5 a(Shape5{s.n, s.d, s.h, s.w, a_channels});
  Tensor5 b(Shape5{s.n, s.d, s.h, s.w, b_channels});
  const double* px = x.data().data();
  double* pa = a.data().data();
  double* pb = b.data().data();
  const std::size_t voxels = s.n * s.d * s.h * s.w;
  for (std::size_t v = 0; v < voxels; ++v) {
    std::memcpy(pa + v * a_channels, px + v * s.c, a_channels * sizeof(double));
    std::memcpy(pb + v * b_channels, px + v * s.c + a_channels,
                b_channels * sizeof(double));
  }
  return {std::move(a), std::move(b)};
}

Tensor5 relu_forward(const Tensor5& x) {
  return map_unary(x, [](double v) { return v > 0.0 ? v : 0.0; });
}

Tensor5 relu_backward(const Tensor5& grad_y, const Tensor5& relu_out) {
  return map_binary(grad_y, relu_out,
                    [](double g, double r) { return r > 0.0 ? g : 0.0; });
}

Tensor5 sigmoid_forward(const Tensor5& x) {
  return map_unary(x, [](double v) {
    if (v >= 0.0) {
      const double e = std::exp(-v);
      return 1.0 / (1.0 + e);
    }
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
}

Tensor5 sigmoid_backward(const Tensor5& grad_y, const Tensor5& sigmoid_out) {
  return map_binary(grad_y, sigmoid_out,
                    [](double g, double y) { return g * y * (1.0 - y); });
}

std::size_t ParamStore::add(const std::string& name, Tensor5 value,
                            bool trainable) {
  if (index_.count(name) != 0) {
    throw UsageError("ParamStore: duplicate parameter name " + name);
  }
  const std::size_t id = values_.size();
  grads_.emplace_back(Tensor5::zeros(value.shape()));
  values_.push_back(std::move(value));
  names_.push_back(name);
  trainable_.push_back(trainable);
  index_.emplace(name, id);
  return id;
}

std::size_t ParamStore::id(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw UsageError("ParamStore: unknown parameter " + name);
  }
  return it->second;
}

bool ParamStore::contains(const std::string& name) const {
  return index_.count(name) != 0;
}

std::size_t ParamStore::scalar_count(bool trainable_only) const {
  std::size_t total = 0;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (trainable_only && !trainable_[i]) continue;
    total += values_[i].size();
  }
  return total;
}

void ParamStore::zero_grads() {
  for (Tensor5& g : grads_) {
    std::fill(g.data().begin(), g.data().end(), 0.0);
  }
}

UNet::UNet(const UNetSpec& spec, std::uint64_t seed) : spec_(spec) {
  if (spec.levels < 1) throw ConfigError("unet: levels must be >= 1");
  if (spec.base_filters < 1) throw ConfigError("unet: base_filters must be >= 1");
  if (spec.in_channels < 1) throw ConfigError("unet: in_channels must be >= 1");
  if (spec.norm.kind == NormKind::Group) {
    for (std::size_t c : norm_site_channels(spec.levels, spec.base_filters)) {
      if (!spec.norm.compatible_with(c)) {
        throw ConfigError("unet: group count " + std::to_string(spec.norm.groups) +
                          " does not divide norm-site channel count " +
                          std::to_string(c));
      }
    }
  }

  Rng rng(seed);
  std::size_t ch = spec.in_channels;
  for (std::size_t l = 0; l < spec.levels; ++l) {
    enc_.push_back(add_block("enc" + std::to_string(l), ch,
                             spec.base_filters << l, rng));
    ch = enc_.back().out_channels;
  }
  enc_.push_back(
      add_block("bottleneck", ch, spec.base_filters << spec.levels, rng));
  ch = enc_.back().out_channels;

  ups_.resize(spec.levels);
  dec_.resize(spec.levels);
  for (std::size_t l = spec.levels; l-- > 0;) {
    const std::size_t filters = spec.base_filters << l;
    UpPlan up;
    Conv3dSpec cs{ch, filters, {3, 3, 3}, {1, 1, 1}};
    up.conv = add_conv("up" + std::to_string(l) + ".conv", cs, rng);
    up.norm = add_norm("up" + std::to_string(l) + ".norm", filters);
    ups_[l] = up;
    const std::size_t cat_ch = filters + enc_[l].out_channels;
    dec_[l] = add_block("dec" + std::to_string(l), cat_ch, filters, rng);
    ch = dec_[l].out_channels;
  }

  Conv3dSpec head_spec{ch, 1, {1, 1, 1}, {1, 1, 1}};
  head_ = add_conv("head.conv", head_spec, rng);
}

UNet::ConvLayer UNet::add_conv(const std::string& name, const Conv3dSpec& spec,
                               Rng& rng) {
  ConvLayer layer;
  layer.spec = spec;
  Tensor5 w(conv3d_weight_shape(spec));
  const double fan_in = static_cast<double>(spec.kernel[0] * spec.kernel[1] *
                                            spec.kernel[2] * spec.in_channels);
  const double limit = std::sqrt(6.0 / fan_in);
  for (double& v : w.data()) v = rng.uniform(-limit, limit);
  layer.w_id = params_.add(name + ".w", std::move(w));
  layer.b_id = params_.add(name + ".b", Tensor5::zeros(conv3d_bias_shape(spec)));
  return layer;
}

UNet::NormSite UNet::add_norm(const std::string& name, std::size_t channels) {
  NormSite site;
  site.channels = channels;
  const Shape5 vec_shape{1, 1, 1, 1, channels};
  site.gamma_id = params_.add(name + ".gamma", Tensor5::full(vec_shape, 1.0));
  site.beta_id = params_.add(name + ".beta", Tensor5::zeros(vec_shape));
  if (spec_.norm.kind == NormKind::Batch) {
    site.rmean_id = params_.add(name + ".running_mean",
                                Tensor5::zeros(vec_shape), /*trainable=*/false);
    site.rvar_id = params_.add(name + ".running_var",
                               Tensor5::full(vec_shape, 1.0), /*trainable=*/false);
  }
  return site;
}

UNet::BlockPlan UNet::add_block(const std::string& name, std::size_t in_ch,
                                std::size_t filters, Rng& rng) {
  BlockPlan block;
  block.in_channels = in_ch;
  block.filters = filters;
  block.out_channels = filters + in_ch;
  Conv3dSpec c1{in_ch, filters, {3, 3, 3}, {1, 1, 1}};
  Conv3dSpec c2{filters, filters, {3, 3, 3}, {2, 2, 2}};
  block.conv1 = add_conv(name + ".conv1", c1, rng);
  block.norm1 = add_norm(name + ".norm1", filters);
  block.conv2 = add_conv(name + ".conv2", c2, rng);
  block.norm2 = add_norm(name + ".norm2", filters);
  return block;
}

std::vector<std::size_t> UNet::norm_site_channels(std::size_t levels,
                                                  std::size_t base_filters) {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < levels; ++l) {
    out.push_back(base_filters << l);
    out.push_back(base_filters << l);
  }
  out.push_back(base_filters << levels);
  out.push_back(base_filters << levels);
  for (std::size_t l = levels; l-- > 0;) {
    out.push_back(base_filters << l);  // up conv
    out.push_back(base_filters << l);  // dec conv1
    out.push_back(base_filters << l);  // dec conv2
  }
  return out;
}

AffineParams UNet::affine_of(const NormSite& site) const {
  AffineParams a;
  const auto g = params_.value(site.gamma_id).data();
  const auto b = params_.value(site.beta_id).data();
  a.gamma.assign(g.begin(), g.end());
  a.beta.assign(b.begin(), b.end());
  return a;
}

const NormPartition& UNet::partition_for(const Shape5& shape) {
  const std::string key = shape.to_string();
  auto it = partitions_.find(key);
  if (it == partitions_.end()) {
    it = partitions_.emplace(key, build_partition(spec_.norm, shape)).first;
  }
  return it->second;
}

Tensor5 UNet::cnr_forward(const ConvLayer& conv, const NormSite& site,
                          const Tensor5& x, NetMode mode, CnrCache* cache) {
  Tensor5 t = conv3d_forward(x, conv.spec, params_.value(conv.w_id),
                             params_.value(conv.b_id),
                             cache != nullptr ? &cache->conv : nullptr);
  const NormMethod& method = spec_.norm;
  const ReduceMode rmode =
      spec_.deterministic ? ReduceMode::Deterministic : ReduceMode::Fast;
  Tensor5 activated;
  if (method.kind == NormKind::None) {
    activated = std::move(t);
  } else if (mode == NetMode::Train) {
    const NormPartition& p = partition_for(t.shape());
    auto [y, nc] = norm_forward(t, p, affine_of(site), method.epsilon, rmode);
    if (cache != nullptr) {
      cache->norm = std::move(nc);
      cache->norm_used = true;
    }
    activated = std::move(y);
  } else if (method.kind == NormKind::Batch) {
    RunningStats rs;
    const auto m = params_.value(site.rmean_id).data();
    const auto v = params_.value(site.rvar_id).data();
    rs.mean.assign(m.begin(), m.end());
    rs.var.assign(v.begin(), v.end());
    rs.momentum = spec_.bn_momentum;
    activated = norm_infer(t, method, affine_of(site), rs, rmode);
  } else {
    // Group/Instance inference recomputes per-input statistics; this is
    // bit-identical to the training forward.
    const NormPartition& p = partition_for(t.shape());
    auto [y, nc] = norm_forward(t, p, affine_of(site), method.epsilon, rmode);
    activated = std::move(y);
  }
  Tensor5 r = relu_forward(activated);
  if (cache != nullptr) cache->act_out = r;
  return r;
}

Tensor5 UNet::cnr_backward(const ConvLayer& conv, const NormSite& site,
                           const Tensor5& grad, const CnrCache& cache) {
  const ReduceMode rmode =
      spec_.deterministic ? ReduceMode::Deterministic : ReduceMode::Fast;
  Tensor5 ga = relu_backward(grad, cache.act_out);
  Tensor5 gt;
  if (cache.norm_used) {
    NormGrads ng = norm_backward(ga, cache.norm, affine_of(site), rmode);
    auto gg = params_.grad(site.gamma_id).data();
    auto gb = params_.grad(site.beta_id).data();
    std::copy(ng.grad_gamma.begin(), ng.grad_gamma.end(), gg.begin());
    std::copy(ng.grad_beta.begin(), ng.grad_beta.end(), gb.begin());
    gt = std::move(ng.grad_x);
  } else {
    gt = std::move(ga);
  }
  Conv3dGrads cg = conv3d_backward(gt, cache.conv, params_.value(conv.w_id));
  params_.grad(conv.w_id) = std::move(cg.grad_w);
  params_.grad(conv.b_id) = std::move(cg.grad_b);
  return std::move(cg.grad_x);
}

Tensor5 UNet::block_forward(const BlockPlan& block, const Tensor5& x,
                            NetMode mode, BlockCache* cache) {
  Tensor5 r1 = cnr_forward(block.conv1, block.norm1, x, mode,
                           cache != nullptr ? &cache->first : nullptr);
  Tensor5 r2 = cnr_forward(block.conv2, block.norm2, r1, mode,
                           cache != nullptr ? &cache->second : nullptr);
  if (cache != nullptr) cache->skip_channels = x.shape().c;
  return concat_channels(r2, x);
}

Tensor5 UNet::block_backward(const BlockPlan& block, const Tensor5& grad,
                             const BlockCache& cache) {
  auto [g2, gskip] = split_channels(grad, block.filters);
  Tensor5 g1 = cnr_backward(block.conv2, block.norm2, g2, cache.second);
  Tensor5 gx = cnr_backward(block.conv1, block.norm1, g1, cache.first);
  return add(gx, gskip);
}

std::pair<Tensor5, UNetCaches> UNet::forward(const Tensor5& x, NetMode mode) {
  const Shape5& s = x.shape();
  if (s.c != spec_.in_channels) {
    throw ShapeError("unet: input has " + std::to_string(s.c) +
                     " channels, expected " + std::to_string(spec_.in_channels));
  }
  const std::size_t div = static_cast<std::size_t>(1) << spec_.levels;
  if (s.d % div != 0 || s.h % div != 0 || s.w % div != 0) {
    throw ConfigError("unet: spatial extents " + s.to_string() +
                      " must be divisible by 2^levels = " + std::to_string(div));
  }

  UNetCaches caches;
  const bool record = (mode == NetMode::Train);
  if (record) {
    caches.enc.resize(spec_.levels + 1);
    caches.pools.resize(spec_.levels);
    caches.ups.resize(spec_.levels);
    caches.dec.resize(spec_.levels);
  }

  std::vector<Tensor5> enc_out(spec_.levels);
  Tensor5 cur = x;
  for (std::size_t l = 0; l < spec_.levels; ++l) {
    Tensor5 e = block_forward(enc_[l], cur, mode,
                              record ? &caches.enc[l] : nullptr);
    cur = maxpool2_forward(e, record ? &caches.pools[l] : nullptr);
    enc_out[l] = std::move(e);
  }
  cur = block_forward(enc_[spec_.levels], cur, mode,
                      record ? &caches.enc[spec_.levels] : nullptr);

  for (std::size_t l = spec_.levels; l-- > 0;) {
    if (record) caches.ups[l].pre_up_shape = cur.shape();
    Tensor5 u = upsample2_forward(cur);
    Tensor5 r = cnr_forward(ups_[l].conv, ups_[l].norm, u, mode,
                            record ? &caches.ups[l].cnr : nullptr);
    Tensor5 cat = concat_channels(r, enc_out[l]);
    cur = block_forward(dec_[l], cat, mode, record ? &caches.dec[l] : nullptr);
  }

  Tensor5 t = conv3d_forward(cur, head_.spec, params_.value(head_.w_id),
                             params_.value(head_.b_id),
                             record ? &caches.head : nullptr);
  Tensor5 y = sigmoid_forward(t);
  if (record) caches.sigmoid_out = y;
  return {std::move(y), std::move(caches)};
}

Tensor5 UNet::infer(const Tensor5& x) {
  return forward(x, NetMode::Infer).first;
}

Tensor5 UNet::backward(const Tensor5& grad_y, const UNetCaches& caches) {
  if (caches.enc.size() != spec_.levels + 1) {
    throw UsageError("unet backward: caches were not produced in train mode");
  }
  params_.zero_grads();

  Tensor5 g = sigmoid_backward(grad_y, caches.sigmoid_out);
  Conv3dGrads hg = conv3d_backward(g, caches.head, params_.value(head_.w_id));
  params_.grad(head_.w_id) = std::move(hg.grad_w);
  params_.grad(head_.b_id) = std::move(hg.grad_b);
  Tensor5 cur = std::move(hg.grad_x);

  std::vector<Tensor5> grad_enc(spec_.levels);
  for (std::size_t l = 0; l < spec_.levels; ++l) {
    Tensor5 gcat = block_backward(dec_[l], cur, caches.dec[l]);
    auto [gr, ge] = split_channels(gcat, ups_[l].conv.spec.out_channels);
    grad_enc[l] = std::move(ge);
    Tensor5 gu = cnr_backward(ups_[l].conv, ups_[l].norm, gr, caches.ups[l].cnr);
    cur = upsample2_backward(gu, caches.ups[l].pre_up_shape);
  }

  cur = block_backward(enc_[spec_.levels], cur, caches.enc[spec_.levels]);
  for (std::size_t l = spec_.levels; l-- > 0;) {
    Tensor5 ge = add(maxpool2_backward(cur, caches.pools[l]), grad_enc[l]);
    cur = block_backward(enc_[l], ge, caches.enc[l]);
  }
  return cur;
}

void UNet::update_running_stats(const UNetCaches& caches) {
  if (spec_.norm.kind != NormKind::Batch) return;
  auto update_site = [this](const NormSite& site, const CnrCache& cache) {
    if (!cache.norm_used) return;
    RunningStats rs;
    const auto m = params_.value(site.rmean_id).data();
    const auto v = params_.value(site.rvar_id).data();
    rs.mean.assign(m.begin(), m.end());
    rs.var.assign(v.begin(), v.end());
    rs.momentum = spec_.bn_momentum;
    const RunningStats next = batchnorm_update_running(rs, cache.norm);
    auto mo = params_.value(site.rmean_id).data();
    auto vo = params_.value(site.rvar_id).data();
    std::copy(next.mean.begin(), next.mean.end(), mo.begin());
    std::copy(next.var.begin(), next.var.end(), vo.begin());
  };
  for (std::size_t l = 0; l <= spec_.levels && l < caches.enc.size(); ++l) {
    const BlockPlan& b = enc_[l];
    update_site(b.norm1, caches.enc[l].first);
    update_site(b.norm2, caches.enc[l].second);
  }
  for (std::size_t l = 0; l < spec_.levels && l < caches.ups.size(); ++l) {
    update_site(ups_[l].norm, caches.ups[l].cnr);
    update_site(dec_[l].norm1, caches.dec[l].first);
    update_site(dec_[l].norm2, caches.dec[l].second);
  }
}

}  // namespace norm3d
