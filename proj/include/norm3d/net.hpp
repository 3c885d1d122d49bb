#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "norm3d/norm.hpp"
#include "norm3d/rng.hpp"
#include "norm3d/tensor.hpp"

namespace norm3d {

/// Same-padding 3D convolution descriptor. Kernel extents must be odd so
/// "same" padding preserves (D, H, W); taps are spaced by the dilation.
struct Conv3dSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::array<std::size_t, 3> kernel{3, 3, 3};
  std::array<std::size_t, 3> dilation{1, 1, 1};
};

/// Weight tensor layout for Conv3dSpec: Shape5(kd, kh, kw, cin, cout),
/// i.e. output channels contiguous. Bias is Shape5(1, 1, 1, 1, cout).
Shape5 conv3d_weight_shape(const Conv3dSpec& spec);
Shape5 conv3d_bias_shape(const Conv3dSpec& spec);

struct Conv3dCache {
  Conv3dSpec spec;
  Tensor5 input;
};

Tensor5 conv3d_forward(const Tensor5& x, const Conv3dSpec& spec,
                       const Tensor5& weights, const Tensor5& bias,
                       Conv3dCache* cache = nullptr);

struct Conv3dGrads {
  Tensor5 grad_x;
  Tensor5 grad_w;
  Tensor5 grad_b;
};

Conv3dGrads conv3d_backward(const Tensor5& grad_y, const Conv3dCache& cache,
                            const Tensor5& weights);

// 2x2x2 max-pool / nearest-neighbor upsample over (D, H, W).

struct MaxPoolCache {
  Shape5 in_shape;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

Tensor5 maxpool2_forward(const Tensor5& x, MaxPoolCache* cache = nullptr);
Tensor5 maxpool2_backward(const Tensor5& grad_y, const MaxPoolCache& cache);

Tensor5 upsample2_forward(const Tensor5& x);
Tensor5 upsample2_backward(const Tensor5& grad_y, const Shape5& in_shape);

/// Concatenation along the channel axis; `a` occupies channels [0, a.c).
Tensor5 concat_channels(const Tensor5& a, const Tensor5& b);
std::pair<Tensor5, Tensor5> split_channels(const Tensor5& x,
                                           std::size_t a_channels);

Tensor5 relu_forward(const Tensor5& x);
/// grad * 1[activation output > 0]; pass the cached forward output.
Tensor5 relu_backward(const Tensor5& grad_y, const Tensor5& relu_out);

Tensor5 sigmoid_forward(const Tensor5& x);
Tensor5 sigmoid_backward(const Tensor5& grad_y, const Tensor5& sigmoid_out);

/// Named parameter tensors with matching gradient slots. Entries flagged
/// non-trainable (BatchNorm running statistics) are skipped by optimizers
/// but still checkpointed.
class ParamStore {
 public:
  std::size_t add(const std::string& name, Tensor5 value, bool trainable = true);
  std::size_t id(const std::string& name) const;
  bool contains(const std::string& name) const;

  Tensor5& value(std::size_t id) { return values_[id]; }
  const Tensor5& value(std::size_t id) const { return values_[id]; }
  Tensor5& grad(std::size_t id) { return grads_[id]; }
  const Tensor5& grad(std::size_t id) const { return grads_[id]; }
  bool trainable(std::size_t id) const { return trainable_[id]; }
  const std::string& name(std::size_t id) const { return names_[id]; }

  std::size_t count() const { return values_.size(); }
  std::size_t scalar_count(bool trainable_only = false) const;
  void zero_grads();

 private:
  std::vector<std::string> names_;
  std::vector<Tensor5> values_;
  std::vector<Tensor5> grads_;
  std::vector<bool> trainable_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Miniature 3D residual U-Net. Residual blocks are
/// [conv(dil=1) -> norm -> ReLU -> conv(dil=2) -> norm -> ReLU] whose output
/// is concatenated with the block input along C. Downsampling is 2x2x2
/// max-pool; upsampling is nearest-neighbor followed by a conv/norm/ReLU
/// stage. The head is a 1x1x1 convolution with sigmoid activation.
struct UNetSpec {
  std::size_t levels = 2;
  std::size_t base_filters = 8;
  std::size_t in_channels = 1;
  NormMethod norm;
  double bn_momentum = 0.99;
  bool deterministic = true;
};

enum class NetMode { Train, Infer };

struct CnrCache {  // conv -> norm -> relu
  Conv3dCache conv;
  NormCache norm;
  bool norm_used = false;
  Tensor5 act_out;
};

struct BlockCache {
  CnrCache first;
  CnrCache second;
  std::size_t skip_channels = 0;
};

struct UpCache {
  Shape5 pre_up_shape;
  CnrCache cnr;
};

struct UNetCaches {
  std::vector<BlockCache> enc;  // levels + 1, last entry is the bottleneck
  std::vector<MaxPoolCache> pools;
  std::vector<UpCache> ups;
  std::vector<BlockCache> dec;
  Conv3dCache head;
  Tensor5 sigmoid_out;
};

class UNet {
 public:
  /// Deterministic construction: He-uniform conv kernels, zero biases,
  /// gamma=1, beta=0, running mean=0 / var=1, drawn in fixed layer order.
  UNet(const UNetSpec& spec, std::uint64_t seed);

  const UNetSpec& spec() const { return spec_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// Train mode computes per-input statistics at every norm site; infer
  /// mode sends Batch sites through their running statistics instead.
  std::pair<Tensor5, UNetCaches> forward(const Tensor5& x, NetMode mode);

  /// Convenience single-output inference.
  Tensor5 infer(const Tensor5& x);

  /// Fills every gradient slot (existing contents are discarded) and
  /// returns the gradient with respect to the input.
  Tensor5 backward(const Tensor5& grad_y, const UNetCaches& caches);

  /// EMA update of all BatchNorm running statistics from a train-mode cache.
  void update_running_stats(const UNetCaches& caches);

  /// Channel count at every normalization site, in graph order. Used to
  /// decide whether a Group configuration divides evenly everywhere.
  static std::vector<std::size_t> norm_site_channels(std::size_t levels,
                                                     std::size_t base_filters);

 private:
  struct ConvLayer {
    Conv3dSpec spec;
    std::size_t w_id = 0, b_id = 0;
  };
  struct NormSite {
    std::size_t channels = 0;
    std::size_t gamma_id = 0, beta_id = 0;
    std::size_t rmean_id = 0, rvar_id = 0;  // Batch only
  };
  struct BlockPlan {
    ConvLayer conv1, conv2;
    NormSite norm1, norm2;
    std::size_t in_channels = 0, filters = 0, out_channels = 0;
  };
  struct UpPlan {
    ConvLayer conv;
    NormSite norm;
  };

  ConvLayer add_conv(const std::string& name, const Conv3dSpec& spec, Rng& rng);
  NormSite add_norm(const std::string& name, std::size_t channels);
  BlockPlan add_block(const std::string& name, std::size_t in_ch,
                      std::size_t filters, Rng& rng);

  Tensor5 cnr_forward(const ConvLayer& conv, const NormSite& site,
                      const Tensor5& x, NetMode mode, CnrCache* cache);
  Tensor5 cnr_backward(const ConvLayer& conv, const NormSite& site,
                       const Tensor5& grad, const CnrCache& cache);
  Tensor5 block_forward(const BlockPlan& block, const Tensor5& x, NetMode mode,
                        BlockCache* cache);
  Tensor5 block_backward(const BlockPlan& block, const Tensor5& grad,
                         const BlockCache& cache);

  AffineParams affine_of(const NormSite& site) const;
  const NormPartition& partition_for(const Shape5& shape);

  UNetSpec spec_;
  ParamStore params_;
  std::vector<BlockPlan> enc_;  // levels + 1 (bottleneck last)
  std::vector<UpPlan> ups_;
  std::vector<BlockPlan> dec_;
  ConvLayer head_;

  // Partitions are pure functions of (method, shape); cached per shape.
  std::unordered_map<std::string, NormPartition> partitions_;
};

}  // namespace norm3d
