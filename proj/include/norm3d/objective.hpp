#pragma once

#include <utility>

#include "norm3d/tensor.hpp"

namespace norm3d {

/// Mask threshold: a probability p is foreground iff p*255 >= 128.
inline constexpr double kMaskThreshold = 128.0 / 255.0;

/// Overlap metric 2|X n Y| / (|X| + |Y|) on strictly binary masks.
/// Both masks empty scores 1.0. Non-binary values raise DomainError.
double dice_hard(const Tensor5& pred_mask, const Tensor5& target);

/// Differentiable relaxation (2*sum(p*y) + s) / (sum(p) + sum(y) + s).
double dice_soft(const Tensor5& pred, const Tensor5& target,
                 double smoothing = 1.0);

/// Gradient of dice_soft with respect to pred.
Tensor5 dice_soft_grad(const Tensor5& pred, const Tensor5& target,
                       double smoothing = 1.0);

/// Mean binary cross-entropy with predictions clipped to
/// [1e-7, 1 - 1e-7] before the logarithms.
double bce(const Tensor5& pred, const Tensor5& target);

/// Combined objective: bce - dice_soft + 1, with its gradient w.r.t. pred.
std::pair<double, Tensor5> bce_dice_loss(const Tensor5& pred,
                                         const Tensor5& target,
                                         double smoothing = 1.0);

/// Binarizes probabilities with the fixed 128/255 threshold.
Tensor5 threshold_mask(const Tensor5& pred);

}  // namespace norm3d
