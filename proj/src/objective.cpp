#include "norm3d/objective.hpp"

#include <algorithm>
#include <cmath>

#include "norm3d/errors.hpp"

namespace norm3d {

namespace {

constexpr double kProbClip = 1e-7;

void require_same_shape(const Tensor5& a, const Tensor5& b, const char* who) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError(std::string(who) + ": shape mismatch " +
                     a.shape().to_string() + " vs " + b.shape().to_string());
  }
}

void require_binary(const Tensor5& t, const char* who) {
  for (double v : t.data()) {
    if (v != 0.0 && v != 1.0) {
      throw DomainError(std::string(who) + ": mask contains non-binary value");
    }
  }
}

}  // namespace

double dice_hard(const Tensor5& pred_mask, const Tensor5& target) {
  require_same_shape(pred_mask, target, "dice_hard");
  require_binary(pred_mask, "dice_hard");
  require_binary(target, "dice_hard");
  std::size_t tp = 0, px = 0, py = 0;
  const auto a = pred_mask.data();
  const auto b = target.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0.0;
    const bool y = b[i] != 0.0;
    px += x;
    py += y;
    tp += x && y;
  }
  if (px + py == 0) return 1.0;  // both empty: a perfect background call
  return 2.0 * static_cast<double>(tp) / static_cast<double>(px + py);
}

double dice_soft(const Tensor5& pred, const Tensor5& target, double smoothing) {
  require_same_shape(pred, target, "dice_soft");
  const auto p = pred.data();
  const auto y = target.data();
  double inter = 0.0, sum_p = 0.0, sum_y = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * y[i];
    sum_p += p[i];
    sum_y += y[i];
  }
  return (2.0 * inter + smoothing) / (sum_p + sum_y + smoothing);
}

Tensor5 dice_soft_grad(const Tensor5& pred, const Tensor5& target,
                       double smoothing) {
  require_same_shape(pred, target, "dice_soft_grad");
  const auto p = pred.data();
  const auto y = target.data();
  double inter = 0.0, sum_p = 0.0, sum_y = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * y[i];
    sum_p += p[i];
    sum_y += y[i];
  }
  const double num = 2.0 * inter + smoothing;
  const double den = sum_p + sum_y + smoothing;
  Tensor5 grad(pred.shape());
  auto g = grad.data();
  // d/dp_i [num/den] = (2*y_i*den - num) / den^2
  const double inv_den2 = 1.0 / (den * den);
  for (std::size_t i = 0; i < p.size(); ++i) {
    g[i] = (2.0 * y[i] * den - num) * inv_den2;
  }
  return grad;
}

double bce(const Tensor5& pred, const Tensor5& target) {
  require_same_shape(pred, target, "bce");
  const auto p = pred.data();
  const auto y = target.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], kProbClip, 1.0 - kProbClip);
    acc -= y[i] * std::log(q) + (1.0 - y[i]) * std::log(1.0 - q);
  }
  return acc / static_cast<double>(p.size());
}

std::pair<double, Tensor5> bce_dice_loss(const Tensor5& pred,
                                         const Tensor5& target,
                                         double smoothing) {
  require_same_shape(pred, target, "bce_dice_loss");
  const auto p = pred.data();
  const auto y = target.data();
  const double count = static_cast<double>(p.size());

  double bce_acc = 0.0;
  double inter = 0.0, sum_p = 0.0, sum_y = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], kProbClip, 1.0 - kProbClip);
    bce_acc -= y[i] * std::log(q) + (1.0 - y[i]) * std::log(1.0 - q);
    inter += p[i] * y[i];
    sum_p += p[i];
    sum_y += y[i];
  }
  const double bce_val = bce_acc / count;
  const double num = 2.0 * inter + smoothing;
  const double den = sum_p + sum_y + smoothing;
  const double dice_val = num / den;
  const double loss = bce_val - dice_val + 1.0;

  Tensor5 grad(pred.shape());
  auto g = grad.data();
  const double inv_den2 = 1.0 / (den * den);
  for (std::size_t i = 0; i < p.size(); ++i) {
    // BCE term: the clip makes the loss constant outside [clip, 1-clip].
    double g_bce = 0.0;
    if (p[i] > kProbClip && p[i] < 1.0 - kProbClip) {
      g_bce = (-y[i] / p[i] + (1.0 - y[i]) / (1.0 - p[i])) / count;
    }
    const double g_dice = (2.0 * y[i] * den - num) * inv_den2;
    g[i] = g_bce - g_dice;
  }
  return {loss, std::move(grad)};
}

Tensor5 threshold_mask(const Tensor5& pred) {
  return map_unary(pred,
                   [](double p) { return p >= kMaskThreshold ? 1.0 : 0.0; });
}

}  // namespace norm3d
