#include "norm3d/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include "norm3d/errors.hpp"
#include "norm3d/objective.hpp"
#include "norm3d/rng.hpp"
#include "norm3d/tensor_io.hpp"

namespace norm3d {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

bool params_finite(const ParamStore& params) {
  for (std::size_t i = 0; i < params.count(); ++i) {
    if (!params.value(i).all_finite()) return false;
  }
  return true;
}

/// Stacks slabs along the batch axis. Single-slab batches are passed
/// through unchanged so batch size 1 stays copy-free.
Tensor5 stack_batch(const std::vector<const Tensor5*>& parts) {
  if (parts.size() == 1) return *parts.front();
  Shape5 s = parts.front()->shape();
  s.n = parts.size();
  Tensor5 out(s);
  auto po = out.data();
  const std::size_t stride = parts.front()->size();
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i]->shape().n != 1 || parts[i]->size() != stride) {
      throw ShapeError("stack_batch: slabs have inconsistent shapes");
    }
    std::copy(parts[i]->data().begin(), parts[i]->data().end(),
              po.begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  return out;
}

}  // namespace

AdamState AdamState::init(const ParamStore& params) {
  AdamState s;
  s.m.reserve(params.count());
  s.v.reserve(params.count());
  for (std::size_t i = 0; i < params.count(); ++i) {
    s.m.emplace_back(Tensor5::zeros(params.value(i).shape()));
    s.v.emplace_back(Tensor5::zeros(params.value(i).shape()));
  }
  return s;
}

void adam_step(ParamStore& params, AdamState& state, double lr, double beta1,
               double beta2, double eps) {
  if (state.m.size() != params.count()) {
    throw UsageError("adam_step: state was initialized for a different store");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.count(); ++i) {
    if (!params.trainable(i)) continue;
    auto p = params.value(i).data();
    const auto g = params.grad(i).data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
      v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

SgdState SgdState::init(const ParamStore& params) {
  SgdState s;
  s.velocity.reserve(params.count());
  for (std::size_t i = 0; i < params.count(); ++i) {
    s.velocity.emplace_back(Tensor5::zeros(params.value(i).shape()));
  }
  return s;
}

void sgd_step(ParamStore& params, SgdState& state, double lr, double momentum) {
  if (state.velocity.size() != params.count()) {
    throw UsageError("sgd_step: state was initialized for a different store");
  }
  for (std::size_t i = 0; i < params.count(); ++i) {
    if (!params.trainable(i)) continue;
    auto p = params.value(i).data();
    const auto g = params.grad(i).data();
    auto v = state.velocity[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = momentum * v[k] - lr * g[k];
      p[k] += v[k];
    }
  }
}

std::vector<EpochRecord> train(UNet& net, const std::vector<Volume>& dataset,
                               const TrainConfig& config) {
  if (dataset.empty()) throw UsageError("train: dataset is empty");
  if (config.learning_rate < 0.0) throw ConfigError("train: negative learning rate");
  if (config.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");

  // Flatten the dataset into (data, mask) slab samples once.
  std::vector<SlabBatch> samples;
  for (const Volume& vol : dataset) {
    for (SlabBatch& slab : slice_slabs(vol)) samples.push_back(std::move(slab));
  }

  AdamState adam;
  SgdState sgd;
  if (config.optimizer == OptimizerKind::Adam) {
    adam = AdamState::init(net.params());
  } else {
    sgd = SgdState::init(net.params());
  }

  Rng shuffle_rng(mix_seed(config.seed, 0x5u));
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<EpochRecord> records;
  bool diverged = false;
  for (std::size_t epoch = 0; epoch < config.epochs && !diverged; ++epoch) {
    const auto start = Clock::now();
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t at = 0; at < order.size() && !diverged;
         at += config.batch_size) {
      const std::size_t take =
          std::min(config.batch_size, order.size() - at);
      std::vector<const Tensor5*> xs, ys;
      for (std::size_t k = 0; k < take; ++k) {
        xs.push_back(&samples[order[at + k]].data);
        ys.push_back(&samples[order[at + k]].mask);
      }
      const Tensor5 x = stack_batch(xs);
      const Tensor5 target = stack_batch(ys);

      auto [pred, caches] = net.forward(x, NetMode::Train);
      auto [loss, grad_pred] = bce_dice_loss(pred, target);

      if (!std::isfinite(loss) || loss > config.divergence_threshold) {
        diverged = true;
        loss_sum += std::isfinite(loss) ? loss : 0.0;
        ++steps;
        break;
      }

      net.backward(grad_pred, caches);
      if (config.optimizer == OptimizerKind::Adam) {
        adam_step(net.params(), adam, config.learning_rate, config.adam_beta1,
                  config.adam_beta2, config.adam_epsilon);
      } else {
        sgd_step(net.params(), sgd, config.learning_rate, config.sgd_momentum);
      }
      net.update_running_stats(caches);

      if (!params_finite(net.params())) diverged = true;
      loss_sum += loss;
      ++steps;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.mean_loss = steps > 0 ? loss_sum / static_cast<double>(steps) : 0.0;
    rec.seconds = seconds_since(start);
    rec.diverged = diverged;
    records.push_back(rec);
  }
  return records;
}

EvalResult evaluate(UNet& net, const std::vector<Volume>& volumes) {
  EvalResult result;
  const auto start = Clock::now();
  double dice_sum = 0.0;
  for (const Volume& vol : volumes) {
    const std::vector<SlabBatch> slabs = slice_slabs(vol);
    std::vector<Tensor5> preds;
    preds.reserve(slabs.size());
    for (const SlabBatch& slab : slabs) preds.push_back(net.infer(slab.data));
    const Grid3 mask = compose_prediction(slabs, preds);
    dice_sum += dice_hard(grid_to_tensor(mask), grid_to_tensor(vol.mask));
  }
  result.mean_dice = volumes.empty() ? 0.0 : dice_sum / volumes.size();
  result.seconds = seconds_since(start);
  return result;
}

namespace {

constexpr std::uint32_t kCheckpointMagic = 0x314b4333u;  // "3CK1"
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr const char* kMethodRecord = "meta.norm_method";

Tensor5 method_record(const NormMethod& method) {
  Tensor5 t(Shape5{1, 1, 1, 1, 3});
  t[0] = static_cast<double>(static_cast<int>(method.kind));
  t[1] = static_cast<double>(method.groups);
  t[2] = method.epsilon;
  return t;
}

}  // namespace

void save_checkpoint(const ParamStore& params, const NormMethod& method,
                     const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot open " + path + " for writing");
  detail::put_u32(out, kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(params.count() + 1));

  auto put_record = [&out](const std::string& name, const Tensor5& tensor) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(out, tensor);
  };
  put_record(kMethodRecord, method_record(method));
  for (std::size_t i = 0; i < params.count(); ++i) {
    put_record(params.name(i), params.value(i));
  }
  if (!out) throw DataError("checkpoint: write failed for " + path);
}

void load_checkpoint(const std::string& path, ParamStore& params,
                     const NormMethod& method) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path);
  if (detail::get_u32(in, "magic") != kCheckpointMagic) {
    throw FormatError("checkpoint: bad magic");
  }
  const std::uint32_t version = detail::get_u32(in, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " +
                      std::to_string(version));
  }
  const std::uint32_t count = detail::get_u32(in, "record count");
  if (count != params.count() + 1) {
    throw FormatError("checkpoint: record count " + std::to_string(count) +
                      " does not match the target network (" +
                      std::to_string(params.count() + 1) + ")");
  }

  std::vector<bool> seen(params.count(), false);
  for (std::uint32_t r = 0; r < count; ++r) {
    const std::uint32_t name_len = detail::get_u32(in, "name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw FormatError("checkpoint: truncated record name");
    Tensor5 tensor = read_tensor<double>(in);

    if (name == kMethodRecord) {
      const Tensor5 expect = method_record(method);
      if (!(tensor.shape() == expect.shape()) || tensor[0] != expect[0] ||
          tensor[1] != expect[1]) {
        throw FormatError(
            "checkpoint: stored normalization method does not match the "
            "target network");
      }
      continue;
    }
    if (!params.contains(name)) {
      throw FormatError("checkpoint: unexpected parameter " + name);
    }
    const std::size_t id = params.id(name);
    if (!(params.value(id).shape() == tensor.shape())) {
      throw FormatError("checkpoint: shape mismatch for " + name);
    }
    params.value(id) = std::move(tensor);
    seen[id] = true;
  }
  for (std::size_t i = 0; i < params.count(); ++i) {
    if (!seen[i]) {
      throw FormatError("checkpoint: missing parameter " + params.name(i));
    }
  }
}

}  // namespace norm3d
