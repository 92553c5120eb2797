#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "vmx/checkpoint.hpp"
#include "vmx/config.hpp"
#include "vmx/data.hpp"
#include "vmx/metrics.hpp"
#include "vmx/network.hpp"
#include "vmx/ops.hpp"
#include "vmx/optim.hpp"
#include "vmx/rng.hpp"

namespace vmx {

struct Batch {
  Tensor ct;      // [N,1,S,S]
  Tensor pet;     // [N,1,S,S]
  Tensor target;  // [N,S,S] class indices
};

// Stacks samples into batch tensors, resizing to `size` when they differ.
inline Batch make_batch(const std::vector<ModalityPair>& pairs, const std::vector<std::size_t>& indices,
                        std::size_t size) {
  if (indices.empty()) throw ParameterError("make_batch: empty batch");
  const std::size_t n = indices.size(), hw = size * size;
  std::vector<double> ct(n * hw), pet(n * hw), target(n * hw);
  for (std::size_t b = 0; b < n; ++b) {
    const ModalityPair& p = pairs.at(indices[b]);
    const bool same = p.height() == size && p.width() == size;
    const Tensor c = same ? p.ct : resize(p.ct, size);
    const Tensor q = same ? p.pet : resize(p.pet, size);
    const BinaryMask m = same ? p.mask : resize(p.mask, size);
    if (c.numel() != hw || q.numel() != hw) throw DimensionError("make_batch: sample " + p.id + " is not single-channel");
    std::copy(c.data().begin(), c.data().end(), ct.begin() + static_cast<std::ptrdiff_t>(b * hw));
    std::copy(q.data().begin(), q.data().end(), pet.begin() + static_cast<std::ptrdiff_t>(b * hw));
    for (std::size_t i = 0; i < hw; ++i) target[b * hw + i] = m.values[i];
  }
  return Batch{Tensor(Shape{n, 1, size, size}, std::move(ct)), Tensor(Shape{n, 1, size, size}, std::move(pet)),
               Tensor(Shape{n, size, size}, std::move(target))};
}

// mix * softDice(softmax(logits)) + (1 - mix) * CE(logits).
inline Tensor segmentation_loss(const Tensor& logits, const Tensor& target, double mix) {
  const Tensor ce = cross_entropy_with_logits(logits, target);
  if (mix == 0.0) return ce;
  const Tensor dl = soft_dice_loss(softmax_channels(logits), target);
  if (mix == 1.0) return dl;
  return add(scale(dl, mix), scale(ce, 1.0 - mix));
}

// Arg-max over classes per pixel; ties go to the lower class index.
inline std::vector<BinaryMask> logits_to_masks(const Tensor& logits) {
  detail::require_rank(logits, 4, "logits_to_masks", "logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1), h = logits.dim(2), w = logits.dim(3), hw = h * w;
  std::vector<BinaryMask> out;
  for (std::size_t b = 0; b < n; ++b) {
    BinaryMask m(h, w);
    for (std::size_t p = 0; p < hw; ++p) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c)
        if (logits[(b * k + c) * hw + p] > logits[(b * k + best) * hw + p]) best = c;
      m.values[p] = best == 1 ? 1 : 0;
    }
    out.push_back(std::move(m));
  }
  return out;
}

// Eval-mode predictions at the model's input size, mapped back to each sample's own size.
inline std::vector<BinaryMask> predict_masks(VMambaX& model, const std::vector<ModalityPair>& pairs,
                                             const std::vector<std::size_t>& indices, std::size_t batch_size = 8) {
  NoGradGuard guard;
  std::vector<BinaryMask> out;
  const std::size_t s = model.config.input_size;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::vector<std::size_t> chunk(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                         indices.begin() + static_cast<std::ptrdiff_t>(std::min(start + batch_size, indices.size())));
    const Batch b = make_batch(pairs, chunk, s);
    auto masks = logits_to_masks(model.forward(b.ct, b.pet, false).logits);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const ModalityPair& p = pairs[chunk[i]];
      BinaryMask m = std::move(masks[i]);
      if (p.height() != s || p.width() != s) {
        // Nearest resample back onto the sample grid.
        BinaryMask back(p.height(), p.width());
        for (std::size_t r = 0; r < p.height(); ++r)
          for (std::size_t c = 0; c < p.width(); ++c) back.at(r, c) = m.at(r * s / p.height(), c * s / p.width());
        m = std::move(back);
      }
      m.spacing_row = p.mask.spacing_row;
      m.spacing_col = p.mask.spacing_col;
      out.push_back(std::move(m));
    }
  }
  return out;
}

inline DatasetMetrics evaluate_dataset(VMambaX& model, const std::vector<ModalityPair>& pairs,
                                       const std::vector<std::size_t>& indices, std::size_t batch_size = 8) {
  const auto masks = predict_masks(model, pairs, indices, batch_size);
  std::vector<SampleMetrics> samples;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const ModalityPair& p = pairs[indices[i]];
    samples.push_back({p.id, compare_masks(masks[i], p.mask)});
  }
  return aggregate(std::move(samples));
}

inline DatasetMetrics evaluate_dataset(VMambaX& model, const std::vector<ModalityPair>& pairs, std::size_t batch_size = 8) {
  std::vector<std::size_t> all(pairs.size());
  std::iota(all.begin(), all.end(), 0);
  return evaluate_dataset(model, pairs, all, batch_size);
}

// First 80% of indices train, the rest validate.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

inline Split split_dataset(std::size_t count, double train_fraction = 0.8) {
  Split s;
  const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(count) + 1e-9));
  for (std::size_t i = 0; i < count; ++i) (i < n_train ? s.train : s.val).push_back(i);
  return s;
}

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double val_iou = 0.0;
  double val_dice = 0.0;
  std::optional<double> val_hd95;
  std::size_t val_hd95_undefined = 0;
  std::array<double, 4> gate_ct{};  // mean G_ct per stage over the epoch's training steps
  std::array<double, 4> gate_pet{};
  double seconds = 0.0;
};

inline std::string format_epoch(const EpochLog& e) {
  char buf[512];
  int n = std::snprintf(buf, sizeof buf, "epoch %zu loss %.6f val_iou %.4f val_dice %.4f val_hd95 %s", e.epoch,
                        e.mean_loss, e.val_iou, e.val_dice,
                        e.val_hd95 ? std::to_string(*e.val_hd95).c_str() : "NA");
  std::string s(buf, static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < 4; ++i) {
    std::snprintf(buf, sizeof buf, " gate%zu %.4f/%.4f", i, e.gate_ct[i], e.gate_pet[i]);
    s += buf;
  }
  std::snprintf(buf, sizeof buf, " (%.1fs)", e.seconds);
  return s + buf;
}

struct TrainOptions {
  std::ostream* log = nullptr;
  std::size_t max_steps = 0;      // stop after this many optimizer steps (0: no limit)
  bool save_checkpoint = true;
  bool validate = true;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  double first_step_loss = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> step_losses;
  double best_val_dice = -1.0;
  std::size_t best_epoch = 0;
  std::uint64_t steps = 0;
};

inline TrainResult train(VMambaX& model, const TrainConfig& cfg, const std::vector<ModalityPair>& data,
                         const TrainOptions& opt = {}) {
  cfg.validate();
  const Split split = split_dataset(data.size());
  if (split.train.empty()) throw ParameterError("train: dataset has no training samples");
  Rng rng(mix_seed(cfg.seed, 0x747261696e));
  const std::size_t s = model.config.input_size;
  const std::size_t steps_per_epoch = (split.train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::uint64_t total_steps = static_cast<std::uint64_t>(steps_per_epoch) * cfg.epochs;
  AdamWOptions aopt;
  aopt.weight_decay = cfg.weight_decay;
  AdamWState state;
  std::vector<Tensor> params;
  for (auto& [name, t] : model.named_parameters()) params.push_back(t);

  TrainResult result;
  std::vector<std::size_t> order = split.train;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)))]);
    }
    EpochLog log;
    log.epoch = epoch;
    double loss_sum = 0.0;
    std::size_t loss_n = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<ModalityPair> samples;
      for (std::size_t k = start; k < std::min(start + cfg.batch_size, order.size()); ++k) {
        samples.push_back(cfg.augment ? augment(data[order[k]], rng) : data[order[k]]);
      }
      std::vector<std::size_t> idx(samples.size());
      std::iota(idx.begin(), idx.end(), 0);
      const Batch batch = make_batch(samples, idx, s);
      model.zero_grad();
      const ForwardResult fw = model.forward(batch.ct, batch.pet, true);
      const Tensor loss = segmentation_loss(fw.logits, batch.target, cfg.loss_mix);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericalError("non-finite loss " + std::to_string(value) + " at step " + std::to_string(result.steps) +
                             " (epoch " + std::to_string(epoch) + ")");
      }
      for (std::size_t i = 0; i < 4; ++i) {
        log.gate_ct[i] += summarize(fw.gates[i].g_ct).mean;
        log.gate_pet[i] += summarize(fw.gates[i].g_pet).mean;
      }
      backward(loss);
      adamw_step(params, state, cosine_lr(result.steps, total_steps, cfg.base_lr), aopt);
      if (result.steps == 0) result.first_step_loss = value;
      result.step_losses.push_back(value);
      ++result.steps;
      loss_sum += value;
      ++loss_n;
      if (opt.max_steps && result.steps >= opt.max_steps) break;
    }
    log.mean_loss = loss_sum / static_cast<double>(loss_n);
    for (std::size_t i = 0; i < 4; ++i) {
      log.gate_ct[i] /= static_cast<double>(loss_n);
      log.gate_pet[i] /= static_cast<double>(loss_n);
    }
    if (opt.validate && !split.val.empty()) {
      const DatasetMetrics m = evaluate_dataset(model, data, split.val);
      log.val_iou = m.mean_iou;
      log.val_dice = m.mean_dice;
      log.val_hd95 = m.mean_hd95;
      log.val_hd95_undefined = m.hd95_undefined;
      if (log.val_dice > result.best_val_dice) {
        result.best_val_dice = log.val_dice;
        result.best_epoch = epoch;
        if (opt.save_checkpoint && !cfg.checkpoint_path.empty()) {
          save_checkpoint(cfg.checkpoint_path, model, &state,
                          {{"epoch", static_cast<double>(epoch)},
                           {"val_dice", log.val_dice},
                           {"val_iou", log.val_iou},
                           {"val_hd95", log.val_hd95.value_or(-1.0)}});
        }
      }
    }
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (opt.log) *opt.log << format_epoch(log) << std::endl;
    result.epochs.push_back(log);
    if (opt.max_steps && result.steps >= opt.max_steps) break;
  }
  return result;
}

}  // namespace vmx
