#include "lhc/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "lhc/errors.hpp"
#include "lhc/ops.hpp"

namespace lhc {
namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

int argmax_row(const Tensor& m, std::size_t row) {
  int best = 0;
  for (std::size_t k = 1; k < m.dim(1); ++k)
    if (m.at(row, k) > m.at(row, static_cast<std::size_t>(best)))
      best = static_cast<int>(k);
  return best;
}

void check_labels(std::span<const int> labels, std::size_t classes,
                  const char* where) {
  for (int label : labels)
    if (label < 0 || static_cast<std::size_t>(label) >= classes)
      throw ValueError(std::string(where) + ": label " +
                       std::to_string(label) + " outside 0.." +
                       std::to_string(classes - 1));
}

}  // namespace

Var crossentropy_loss(Tape& tape, const Var& logits,
                      std::span<const int> labels) {
  if (logits.tape != &tape)
    throw ValueError("crossentropy: logits live on a different tape");
  const Tensor& z = logits.value();
  if (z.rank() != 2)
    throw ShapeError("crossentropy expects [B,K] logits, got rank " +
                     std::to_string(z.rank()));
  if (labels.size() != z.dim(0))
    throw ShapeError("crossentropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(z.dim(0)) + " rows");
  check_labels(labels, z.dim(1), "crossentropy");
  const std::vector<int> cols(labels.begin(), labels.end());
  const Var picked = ops::pick_per_row(ops::log_softmax_rows(logits), cols);
  return ops::affine(ops::mean(picked), -1.0, 0.0);
}

double crossentropy(const Tensor& logits, std::span<const int> labels) {
  Tape tape;
  return crossentropy_loss(tape, tape.leaf(logits), labels).value()[0];
}

void sgd_step(Tensor& param, const Tensor& grad, double lr, double momentum,
              Tensor* velocity) {
  if (!param.same_shape(grad))
    throw ShapeError("sgd_step: parameter/gradient shape mismatch");
  if (velocity == nullptr) {
    if (momentum != 0.0)
      throw ValueError("sgd_step: momentum needs a velocity buffer");
    for (std::size_t i = 0; i < param.size(); ++i) param[i] -= lr * grad[i];
    return;
  }
  if (!velocity->same_shape(param))
    throw ShapeError("sgd_step: velocity shape mismatch");
  for (std::size_t i = 0; i < param.size(); ++i) {
    (*velocity)[i] = momentum * (*velocity)[i] + grad[i];
    param[i] -= lr * (*velocity)[i];
  }
}

void adam_step(AdamState& state, Tensor& param, const Tensor& grad,
               double lr, double beta1, double beta2, double epsilon) {
  if (!param.same_shape(grad))
    throw ShapeError("adam_step: parameter/gradient shape mismatch");
  if (state.t == 0) {
    state.m = Tensor(param.shape());
    state.v = Tensor(param.shape());
  } else if (!state.m.same_shape(param)) {
    throw ShapeError("adam_step: state shaped for a different parameter");
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad[i];
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + epsilon);
  }
}

void OptimizerConfig::validate() const {
  if (lr < 0.0) throw ConfigError("optimizer: lr must be nonnegative");
  if (momentum < 0.0 || momentum >= 1.0)
    throw ConfigError("optimizer: momentum must be in [0, 1)");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw ConfigError("optimizer: betas must be in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("optimizer: epsilon must be > 0");
}

Optimizer::Optimizer(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

void Optimizer::step(std::span<Tensor* const> params,
                     std::span<const Tensor> grads,
                     const std::vector<bool>* update_mask) {
  if (params.size() != grads.size())
    throw ShapeError("optimizer: parameter/gradient count mismatch");
  if (update_mask != nullptr && update_mask->size() != params.size())
    throw ShapeError("optimizer: mask size mismatch");

  if (cfg_.kind == OptimizerConfig::Kind::sgd) {
    if (cfg_.momentum != 0.0 && velocity_.size() != params.size()) {
      velocity_.clear();
      for (const Tensor* p : params) velocity_.emplace_back(p->shape());
    }
  } else if (adam_.size() != params.size()) {
    adam_.assign(params.size(), AdamState{});
  }

  for (std::size_t i = 0; i < params.size(); ++i) {
    if (update_mask != nullptr && !(*update_mask)[i]) continue;
    if (cfg_.kind == OptimizerConfig::Kind::sgd) {
      Tensor* vel = cfg_.momentum != 0.0 ? &velocity_[i] : nullptr;
      sgd_step(*params[i], grads[i], cfg_.lr, cfg_.momentum, vel);
    } else {
      adam_step(adam_[i], *params[i], grads[i], cfg_.lr, cfg_.beta1,
                cfg_.beta2, cfg_.epsilon);
    }
  }
  ++steps_;
}

void Optimizer::reset() {
  steps_ = 0;
  velocity_.clear();
  adam_.clear();
}

void StageConfig::validate() const {
  optimizer.validate();
  if (batch_size < 1) throw ConfigError("stage: batch_size must be >= 1");
  if (patience < 1) throw ConfigError("stage: patience must be >= 1");
  if (max_epochs < 1) throw ConfigError("stage: max_epochs must be >= 1");
  augment.validate();
}

std::vector<StageConfig> four_stage_protocol() {
  std::vector<StageConfig> stages(4);

  stages[0].optimizer.kind = OptimizerConfig::Kind::adam;
  stages[0].optimizer.lr = 1e-4;
  stages[0].batch_size = 48;
  stages[0].patience = 30;
  stages[0].augment.rotation_deg = 30.0;

  for (std::size_t i = 1; i < 4; ++i) {
    stages[i].optimizer.kind = OptimizerConfig::Kind::sgd;
    stages[i].optimizer.lr = 0.01;
    stages[i].batch_size = 64;
  }
  stages[1].patience = 10;
  stages[1].augment.rotation_deg = 10.0;
  stages[1].augment.shift_frac = 0.1;
  stages[1].augment.zoom_frac = 0.1;
  stages[2].patience = 5;
  stages[3].patience = 3;
  return stages;
}

std::string history_csv(std::span<const EpochStats> history) {
  std::string out = "epoch,train_loss,val_accuracy\n";
  for (const EpochStats& e : history) {
    out += std::to_string(e.epoch);
    out += ',';
    out += fmt_double(e.train_loss);
    out += ',';
    out += fmt_double(e.val_accuracy);
    out += '\n';
  }
  return out;
}

StageResult run_stage(Model& model, std::span<const Sample> train,
                      std::span<const Sample> val, const StageConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw ValueError("run_stage: empty training set");
  if (val.empty()) throw ValueError("run_stage: empty validation set");

  const std::vector<ParamInfo>& manifest = model.manifest();
  std::vector<bool> mask;
  if (cfg.freeze_backbone) {
    mask.reserve(manifest.size());
    for (const ParamInfo& p : manifest)
      mask.push_back(p.kind != ParamKind::backbone);
  }

  std::mt19937_64 rng(cfg.seed);
  Optimizer opt(cfg.optimizer);

  StageResult result;
  result.baseline_val_accuracy = evaluate(model, val).accuracy;
  double best = result.baseline_val_accuracy;
  Model best_model = model;
  int epochs_since_best = 0;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::vector<Tensor> work(manifest.size());
  std::vector<Tensor*> work_ptrs(manifest.size());
  for (std::size_t i = 0; i < manifest.size(); ++i)
    work_ptrs[i] = &work[i];

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t batch =
          std::min(order.size() - start,
                   static_cast<std::size_t>(cfg.batch_size));
      std::vector<Tensor> images;
      std::vector<int> labels;
      images.reserve(batch);
      labels.reserve(batch);
      for (std::size_t i = 0; i < batch; ++i) {
        const Sample& s = train[order[start + i]];
        const AffineParams view =
            sample_affine(cfg.augment, static_cast<int>(s.image.dim(0)),
                          static_cast<int>(s.image.dim(1)), rng);
        images.push_back(apply_affine_channels(s.image, view));
        labels.push_back(s.label);
      }

      Tape tape;
      const std::vector<Var> params = model.register_params(tape);
      const Var logits = model.forward_batch(tape, images, params);
      const Var loss = crossentropy_loss(tape, logits, labels);
      tape.backward(loss);
      loss_sum += loss.value()[0] * static_cast<double>(batch);

      std::vector<Tensor> grads;
      grads.reserve(params.size());
      for (const Var& v : params) grads.push_back(tape.grad(v));
      for (std::size_t i = 0; i < manifest.size(); ++i)
        work[i] = model.param(manifest[i].name);
      opt.step(work_ptrs, grads, cfg.freeze_backbone ? &mask : nullptr);
      for (std::size_t i = 0; i < manifest.size(); ++i)
        model.set_param(manifest[i].name, work[i]);
    }

    const double train_loss = loss_sum / static_cast<double>(train.size());
    const double val_accuracy = evaluate(model, val).accuracy;
    result.history.push_back({epoch, train_loss, val_accuracy});
    result.epochs_run = epoch;

    if (val_accuracy > best) {
      best = val_accuracy;
      best_model = model;
      result.best_epoch = epoch;
      epochs_since_best = 0;
    } else if (++epochs_since_best >= cfg.patience) {
      result.early_stopped = true;
      break;
    }
  }

  model = std::move(best_model);
  result.best_val_accuracy = best;
  return result;
}

RejectionVerdict rejection_check(double trained_loss, double base_loss) {
  if (!std::isfinite(trained_loss) || !std::isfinite(base_loss))
    return RejectionVerdict::rejected_divergent;
  return trained_loss < base_loss * 1.10 ? RejectionVerdict::accepted
                                         : RejectionVerdict::rejected;
}

Evaluation evaluate(const Model& model, std::span<const Sample> data,
                    const TtaPlan* tta) {
  if (data.empty()) throw ValueError("evaluate: empty dataset");
  if (tta != nullptr) tta->validate();
  const std::size_t classes =
      static_cast<std::size_t>(model.spec().num_classes);

  Evaluation ev;
  ev.total = data.size();
  ev.confusion.assign(classes, std::vector<std::size_t>(classes, 0));

  std::size_t correct = 0;
  auto record = [&](int label, int predicted) {
    if (label < 0 || static_cast<std::size_t>(label) >= classes)
      throw ValueError("evaluate: label " + std::to_string(label) +
                       " outside 0.." + std::to_string(classes - 1));
    ev.confusion[static_cast<std::size_t>(label)]
                [static_cast<std::size_t>(predicted)] += 1;
    if (label == predicted) ++correct;
  };

  if (tta == nullptr) {
    constexpr std::size_t kChunk = 64;
    for (std::size_t start = 0; start < data.size(); start += kChunk) {
      const std::size_t batch = std::min(kChunk, data.size() - start);
      std::vector<Tensor> images;
      images.reserve(batch);
      for (std::size_t i = 0; i < batch; ++i)
        images.push_back(data[start + i].image);
      const Tensor logits = model.logits_batch(images);
      for (std::size_t i = 0; i < batch; ++i)
        record(data[start + i].label, argmax_row(logits, i));
    }
  } else {
    for (const Sample& s : data) {
      std::vector<Tensor> views;
      views.reserve(tta->entries.size());
      for (const TtaEntry& e : tta->entries)
        views.push_back(apply_affine_channels(s.image, e.transform));
      const Tensor logits = model.logits_batch(views);
      record(s.label, tta_aggregate(logits, *tta).predicted);
    }
  }

  ev.accuracy = static_cast<double>(correct) / static_cast<double>(ev.total);
  return ev;
}

}  // namespace lhc
