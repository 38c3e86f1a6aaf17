#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lhc/augment.hpp"
#include "lhc/backbone.hpp"
#include "lhc/tape.hpp"

namespace lhc {

// Mean negative log-likelihood of the targets under softmax(logits).
// logits: [B, K]; labels: B values in [0, K). Differentiable through the
// logits; a label outside [0, K) throws ValueError.
Var crossentropy_loss(Tape& tape, const Var& logits,
                      std::span<const int> labels);
double crossentropy(const Tensor& logits, std::span<const int> labels);

// p <- p - lr * g, with optional heavy-ball momentum when `velocity` is
// given: v <- momentum * v + g; p <- p - lr * v.
void sgd_step(Tensor& param, const Tensor& grad, double lr,
              double momentum = 0.0, Tensor* velocity = nullptr);

// Per-parameter Adam accumulator. t counts completed steps.
struct AdamState {
  Tensor m;
  Tensor v;
  std::size_t t = 0;
};

void adam_step(AdamState& state, Tensor& param, const Tensor& grad,
               double lr, double beta1 = 0.9, double beta2 = 0.999,
               double epsilon = 1e-7);

struct OptimizerConfig {
  enum class Kind { sgd, adam };

  Kind kind = Kind::sgd;
  double lr = 0.01;
  double momentum = 0.0;  // sgd only; default off
  double beta1 = 0.9;     // adam
  double beta2 = 0.999;   // adam
  double epsilon = 1e-7;  // adam

  void validate() const;
};

// Stateful wrapper holding one moment/velocity slot per parameter tensor,
// matched by position across calls.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg);

  const OptimizerConfig& config() const { return cfg_; }
  std::size_t steps() const { return steps_; }

  // One update over parallel parameter/gradient lists. Entries with
  // update_mask[i] == false keep their value and their state slot.
  void step(std::span<Tensor* const> params, std::span<const Tensor> grads,
            const std::vector<bool>* update_mask = nullptr);
  void reset();

 private:
  OptimizerConfig cfg_;
  std::size_t steps_ = 0;
  std::vector<Tensor> velocity_;
  std::vector<AdamState> adam_;
};

// One label-supervised image, layout [H, W, C].
struct Sample {
  Tensor image;
  int label = 0;
};

struct StageConfig {
  OptimizerConfig optimizer;
  int batch_size = 1;
  int patience = 1;      // epochs without strict improvement before stopping
  int max_epochs = 500;  // hard cap on top of patience
  AugmentConfig augment;
  std::uint64_t seed = 0;        // shuffle + augmentation stream
  bool freeze_backbone = false;  // train only attention and gate parameters

  void validate() const;
};

// The built-in four-stage schedule: Adam warm-up under strong rotation,
// then three SGD stages with progressively lighter augmentation and
// shorter patience.
std::vector<StageConfig> four_stage_protocol();

struct EpochStats {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_accuracy = 0.0;
};

// "epoch,train_loss,val_accuracy" header plus one row per entry.
std::string history_csv(std::span<const EpochStats> history);

struct StageResult {
  std::vector<EpochStats> history;
  double baseline_val_accuracy = 0.0;  // incoming weights, before epoch 1
  double best_val_accuracy = 0.0;
  int best_epoch = 0;  // 0 = the incoming weights
  int epochs_run = 0;
  bool early_stopped = false;
};

// Epoch loop: shuffle, augment, minibatch updates, then a validation pass.
// The incoming weights are scored first and count as the epoch-0 best, so
// a stage that never beats them restores them unchanged. Improvement is
// strict (>), and the model is left at the best-epoch snapshot.
StageResult run_stage(Model& model, std::span<const Sample> train,
                      std::span<const Sample> val, const StageConfig& cfg);

enum class RejectionVerdict { accepted, rejected, rejected_divergent };

// Accept a trained model iff its training loss stayed below the reference
// loss plus 10% (strict). Non-finite losses are divergence.
RejectionVerdict rejection_check(double trained_loss, double base_loss);

struct Evaluation {
  double accuracy = 0.0;
  std::size_t total = 0;
  // confusion[actual][predicted], K x K.
  std::vector<std::vector<std::size_t>> confusion;
};

// Accuracy plus confusion counts over a labelled set; with a plan, each
// sample is scored through its weighted multi-view aggregate.
Evaluation evaluate(const Model& model, std::span<const Sample> data,
                    const TtaPlan* tta = nullptr);

}  // namespace lhc
