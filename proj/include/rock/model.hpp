#pragma once

// Toy fully convolutional part segmenter and the whole-object (ROW) baseline
// built on the same trunk:
//
//   x -> normalize -> conv3x3 -> ReLU -> conv3x3 -> ReLU -> 1x1 conv (K+1)   [segmenter]
//                                                     \-> global avg pool -> linear (C) [baseline]
//
// All convolutions are stride 1 with zero padding, so H×W is preserved.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rock/catalog.hpp"
#include "rock/oracle.hpp"
#include "rock/sample.hpp"
#include "rock/tensor.hpp"

namespace rock {

struct TrunkShape {
  int in_channels = 3;
  int hidden1 = 8;
  int hidden2 = 8;
};

struct Trunk {
  Tensor w1, b1;  // (h1, in, 3, 3), (h1)
  Tensor w2, b2;  // (h2, h1, 3, 3), (h2)

  TrunkShape shape() const;
};

struct SegModel {
  Trunk trunk;
  Tensor head_w, head_b;  // (K+1, h2), (K+1)
  std::uint64_t seed = 0;

  int out_channels() const { return static_cast<int>(head_b.size()); }
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
};

struct RowModel {
  Trunk trunk;
  Tensor head_w, head_b;  // (C, h2), (C)
  std::uint64_t seed = 0;

  int num_classes() const { return static_cast<int>(head_b.size()); }
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
};

/// He-normal weights, zero biases.
SegModel init_seg_model(const TrunkShape& shape, int out_channels, std::uint64_t seed);
RowModel init_row_model(const TrunkShape& shape, int num_classes, std::uint64_t seed);

/// Zeroed copy with the same tensor shapes; used for gradients.
SegModel zeros_like(const SegModel& m);
RowModel zeros_like(const RowModel& m);

/// (K+1)×H×W logits for a (3,H,W) image in [0,1].
Tensor forward(const SegModel& model, const Tensor& x);

struct SegGradients {
  SegModel params;
  Tensor input;
};

/// Reverse-mode gradients of Σ upstream·logits with respect to every parameter
/// and to the raw input. `logits_out` optionally receives the forward logits.
SegGradients backward(const SegModel& model, const Tensor& x, const Tensor& upstream, Tensor* logits_out = nullptr);

std::vector<double> row_forward(const RowModel& model, const Tensor& x);

struct RowGradients {
  RowModel params;
  Tensor input;
};

RowGradients row_backward(const RowModel& model, const Tensor& x, std::span<const double> upstream);

/// Mean over pixels of -(1-p_t)^γ·log p_t.
double focal_loss(const Tensor& logits, const LabelGrid& labels, double gamma);
/// ∂focal_loss/∂logits.
Tensor focal_loss_gradient(const Tensor& logits, const LabelGrid& labels, double gamma);

std::vector<double> softmax(std::span<const double> logits);
double cross_entropy(std::span<const double> logits, int label);
/// ∂CE/∂logits = softmax - onehot.
std::vector<double> cross_entropy_gradient(std::span<const double> logits, int label);

class SegModelOracle final : public GradientOracle {
 public:
  explicit SegModelOracle(const SegModel& model) : model_(model) {}
  int output_channels() const override { return model_.out_channels(); }
  Tensor logits(const Tensor& x) const override { return forward(model_, x); }
  Tensor input_gradient(const Tensor& x, const Tensor& weights, Tensor* logits_out = nullptr) const override;

 private:
  const SegModel& model_;
};

class RowModelOracle final : public ClassifierOracle {
 public:
  explicit RowModelOracle(const RowModel& model) : model_(model) {}
  std::vector<double> logits(const Tensor& x) const override { return row_forward(model_, x); }
  Tensor loss_gradient(const Tensor& x, int label, double* loss_out = nullptr) const override;

 private:
  const RowModel& model_;
};

enum class LrSchedule { constant, polynomial, multistep };

struct AdvTrainConfig {
  double epsilon = 8.0;
  double alpha = 1.0;
  int steps = 10;
};

struct TrainConfig {
  int epochs = 30;
  int batch_size = 16;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double focal_gamma = 2.0;
  LrSchedule schedule = LrSchedule::polynomial;
  double poly_power = 0.9;
  /// Fractions of the total epochs at which multistep decay applies.
  std::vector<double> milestones{0.75, 0.85};
  double decay_factor = 0.1;
  std::uint64_t seed = 0;
  /// When set, each batch is replaced by random-variant modified-DAG examples.
  std::optional<AdvTrainConfig> adversarial;
  /// Per-sample gradients are computed on this many threads (0 = hardware)
  /// and always reduced in index order, so the result does not depend on it.
  unsigned threads = 0;
};

void validate(const TrainConfig& cfg);
TrainConfig parse_train_config(const nlohmann::json& doc);
nlohmann::json to_json(const TrainConfig& cfg);

double learning_rate_at(const TrainConfig& cfg, int epoch, int step_in_epoch, int steps_per_epoch);

struct EpochMetrics {
  int epoch = 0;
  double loss = 0.0;
  double learning_rate = 0.0;
  std::optional<double> val_accuracy;
};

template <typename Model>
struct TrainResult {
  Model model;
  std::vector<EpochMetrics> history;
};

/// SGD with momentum on focal loss over ground-truth part grids.
TrainResult<SegModel> train_segmenter(SegModel model, std::span<const Sample> train, const TrainConfig& cfg,
                                      std::span<const Sample> val = {});
/// SGD with momentum on cross-entropy over category labels.
TrainResult<RowModel> train_row(RowModel model, std::span<const Sample> train, const TrainConfig& cfg,
                                std::span<const Sample> val = {});

double pixel_accuracy(const SegModel& model, std::span<const Sample> samples);
double row_accuracy(const RowModel& model, std::span<const Sample> samples);

/// Object-level relabelling for the part-free ablation: every part pixel of a
/// category-c image becomes c+1.
std::vector<Sample> to_object_labels(std::span<const Sample> samples);
PartCatalog object_catalog(const PartCatalog& parts);

// Checkpoints: one RTEN file per tensor plus manifest.json.
void save_checkpoint(const std::filesystem::path& dir, const SegModel& model, const PartCatalog& catalog);
void save_checkpoint(const std::filesystem::path& dir, const RowModel& model, const PartCatalog& catalog);
SegModel load_seg_checkpoint(const std::filesystem::path& dir, const PartCatalog& catalog);
RowModel load_row_checkpoint(const std::filesystem::path& dir, const PartCatalog& catalog);
/// "seg" or "row", read from the manifest.
std::string checkpoint_arch(const std::filesystem::path& dir);

}  // namespace rock
