#pragma once

// Stage 2: knee crop -> KL grade. A densely connected convolutional trunk
// feeds either a 5-way classification head (cross-entropy) or an ordinal
// regression head (dense 128 + ReLU -> single linear unit, MSE) whose output
// is rounded to the nearest grade and clamped to [0, 4].

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "klgrade/checkpoint.hpp"
#include "klgrade/dataset.hpp"
#include "klgrade/image.hpp"
#include "klgrade/network.hpp"
#include "klgrade/training.hpp"

namespace klg {

enum class HeadKind { classification, regression };

std::string to_string(HeadKind kind);
HeadKind head_kind_from_string(const std::string& name);

struct GraderArch {
  std::size_t input_size = 64;
  std::size_t stem_channels = 8;  // 4x4 stride-4 stem
  std::size_t growth = 8;
  std::size_t layers_per_block = 2;
  std::size_t blocks = 3;
  std::size_t transition_channels = 16;  // 2x2 stride-2 conv between blocks
  std::size_t regression_hidden = 128;

  bool operator==(const GraderArch&) const = default;
};

Network build_grader_network(HeadKind head, const GraderArch& arch = {});

struct GraderNet {
  HeadKind head = HeadKind::regression;
  GraderArch arch;
  Network net;
  std::uint64_t seed = 0;
};

GraderNet make_grader(HeadKind head, std::uint64_t seed, const GraderArch& arch = {});

struct GradePrediction {
  HeadKind kind = HeadKind::regression;
  std::vector<double> raw;  // 5 probabilities or one real
  int grade = 0;
};

// clamp(round(raw), 0, 4) with halves rounded away from zero.
int round_and_clamp(double raw);

// Crop -> min-max normalize -> area resize to input_size (rounded to 8-bit).
GrayImage prepare_crop(const GrayImage& crop, std::size_t input_size = 64);
// pixel / 255 as model input; requires input_size x input_size 8-bit image.
std::vector<double> grader_input(const GrayImage& prepared, std::size_t input_size = 64);

GradePrediction predict(const GraderNet& grader, const GrayImage& prepared_crop);
// Batched inference on ready model inputs (input_size^2 values each).
std::vector<GradePrediction> predict_inputs(const GraderNet& grader,
                                            std::span<const std::vector<double>> inputs);

struct GradeExample {
  std::vector<double> input;  // input_size^2 values in [0,1]
  int grade = 0;
};

// Trains from fresh weights seeded by config.seed; returns the checkpoint
// with the lowest validation loss (last epoch when val is empty).
GraderNet train_grader(HeadKind head, const DataView<GradeExample>& train,
                       const DataView<GradeExample>& val, const TrainConfig& config,
                       const GraderArch& arch = {}, TrainResult* result = nullptr);

// Continue training an existing grader; `start` is left untouched.
GraderNet continue_training(const GraderNet& start, const DataView<GradeExample>& train,
                            const DataView<GradeExample>& val, const TrainConfig& config,
                            TrainResult* result = nullptr);

struct FineTuneConfig {
  TrainConfig train;      // learning_rate here is the pretraining rate
  double lr_scale = 0.1;  // fine-tune at lr_scale * train.learning_rate
};

GraderNet fine_tune(const GraderNet& pretrained, const DataView<GradeExample>& target_train,
                    const DataView<GradeExample>& target_val, const FineTuneConfig& config,
                    TrainResult* result = nullptr);

// Mean head loss over a view (cross-entropy or MSE).
double grader_loss(const GraderNet& grader, const DataView<GradeExample>& data);

Checkpoint to_checkpoint(const GraderNet& grader);
GraderNet grader_from_checkpoint(const Checkpoint& ckpt);
void save_grader(const std::filesystem::path& path, const GraderNet& grader);
GraderNet load_grader(const std::filesystem::path& path);
// Refuses checkpoints whose head or trunk hash differ from the request.
GraderNet load_grader(const std::filesystem::path& path, HeadKind head, const GraderArch& arch);

nlohmann::json to_json(const GraderArch& arch);
GraderArch grader_arch_from_json(const nlohmann::json& j);

}  // namespace klg
