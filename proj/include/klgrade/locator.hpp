#pragma once

// Stage 1: bilateral radiograph -> exactly two knee detections. A small
// convolutional trunk feeds two fixed slots (image-left knee, image-right
// knee); each slot emits a box (4 sigmoids), a 16x16 mask grid over its box
// and one side logit (probability that the slot holds the patient's left knee).

#include <array>
#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "klgrade/annotation.hpp"
#include "klgrade/checkpoint.hpp"
#include "klgrade/dataset.hpp"
#include "klgrade/image.hpp"
#include "klgrade/network.hpp"
#include "klgrade/training.hpp"

namespace klg {

struct LocatorArch {
  std::size_t input_width = 32;
  std::size_t input_height = 48;
  std::size_t channels1 = 8;
  std::size_t channels2 = 16;
  std::size_t channels3 = 16;
  std::size_t hidden = 64;
  std::size_t mask_grid = 16;

  std::size_t slot_width() const { return 4 + mask_grid * mask_grid + 1; }
  bool operator==(const LocatorArch&) const = default;
};

Network build_locator_network(const LocatorArch& arch = {});

struct LocatorNet {
  LocatorArch arch;
  Network net;
  std::uint64_t seed = 0;
};

LocatorNet make_locator(std::uint64_t seed, const LocatorArch& arch = {});

struct Detection {
  Side side = Side::left;
  Box box;
  std::size_t grid = 16;
  std::vector<std::uint8_t> mask;  // grid x grid, row-major over the box
  double score = 0.0;              // confidence in the side label
};

// Min-max normalize, area resize to the input raster, scale to [0,1].
std::vector<double> locator_input(const GrayImage& img, const LocatorArch& arch = {});

struct LocatorExample {
  std::vector<double> input;
  std::array<Box, 2> boxes;                      // slot 0 = image-left knee
  std::array<std::vector<double>, 2> mask_cells;  // per-cell mask coverage in [0,1]
  std::array<double, 2> left_target{};          // 1 when the slot holds the patient's left knee
};

LocatorExample make_locator_example(const GrayImage& img, const KneeAnnotation& a,
                                    const KneeAnnotation& b, const LocatorArch& arch = {});

struct LocatorLossWeights {
  double box = 10.0;  // lambda
  double mask = 1.0;  // mu
};

// side BCE + lambda * box squared error + mu * per-cell mask BCE, averaged
// over slots and batch.
Tensor locator_loss(const LocatorNet& loc, const DataView<LocatorExample>& data,
                    std::span<const std::size_t> positions, const LocatorLossWeights& weights = {});
double locator_loss_value(const LocatorNet& loc, const DataView<LocatorExample>& data,
                          const LocatorLossWeights& weights = {});

struct LocatorTrainConfig {
  TrainConfig train;
  LocatorLossWeights weights;
};

LocatorTrainConfig default_locator_config();

LocatorNet train_locator(const DataView<LocatorExample>& train, const DataView<LocatorExample>& val,
                         const LocatorTrainConfig& config, const LocatorArch& arch = {},
                         TrainResult* result = nullptr);

// Always one left and one right detection, boxes inside [0,1].
std::pair<Detection, Detection> locate(const LocatorNet& loc, const GrayImage& img);
std::vector<std::pair<Detection, Detection>> locate_batch(const LocatorNet& loc,
                                                          std::span<const std::vector<double>> inputs);

// Nearest-neighbour upsampling of a detection mask into its box rectangle on a
// width x height raster.
std::vector<std::uint8_t> upsample_mask(const Detection& det, std::size_t width, std::size_t height);

// Detection as an annotation record (full-resolution mask) flagged "predicted".
nlohmann::json detection_to_json(const Detection& det, std::size_t width, std::size_t height);

Checkpoint to_checkpoint(const LocatorNet& loc);
LocatorNet locator_from_checkpoint(const Checkpoint& ckpt);
void save_locator(const std::filesystem::path& path, const LocatorNet& loc);
LocatorNet load_locator(const std::filesystem::path& path);

nlohmann::json to_json(const LocatorArch& arch);
LocatorArch locator_arch_from_json(const nlohmann::json& j);

}  // namespace klg
