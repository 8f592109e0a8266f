#include "klgrade/grader.hpp"

#include <algorithm>
#include <cmath>

#include "klgrade/annotation.hpp"
#include "klgrade/error.hpp"
#include "klgrade/ops.hpp"
#include "klgrade/rng.hpp"

namespace klg {

std::string to_string(HeadKind kind) {
  return kind == HeadKind::classification ? "classification" : "regression";
}

HeadKind head_kind_from_string(const std::string& name) {
  if (name == "classification") return HeadKind::classification;
  if (name == "regression") return HeadKind::regression;
  throw ValueError("unknown head kind '" + name + "'");
}

namespace {

std::vector<LayerSpec> trunk_layers(const GraderArch& a) {
  if (a.input_size % 4 != 0 || a.blocks == 0) throw ValueError("grader input size must be a multiple of 4");
  std::vector<LayerSpec> layers{LayerSpec::conv_padded(1, a.stem_channels, 4, 4, 0)};
  std::size_t channels = a.stem_channels;
  for (std::size_t b = 0; b < a.blocks; ++b) {
    if (b > 0) {
      layers.push_back(LayerSpec::conv_padded(channels, a.transition_channels, 2, 2, 0));
      channels = a.transition_channels;
    }
    layers.push_back(LayerSpec::dense_block(channels, a.growth, a.layers_per_block));
    channels = layers.back().output_channels();
  }
  layers.push_back(LayerSpec::relu());
  layers.push_back(LayerSpec::global_avg_pool());
  return layers;
}

std::size_t trunk_width(const GraderArch& a) {
  return a.blocks == 1 ? a.stem_channels + a.layers_per_block * a.growth
                       : a.transition_channels + a.layers_per_block * a.growth;
}

std::uint64_t trunk_hash(const GraderArch& a) {
  return Network({1, a.input_size, a.input_size}, trunk_layers(a)).architecture_hash();
}

Tensor batch_input(const DataView<GradeExample>& data, std::span<const std::size_t> positions,
                   std::size_t side) {
  std::vector<double> buf;
  buf.reserve(positions.size() * side * side);
  for (auto p : positions) {
    const auto& ex = data[p];
    if (ex.input.size() != side * side)
      throw ShapeError("grader example has " + std::to_string(ex.input.size()) + " values, expected " +
                       std::to_string(side * side));
    buf.insert(buf.end(), ex.input.begin(), ex.input.end());
  }
  return Tensor::from({positions.size(), 1, side, side}, std::move(buf));
}

Tensor head_loss(HeadKind head, const Tensor& out, const DataView<GradeExample>& data,
                 std::span<const std::size_t> positions) {
  if (head == HeadKind::classification) {
    std::vector<int> labels;
    for (auto p : positions) labels.push_back(data[p].grade);
    return ops::cross_entropy(out, labels);
  }
  std::vector<double> targets;
  for (auto p : positions) targets.push_back(data[p].grade);
  return ops::mse(out, targets);
}

void check_labels(const DataView<GradeExample>& data) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int g = data[i].grade;
    if (g < 0 || g >= kNumGrades)
      throw ValueError("grade label " + std::to_string(g) + " does not match the 5-grade head");
  }
}

constexpr std::size_t kEvalBatch = 64;

}  // namespace

Network build_grader_network(HeadKind head, const GraderArch& arch) {
  auto layers = trunk_layers(arch);
  const std::size_t width = trunk_width(arch);
  if (head == HeadKind::classification) {
    layers.push_back(LayerSpec::dense(width, kNumGrades));
  } else {
    layers.push_back(LayerSpec::dense(width, arch.regression_hidden));
    layers.push_back(LayerSpec::relu());
    layers.push_back(LayerSpec::dense(arch.regression_hidden, 1));
  }
  return Network({1, arch.input_size, arch.input_size}, std::move(layers));
}

GraderNet make_grader(HeadKind head, std::uint64_t seed, const GraderArch& arch) {
  GraderNet g{head, arch, build_grader_network(head, arch), seed};
  g.net.initialize(seed);
  return g;
}

int round_and_clamp(double raw) {
  if (std::isnan(raw)) return 0;
  const double r = std::round(raw);  // halves away from zero
  return static_cast<int>(std::clamp(r, 0.0, static_cast<double>(kNumGrades - 1)));
}

GrayImage prepare_crop(const GrayImage& crop, std::size_t input_size) {
  const auto normalized = minmax_normalize(crop);
  const auto resized = resize_area(normalized, input_size, input_size);
  GrayImage out = GrayImage::blank(input_size, input_size, 8, ImageSource::crop);
  for (std::size_t i = 0; i < resized.size(); ++i)
    out.pixels[i] = static_cast<std::uint16_t>(std::clamp(std::floor(resized[i] + 0.5), 0.0, 255.0));
  return out;
}

std::vector<double> grader_input(const GrayImage& prepared, std::size_t input_size) {
  if (prepared.width != input_size || prepared.height != input_size)
    throw ShapeError("grader expects a " + std::to_string(input_size) + "x" + std::to_string(input_size) +
                     " crop, got " + std::to_string(prepared.width) + "x" + std::to_string(prepared.height));
  if (prepared.bit_depth != 8) throw ValueError("grader expects a normalized 8-bit crop");
  std::vector<double> out(prepared.pixels.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = prepared.pixels[i] / 255.0;
  return out;
}

std::vector<GradePrediction> predict_inputs(const GraderNet& grader,
                                            std::span<const std::vector<double>> inputs) {
  const std::size_t side = grader.arch.input_size;
  std::vector<GradePrediction> out;
  out.reserve(inputs.size());
  for (std::size_t start = 0; start < inputs.size(); start += kEvalBatch) {
    const std::size_t stop = std::min(inputs.size(), start + kEvalBatch);
    std::vector<double> buf;
    for (std::size_t i = start; i < stop; ++i) {
      if (inputs[i].size() != side * side) throw ShapeError("grader input has wrong size");
      buf.insert(buf.end(), inputs[i].begin(), inputs[i].end());
    }
    const Tensor y = grader.net.forward(Tensor::from({stop - start, 1, side, side}, std::move(buf)));
    if (grader.head == HeadKind::classification) {
      const auto probs = ops::softmax_rows(y);
      for (std::size_t b = 0; b < stop - start; ++b) {
        GradePrediction p{HeadKind::classification,
                          {probs.begin() + static_cast<std::ptrdiff_t>(b * kNumGrades),
                           probs.begin() + static_cast<std::ptrdiff_t>((b + 1) * kNumGrades)},
                          0};
        p.grade = static_cast<int>(std::max_element(p.raw.begin(), p.raw.end()) - p.raw.begin());
        out.push_back(std::move(p));
      }
    } else {
      for (std::size_t b = 0; b < stop - start; ++b)
        out.push_back({HeadKind::regression, {y[b]}, round_and_clamp(y[b])});
    }
  }
  return out;
}

GradePrediction predict(const GraderNet& grader, const GrayImage& prepared_crop) {
  const std::vector<std::vector<double>> one{grader_input(prepared_crop, grader.arch.input_size)};
  return predict_inputs(grader, one).front();
}

double grader_loss(const GraderNet& grader, const DataView<GradeExample>& data) {
  if (data.empty()) throw ValueError("grader_loss: empty dataset");
  double total = 0.0;
  std::vector<std::size_t> positions;
  for (std::size_t start = 0; start < data.size(); start += kEvalBatch) {
    positions.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + kEvalBatch); ++i) positions.push_back(i);
    const Tensor out = grader.net.forward(batch_input(data, positions, grader.arch.input_size));
    total += head_loss(grader.head, out, data, positions).item() * static_cast<double>(positions.size());
  }
  return total / static_cast<double>(data.size());
}

GraderNet continue_training(const GraderNet& start, const DataView<GradeExample>& train,
                            const DataView<GradeExample>& val, const TrainConfig& config,
                            TrainResult* result) {
  check_labels(train);
  GraderNet g{start.head, start.arch, start.net.clone(), start.seed};
  const std::size_t side = g.arch.input_size;
  const HeadKind head = g.head;
  BatchLoss batch_loss = [&](const Network& net, std::span<const std::size_t> positions) {
    return head_loss(head, net.forward(batch_input(train, positions, side)), train, positions);
  };
  ValLoss val_loss;
  if (!val.empty()) {
    val_loss = [&](const Network& net) {
      return grader_loss(GraderNet{head, g.arch, net, 0}, val);
    };
  }
  auto r = run_training(g.net, train.size(), config, batch_loss, val_loss, "grader[" + to_string(head) + "]");
  if (result) *result = std::move(r);
  return g;
}

GraderNet train_grader(HeadKind head, const DataView<GradeExample>& train,
                       const DataView<GradeExample>& val, const TrainConfig& config,
                       const GraderArch& arch, TrainResult* result) {
  if (train.empty()) throw ValueError("train_grader: empty dataset");
  return continue_training(make_grader(head, config.seed, arch), train, val, config, result);
}

GraderNet fine_tune(const GraderNet& pretrained, const DataView<GradeExample>& target_train,
                    const DataView<GradeExample>& target_val, const FineTuneConfig& config,
                    TrainResult* result) {
  if (!(config.lr_scale > 0.0)) throw ValueError("fine-tune lr_scale must be > 0");
  check_labels(target_train);
  TrainConfig tc = config.train;
  tc.learning_rate *= config.lr_scale;
  if (tc.epochs == 0) return GraderNet{pretrained.head, pretrained.arch, pretrained.net.clone(), pretrained.seed};
  if (target_train.empty()) throw ValueError("fine_tune: empty target dataset");
  return continue_training(pretrained, target_train, target_val, tc, result);
}

nlohmann::json to_json(const GraderArch& a) {
  return {{"input_size", a.input_size},       {"stem_channels", a.stem_channels},
          {"growth", a.growth},               {"layers_per_block", a.layers_per_block},
          {"blocks", a.blocks},               {"transition_channels", a.transition_channels},
          {"regression_hidden", a.regression_hidden}};
}

GraderArch grader_arch_from_json(const nlohmann::json& j) {
  GraderArch a;
  a.input_size = j.value("input_size", a.input_size);
  a.stem_channels = j.value("stem_channels", a.stem_channels);
  a.growth = j.value("growth", a.growth);
  a.layers_per_block = j.value("layers_per_block", a.layers_per_block);
  a.blocks = j.value("blocks", a.blocks);
  a.transition_channels = j.value("transition_channels", a.transition_channels);
  a.regression_hidden = j.value("regression_hidden", a.regression_hidden);
  return a;
}

Checkpoint to_checkpoint(const GraderNet& g) {
  Checkpoint c{g.net, g.seed, nlohmann::json::object()};
  c.tags["model"] = "grader";
  c.tags["head"] = to_string(g.head);
  c.tags["arch"] = to_json(g.arch);
  c.tags["trunk_hash"] = trunk_hash(g.arch);
  return c;
}

GraderNet grader_from_checkpoint(const Checkpoint& c) {
  if (c.tags.value("model", "") != "grader") throw IoError("checkpoint is not a grader");
  GraderNet g;
  g.head = head_kind_from_string(c.tags.at("head").get<std::string>());
  g.arch = grader_arch_from_json(c.tags.at("arch"));
  if (c.tags.value("trunk_hash", std::uint64_t{0}) != trunk_hash(g.arch) ||
      build_grader_network(g.head, g.arch).architecture_hash() != c.net.architecture_hash())
    throw IoError("grader checkpoint architecture does not match its tags");
  g.net = c.net;
  g.seed = c.seed;
  return g;
}

void save_grader(const std::filesystem::path& path, const GraderNet& grader) {
  save_checkpoint(path, to_checkpoint(grader));
}

GraderNet load_grader(const std::filesystem::path& path) {
  return grader_from_checkpoint(load_checkpoint(path));
}

GraderNet load_grader(const std::filesystem::path& path, HeadKind head, const GraderArch& arch) {
  auto g = load_grader(path);
  if (g.head != head) throw IoError("checkpoint head is " + to_string(g.head) + ", requested " + to_string(head));
  if (trunk_hash(g.arch) != trunk_hash(arch) || !(g.arch == arch))
    throw IoError("checkpoint trunk hash does not match the requested architecture");
  return g;
}

}  // namespace klg
