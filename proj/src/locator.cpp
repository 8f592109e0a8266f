#include "klgrade/locator.hpp"

#include <algorithm>
#include <cmath>

#include "klgrade/error.hpp"
#include "klgrade/ops.hpp"

namespace klg {
namespace {

constexpr std::size_t kEvalBatch = 64;
constexpr double kMinBoxExtent = 1e-4;

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

Tensor batch_input(const LocatorArch& arch, const DataView<LocatorExample>& data,
                   std::span<const std::size_t> positions) {
  const std::size_t n = arch.input_width * arch.input_height;
  std::vector<double> buf;
  buf.reserve(positions.size() * n);
  for (auto p : positions) {
    const auto& in = data[p].input;
    if (in.size() != n) throw ShapeError("locator example has wrong input size");
    buf.insert(buf.end(), in.begin(), in.end());
  }
  return Tensor::from({positions.size(), 1, arch.input_height, arch.input_width}, std::move(buf));
}

Tensor loss_from_output(const LocatorArch& arch, const Tensor& y, const DataView<LocatorExample>& data,
                        std::span<const std::size_t> positions, const LocatorLossWeights& w) {
  const std::size_t cells = arch.mask_grid * arch.mask_grid;
  const std::size_t sw = arch.slot_width();
  Tensor total;
  for (std::size_t slot = 0; slot < 2; ++slot) {
    std::vector<double> box_t, mask_t, side_t;
    for (auto p : positions) {
      const auto& ex = data[p];
      const Box& b = ex.boxes[slot];
      box_t.insert(box_t.end(), {b.cx, b.cy, b.w, b.h});
      if (ex.mask_cells[slot].size() != cells) throw ShapeError("locator mask target has wrong size");
      mask_t.insert(mask_t.end(), ex.mask_cells[slot].begin(), ex.mask_cells[slot].end());
      side_t.push_back(ex.left_target[slot]);
    }
    const std::size_t off = slot * sw;
    Tensor loss = ops::bce_with_logits(ops::columns(y, off + 4 + cells, 1), side_t);
    if (w.box != 0.0) {
      // Squared error summed over the 4 coordinates, mean over the batch.
      const Tensor box = ops::mse(ops::sigmoid(ops::columns(y, off, 4)), box_t);
      loss = ops::add(loss, ops::scale(box, 4.0 * w.box));
    }
    if (w.mask != 0.0)
      loss = ops::add(loss, ops::scale(ops::bce_with_logits(ops::columns(y, off + 4, cells), mask_t), w.mask));
    total = slot == 0 ? loss : ops::add(total, loss);
  }
  return ops::scale(total, 0.5);
}

Detection slot_detection(const LocatorArch& arch, std::span<const double> row) {
  const std::size_t cells = arch.mask_grid * arch.mask_grid;
  Detection d;
  d.grid = arch.mask_grid;
  const double cx = sigmoid(row[0]), cy = sigmoid(row[1]), w = sigmoid(row[2]), h = sigmoid(row[3]);
  const double x0 = std::clamp(cx - w / 2, 0.0, 1.0 - kMinBoxExtent);
  const double x1 = std::clamp(cx + w / 2, x0 + kMinBoxExtent, 1.0);
  const double y0 = std::clamp(cy - h / 2, 0.0, 1.0 - kMinBoxExtent);
  const double y1 = std::clamp(cy + h / 2, y0 + kMinBoxExtent, 1.0);
  d.box = {(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0};
  d.mask.resize(cells);
  for (std::size_t i = 0; i < cells; ++i) d.mask[i] = row[4 + i] > 0.0;
  d.score = sigmoid(row[4 + cells]);  // P(slot holds the left knee)
  return d;
}

std::pair<Detection, Detection> assign_sides(Detection a, Detection b) {
  const double pa = a.score, pb = b.score;
  Detection& left = pb >= pa ? b : a;
  Detection& right = pb >= pa ? a : b;
  left.side = Side::left;
  right.side = Side::right;
  right.score = 1.0 - right.score;
  return {left, right};
}

void check_compatible(const LocatorNet& loc) {
  const auto expected = build_locator_network(loc.arch);
  if (loc.net.architecture_hash() != expected.architecture_hash())
    throw ValueError("locator network does not match its architecture");
}

}  // namespace

Network build_locator_network(const LocatorArch& a) {
  if (a.input_width % 4 != 0 || a.input_height % 4 != 0 || a.input_width == 0 || a.input_height == 0)
    throw ValueError("locator input extents must be positive multiples of 4");
  if (a.mask_grid == 0) throw ValueError("locator mask grid must be positive");
  const std::size_t flat = a.channels3 * (a.input_width / 4) * (a.input_height / 4);
  return Network({1, a.input_height, a.input_width},
                 {LayerSpec::conv(1, a.channels1, 3, 1), LayerSpec::relu(),
                  LayerSpec::conv_padded(a.channels1, a.channels2, 3, 2, 1), LayerSpec::relu(),
                  LayerSpec::conv_padded(a.channels2, a.channels3, 3, 2, 1), LayerSpec::relu(),
                  LayerSpec::flatten(), LayerSpec::dense(flat, a.hidden), LayerSpec::relu(),
                  LayerSpec::dense(a.hidden, 2 * a.slot_width())});
}

LocatorNet make_locator(std::uint64_t seed, const LocatorArch& arch) {
  LocatorNet loc{arch, build_locator_network(arch), seed};
  loc.net.initialize(seed);
  return loc;
}

std::vector<double> locator_input(const GrayImage& img, const LocatorArch& arch) {
  auto out = resize_area(minmax_normalize(img), arch.input_width, arch.input_height);
  for (auto& v : out) v /= 255.0;
  return out;
}

LocatorExample make_locator_example(const GrayImage& img, const KneeAnnotation& a,
                                    const KneeAnnotation& b, const LocatorArch& arch) {
  if (a.side == b.side) throw ValueError("locator example needs one left and one right knee");
  LocatorExample ex;
  ex.input = locator_input(img, arch);
  const bool a_first = a.box.cx <= b.box.cx;
  const std::array<const KneeAnnotation*, 2> slots{a_first ? &a : &b, a_first ? &b : &a};
  for (std::size_t s = 0; s < 2; ++s) {
    const auto& k = *slots[s];
    ex.boxes[s] = k.box;
    ex.left_target[s] = k.side == Side::left ? 1.0 : 0.0;
    const auto rw = static_cast<std::size_t>(std::max(0L, k.mask_rect.width()));
    const auto rh = static_cast<std::size_t>(std::max(0L, k.mask_rect.height()));
    if (rw == 0 || rh == 0 || k.mask.size() != rw * rh) throw ValueError("annotation mask does not cover its box");
    std::vector<double> m(k.mask.begin(), k.mask.end());
    ex.mask_cells[s] = resize_area(m, rw, rh, arch.mask_grid, arch.mask_grid);
    for (auto& c : ex.mask_cells[s]) c = std::clamp(c, 0.0, 1.0);  // area weights can overshoot by an ulp
  }
  return ex;
}

Tensor locator_loss(const LocatorNet& loc, const DataView<LocatorExample>& data,
                    std::span<const std::size_t> positions, const LocatorLossWeights& weights) {
  return loss_from_output(loc.arch, loc.net.forward(batch_input(loc.arch, data, positions)), data, positions,
                          weights);
}

double locator_loss_value(const LocatorNet& loc, const DataView<LocatorExample>& data,
                          const LocatorLossWeights& weights) {
  if (data.empty()) throw ValueError("locator loss: empty dataset");
  double total = 0.0;
  std::vector<std::size_t> positions;
  for (std::size_t start = 0; start < data.size(); start += kEvalBatch) {
    positions.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + kEvalBatch); ++i) positions.push_back(i);
    total += locator_loss(loc, data, positions, weights).item() * static_cast<double>(positions.size());
  }
  return total / static_cast<double>(data.size());
}

LocatorTrainConfig default_locator_config() {
  LocatorTrainConfig c;
  c.train.epochs = 30;
  c.train.batch_size = 16;
  c.train.learning_rate = 0.02;
  return c;
}

LocatorNet train_locator(const DataView<LocatorExample>& train, const DataView<LocatorExample>& val,
                         const LocatorTrainConfig& config, const LocatorArch& arch, TrainResult* result) {
  if (train.empty()) throw ValueError("train_locator: empty dataset");
  LocatorNet loc = make_locator(config.train.seed, arch);
  BatchLoss batch_loss = [&](const Network& net, std::span<const std::size_t> positions) {
    return loss_from_output(arch, net.forward(batch_input(arch, train, positions)), train, positions,
                            config.weights);
  };
  ValLoss val_loss;
  if (!val.empty())
    val_loss = [&](const Network& net) { return locator_loss_value({arch, net, 0}, val, config.weights); };
  auto r = run_training(loc.net, train.size(), config.train, batch_loss, val_loss, "locator");
  if (result) *result = std::move(r);
  return loc;
}

std::vector<std::pair<Detection, Detection>> locate_batch(const LocatorNet& loc,
                                                          std::span<const std::vector<double>> inputs) {
  check_compatible(loc);
  const auto& a = loc.arch;
  const std::size_t n = a.input_width * a.input_height;
  const std::size_t sw = a.slot_width();
  std::vector<std::pair<Detection, Detection>> out;
  out.reserve(inputs.size());
  for (std::size_t start = 0; start < inputs.size(); start += kEvalBatch) {
    const std::size_t stop = std::min(inputs.size(), start + kEvalBatch);
    std::vector<double> buf;
    for (std::size_t i = start; i < stop; ++i) {
      if (inputs[i].size() != n) throw ShapeError("locator input has wrong size");
      buf.insert(buf.end(), inputs[i].begin(), inputs[i].end());
    }
    const Tensor y = loc.net.forward(Tensor::from({stop - start, 1, a.input_height, a.input_width}, std::move(buf)));
    const auto data = y.data();
    for (std::size_t b = 0; b < stop - start; ++b) {
      const auto row = data.subspan(b * 2 * sw, 2 * sw);
      out.push_back(assign_sides(slot_detection(a, row.subspan(0, sw)), slot_detection(a, row.subspan(sw, sw))));
    }
  }
  return out;
}

std::pair<Detection, Detection> locate(const LocatorNet& loc, const GrayImage& img) {
  const std::vector<std::vector<double>> one{locator_input(img, loc.arch)};
  return locate_batch(loc, one).front();
}

std::vector<std::uint8_t> upsample_mask(const Detection& det, std::size_t width, std::size_t height) {
  if (det.mask.size() != det.grid * det.grid) throw ShapeError("detection mask does not match its grid");
  std::vector<std::uint8_t> full(width * height, 0);
  const PixelRect r = box_to_pixels(det.box, width, height);
  const auto rw = static_cast<std::size_t>(r.width()), rh = static_cast<std::size_t>(r.height());
  for (std::size_t y = 0; y < rh; ++y) {
    const std::size_t gy = y * det.grid / rh;
    for (std::size_t x = 0; x < rw; ++x) {
      const std::size_t gx = x * det.grid / rw;
      full[(static_cast<std::size_t>(r.y0) + y) * width + static_cast<std::size_t>(r.x0) + x] =
          det.mask[gy * det.grid + gx];
    }
  }
  return full;
}

nlohmann::json detection_to_json(const Detection& det, std::size_t width, std::size_t height) {
  KneeAnnotation a;
  a.side = det.side;
  a.box = det.box;
  a.mask_rect = box_to_pixels(det.box, width, height);
  const auto full = upsample_mask(det, width, height);
  for (long y = a.mask_rect.y0; y < a.mask_rect.y1; ++y)
    for (long x = a.mask_rect.x0; x < a.mask_rect.x1; ++x)
      a.mask.push_back(full[static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)]);
  auto j = to_json(a);
  j.erase("grade");
  j["score"] = det.score;
  j["predicted"] = true;
  return j;
}

nlohmann::json to_json(const LocatorArch& a) {
  return {{"input_width", a.input_width}, {"input_height", a.input_height}, {"channels1", a.channels1},
          {"channels2", a.channels2},     {"channels3", a.channels3},       {"hidden", a.hidden},
          {"mask_grid", a.mask_grid}};
}

LocatorArch locator_arch_from_json(const nlohmann::json& j) {
  LocatorArch a;
  a.input_width = j.value("input_width", a.input_width);
  a.input_height = j.value("input_height", a.input_height);
  a.channels1 = j.value("channels1", a.channels1);
  a.channels2 = j.value("channels2", a.channels2);
  a.channels3 = j.value("channels3", a.channels3);
  a.hidden = j.value("hidden", a.hidden);
  a.mask_grid = j.value("mask_grid", a.mask_grid);
  return a;
}

Checkpoint to_checkpoint(const LocatorNet& loc) {
  Checkpoint c{loc.net, loc.seed, nlohmann::json::object()};
  c.tags["model"] = "locator";
  c.tags["arch"] = to_json(loc.arch);
  return c;
}

LocatorNet locator_from_checkpoint(const Checkpoint& c) {
  if (c.tags.value("model", "") != "locator") throw IoError("checkpoint is not a locator");
  LocatorNet loc{locator_arch_from_json(c.tags.at("arch")), c.net, c.seed};
  if (build_locator_network(loc.arch).architecture_hash() != c.net.architecture_hash())
    throw IoError("locator checkpoint architecture does not match its tags");
  return loc;
}

void save_locator(const std::filesystem::path& path, const LocatorNet& loc) {
  save_checkpoint(path, to_checkpoint(loc));
}

LocatorNet load_locator(const std::filesystem::path& path) {
  return locator_from_checkpoint(load_checkpoint(path));
}

}  // namespace klg
