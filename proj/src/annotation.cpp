#include "klgrade/annotation.hpp"

#include "klgrade/error.hpp"

namespace klg {

std::string to_string(Side side) { return side == Side::left ? "left" : "right"; }

Side side_from_string(const std::string& name) {
  if (name == "left") return Side::left;
  if (name == "right") return Side::right;
  throw ValueError("unknown side '" + name + "'");
}

std::vector<std::uint8_t> KneeAnnotation::full_mask(std::size_t width, std::size_t height) const {
  std::vector<std::uint8_t> out(width * height, 0);
  const long mw = mask_rect.width();
  for (long y = mask_rect.y0; y < mask_rect.y1; ++y)
    for (long x = mask_rect.x0; x < mask_rect.x1; ++x) {
      if (x < 0 || y < 0 || x >= static_cast<long>(width) || y >= static_cast<long>(height)) continue;
      out[static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)] =
          mask[static_cast<std::size_t>((y - mask_rect.y0) * mw + (x - mask_rect.x0))];
    }
  return out;
}

nlohmann::json to_json(const Box& b) {
  return {{"cx", b.cx}, {"cy", b.cy}, {"w", b.w}, {"h", b.h}};
}

Box box_from_json(const nlohmann::json& j) {
  return {j.at("cx").get<double>(), j.at("cy").get<double>(), j.at("w").get<double>(),
          j.at("h").get<double>()};
}

nlohmann::json to_json(const KneeAnnotation& a) {
  // Mask as run-length pairs over mask_rect: [value0_run, value1_run, ...]
  // starting with a run of zeros.
  std::vector<std::size_t> runs;
  std::uint8_t current = 0;
  std::size_t run = 0;
  for (auto v : a.mask) {
    if (v != current) {
      runs.push_back(run);
      run = 0;
      current = v;
    }
    ++run;
  }
  runs.push_back(run);
  return {{"side", to_string(a.side)},
          {"grade", a.grade},
          {"box", to_json(a.box)},
          {"mask_rect", {a.mask_rect.x0, a.mask_rect.y0, a.mask_rect.x1, a.mask_rect.y1}},
          {"mask_rle", runs}};
}

KneeAnnotation annotation_from_json(const nlohmann::json& j) {
  KneeAnnotation a;
  a.side = side_from_string(j.at("side").get<std::string>());
  a.grade = j.at("grade").get<int>();
  if (a.grade < 0 || a.grade >= kNumGrades) throw ValueError("annotation grade outside 0..4");
  a.box = box_from_json(j.at("box"));
  const auto r = j.at("mask_rect").get<std::vector<long>>();
  if (r.size() != 4) throw ValueError("mask_rect needs 4 integers");
  a.mask_rect = {r[0], r[1], r[2], r[3]};
  if (a.mask_rect.width() < 0 || a.mask_rect.height() < 0) throw ValueError("mask_rect inverted");
  const auto expected = static_cast<std::size_t>(a.mask_rect.width() * a.mask_rect.height());
  std::uint8_t value = 0;
  for (auto run : j.at("mask_rle").get<std::vector<std::size_t>>()) {
    if (run > expected - a.mask.size()) throw ValueError("mask_rle overruns mask_rect");
    a.mask.insert(a.mask.end(), run, value);
    value ^= 1;
  }
  if (a.mask.size() != expected) throw ValueError("mask_rle does not cover mask_rect");
  return a;
}

}  // namespace klg
