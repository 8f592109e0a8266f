#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "klgrade/image.hpp"

namespace klg {

// Patient side of a knee.
enum class Side { left, right };

// Radiographic AP convention: the patient's left knee appears in the right
// half of the image. Generator, locator and reports all share this constant.
inline constexpr bool kPatientLeftOnImageRight = true;

std::string to_string(Side side);
Side side_from_string(const std::string& name);
inline Side opposite(Side s) { return s == Side::left ? Side::right : Side::left; }

inline constexpr int kNumGrades = 5;

// Ground truth for one knee. The mask is full resolution, stored over
// mask_rect (the pixel rectangle of the box); pixels outside it are 0.
struct KneeAnnotation {
  Side side = Side::left;
  Box box;
  PixelRect mask_rect;
  std::vector<std::uint8_t> mask;  // row-major over mask_rect, values 0/1
  int grade = 0;

  // Expand to a width x height raster.
  std::vector<std::uint8_t> full_mask(std::size_t width, std::size_t height) const;
};

nlohmann::json to_json(const Box& box);
Box box_from_json(const nlohmann::json& j);
nlohmann::json to_json(const KneeAnnotation& a);
KneeAnnotation annotation_from_json(const nlohmann::json& j);

}  // namespace klg
