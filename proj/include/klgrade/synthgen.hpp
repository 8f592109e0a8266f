#pragma once

// Procedural bilateral knee radiographs with controllable KL severity, and a
// per-pixel intensity transform that emulates a scanner/site domain shift.
//
// Knee geometry lives in a local frame centred on the joint, in reference
// pixels: femur above, tibia below, fibula on the lateral side, and the
// knee box spanning [-32, 32] on both axes (64x64 at scale 1).

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "klgrade/annotation.hpp"
#include "klgrade/image.hpp"

namespace klg {

struct SeverityParams {
  int grade = 0;
  double joint_space_px = 12.0;
  int osteophyte_count = 0;
  double osteophyte_radius_px = 0.0;
  double sclerosis_gain = 1.0;
  double deformity_skew = 0.0;  // nonzero only for grades 3-4

  void validate() const;
};

// Grade -> parameters. Per-seed jitter is shared across grades, so at a fixed
// seed joint space strictly decreases and osteophytes/sclerosis increase.
SeverityParams severity_for_grade(int grade, std::uint64_t seed);

inline constexpr double kKneeHalfExtent = 32.0;  // reference px
inline constexpr std::size_t kKneeCropSize = 64;

struct KneeRender {
  GrayImage image;
  std::vector<std::uint8_t> mask;  // same extent as image
};

// One knee centred on a canvas_size x canvas_size raster at scale 1.
KneeRender render_knee(const SeverityParams& params, std::uint64_t seed, Side side = Side::right,
                       std::size_t canvas_size = kKneeCropSize);

// Bilateral canvas, width x height. Each knee is placed inside its own half.
struct CanvasSize {
  std::size_t width = 128;
  std::size_t height = 192;
};

// Knee scale range on the bilateral canvas (box side = 64 * scale).
inline constexpr double kMinKneeScale = 0.74;
inline constexpr double kMaxKneeScale = 0.84;

struct SyntheticSample {
  GrayImage image;
  KneeAnnotation left;
  KneeAnnotation right;
  std::uint64_t seed = 0;

  const KneeAnnotation& knee(Side s) const { return s == Side::left ? left : right; }
};

// Each knee is independently obscured around its joint line with a fixed
// probability (seeded per sample), which hides its grade cues.
SyntheticSample compose_bilateral(const SeverityParams& left, const SeverityParams& right,
                                  std::uint64_t seed, CanvasSize canvas = {});

struct DomainProfile {
  std::string name = "identity";
  double intensity_offset = 0.0;
  double contrast_scale = 1.0;
  double gamma = 1.0;
  double noise_sigma = 0.0;
  double vignette_strength = 0.0;

  void validate() const;

  static DomainProfile identity();
  // Clean acquisition the models are first trained on.
  static DomainProfile source();
  // Brighter, lower-contrast, gamma-compressed, noisier, vignetted site.
  static DomainProfile target();
  static DomainProfile by_name(const std::string& name);
};

// out = clamp(((v/max)^gamma) * contrast * max + offset + noise + vignette),
// rounded half up. Vignette darkens by strength*max*(r/r_max)^2.
GrayImage apply_domain(const GrayImage& img, const DomainProfile& profile, std::uint64_t seed);

// Grade counts of the two reference cohorts (OAI and the target site).
inline constexpr std::array<double, kNumGrades> kOaiGradeCounts{3493, 2319, 1595, 1177, 310};
inline constexpr std::array<double, kNumGrades> kTargetGradeCounts{335, 150, 199, 194, 297};

// n bilateral samples; each knee's grade is drawn i.i.d. from the normalized
// weights. Sample i depends only on (seed, i).
std::vector<SyntheticSample> sample_dataset(std::size_t n, std::span<const double> grade_weights,
                                            const DomainProfile& profile, std::uint64_t seed,
                                            CanvasSize canvas = {});
SyntheticSample sample_one(std::size_t index, std::span<const double> grade_weights,
                           const DomainProfile& profile, std::uint64_t seed, CanvasSize canvas = {});

void validate_grade_weights(std::span<const double> weights);

// Normalized 256-bin histogram of an 8-bit image.
std::array<double, 256> intensity_histogram(const GrayImage& img);

}  // namespace klg
