#include "klgrade/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "klgrade/error.hpp"
#include "klgrade/rng.hpp"

namespace klg {
namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kTagSeverity = 0x5E7;
constexpr std::uint64_t kTagShape = 0x5A9E;
constexpr std::uint64_t kTagNoise = 0x9015E;
constexpr std::uint64_t kTagPlace = 0x91ACE;
constexpr std::uint64_t kTagDomain = 0xD0;
constexpr std::uint64_t kTagSample = 0x5A;
constexpr std::uint64_t kTagQuality = 0x9A1;

// Each cue reads its own latent severity, grade + N(0, kCueSigma) clipped to
// +-kCueClip, so cues can disagree and neighbouring grades overlap.
constexpr double kCueSigma = 0.6;
constexpr double kCueClip = 1.8;

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

constexpr double kAir = 25.0;
constexpr double kTissue = 70.0;
constexpr double kBone = 140.0;
constexpr double kSclerosisBand = 7.0;
constexpr double kLegHalfWidth = 40.0;
constexpr double kPixelNoise = 4.0;

// Some knees are imaged with the joint obscured (poor positioning or
// exposure): inside a band around the joint line contrast drops and noise
// rises, so the grade cues are unreadable while the bone shafts stay visible.
constexpr double kObscuredFraction = 0.2;
constexpr double kObscuredBand = 16.0;  // reference px either side of the joint line, plus a 4 px taper
constexpr double kObscuredContrast = 0.0;
constexpr double kObscuredNoise = 40.0;

double lerp(double a, double b, double t) { return a + (b - a) * std::clamp(t, 0.0, 1.0); }

struct Osteophyte {
  double u, v, r;
};

// Analytic knee in its local frame. `lateral` is +1 when the lateral side
// points toward +u (image right).
class KneeShape {
 public:
  KneeShape(const SeverityParams& p, std::uint64_t seed, Side side)
      : p_(p), lateral_(side == Side::left ? 1.0 : -1.0) {
    if (!kPatientLeftOnImageRight) lateral_ = -lateral_;
    Rng rng(derive_seed(seed, 0, kTagShape));
    skew_sign_ = rng.uniform() < 0.5 ? -1.0 : 1.0;
    phase_u_ = rng.uniform(0.0, 6.283);
    phase_v_ = rng.uniform(0.0, 6.283);
    // Four margin sites: femur/tibia x medial/lateral, visited in a seeded order.
    std::array<int, 4> sites{0, 1, 2, 3};
    rng.shuffle(sites.begin(), sites.end());
    for (int i = 0; i < p.osteophyte_count; ++i) {
      const int site = sites[static_cast<std::size_t>(i % 4)];
      const bool femur = site < 2;
      const double dir = (site % 2 == 0) ? 1.0 : -1.0;
      const double r = p.osteophyte_radius_px * rng.uniform(0.85, 1.15);
      const double edge = femur ? 24.0 : 26.0;
      const double stack = static_cast<double>(i / 4) * 2.5;  // 5th+ spurs sit further out
      const double u = dir * (edge + 0.3 * r + stack) + rng.uniform(-1.0, 1.0);
      const double v = (femur ? -1.0 : 1.0) * (gap_at(u) / 2.0 + 2.0 + rng.uniform(-1.0, 1.0));
      spurs_.push_back({u, v, r});
    }
  }

  double gap_at(double u) const {
    const double g = p_.joint_space_px * (1.0 + skew_sign_ * p_.deformity_skew * u / 24.0);
    return std::max(g, 0.6);
  }
  double femur_bottom(double u) const {
    const double t = std::abs(u) / 24.0;
    return -gap_at(u) / 2.0 - 4.0 * t * t * t * t;
  }
  double tibia_top(double u) const {
    const double t = std::abs(u) / 26.0;
    return gap_at(u) / 2.0 + 1.5 * t * t * t * t;
  }

  // Intensity before noise, and whether the point is bone.
  std::pair<double, bool> evaluate(double u, double v) const {
    double base = std::abs(u) <= kLegHalfWidth ? kTissue : kAir;
    bool bone = false;
    bool margin = false;

    const double fb = femur_bottom(u);
    const double fw = v > -14.0 ? 24.0 : lerp(24.0, 13.0, (-14.0 - v) / 16.0);
    if (v <= fb && std::abs(u) <= fw) {
      bone = true;
      margin = fb - v <= kSclerosisBand;
    }
    const double tt = tibia_top(u);
    const double tw = v < 10.0 ? 26.0 : lerp(26.0, 15.0, (v - 10.0) / 16.0);
    if (v >= tt && std::abs(u) <= tw) {
      bone = true;
      margin = margin || v - tt <= kSclerosisBand;
    }
    // Fibula: shaft plus an elliptical head on the lateral side.
    const double fu = u - lateral_ * 23.0;
    if ((v >= 16.0 && std::abs(fu) <= 4.0) ||
        (fu * fu / 25.0 + (v - 16.0) * (v - 16.0) / 16.0 <= 1.0)) {
      bone = true;
    }
    for (const auto& s : spurs_) {
      if ((u - s.u) * (u - s.u) + (v - s.v) * (v - s.v) <= s.r * s.r) {
        bone = true;
        margin = true;
      }
    }
    if (!bone) return {base, false};
    double value = kBone + 6.0 * std::sin(0.7 * u + phase_u_) * std::sin(0.5 * v + phase_v_);
    if (margin) value *= p_.sclerosis_gain;
    return {value, true};
  }

 private:
  SeverityParams p_;
  double lateral_;
  double skew_sign_ = 1.0;
  double phase_u_ = 0.0, phase_v_ = 0.0;
  std::vector<Osteophyte> spurs_;
};

struct Placement {
  double cx, cy, scale;  // pixel centre of the joint, pixels per reference px
};

std::uint16_t quantize(double v, double maxv) {
  return static_cast<std::uint16_t>(std::clamp(std::floor(v + 0.5), 0.0, maxv));
}

}  // namespace

void SeverityParams::validate() const {
  if (grade < 0 || grade >= kNumGrades) throw ValueError("grade must be in 0..4");
  if (!(joint_space_px > 0.0)) throw ValueError("joint_space_px must be > 0");
  if (osteophyte_count < 0 || osteophyte_radius_px < 0.0) throw ValueError("osteophytes must be nonnegative");
  if (sclerosis_gain < 1.0) throw ValueError("sclerosis_gain must be >= 1");
}

SeverityParams severity_for_grade(int grade, std::uint64_t seed) {
  if (grade < 0 || grade >= kNumGrades) throw ValueError("grade must be in 0..4");
  Rng rng(derive_seed(seed, 0, kTagSeverity));
  auto cue = [&] { return std::clamp(rng.normal(0.0, kCueSigma), -kCueClip, kCueClip); };
  const double g = grade;
  const double s_gap = g + cue();
  const double s_spur = g + cue();
  const double s_scl = g + cue();
  const double s_skew = g + cue();
  SeverityParams p;
  p.grade = grade;
  // 12 px at severity 0 down to ~2 px at 4, never reaching 0.
  p.joint_space_px = 0.6 + softplus(11.4 - 2.5 * s_gap);
  p.osteophyte_count = std::clamp(static_cast<int>(std::floor(1.4 * s_spur)), 0, 6);
  if (grade == 0) p.osteophyte_count = 0;
  if (grade >= 2) p.osteophyte_count = std::max(p.osteophyte_count, 1);
  p.osteophyte_radius_px = grade == 0 ? 0.0 : std::max(0.8, 1.0 * s_spur + 0.5);
  p.sclerosis_gain = 1.0 + 0.02 * g + 0.09 * std::max(0.0, s_scl);
  p.deformity_skew = grade >= 3 ? std::max(0.05, 0.2 * (s_skew - 2.0)) : 0.0;
  return p;
}

KneeRender render_knee(const SeverityParams& params, std::uint64_t seed, Side side,
                       std::size_t canvas_size) {
  params.validate();
  if (params.joint_space_px >= static_cast<double>(canvas_size))
    throw ValueError("joint_space_px larger than canvas");
  const KneeShape shape(params, seed, side);
  Rng noise(derive_seed(seed, 0, kTagNoise));
  KneeRender out{GrayImage::blank(canvas_size, canvas_size), std::vector<std::uint8_t>(canvas_size * canvas_size, 0)};
  const double c = static_cast<double>(canvas_size) / 2.0;
  for (std::size_t y = 0; y < canvas_size; ++y)
    for (std::size_t x = 0; x < canvas_size; ++x) {
      const double u = x + 0.5 - c, v = y + 0.5 - c;
      const auto [value, bone] = shape.evaluate(u, v);
      out.image.at(x, y) = quantize(value + noise.normal(0.0, kPixelNoise), 255.0);
      out.mask[y * canvas_size + x] =
          bone && std::abs(u) <= kKneeHalfExtent && std::abs(v) <= kKneeHalfExtent;
    }
  return out;
}

SyntheticSample compose_bilateral(const SeverityParams& left, const SeverityParams& right,
                                  std::uint64_t seed, CanvasSize canvas) {
  left.validate();
  right.validate();
  const double half_w = static_cast<double>(canvas.width) / 2.0;
  const double max_box = 2.0 * kKneeHalfExtent * kMaxKneeScale;
  if (half_w < max_box + 2.0 || static_cast<double>(canvas.height) < max_box + 2.0)
    throw ValueError("canvas too small for two knees");
  for (const auto* p : {&left, &right})
    if (p->joint_space_px * kMaxKneeScale >= static_cast<double>(canvas.height))
      throw ValueError("joint_space_px larger than canvas");

  Rng place(derive_seed(seed, 0, kTagPlace));
  // Image-left half holds the patient's right knee under the AP convention.
  const Side image_left = kPatientLeftOnImageRight ? Side::right : Side::left;
  const Side sides[2] = {image_left, opposite(image_left)};
  Placement where[2];
  for (int k = 0; k < 2; ++k) {
    const double s = place.uniform(kMinKneeScale, kMaxKneeScale);
    const double half_box = kKneeHalfExtent * s;
    const double x_lo = k * half_w + half_box + 1.0, x_hi = (k + 1) * half_w - half_box - 1.0;
    const double y_lo = half_box + 1.0, y_hi = static_cast<double>(canvas.height) - half_box - 1.0;
    where[k] = {place.uniform(x_lo, x_hi), place.uniform(y_lo, y_hi), s};
  }
  const SeverityParams* params[2] = {sides[0] == Side::left ? &left : &right,
                                     sides[1] == Side::left ? &left : &right};
  const KneeShape shapes[2] = {KneeShape(*params[0], derive_seed(seed, 1, kTagShape), sides[0]),
                               KneeShape(*params[1], derive_seed(seed, 2, kTagShape), sides[1])};

  SyntheticSample sample;
  sample.seed = seed;
  sample.image = GrayImage::blank(canvas.width, canvas.height);
  KneeAnnotation ann[2];
  for (int k = 0; k < 2; ++k) {
    const auto& pl = where[k];
    const double side_px = 2.0 * kKneeHalfExtent * pl.scale;
    ann[k].side = sides[k];
    ann[k].grade = params[k]->grade;
    ann[k].box = {pl.cx / canvas.width, pl.cy / canvas.height, side_px / canvas.width,
                  side_px / canvas.height};
    ann[k].mask_rect = box_to_pixels(ann[k].box, canvas.width, canvas.height);
    ann[k].mask.assign(static_cast<std::size_t>(ann[k].mask_rect.width() * ann[k].mask_rect.height()), 0);
  }

  bool obscured[2];
  for (int k = 0; k < 2; ++k)
    obscured[k] = Rng(derive_seed(seed, static_cast<std::uint64_t>(k) + 1, kTagQuality)).uniform() < kObscuredFraction;
  Rng noise(derive_seed(seed, 0, kTagNoise));
  for (std::size_t y = 0; y < canvas.height; ++y)
    for (std::size_t x = 0; x < canvas.width; ++x) {
      const int k = static_cast<double>(x) + 0.5 < half_w ? 0 : 1;
      const auto& pl = where[k];
      const double u = (x + 0.5 - pl.cx) / pl.scale, v = (y + 0.5 - pl.cy) / pl.scale;
      auto [value, bone] = shapes[k].evaluate(u, v);
      const double t = obscured[k] ? std::clamp((kObscuredBand + 4.0 - std::abs(v)) / 4.0, 0.0, 1.0) : 0.0;
      value = kTissue + (value - kTissue) * (1.0 - t * (1.0 - kObscuredContrast));
      sample.image.at(x, y) = quantize(value + noise.normal(0.0, kPixelNoise + t * kObscuredNoise), 255.0);
      const auto& r = ann[k].mask_rect;
      const long lx = static_cast<long>(x), ly = static_cast<long>(y);
      if (bone && lx >= r.x0 && lx < r.x1 && ly >= r.y0 && ly < r.y1)
        ann[k].mask[static_cast<std::size_t>((ly - r.y0) * r.width() + (lx - r.x0))] = 1;
    }
  for (auto& a : ann) (a.side == Side::left ? sample.left : sample.right) = std::move(a);
  return sample;
}

void DomainProfile::validate() const {
  if (!(contrast_scale > 0.0)) throw ValueError("contrast_scale must be > 0");
  if (!(gamma > 0.0)) throw ValueError("gamma must be > 0");
  if (noise_sigma < 0.0) throw ValueError("noise_sigma must be >= 0");
  if (vignette_strength < 0.0) throw ValueError("vignette_strength must be >= 0");
}

DomainProfile DomainProfile::identity() { return {}; }

DomainProfile DomainProfile::source() { return {"source", 0.0, 1.0, 1.0, 2.0, 0.0}; }

DomainProfile DomainProfile::target() { return {"target", 30.0, 0.75, 0.55, 9.0, 0.45}; }

DomainProfile DomainProfile::by_name(const std::string& name) {
  if (name == "identity") return identity();
  if (name == "source") return source();
  if (name == "target") return target();
  throw ValueError("unknown domain profile '" + name + "'");
}

GrayImage apply_domain(const GrayImage& img, const DomainProfile& profile, std::uint64_t seed) {
  profile.validate();
  img.validate();
  GrayImage out = img;
  const double maxv = img.max_value();
  const double cx = img.width / 2.0, cy = img.height / 2.0;
  const double r2max = cx * cx + cy * cy;
  Rng rng(derive_seed(seed, 0, kTagDomain));
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      double v = std::pow(img.at(x, y) / maxv, profile.gamma) * profile.contrast_scale * maxv +
                 profile.intensity_offset;
      if (profile.noise_sigma > 0.0) v += rng.normal(0.0, profile.noise_sigma);
      if (profile.vignette_strength > 0.0) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        v -= profile.vignette_strength * maxv * (dx * dx + dy * dy) / r2max;
      }
      out.at(x, y) = quantize(v, maxv);
    }
  return out;
}

void validate_grade_weights(std::span<const double> weights) {
  if (weights.size() != kNumGrades) throw ValueError("grade weights need exactly 5 entries");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ValueError("grade weights must be finite and nonnegative");
    total += w;
  }
  if (total <= 0.0) throw ValueError("grade weights must not all be zero");
}

SyntheticSample sample_one(std::size_t index, std::span<const double> grade_weights,
                           const DomainProfile& profile, std::uint64_t seed, CanvasSize canvas) {
  validate_grade_weights(grade_weights);
  const std::uint64_t s = derive_seed(seed, index, kTagSample);
  Rng rng(s);
  const int gl = static_cast<int>(rng.categorical(grade_weights));
  const int gr = static_cast<int>(rng.categorical(grade_weights));
  auto sample = compose_bilateral(severity_for_grade(gl, derive_seed(s, 1, kTagSeverity)),
                                  severity_for_grade(gr, derive_seed(s, 2, kTagSeverity)), s, canvas);
  sample.image = apply_domain(sample.image, profile, s);
  return sample;
}

std::vector<SyntheticSample> sample_dataset(std::size_t n, std::span<const double> grade_weights,
                                            const DomainProfile& profile, std::uint64_t seed,
                                            CanvasSize canvas) {
  validate_grade_weights(grade_weights);
  profile.validate();
  std::vector<SyntheticSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(sample_one(i, grade_weights, profile, seed, canvas));
  return out;
}

std::array<double, 256> intensity_histogram(const GrayImage& img) {
  std::array<double, 256> h{};
  if (img.pixels.empty()) return h;
  const double shift = img.bit_depth == 16 ? 256.0 : 1.0;
  for (auto v : img.pixels) h[static_cast<std::size_t>(std::min(255.0, v / shift))] += 1.0;
  for (auto& v : h) v /= static_cast<double>(img.pixels.size());
  return h;
}

}  // namespace klg
