#include "klgrade/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <thread>

#include "klgrade/checkpoint.hpp"
#include "klgrade/dicom.hpp"
#include "klgrade/rng.hpp"

namespace klg {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kTagSplit = 0x5917;
constexpr std::uint64_t kTagData = 0xDA7A;
constexpr std::uint64_t kTagBootstrap = 0xB0;

// Runs fn(begin, end) over contiguous chunks of [0, n) on up to `threads`
// workers. Callers write results by index, so ordering never depends on timing.
template <class Fn>
void parallel_chunks(std::size_t n, std::size_t threads, Fn fn) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, n));
  if (threads == 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t b = t * chunk, e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&, t, b, e] {
      try {
        fn(b, e);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::vector<GradePrediction> predict_parallel(const GraderNet& g, std::span<const std::vector<double>> inputs,
                                              std::size_t threads) {
  std::vector<GradePrediction> out(inputs.size());
  parallel_chunks(inputs.size(), threads, [&](std::size_t b, std::size_t e) {
    auto part = predict_inputs(g, inputs.subspan(b, e - b));
    std::move(part.begin(), part.end(), out.begin() + static_cast<std::ptrdiff_t>(b));
  });
  return out;
}

std::vector<std::pair<Detection, Detection>> locate_parallel(const LocatorNet& loc,
                                                             std::span<const AnnotatedImage> images,
                                                             std::size_t threads) {
  std::vector<std::pair<Detection, Detection>> out(images.size());
  parallel_chunks(images.size(), threads, [&](std::size_t b, std::size_t e) {
    std::vector<std::vector<double>> inputs;
    for (std::size_t i = b; i < e; ++i) inputs.push_back(locator_input(images[i].image, loc.arch));
    auto part = locate_batch(loc, inputs);
    std::move(part.begin(), part.end(), out.begin() + static_cast<std::ptrdiff_t>(b));
  });
  return out;
}

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace

// ---- splits ----

void SplitSpec::validate() const {
  for (double f : {train_frac, val_frac, test_frac}) {
    if (!std::isfinite(f)) throw ValueError("split fractions must be finite");
    if (f < 0.0) throw ValueError("split fraction < 0");
  }
  const double sum = train_frac + val_frac + test_frac;
  if (std::abs(sum - 1.0) > 1e-9) throw ValueError("split fractions must sum to 1, got " + std::to_string(sum));
}

Split split(std::size_t n, const SplitSpec& spec, std::span<const int> labels) {
  spec.validate();
  if (spec.stratified && labels.size() != n)
    throw ValueError("stratified split needs one label per item");
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[spec.stratified ? labels[i] : 0].push_back(i);
  Split out;
  std::size_t g = 0;
  for (auto& [label, items] : groups) {
    Rng rng(derive_seed(spec.seed, g++, kTagSplit));
    rng.shuffle(items.begin(), items.end());
    const auto m = static_cast<double>(items.size());
    // Small epsilon so that e.g. 100 * 0.7 does not floor to 69.
    const auto n_val = static_cast<std::size_t>(std::floor(m * spec.val_frac + 1e-9));
    const auto n_test = static_cast<std::size_t>(std::floor(m * spec.test_frac + 1e-9));
    const std::size_t n_train = items.size() - n_val - n_test;
    out.train.insert(out.train.end(), items.begin(), items.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.val.insert(out.val.end(), items.begin() + static_cast<std::ptrdiff_t>(n_train),
                   items.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    out.test.insert(out.test.end(), items.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), items.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

// ---- annotated images ----

AnnotatedImage to_annotated(const SyntheticSample& s, std::string id) {
  return {std::move(id), s.image, s.left, s.right, s.seed};
}

GradeExample grader_example(const GrayImage& img, const Box& box, int grade, std::size_t input_size) {
  const auto c = crop(img, box_to_pixels(box, img.width, img.height));
  return {grader_input(prepare_crop(c, input_size), input_size), grade};
}

std::vector<GradeExample> grader_examples(std::span<const AnnotatedImage> images, std::size_t input_size) {
  std::vector<GradeExample> out;
  out.reserve(images.size() * 2);
  for (const auto& im : images)
    for (Side s : {Side::left, Side::right}) out.push_back(grader_example(im.image, im.knee(s).box, im.knee(s).grade, input_size));
  return out;
}

// ---- dataset directories ----

void write_dataset(const fs::path& dir, std::span<const AnnotatedImage> images, const json& provenance) {
  fs::create_directories(dir);
  json samples = json::array();
  for (const auto& im : images) {
    const std::string file = im.id + ".pgm", sidecar = im.id + ".json";
    write_pgm(dir / file, im.image);
    json ann = {{"id", im.id},
                {"image", file},
                {"width", im.image.width},
                {"height", im.image.height},
                {"left", to_json(im.left)},
                {"right", to_json(im.right)}};
    write_text(dir / sidecar, ann.dump(2) + "\n");
    json entry = {{"id", im.id}, {"image", file}, {"annotations", sidecar}};
    if (im.seed) entry["seed"] = *im.seed;
    samples.push_back(std::move(entry));
  }
  json manifest = {{"format", "klgrade-dataset"}, {"version", 1}, {"provenance", provenance},
                   {"count", images.size()}, {"samples", samples}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

GrayImage read_image(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  if (looks_like_dicom(bytes)) return parse_dicom(bytes).image;
  return decode_pgm(bytes);
}

std::vector<AnnotatedImage> read_dataset(const fs::path& dir) {
  const auto bytes = read_file_bytes(dir / "manifest.json");
  json manifest;
  try {
    manifest = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw IoError("dataset manifest " + (dir / "manifest.json").string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "klgrade-dataset") throw IoError("not a klgrade dataset manifest: " + dir.string());
  std::vector<AnnotatedImage> out;
  try {
    for (const auto& s : manifest.at("samples")) {
      AnnotatedImage im;
      im.id = s.at("id").get<std::string>();
      im.image = read_image(dir / s.at("image").get<std::string>());
      const auto sidecar = dir / s.at("annotations").get<std::string>();
      const auto ann_bytes = read_file_bytes(sidecar);
      const json ann = json::parse(ann_bytes.begin(), ann_bytes.end());
      im.left = annotation_from_json(ann.at("left"));
      im.right = annotation_from_json(ann.at("right"));
      if (s.contains("seed")) im.seed = s.at("seed").get<std::uint64_t>();
      if (im.left.side != Side::left || im.right.side != Side::right)
        throw IoError("sample " + im.id + ": knee sides do not match their keys");
      out.push_back(std::move(im));
    }
  } catch (const json::exception& e) {
    throw IoError("dataset manifest " + dir.string() + ": " + e.what());
  }
  return out;
}

// ---- two-stage inference ----

std::string model_id(const std::string& prefix, const Network& net) {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ net.architecture_hash();
  for (const auto& p : net.parameters())
    for (double v : p.data()) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) {
        h ^= bits & 0xFF;
        h *= 0x100000001b3ULL;
        bits >>= 8;
      }
    }
  return prefix + "-" + hex16(h);
}

namespace {

KneeResult grade_knee(const GraderNet& grader, const GrayImage& img, const Detection& det) {
  GrayImage c;
  try {
    c = crop(img, box_to_pixels(det.box, img.width, img.height));
  } catch (const Error& e) {
    throw StageError("crop", e.what());
  }
  GradePrediction p;
  try {
    p = predict(grader, prepare_crop(c, grader.arch.input_size));
  } catch (const Error& e) {
    throw StageError("grade", e.what());
  }
  return {det.side, det.box, det.score, p.grade, p.raw};
}

}  // namespace

KneeReport infer_radiograph(const LocatorNet& locator, const GraderNet& grader, const GrayImage& img,
                            const std::string& image_id) {
  std::pair<Detection, Detection> dets;
  try {
    img.validate();
    dets = locate(locator, img);
  } catch (const Error& e) {
    throw StageError("locate", e.what());
  }
  KneeReport r{image_id, model_id("locator", locator.net), model_id("grader", grader.net), to_string(grader.head), {}};
  r.knees.push_back(grade_knee(grader, img, dets.first));
  r.knees.push_back(grade_knee(grader, img, dets.second));
  return r;
}

KneeReport infer_crop(const GraderNet& grader, const GrayImage& crop_img, const std::string& image_id) {
  GradePrediction p;
  try {
    crop_img.validate();
    p = predict(grader, prepare_crop(crop_img, grader.arch.input_size));
  } catch (const Error& e) {
    throw StageError("grade", e.what());
  }
  KneeReport r{image_id, "", model_id("grader", grader.net), to_string(grader.head), {}};
  r.knees.push_back({Side::left, Box{}, 0.0, p.grade, p.raw});
  return r;
}

json to_json(const KneeReport& r) {
  json knees = json::array();
  for (const auto& k : r.knees) {
    json e = {{"grade", k.grade}, {"raw", k.raw}};
    if (!r.locator_id.empty()) {
      e["side"] = to_string(k.side);
      e["box"] = to_json(k.box);
      e["side_score"] = k.side_score;
    }
    knees.push_back(std::move(e));
  }
  json j = {{"image_id", r.image_id}, {"grader_id", r.grader_id}, {"head", r.head}, {"knees", knees}};
  if (r.locator_id.empty())
    j["pre_cropped"] = true;
  else
    j["locator_id"] = r.locator_id;
  return j;
}

namespace {

LocalizationMetrics localization_metrics(std::span<const AnnotatedImage> images,
                                         std::span<const std::pair<Detection, Detection>> dets) {
  LocalizationMetrics m;
  if (images.empty()) return m;
  std::vector<Box> pred, gt;
  std::vector<Side> pred_side, gt_side;
  double dice_sum = 0.0;
  std::size_t pass = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& im = images[i];
    const std::array<const Detection*, 2> d{&dets[i].first, &dets[i].second};
    const auto w = im.image.width, h = im.image.height;
    bool ok = true;
    for (std::size_t k = 0; k < 2; ++k) {
      const auto& truth = im.knee(d[k]->side);
      pred.push_back(d[k]->box);
      gt.push_back(truth.box);
      dice_sum += dice(upsample_mask(*d[k], w, h), truth.full_mask(w, h));
      ok = ok && box_iou(d[k]->box, truth.box) >= 0.5;
    }
    pass += ok;
    // Side accuracy: each ground-truth knee against the detection covering it best.
    for (Side s : {Side::left, Side::right}) {
      const Box& b = im.knee(s).box;
      const Detection& best = box_iou(d[0]->box, b) >= box_iou(d[1]->box, b) ? *d[0] : *d[1];
      pred_side.push_back(best.side);
      gt_side.push_back(s);
    }
  }
  m.bbox_mse = bbox_mse(pred, gt);
  m.dice = dice_sum / static_cast<double>(2 * images.size());
  m.side_accuracy = side_accuracy(pred_side, gt_side);
  m.iou_pass_rate = static_cast<double>(pass) / static_cast<double>(images.size());
  return m;
}

}  // namespace

LocalizationEval evaluate_localization(const LocatorNet& locator, std::span<const AnnotatedImage> images) {
  LocalizationEval out;
  out.detections = locate_parallel(locator, images, 1);
  out.metrics = localization_metrics(images, out.detections);
  return out;
}

// ---- experiment config ----

std::string to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::compare_heads: return "compare_heads";
    case ExperimentKind::domain_shift: return "domain_shift";
    case ExperimentKind::two_stage: return "two_stage";
  }
  return "?";
}

namespace {

std::string join(const std::vector<std::string>& items, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? sep : "") + items[i];
  return out;
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> violations)
    : Error("invalid experiment config:\n  " + join(violations, "\n  ")), violations_(std::move(violations)) {}

namespace {

// Collects violations while walking a config document.
class Checker {
 public:
  explicit Checker(std::vector<std::string>& out) : out_(out) {}

  void fail(const std::string& path, const std::string& msg) { out_.push_back(path + ": " + msg); }

  bool object(const json& j, const std::string& path, const std::set<std::string>& allowed) {
    if (!j.is_object()) {
      fail(path, "must be an object");
      return false;
    }
    for (const auto& [k, v] : j.items())
      if (!allowed.count(k)) fail(path + "." + k, "unknown key");
    return true;
  }

  void integer(const json& j, const std::string& key, const std::string& path, long long lo, long long hi) {
    if (!j.contains(key)) return;
    const auto& v = j[key];
    if (!v.is_number_integer() || (v.is_number_integer() && (v.get<long long>() < lo || v.get<long long>() > hi)))
      fail(path + "." + key, "must be an integer in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }

  void unsigned_int(const json& j, const std::string& key, const std::string& path) {
    if (!j.contains(key)) return;
    const auto& v = j[key];
    // Programmatic documents hold small literals as signed integers.
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
      fail(path + "." + key, "must be a nonnegative integer");
  }

  // lo/hi bounds; open bounds exclude the endpoint.
  void number(const json& j, const std::string& key, const std::string& path, double lo, double hi,
              bool lo_open = false, bool hi_open = false) {
    if (!j.contains(key)) return;
    const auto& v = j[key];
    bool ok = v.is_number();
    if (ok) {
      const double x = v.get<double>();
      ok = std::isfinite(x) && (lo_open ? x > lo : x >= lo) && (hi_open ? x < hi : x <= hi);
    }
    if (!ok)
      fail(path + "." + key, std::string("must be a number in ") + (lo_open ? "(" : "[") + fmt(lo) + ", " + fmt(hi) +
                                 (hi_open ? ")" : "]"));
  }

  void boolean(const json& j, const std::string& key, const std::string& path) {
    if (j.contains(key) && !j[key].is_boolean()) fail(path + "." + key, "must be true or false");
  }

  void string(const json& j, const std::string& key, const std::string& path) {
    if (j.contains(key) && !j[key].is_string()) fail(path + "." + key, "must be a string");
  }

  void weights(const json& j, const std::string& key, const std::string& path) {
    if (!j.contains(key)) return;
    const auto& v = j[key];
    if (v.is_string()) {
      const auto s = v.get<std::string>();
      if (s != "oai" && s != "target" && s != "uniform") fail(path + "." + key, "unknown weight preset '" + s + "'");
      return;
    }
    if (!v.is_array() || v.size() != static_cast<std::size_t>(kNumGrades)) {
      fail(path + "." + key, "must be \"oai\", \"target\", \"uniform\" or 5 numbers");
      return;
    }
    double sum = 0.0;
    for (const auto& w : v) {
      if (!w.is_number() || !(w.get<double>() >= 0.0) || !std::isfinite(w.get<double>())) {
        fail(path + "." + key, "weights must be finite and nonnegative");
        return;
      }
      sum += w.get<double>();
    }
    if (!(sum > 0.0)) fail(path + "." + key, "weights must not all be zero");
  }

  void profile(const json& j, const std::string& key, const std::string& path) {
    if (!j.contains(key)) return;
    if (!j[key].is_string()) {
      fail(path + "." + key, "must be a string");
      return;
    }
    try {
      (void)DomainProfile::by_name(j[key].get<std::string>());
    } catch (const Error&) {
      fail(path + "." + key, "unknown profile '" + j[key].get<std::string>() + "'");
    }
  }

  void train(const json& j, const std::string& path) {
    unsigned_int(j, "epochs", path);
    integer(j, "batch_size", path, 1, 1 << 20);
    number(j, "learning_rate", path, 0.0, 1e3, true);
    number(j, "momentum", path, 0.0, 1.0, false, true);
    number(j, "clip_norm", path, 0.0, 1e12);
    unsigned_int(j, "seed", path);
    if (j.contains("lr_schedule") && j["lr_schedule"] != "cosine" && j["lr_schedule"] != "constant")
      fail(path + ".lr_schedule", "must be \"cosine\" or \"constant\"");
  }

 private:
  static std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
  }
  std::vector<std::string>& out_;
};

std::vector<double> weights_from_json(const json& v) {
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "oai") return {kOaiGradeCounts.begin(), kOaiGradeCounts.end()};
    if (s == "target") return {kTargetGradeCounts.begin(), kTargetGradeCounts.end()};
    return std::vector<double>(kNumGrades, 1.0);
  }
  return v.get<std::vector<double>>();
}

void read_train(const json& j, TrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.seed = j.value("seed", c.seed);
  c.lr_schedule = j.value("lr_schedule", c.lr_schedule);
}

}  // namespace

std::vector<std::string> check_experiment_config(const json& j) {
  std::vector<std::string> v;
  Checker c(v);
  if (!c.object(j, "config", {"name", "kind", "seed", "generator", "ingest", "split", "locator", "grader",
                              "finetune", "metrics", "output_dir", "threads"}))
    return v;
  c.string(j, "name", "config");
  if (j.contains("name") && j["name"].is_string()) {
    const auto name = j["name"].get<std::string>();
    if (name.empty() || name.find_first_of("/\\") != std::string::npos || name == "." || name == "..")
      c.fail("config.name", "must be a plain non-empty file name");
  }
  if (!j.contains("kind")) {
    c.fail("config.kind", "required");
  } else if (!j["kind"].is_string() ||
             (j["kind"] != "compare_heads" && j["kind"] != "domain_shift" && j["kind"] != "two_stage")) {
    c.fail("config.kind", "must be one of compare_heads, domain_shift, two_stage");
  }
  const bool domain = j.value("kind", json()) == "domain_shift";
  c.unsigned_int(j, "seed", "config");
  c.integer(j, "threads", "config", 1, 256);
  c.string(j, "output_dir", "config");

  const bool has_gen = j.contains("generator"), has_ingest = j.contains("ingest");
  if (has_gen == has_ingest) c.fail("config", "exactly one of generator or ingest is required");
  if (has_gen && c.object(j["generator"], "config.generator",
                          {"n", "profile", "grade_weights", "target_n", "target_profile", "target_grade_weights"})) {
    const auto& g = j["generator"];
    c.integer(g, "n", "config.generator", 1, 1 << 24);
    c.integer(g, "target_n", "config.generator", 1, 1 << 24);
    c.profile(g, "profile", "config.generator");
    c.profile(g, "target_profile", "config.generator");
    c.weights(g, "grade_weights", "config.generator");
    c.weights(g, "target_grade_weights", "config.generator");
  }
  if (has_ingest && c.object(j["ingest"], "config.ingest", {"dir", "target_dir"})) {
    const auto& g = j["ingest"];
    if (!g.contains("dir")) c.fail("config.ingest.dir", "required");
    c.string(g, "dir", "config.ingest");
    c.string(g, "target_dir", "config.ingest");
    if (domain && !g.contains("target_dir")) c.fail("config.ingest.target_dir", "required for domain_shift");
  }
  if (j.contains("split") &&
      c.object(j["split"], "config.split", {"train", "val", "test", "stratified", "seed"})) {
    const auto& s = j["split"];
    for (const char* k : {"train", "val", "test"}) c.number(s, k, "config.split", 0.0, 1.0);
    c.boolean(s, "stratified", "config.split");
    c.unsigned_int(s, "seed", "config.split");
    const double sum = s.value("train", 0.7) + s.value("val", 0.1) + s.value("test", 0.2);
    if (std::abs(sum - 1.0) > 1e-9) c.fail("config.split", "train + val + test must equal 1");
    if (s.value("test", 0.2) <= 0.0) c.fail("config.split.test", "must be > 0");
    if (s.value("train", 0.7) <= 0.0) c.fail("config.split.train", "must be > 0");
  }
  if (j.contains("locator") && c.object(j["locator"], "config.locator",
                                        {"epochs", "batch_size", "learning_rate", "momentum", "clip_norm", "seed",
                                         "lr_schedule", "box_weight", "mask_weight"})) {
    c.train(j["locator"], "config.locator");
    c.number(j["locator"], "box_weight", "config.locator", 0.0, 1e6);
    c.number(j["locator"], "mask_weight", "config.locator", 0.0, 1e6);
  }
  if (j.contains("grader") && c.object(j["grader"], "config.grader",
                                       {"epochs", "batch_size", "learning_rate", "momentum", "clip_norm", "seed",
                                        "lr_schedule", "heads", "warm_start_regression", "arch"})) {
    const auto& g = j["grader"];
    c.train(g, "config.grader");
    c.boolean(g, "warm_start_regression", "config.grader");
    if (g.contains("heads")) {
      const auto& h = g["heads"];
      if (!h.is_array() || h.empty()) {
        c.fail("config.grader.heads", "must be a non-empty array");
      } else {
        for (const auto& e : h)
          if (!e.is_string() || (e != "classification" && e != "regression"))
            c.fail("config.grader.heads", "unknown head kind " + e.dump());
      }
    }
    if (g.contains("arch") && c.object(g["arch"], "config.grader.arch",
                                       {"input_size", "stem_channels", "growth", "layers_per_block", "blocks",
                                        "transition_channels", "regression_hidden"})) {
      const auto& a = g["arch"];
      for (const char* k : {"input_size", "stem_channels", "growth", "layers_per_block", "blocks",
                            "transition_channels", "regression_hidden"})
        c.integer(a, k, "config.grader.arch", 1, 4096);
      if (a.contains("input_size") && a["input_size"].is_number_integer() && a["input_size"].get<long long>() % 4 != 0)
        c.fail("config.grader.arch.input_size", "must be a multiple of 4");
    }
  }
  if (j.contains("finetune") &&
      c.object(j["finetune"], "config.finetune", {"epochs", "lr_scale", "batch_size"})) {
    c.unsigned_int(j["finetune"], "epochs", "config.finetune");
    c.integer(j["finetune"], "batch_size", "config.finetune", 1, 1 << 20);
    c.number(j["finetune"], "lr_scale", "config.finetune", 0.0, 1e3, true);
  }
  if (j.contains("metrics") &&
      c.object(j["metrics"], "config.metrics", {"bootstrap_resamples", "ci_level", "bootstrap_seed"})) {
    c.integer(j["metrics"], "bootstrap_resamples", "config.metrics", 1, 1 << 24);
    c.number(j["metrics"], "ci_level", "config.metrics", 0.0, 1.0, true, true);
    c.unsigned_int(j["metrics"], "bootstrap_seed", "config.metrics");
  }
  return v;
}

fs::path default_output_dir() {
  const char* env = std::getenv(kOutDirEnv);
  return env && *env ? fs::path(env) : fs::path("klgrade_out");
}

ExperimentConfig parse_experiment_config(const json& j) {
  auto violations = check_experiment_config(j);
  if (!violations.empty()) throw ConfigError(std::move(violations));
  ExperimentConfig c;
  const std::string kind = j.at("kind").get<std::string>();
  c.kind = kind == "compare_heads" ? ExperimentKind::compare_heads
           : kind == "domain_shift" ? ExperimentKind::domain_shift
                                    : ExperimentKind::two_stage;
  c.name = j.value("name", kind);
  c.seed = j.value("seed", c.seed);
  c.threads = j.value("threads", c.threads);
  c.output_dir = j.contains("output_dir") ? fs::path(j["output_dir"].get<std::string>()) : default_output_dir();

  if (j.contains("generator")) {
    const auto& g = j["generator"];
    GeneratorConfig gen;
    gen.n = g.value("n", gen.n);
    gen.profile = g.value("profile", gen.profile);
    if (g.contains("grade_weights")) gen.grade_weights = weights_from_json(g["grade_weights"]);
    gen.target_n = g.value("target_n", gen.target_n);
    gen.target_profile = g.value("target_profile", gen.target_profile);
    if (g.contains("target_grade_weights")) gen.target_grade_weights = weights_from_json(g["target_grade_weights"]);
    c.generator = gen;
  } else {
    c.ingest_dir = fs::path(j["ingest"]["dir"].get<std::string>());
    if (j["ingest"].contains("target_dir")) c.target_ingest_dir = fs::path(j["ingest"]["target_dir"].get<std::string>());
  }

  const json empty = json::object();
  const auto& s = j.contains("split") ? j["split"] : empty;
  c.split.train_frac = s.value("train", 0.7);
  c.split.val_frac = s.value("val", 0.1);
  c.split.test_frac = s.value("test", 0.2);
  c.split.stratified = s.value("stratified", false);
  c.split.seed = s.value("seed", c.seed);

  c.locator = default_locator_config();
  c.locator.train.seed = c.seed;
  if (j.contains("locator")) {
    read_train(j["locator"], c.locator.train);
    c.locator.weights.box = j["locator"].value("box_weight", c.locator.weights.box);
    c.locator.weights.mask = j["locator"].value("mask_weight", c.locator.weights.mask);
  }

  c.grader.seed = c.seed;
  if (c.kind != ExperimentKind::compare_heads) c.heads = {HeadKind::regression};
  if (j.contains("grader")) {
    const auto& g = j["grader"];
    read_train(g, c.grader);
    c.warm_start_regression = g.value("warm_start_regression", false);
    if (g.contains("heads")) {
      c.heads.clear();
      for (const auto& h : g["heads"]) c.heads.push_back(head_kind_from_string(h.get<std::string>()));
    }
    if (g.contains("arch")) c.grader_arch = grader_arch_from_json(g["arch"]);
  }

  c.finetune.train = c.grader;
  c.finetune.train.epochs = 8;
  if (j.contains("finetune")) {
    c.finetune.train.epochs = j["finetune"].value("epochs", c.finetune.train.epochs);
    c.finetune.train.batch_size = j["finetune"].value("batch_size", c.finetune.train.batch_size);
    c.finetune.lr_scale = j["finetune"].value("lr_scale", c.finetune.lr_scale);
  }

  c.bootstrap.seed = derive_seed(c.seed, 0, kTagBootstrap);
  if (j.contains("metrics")) {
    c.bootstrap.resamples = j["metrics"].value("bootstrap_resamples", c.bootstrap.resamples);
    c.bootstrap.level = j["metrics"].value("ci_level", c.bootstrap.level);
    c.bootstrap.seed = j["metrics"].value("bootstrap_seed", c.bootstrap.seed);
  }
  return c;
}

json load_experiment_json(const fs::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const Error&) {
    throw ConfigError({"config: cannot read " + path.string()});
  }
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw ConfigError({std::string("config: not valid JSON (") + e.what() + ")"});
  }
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  return parse_experiment_config(load_experiment_json(path));
}

// ---- experiment execution ----

namespace {

struct Data {
  std::vector<AnnotatedImage> images;
  json provenance;
};

Data acquire(const ExperimentConfig& c, bool target) {
  Data d;
  if (c.generator) {
    const auto& g = *c.generator;
    const std::size_t n = target ? g.target_n : g.n;
    const auto& profile_name = target ? g.target_profile : g.profile;
    auto weights = target ? g.target_grade_weights : g.grade_weights;
    if (weights.empty()) weights.assign(kNumGrades, 1.0);
    const std::uint64_t seed = derive_seed(c.seed, target ? 1 : 0, kTagData);
    const auto samples = sample_dataset(n, weights, DomainProfile::by_name(profile_name), seed);
    char id[32];
    for (std::size_t i = 0; i < samples.size(); ++i) {
      std::snprintf(id, sizeof id, "%s_%05zu", target ? "target" : "sample", i);
      d.images.push_back(to_annotated(samples[i], id));
    }
    d.provenance = {{"generator", {{"n", n}, {"profile", profile_name}, {"grade_weights", weights}, {"seed", seed}}}};
  } else {
    const fs::path dir = target ? *c.target_ingest_dir : *c.ingest_dir;
    d.images = read_dataset(dir);
    d.provenance = {{"ingest", dir.string()}};
  }
  if (d.images.empty()) throw ValueError("experiment dataset is empty");
  return d;
}

std::vector<int> grades_of(std::span<const GradeExample> ex) {
  std::vector<int> out;
  for (const auto& e : ex) out.push_back(e.grade);
  return out;
}

// Fails loudly if any training-phase read touched a test item.
void assert_no_leakage(const AccessLog& log, const std::vector<std::size_t>& test, const std::string& what) {
  for (const char* phase : {"train", "finetune"}) {
    const auto seen = log.indices(phase);
    for (auto i : test)
      if (seen.count(i)) throw Error(what + ": training read test item " + std::to_string(i));
  }
}

class Runner {
 public:
  Runner(const ExperimentConfig& c, const LogFn& log) : c_(c), log_(log), dir_(c.output_dir / c.name) {}

  ExperimentResult run() {
    fs::create_directories(dir_);
    manifest_ = {{"experiment", c_.name}, {"kind", to_string(c_.kind)}, {"seed", c_.seed}};
    switch (c_.kind) {
      case ExperimentKind::compare_heads: compare_heads(); break;
      case ExperimentKind::domain_shift: domain_shift(); break;
      case ExperimentKind::two_stage: two_stage(); break;
    }
    result_.summary["experiment"] = c_.name;
    result_.summary["kind"] = to_string(c_.kind);
    emit("summary.json", result_.summary.dump(2) + "\n");
    manifest_["leakage_check"] = "passed";
    std::vector<std::string> names;
    for (const auto& f : result_.files) names.push_back(fs::relative(f, dir_).generic_string());
    names.push_back("manifest.json");
    std::sort(names.begin(), names.end());
    manifest_["files"] = names;
    emit("manifest.json", manifest_.dump(2) + "\n");
    return std::move(result_);
  }

 private:
  void say(const std::string& msg) const {
    if (log_) log_("[" + c_.name + "] " + msg);
  }

  void emit(const std::string& rel, const std::string& text) {
    write_text(dir_ / rel, text);
    result_.files.push_back(dir_ / rel);
  }

  void report(EvalReport r) {
    say(r.name + ": accuracy " + std::to_string(r.accuracy) + ", MAE " + std::to_string(r.mae) +
        ", neighbor fraction " + std::to_string(r.neighbor_fraction));
    emit("reports/" + r.name + ".json", eval_report_text(r));
    emit("reports/" + r.name + "_confusion.csv", confusion_csv(r.confusion));
    result_.reports.push_back(std::move(r));
  }

  void checkpoint(const std::string& name, const Checkpoint& ck) {
    const auto path = dir_ / "checkpoints" / (name + ".ckpt");
    save_checkpoint(path, ck);
    result_.files.push_back(path);
  }

  TrainConfig logged(TrainConfig t) const {
    t.log = log_;
    return t;
  }

  EvalReport score(const std::string& name, const GraderNet& g, const DataView<GradeExample>& test) {
    std::vector<std::vector<double>> inputs;
    std::vector<int> actual;
    for (std::size_t i = 0; i < test.size(); ++i) {
      inputs.push_back(test[i].input);
      actual.push_back(test[i].grade);
    }
    const auto preds = predict_parallel(g, inputs, c_.threads);
    std::vector<int> predicted;
    for (const auto& p : preds) predicted.push_back(p.grade);
    return evaluate(name, actual, predicted, c_.bootstrap);
  }

  struct Views {
    std::shared_ptr<const std::vector<GradeExample>> items;
    Split split;
  };

  Views grade_views(std::vector<GradeExample> ex, std::uint64_t split_seed) {
    Views v;
    SplitSpec spec = c_.split;
    spec.seed = split_seed;
    const auto labels = grades_of(ex);
    v.split = klg::split(ex.size(), spec, labels);
    v.items = std::make_shared<const std::vector<GradeExample>>(std::move(ex));
    return v;
  }

  GraderNet train_head(HeadKind head, const Views& v, AccessLog& log, const GraderNet* warm) {
    DataView<GradeExample> train(v.items, v.split.train, &log), val(v.items, v.split.val, &log);
    log.set_phase("train");
    GraderNet g;
    if (warm && head == HeadKind::regression) {
      GraderNet start = make_grader(head, c_.grader.seed, c_.grader_arch);
      // Trunk parameters come first and share shapes across heads.
      const std::size_t trunk = warm->net.parameters().size() - 2;
      for (std::size_t i = 0; i < trunk; ++i) {
        auto src = warm->net.parameters()[i].data();
        std::copy(src.begin(), src.end(), start.net.parameters()[i].data().begin());
      }
      g = continue_training(start, train, val, logged(c_.grader));
    } else {
      g = train_grader(head, train, val, logged(c_.grader), c_.grader_arch);
    }
    log.set_phase("idle");
    return g;
  }

  void record_split(const std::string& key, const Split& s) {
    manifest_["splits"][key] = {{"train", s.train.size()}, {"val", s.val.size()}, {"test", s.test.size()}};
  }

  void compare_heads() {
    auto data = acquire(c_, false);
    manifest_["data"] = data.provenance;
    say("preparing " + std::to_string(2 * data.images.size()) + " knee crops");
    const auto v = grade_views(grader_examples(data.images, c_.grader_arch.input_size), c_.split.seed);
    record_split("crops", v.split);
    AccessLog log;
    DataView<GradeExample> test(v.items, v.split.test);
    std::optional<GraderNet> classifier;
    json heads = json::object();
    for (HeadKind head : c_.heads) {
      say("training " + to_string(head) + " head");
      const bool warm = c_.warm_start_regression && classifier;
      GraderNet g = train_head(head, v, log, warm ? &*classifier : nullptr);
      assert_no_leakage(log, v.split.test, c_.name);
      if (head == HeadKind::classification) classifier = g;
      checkpoint("grader_" + to_string(head), to_checkpoint(g));
      auto r = score(to_string(head), g, test);
      heads[to_string(head)] = {{"neighbor_fraction", r.neighbor_fraction}, {"mae", r.mae},
                                {"mae_ci", {r.mae_ci.lo, r.mae_ci.hi}},   {"accuracy", r.accuracy},
                                {"kappa", r.overall_kappa}};
      report(std::move(r));
    }
    result_.summary["test_samples"] = v.split.test.size();
    result_.summary["heads"] = heads;
  }

  void domain_shift() {
    auto source = acquire(c_, false);
    auto target = acquire(c_, true);
    manifest_["data"] = {{"source", source.provenance}, {"target", target.provenance}};
    const HeadKind head = c_.heads.front();
    const auto sv = grade_views(grader_examples(source.images, c_.grader_arch.input_size), c_.split.seed);
    const auto tv = grade_views(grader_examples(target.images, c_.grader_arch.input_size),
                                derive_seed(c_.split.seed, 1, kTagSplit));
    record_split("source", sv.split);
    record_split("target", tv.split);

    AccessLog source_log, target_log;
    say("training " + to_string(head) + " head on the source domain");
    GraderNet g = train_head(head, sv, source_log, nullptr);
    assert_no_leakage(source_log, sv.split.test, c_.name);
    checkpoint("grader_source", to_checkpoint(g));

    DataView<GradeExample> s_test(sv.items, sv.split.test), t_test(tv.items, tv.split.test);
    auto ss = score("source_on_source", g, s_test);
    auto st = score("source_on_target", g, t_test);

    say("fine-tuning on the target domain");
    DataView<GradeExample> t_train(tv.items, tv.split.train, &target_log), t_val(tv.items, tv.split.val, &target_log);
    target_log.set_phase("finetune");
    FineTuneConfig ft = c_.finetune;
    ft.train = logged(ft.train);
    const GraderNet tuned = fine_tune(g, t_train, t_val, ft);
    target_log.set_phase("idle");
    assert_no_leakage(target_log, tv.split.test, c_.name);
    checkpoint("grader_finetuned", to_checkpoint(tuned));
    auto ft_r = score("finetuned_on_target", tuned, t_test);

    result_.summary["head"] = to_string(head);
    result_.summary["mae"] = {{"source_on_source", ss.mae}, {"source_on_target", st.mae},
                              {"finetuned_on_target", ft_r.mae}};
    result_.summary["degradation_ratio"] = ss.mae > 0 ? json(st.mae / ss.mae) : json(nullptr);
    result_.summary["finetune_ratio"] = st.mae > 0 ? json(ft_r.mae / st.mae) : json(nullptr);
    report(std::move(ss));
    report(std::move(st));
    report(std::move(ft_r));
  }

  void two_stage() {
    auto data = acquire(c_, false);
    manifest_["data"] = data.provenance;
    const auto images = std::make_shared<const std::vector<AnnotatedImage>>(std::move(data.images));
    std::vector<int> labels;
    for (const auto& im : *images) labels.push_back(im.left.grade);  // stratify on the left knee
    const Split s = klg::split(images->size(), c_.split, labels);
    record_split("images", s);

    say("building locator examples");
    auto loc_items = std::make_shared<std::vector<LocatorExample>>();
    for (const auto* part : {&s.train, &s.val})
      for (auto i : *part) {
        const auto& im = (*images)[i];
        loc_items->push_back(make_locator_example(im.image, im.left, im.right));
      }
    std::vector<std::size_t> lt(s.train.size()), lv(s.val.size());
    std::iota(lt.begin(), lt.end(), std::size_t{0});
    std::iota(lv.begin(), lv.end(), s.train.size());
    const std::shared_ptr<const std::vector<LocatorExample>> loc_ptr = loc_items;

    say("training locator");
    LocatorTrainConfig lc = c_.locator;
    lc.train = logged(lc.train);
    const LocatorNet loc = train_locator(DataView<LocatorExample>(loc_ptr, lt), DataView<LocatorExample>(loc_ptr, lv), lc);
    checkpoint("locator", to_checkpoint(loc));

    // The grader learns from the locator's own crops of train/val images, so
    // it sees the same framing at test time.
    say("cropping train/val knees with the trained locator");
    auto crop_items = std::make_shared<std::vector<GradeExample>>();
    std::vector<std::size_t> crop_train, crop_val;
    for (const auto* part : {&s.train, &s.val}) {
      std::vector<AnnotatedImage> imgs;
      for (auto i : *part) imgs.push_back((*images)[i]);
      const auto found = locate_parallel(loc, imgs, c_.threads);
      for (std::size_t j = 0; j < imgs.size(); ++j)
        for (const Detection* d : {&found[j].first, &found[j].second}) {
          (part == &s.train ? crop_train : crop_val).push_back(crop_items->size());
          crop_items->push_back(
              grader_example(imgs[j].image, d->box, imgs[j].knee(d->side).grade, c_.grader_arch.input_size));
        }
    }
    const std::shared_ptr<const std::vector<GradeExample>> crop_ptr = crop_items;

    const HeadKind head = c_.heads.front();
    say("training " + to_string(head) + " grader on located crops");
    const GraderNet g = train_grader(head, DataView<GradeExample>(crop_ptr, crop_train),
                                     DataView<GradeExample>(crop_ptr, crop_val), logged(c_.grader), c_.grader_arch);
    checkpoint("grader_" + to_string(head), to_checkpoint(g));

    say("evaluating on " + std::to_string(s.test.size()) + " held-out radiographs");
    std::vector<AnnotatedImage> test;
    for (auto i : s.test) test.push_back((*images)[i]);
    const auto dets = locate_parallel(loc, test, c_.threads);
    const auto loc_metrics = localization_metrics(test, dets);

    std::vector<int> actual, predicted;
    json knee_reports = json::array();
    std::vector<KneeReport> reports(test.size());
    parallel_chunks(test.size(), c_.threads, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) {
        KneeReport r{test[i].id, model_id("locator", loc.net), model_id("grader", g.net), to_string(head), {}};
        r.knees.push_back(grade_knee(g, test[i].image, dets[i].first));
        r.knees.push_back(grade_knee(g, test[i].image, dets[i].second));
        reports[i] = std::move(r);
      }
    });
    std::size_t within_one = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      for (const auto& k : reports[i].knees) {
        const int truth = test[i].knee(k.side).grade;
        actual.push_back(truth);
        predicted.push_back(k.grade);
        within_one += std::abs(truth - k.grade) <= 1;
      }
      knee_reports.push_back(to_json(reports[i]));
    }
    emit("reports/knee_reports.json", knee_reports.dump(2) + "\n");

    auto r = evaluate("two_stage", actual, predicted, c_.bootstrap);
    r.localization = loc_metrics;
    result_.summary["test_images"] = test.size();
    result_.summary["within_one_fraction"] =
        actual.empty() ? 0.0 : static_cast<double>(within_one) / static_cast<double>(actual.size());
    result_.summary["localization"] = {{"bbox_mse", loc_metrics.bbox_mse},
                                       {"dice", loc_metrics.dice},
                                       {"side_accuracy", loc_metrics.side_accuracy},
                                       {"iou_pass_rate", loc_metrics.iou_pass_rate}};
    result_.summary["mae"] = r.mae;
    report(std::move(r));
  }

  const ExperimentConfig& c_;
  LogFn log_;
  fs::path dir_;
  json manifest_;
  ExperimentResult result_;
};

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config, const LogFn& log) {
  config.split.validate();
  if (!config.generator && !config.ingest_dir) throw ConfigError({"config: no generator or ingest section"});
  if (config.kind == ExperimentKind::domain_shift && config.ingest_dir && !config.target_ingest_dir)
    throw ConfigError({"config.ingest.target_dir: required for domain_shift"});
  if (config.heads.empty()) throw ConfigError({"config.grader.heads: must not be empty"});
  return Runner(config, log).run();
}

}  // namespace klg
