#include "klgrade/dicom.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstring>

#include "klgrade/checkpoint.hpp"

namespace klg {
namespace {

using Kind = DicomError::Kind;

constexpr std::size_t kPreamble = 128;
constexpr std::uint32_t kUndefinedLength = 0xFFFFFFFFu;
constexpr int kMaxNesting = 16;

bool long_form_vr(const std::string& vr) {
  static constexpr const char* kLong[] = {"OB", "OD", "OF", "OL", "OV", "OW", "SQ",
                                          "SV", "UC", "UN", "UR", "UT", "UV"};
  return std::any_of(std::begin(kLong), std::end(kLong), [&](const char* v) { return vr == v; });
}

bool string_vr(const std::string& vr) {
  static constexpr const char* kText[] = {"AE", "AS", "CS", "DA", "DS", "DT", "IS", "LO",
                                          "LT", "PN", "SH", "ST", "TM", "UI", "UC", "UT"};
  return std::any_of(std::begin(kText), std::end(kText), [&](const char* v) { return vr == v; });
}

std::string tag_key(std::uint16_t g, std::uint16_t e) {
  char buf[10];
  std::snprintf(buf, sizeof buf, "%04X,%04X", g, e);
  return buf;
}

std::string trim_value(std::span<const std::uint8_t> v) {
  std::string s(v.begin(), v.end());
  while (!s.empty() && (s.back() == ' ' || s.back() == '\0')) s.pop_back();
  while (!s.empty() && s.front() == ' ') s.erase(s.begin());
  return s;
}

std::string transfer_syntax_name(const std::string& uid) {
  if (uid == "1.2.840.10008.1.2") return "Implicit VR Little Endian";
  if (uid == "1.2.840.10008.1.2.2") return "Explicit VR Big Endian";
  if (uid == "1.2.840.10008.1.2.1.99") return "Deflated Explicit VR Little Endian";
  if (uid == "1.2.840.10008.1.2.5") return "RLE Lossless";
  if (uid.rfind("1.2.840.10008.1.2.4.", 0) == 0) return "JPEG family";
  return "unknown";
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  bool done() const { return pos_ >= bytes_.size(); }

  std::uint16_t u16() {
    need(2);
    const std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw DicomError(Kind::corrupt, "unexpected end of data at offset " + std::to_string(pos_));
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void skip_item_contents(Reader& r, int depth);

// Reads one explicit-VR element header + value. Sequences of undefined
// length are skipped through their delimiters; their value span is empty.
DicomElement read_element(Reader& r, int depth) {
  if (depth > kMaxNesting) throw DicomError(Kind::corrupt, "sequence nesting too deep");
  DicomElement el;
  el.group = r.u16();
  el.element = r.u16();
  if (el.group == 0xFFFE) {
    // Item / delimiter tags carry no VR.
    el.vr = "--";
    el.length = r.u32();
    return el;
  }
  auto vr = r.take(2);
  el.vr.assign(vr.begin(), vr.end());
  if (!std::isupper(static_cast<unsigned char>(el.vr[0])) ||
      !std::isupper(static_cast<unsigned char>(el.vr[1])))
    throw DicomError(Kind::corrupt, "invalid VR at tag " + tag_key(el.group, el.element));
  if (long_form_vr(el.vr)) {
    r.u16();  // reserved
    el.length = r.u32();
  } else {
    el.length = r.u16();
  }
  if (el.length == kUndefinedLength) {
    if (el.vr != "SQ" && el.vr != "UN")
      throw DicomError(Kind::unsupported, "undefined length on " + el.vr + " element " +
                                              tag_key(el.group, el.element) + " (encapsulated pixel data?)");
    // Items until the sequence delimitation item.
    for (;;) {
      const auto g = r.u16(), e = r.u16();
      const auto len = r.u32();
      if (g != 0xFFFE) throw DicomError(Kind::corrupt, "expected item tag inside sequence");
      if (e == 0xE0DD) break;
      if (e != 0xE000) throw DicomError(Kind::corrupt, "unexpected delimiter inside sequence");
      if (len == kUndefinedLength) {
        skip_item_contents(r, depth + 1);
      } else {
        r.take(len);
      }
    }
    return el;
  }
  if (el.length % 2 != 0)
    throw DicomError(Kind::corrupt, "odd value length at tag " + tag_key(el.group, el.element));
  el.value = r.take(el.length);
  return el;
}

void skip_item_contents(Reader& r, int depth) {
  for (;;) {
    auto el = read_element(r, depth);
    if (el.group == 0xFFFE) {
      if (el.element == 0xE00D) return;
      throw DicomError(Kind::corrupt, "unexpected item tag inside item");
    }
  }
}

std::uint32_t element_uint(const DicomElement& el) {
  if (el.vr == "US" && el.value.size() >= 2) return el.value[0] | (el.value[1] << 8);
  if (el.vr == "UL" && el.value.size() >= 4)
    return el.value[0] | (el.value[1] << 8) | (el.value[2] << 16) |
           (static_cast<std::uint32_t>(el.value[3]) << 24);
  if (el.vr == "IS") {
    const auto s = trim_value(el.value);
    try {
      return static_cast<std::uint32_t>(std::stoul(s));
    } catch (...) {
    }
  }
  throw DicomError(Kind::corrupt, "cannot read integer from " + el.vr + " element " +
                                      tag_key(el.group, el.element));
}

}  // namespace

DicomError::DicomError(Kind kind, const std::string& what)
    : Error(to_string(kind) + ": " + what), kind_(kind) {}

std::string to_string(DicomError::Kind kind) {
  switch (kind) {
    case Kind::not_dicom: return "NotDicom";
    case Kind::unsupported: return "Unsupported";
    case Kind::corrupt: return "Corrupt";
  }
  return "DicomError";
}

bool looks_like_dicom(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= kPreamble + 4 && std::memcmp(bytes.data() + kPreamble, "DICM", 4) == 0;
}

std::vector<DicomElement> parse_dicom_elements(std::span<const std::uint8_t> bytes) {
  if (!looks_like_dicom(bytes)) throw DicomError(Kind::not_dicom, "missing DICM marker at offset 128");
  Reader r(bytes.subspan(kPreamble + 4));
  std::vector<DicomElement> elements;
  std::uint32_t last_tag = 0;
  bool syntax_checked = false;
  // The meta header must name explicit VR little endian before the body.
  auto check_syntax = [&elements] {
    auto ts = std::find_if(elements.begin(), elements.end(),
                           [](const DicomElement& e) { return e.group == 0x0002 && e.element == 0x0010; });
    if (ts == elements.end()) throw DicomError(Kind::unsupported, "no transfer syntax in meta header");
    const auto uid = trim_value(ts->value);
    if (uid != kExplicitVrLittleEndian)
      throw DicomError(Kind::unsupported, "transfer syntax " + uid + " (" + transfer_syntax_name(uid) + ")");
  };
  while (!r.done()) {
    auto el = read_element(r, 0);
    if (el.group == 0xFFFE) throw DicomError(Kind::corrupt, "item tag at top level");
    const std::uint32_t tag = (static_cast<std::uint32_t>(el.group) << 16) | el.element;
    if (tag < last_tag) throw DicomError(Kind::corrupt, "tags out of order at " + tag_key(el.group, el.element));
    last_tag = tag;
    if (!syntax_checked && el.group > 0x0002) {
      check_syntax();
      syntax_checked = true;
    }
    elements.push_back(std::move(el));
  }
  if (!syntax_checked) check_syntax();
  return elements;
}

DicomImage parse_dicom(std::span<const std::uint8_t> bytes) {
  const auto elements = parse_dicom_elements(bytes);
  DicomImage out;
  const DicomElement* pixel_data = nullptr;
  std::map<std::uint32_t, const DicomElement*> by_tag;
  for (const auto& el : elements) {
    const std::uint32_t tag = (static_cast<std::uint32_t>(el.group) << 16) | el.element;
    by_tag[tag] = &el;
    if (tag == 0x7FE00010u) pixel_data = &el;
    const auto key = tag_key(el.group, el.element);
    if (string_vr(el.vr)) {
      out.metadata[key] = trim_value(el.value);
    } else if ((el.vr == "US" && el.value.size() == 2) || (el.vr == "UL" && el.value.size() == 4)) {
      out.metadata[key] = std::to_string(element_uint(el));
    }
  }
  auto required = [&](std::uint32_t tag, const char* name) -> const DicomElement& {
    auto it = by_tag.find(tag);
    if (it == by_tag.end()) throw DicomError(Kind::corrupt, std::string("missing ") + name);
    return *it->second;
  };
  const auto rows = element_uint(required(0x00280010u, "Rows"));
  const auto cols = element_uint(required(0x00280011u, "Columns"));
  const auto bits = element_uint(required(0x00280100u, "BitsAllocated"));
  const auto photometric = trim_value(required(0x00280004u, "PhotometricInterpretation").value);
  auto optional_uint = [&](std::uint32_t tag, std::uint32_t fallback) {
    auto it = by_tag.find(tag);
    return it == by_tag.end() ? fallback : element_uint(*it->second);
  };
  const auto samples = optional_uint(0x00280002u, 1);
  const auto stored = optional_uint(0x00280101u, bits);
  const auto representation = optional_uint(0x00280103u, 0);
  const auto frames = optional_uint(0x00280008u, 1);

  if (photometric != "MONOCHROME1" && photometric != "MONOCHROME2")
    throw DicomError(Kind::unsupported, "photometric interpretation " + photometric);
  if (samples != 1) throw DicomError(Kind::unsupported, "samples per pixel " + std::to_string(samples));
  if (frames != 1) throw DicomError(Kind::unsupported, "multi-frame (" + std::to_string(frames) + " frames)");
  if (bits != 8 && bits != 16) throw DicomError(Kind::unsupported, "bits allocated " + std::to_string(bits));
  if (stored == 0 || stored > bits) throw DicomError(Kind::corrupt, "bits stored " + std::to_string(stored));
  if (representation != 0) throw DicomError(Kind::unsupported, "signed pixel representation");
  if (rows == 0 || cols == 0) throw DicomError(Kind::corrupt, "zero image extent");
  if (!pixel_data) throw DicomError(Kind::corrupt, "no pixel data element");

  const std::size_t bpp = bits / 8;
  const std::uint64_t needed = std::uint64_t{rows} * cols * bpp;
  if (pixel_data->value.size() < needed)
    throw DicomError(Kind::corrupt, "pixel data truncated: " + std::to_string(pixel_data->value.size()) +
                                        " bytes for " + std::to_string(needed));

  GrayImage img = GrayImage::blank(cols, rows, static_cast<int>(bits), ImageSource::dicom);
  const std::uint32_t mask = (stored >= 32) ? 0xFFFFFFFFu : ((1u << stored) - 1u);
  const auto& v = pixel_data->value;
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    std::uint32_t px = bpp == 1 ? v[i] : static_cast<std::uint32_t>(v[2 * i] | (v[2 * i + 1] << 8));
    px &= mask;
    if (photometric == "MONOCHROME1") px = mask - px;
    img.pixels[i] = static_cast<std::uint16_t>(px);
  }
  out.image = std::move(img);
  return out;
}

DicomImage read_dicom(const std::filesystem::path& path) {
  return parse_dicom(read_file_bytes(path));
}

}  // namespace klg
