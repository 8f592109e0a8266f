#pragma once

// DICOM-lite reader: Part 10 files (128-byte preamble + "DICM"), explicit VR
// little endian, uncompressed, single-frame, MONOCHROME1/2 only. Anything
// else is rejected with DicomError::Kind::unsupported naming the cause.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "klgrade/error.hpp"
#include "klgrade/image.hpp"

namespace klg {

class DicomError : public Error {
 public:
  enum class Kind { not_dicom, unsupported, corrupt };

  DicomError(Kind kind, const std::string& what);
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

std::string to_string(DicomError::Kind kind);

struct DicomElement {
  std::uint16_t group = 0;
  std::uint16_t element = 0;
  std::string vr;  // two letters
  std::uint32_t length = 0;
  std::span<const std::uint8_t> value;  // view into the parsed buffer
};

struct DicomImage {
  GrayImage image;
  // "gggg,eeee" (uppercase hex) -> decoded value for string and US/UL VRs.
  std::map<std::string, std::string> metadata;
};

inline constexpr const char* kExplicitVrLittleEndian = "1.2.840.10008.1.2.1";

DicomImage parse_dicom(std::span<const std::uint8_t> bytes);
DicomImage read_dicom(const std::filesystem::path& path);

// Walk top-level data elements (meta group included) without interpreting
// pixel data. Same error contract as parse_dicom.
std::vector<DicomElement> parse_dicom_elements(std::span<const std::uint8_t> bytes);

// True when bytes carry the "DICM" marker at offset 128.
bool looks_like_dicom(std::span<const std::uint8_t> bytes);

}  // namespace klg
