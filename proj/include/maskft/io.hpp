#pragma once
// On-disk containers. Checkpoints and mask files share one framing:
//
//   offset 0   8-byte magic ("MFTCKPT1" or "MFTMASK1")
//   offset 8   u64 little-endian length N of the JSON manifest
//   offset 16  N bytes of JSON (sorted keys, no whitespace)
//   16+N       binary blob; every record in the manifest carries its byte
//              offset relative to the blob start
//
// Checkpoint blobs hold little-endian IEEE-754 doubles. Mask blobs hold one
// LSB-first bitset per path, each starting on a byte boundary.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "maskft/model.hpp"

namespace maskft::io {

using nlohmann::json;

/// Malformed file. `offset` is the byte position of the first inconsistency.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

inline constexpr std::string_view kCheckpointMagic = "MFTCKPT1";
inline constexpr std::string_view kMaskMagic = "MFTMASK1";

struct Framed {
  json manifest;
  std::string blob;
  std::uint64_t blob_offset = 0;  // absolute offset of the blob in the file
};

std::string frame(std::string_view magic, const json& manifest, std::string_view blob);
Framed unframe(std::string_view bytes, std::string_view magic);
/// Magic of a framed file, or empty if the file is too short.
std::string peek_magic(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
/// Writes through a temporary file and rename, so readers never see partial files.
void write_file(const std::filesystem::path& path, std::string_view bytes);

void append_f64_le(std::string& out, double v);
double read_f64_le(const char* p);

std::string sha256_hex(std::string_view bytes);

json config_to_json(const lm::TransformerConfig& c);
lm::TransformerConfig config_from_json(const json& j);

std::string encode_checkpoint(const lm::ModelParams& params);
lm::ModelParams decode_checkpoint(std::string_view bytes);
void save_checkpoint(const lm::ModelParams& params, const std::filesystem::path& path);
lm::ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace maskft::io
