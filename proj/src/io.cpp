#include "maskft/io.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace maskft::io {
namespace {

void append_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t read_u64_le(const char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(p[i]);
  return v;
}

}  // namespace

void append_f64_le(std::string& out, double v) { append_u64_le(out, std::bit_cast<std::uint64_t>(v)); }

double read_f64_le(const char* p) { return std::bit_cast<double>(read_u64_le(p)); }

std::string frame(std::string_view magic, const json& manifest, std::string_view blob) {
  const std::string text = manifest.dump();
  std::string out;
  out.reserve(16 + text.size() + blob.size());
  out.append(magic);
  append_u64_le(out, text.size());
  out.append(text);
  out.append(blob);
  return out;
}

Framed unframe(std::string_view bytes, std::string_view magic) {
  if (bytes.size() < magic.size() || bytes.substr(0, magic.size()) != magic) {
    throw FormatError("bad magic, expected '" + std::string(magic) + "'", 0);
  }
  if (bytes.size() < 16) throw FormatError("truncated header", bytes.size());
  const std::uint64_t n = read_u64_le(bytes.data() + 8);
  if (n > bytes.size() - 16) throw FormatError("manifest length " + std::to_string(n) + " overruns file", 8);
  Framed f;
  try {
    f.manifest = json::parse(bytes.substr(16, n));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("manifest is not valid JSON: ") + e.what(), 16 + e.byte - (e.byte ? 1 : 0));
  }
  f.blob_offset = 16 + n;
  f.blob = std::string(bytes.substr(16 + n));
  return f;
}

std::string peek_magic(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  char buf[8];
  if (!in.read(buf, 8)) return {};
  return std::string(buf, 8);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

json config_to_json(const lm::TransformerConfig& c) {
  return json{{"n_layers", c.n_layers},     {"d_model", c.d_model},       {"n_heads", c.n_heads},
              {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}};
}

lm::TransformerConfig config_from_json(const json& j) {
  lm::TransformerConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.validate();
  return c;
}

std::string encode_checkpoint(const lm::ModelParams& params) {
  json tensors = json::array();
  std::string blob;
  blob.reserve(params.parameter_count() * 8);
  for (const auto& [path, t] : params.tensors) {
    tensors.push_back({{"path", path}, {"shape", t.shape()}, {"offset", blob.size()}, {"count", t.size()}});
    for (double v : t.data()) append_f64_le(blob, v);
  }
  const json manifest{{"format", "maskft-checkpoint"},
                      {"version", 1},
                      {"config", config_to_json(params.config)},
                      {"tensors", tensors},
                      {"blob_bytes", blob.size()}};
  return frame(kCheckpointMagic, manifest, blob);
}

lm::ModelParams decode_checkpoint(std::string_view bytes) {
  const Framed f = unframe(bytes, kCheckpointMagic);
  lm::ModelParams p;
  try {
    p.config = config_from_json(f.manifest.at("config"));
  } catch (const std::exception& e) {
    throw FormatError(std::string("invalid model config: ") + e.what(), 16);
  }
  const auto blob_bytes = f.manifest.value("blob_bytes", std::uint64_t{0});
  if (blob_bytes != f.blob.size()) {
    throw FormatError("blob holds " + std::to_string(f.blob.size()) + " bytes, manifest says " +
                          std::to_string(blob_bytes),
                      f.blob_offset + std::min<std::uint64_t>(blob_bytes, f.blob.size()));
  }
  std::uint64_t expected = 0;
  for (const json& rec : f.manifest.at("tensors")) {
    const std::string path = rec.at("path").get<std::string>();
    const Shape shape = rec.at("shape").get<Shape>();
    const auto offset = rec.at("offset").get<std::uint64_t>();
    const auto count = rec.at("count").get<std::uint64_t>();
    if (offset != expected || shape_numel(shape) != count || offset + count * 8 > f.blob.size()) {
      throw FormatError("tensor '" + path + "' record inconsistent with blob layout", f.blob_offset + expected);
    }
    std::vector<double> data(count);
    for (std::uint64_t i = 0; i < count; ++i) data[i] = read_f64_le(f.blob.data() + offset + 8 * i);
    p.tensors.emplace(path, Tensor(shape, std::move(data)));
    expected = offset + count * 8;
  }
  if (expected != f.blob.size()) throw FormatError("trailing bytes after last tensor", f.blob_offset + expected);
  return p;
}

void save_checkpoint(const lm::ModelParams& params, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(params));
}

lm::ModelParams load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace maskft::io
