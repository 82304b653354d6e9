#pragma once

// Checkpoint file: 8-byte magic, u64 little-endian header length, JSON
// header (format version, hyperparams, vocabulary and its hash, tensor
// manifest), then the tensors as raw little-endian doubles.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kpn/errors.hpp"
#include "kpn/model.hpp"
#include "kpn/vocab.hpp"

namespace kpn {

inline constexpr char kCheckpointMagic[8] = {'K', 'P', 'N', 'C', 'K', 'P', 'T', '\0'};
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  Hyperparams hyperparams;
  Vocabulary vocab;
  ModelParams params;
  nlohmann::json extra = nlohmann::json::object();  // free-form provenance (epoch, metrics)
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(p[i]);
  return v;
}

inline void put_double(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

}  // namespace detail

/// Serialized bytes; identical parameters give identical bytes.
inline std::string serialize_checkpoint(const Hyperparams& hp, const Vocabulary& vocab, const ModelParams& params,
                                        const nlohmann::json& extra = nlohmann::json::object()) {
  if (hp.vocab_size != vocab.size()) {
    throw DimensionError("checkpoint: hyperparams vocab_size " + std::to_string(hp.vocab_size) +
                         " differs from vocabulary size " + std::to_string(vocab.size()));
  }
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& nt : params.named()) {
    manifest.push_back({{"name", nt.name}, {"shape", nt.tensor.shape()}, {"offset", offset}, {"count", nt.tensor.size()}});
    offset += nt.tensor.size() * 8;
  }
  nlohmann::json header = {{"format", "kpn-checkpoint"},
                           {"version", kCheckpointVersion},
                           {"hyperparams", hp},
                           {"vocab_hash", std::to_string(vocab.hash())},
                           {"vocab", vocab.entries()},
                           {"tensors", manifest},
                           {"extra", extra}};
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, 8);
  detail::put_u64(out, h.size());
  out += h;
  out.reserve(out.size() + offset);
  for (const auto& nt : params.named())
    for (double d : nt.tensor.data()) detail::put_double(out, d);
  return out;
}

/// Writes to a temporary sibling and renames it into place.
inline void save_checkpoint(const std::string& path, const Hyperparams& hp, const Vocabulary& vocab,
                            const ModelParams& params, const nlohmann::json& extra = nlohmann::json::object()) {
  const std::string bytes = serialize_checkpoint(hp, vocab, params, extra);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing checkpoint " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path + ": " + ec.message());
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint") {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw ParseError(origin + ": not a KPN checkpoint (bad magic)");
  }
  const std::uint64_t hlen = detail::get_u64(bytes.data() + 8);
  if (hlen > bytes.size() - 16) throw ParseError(origin + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(origin + ": malformed header (" + e.what() + ")");
  }
  if (header.value("format", "") != "kpn-checkpoint") throw ParseError(origin + ": unknown format");
  if (header.value("version", 0) != kCheckpointVersion) {
    throw ParseError(origin + ": unsupported version " + header.value("version", nlohmann::json(0)).dump());
  }
  Checkpoint c;
  c.hyperparams = header.at("hyperparams").get<Hyperparams>();
  c.vocab = Vocabulary(header.at("vocab").get<std::vector<std::string>>());
  if (std::to_string(c.vocab.hash()) != header.value("vocab_hash", "")) {
    throw ParseError(origin + ": vocabulary hash mismatch");
  }
  c.extra = header.value("extra", nlohmann::json::object());
  c.params = ModelParams::init(c.hyperparams, 0);
  const char* data = bytes.data() + 16 + hlen;
  const std::uint64_t data_len = bytes.size() - 16 - hlen;
  auto named = c.params.named();
  const auto& manifest = header.at("tensors");
  if (manifest.size() != named.size()) throw ParseError(origin + ": tensor count does not match hyperparams");
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& m = manifest[i];
    auto& t = named[i].tensor;
    if (m.at("name").get<std::string>() != named[i].name || m.at("shape").get<Shape>() != t.shape()) {
      throw ParseError(origin + ": tensor " + std::to_string(i) + " (" + m.at("name").get<std::string>() +
                       ") does not match expected " + named[i].name + " " + shape_str(t.shape()));
    }
    const std::uint64_t off = m.at("offset").get<std::uint64_t>();
    if (off + t.size() * 8 > data_len) throw ParseError(origin + ": tensor data for " + named[i].name + " truncated");
    auto dst = t.mutable_data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = std::bit_cast<double>(detail::get_u64(data + off + 8 * k));
  }
  return c;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, path);
}

}  // namespace kpn
