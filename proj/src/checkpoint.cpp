// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#include "cmstew/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace cmstew {

namespace {

constexpr char kMagic[] = "cmstew-checkpoint v1";

void put_le_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

std::uint32_t get_le_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

int parse_int_field(std::istream& in, const std::string& want, const std::string& path) {
  std::string key;
  long long value = 0;
  if (!(in >> key >> value) || key != want)
    throw IoError(cat("checkpoint ", path, ": expected field \"", want, "\""));
  return static_cast<int>(value);
}

}  // namespace

std::uint64_t fnv1a64_bytes(const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

void save_checkpoint(const std::string& path, Task task, const EncoderConfig& enc,
                     const std::vector<ParameterT<float>*>& params) {
  std::ostringstream manifest;
  manifest << kMagic << '\n';
  manifest << "task " << task_name(task) << '\n';
  manifest << "input_dim " << enc.input_dim << '\n';
  manifest << "gru_layers " << enc.gru_layers << '\n';
  manifest << "gru_hidden " << enc.gru_hidden << '\n';
  manifest << "latent_dim " << enc.latent_dim << '\n';
  manifest << "transformer_layers " << enc.transformer_layers << '\n';
  manifest << "heads " << enc.heads << '\n';
  manifest << "ffn_hidden " << enc.ffn_hidden << '\n';
  manifest << "classifier_hidden " << enc.classifier_hidden << '\n';
  manifest << "params " << params.size() << '\n';
  for (const auto* p : params) {
    manifest << p->name << ' ' << p->value.rank();
    for (int i = 0; i < p->value.rank(); ++i) manifest << ' ' << p->value.dim(i);
    manifest << '\n';
  }
  manifest << "payload\n";

  std::string payload;
  for (const auto* p : params) {
    for (std::int64_t i = 0; i < p->value.size(); ++i) {
      std::uint32_t bits;
      const float v = p->value[i];
      std::memcpy(&bits, &v, sizeof bits);
      put_le_u32(payload, bits);
    }
  }
  const std::uint64_t sum = fnv1a64_bytes(payload.data(), payload.size());

  const std::filesystem::path parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(cat("checkpoint ", path, ": cannot open for writing"));
  out << manifest.str();
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  for (int i = 0; i < 8; ++i)
    out.put(static_cast<char>((sum >> (8 * i)) & 0xff));
  out.flush();
  if (!out) throw IoError(cat("checkpoint ", path, ": write failed"));
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(cat("checkpoint ", path, ": cannot open"));
  std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  const std::string marker = "payload\n";
  const std::size_t marker_at = raw.find(marker);
  if (marker_at == std::string::npos)
    throw IoError(cat("checkpoint ", path, ": payload marker missing"));
  const std::size_t payload_at = marker_at + marker.size();

  std::istringstream manifest(raw.substr(0, marker_at));
  std::string magic_line;
  std::getline(manifest, magic_line);
  if (magic_line != kMagic)
    throw IoError(cat("checkpoint ", path, ": unrecognized format \"", magic_line, "\""));

  Checkpoint ckpt;
  std::string key, task_str;
  if (!(manifest >> key >> task_str) || key != "task")
    throw IoError(cat("checkpoint ", path, ": expected field \"task\""));
  ckpt.task = task_from_name(task_str);
  ckpt.enc.input_dim = parse_int_field(manifest, "input_dim", path);
  ckpt.enc.gru_layers = parse_int_field(manifest, "gru_layers", path);
  ckpt.enc.gru_hidden = parse_int_field(manifest, "gru_hidden", path);
  ckpt.enc.latent_dim = parse_int_field(manifest, "latent_dim", path);
  ckpt.enc.transformer_layers = parse_int_field(manifest, "transformer_layers", path);
  ckpt.enc.heads = parse_int_field(manifest, "heads", path);
  ckpt.enc.ffn_hidden = parse_int_field(manifest, "ffn_hidden", path);
  ckpt.enc.classifier_hidden = parse_int_field(manifest, "classifier_hidden", path);
  const int n_params = parse_int_field(manifest, "params", path);
  if (n_params < 0) throw IoError(cat("checkpoint ", path, ": negative param count"));

  std::size_t payload_floats = 0;
  for (int i = 0; i < n_params; ++i) {
    CheckpointEntry e;
    int rank = 0;
    if (!(manifest >> e.name >> rank) || rank < 0 || rank > 8)
      throw IoError(cat("checkpoint ", path, ": malformed parameter record ", i));
    std::int64_t count = 1;
    for (int r = 0; r < rank; ++r) {
      int d = 0;
      if (!(manifest >> d) || d < 0)
        throw IoError(cat("checkpoint ", path, ": malformed shape for ", e.name));
      e.shape.push_back(d);
      count *= d;
    }
    e.data.resize(static_cast<std::size_t>(count));
    payload_floats += static_cast<std::size_t>(count);
    ckpt.entries.push_back(std::move(e));
  }
  std::string trailing;
  if (manifest >> trailing)
    throw IoError(cat("checkpoint ", path, ": unexpected manifest token \"", trailing, "\""));

  const std::size_t payload_bytes = payload_floats * 4;
  if (raw.size() < payload_at + payload_bytes + 8)
    throw IoError(cat("checkpoint ", path, ": truncated payload"));
  if (raw.size() > payload_at + payload_bytes + 8)
    throw IoError(cat("checkpoint ", path, ": trailing bytes after checksum"));

  const auto* bytes = reinterpret_cast<const unsigned char*>(raw.data()) + payload_at;
  const std::uint64_t want = fnv1a64_bytes(bytes, payload_bytes);
  std::uint64_t got = 0;
  for (int i = 0; i < 8; ++i)
    got |= static_cast<std::uint64_t>(bytes[payload_bytes + static_cast<std::size_t>(i)])
           << (8 * i);
  if (want != got)
    throw IoError(cat("checkpoint ", path, ": checksum mismatch"));

  std::size_t off = 0;
  for (auto& e : ckpt.entries) {
    for (auto& v : e.data) {
      const std::uint32_t bits = get_le_u32(bytes + off);
      std::memcpy(&v, &bits, sizeof v);
      off += 4;
    }
  }
  return ckpt;
}

void bind_checkpoint(const Checkpoint& ckpt, const std::vector<ParameterT<float>*>& params,
                     bool allow_extra) {
  std::unordered_map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : ckpt.entries) {
    if (!by_name.emplace(e.name, &e).second)
      throw IoError(cat("checkpoint: duplicate parameter \"", e.name, "\""));
  }
  for (auto* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end())
      throw IoError(cat("checkpoint: missing parameter \"", p->name, "\""));
    const CheckpointEntry& e = *it->second;
    if (e.shape != p->value.shape())
      throw IoError(cat("checkpoint: shape mismatch for \"", p->name, "\" (stored ",
                        shape_str(e.shape), ", model ", shape_str(p->value.shape()), ")"));
    for (std::int64_t i = 0; i < p->value.size(); ++i)
      p->value[i] = e.data[static_cast<std::size_t>(i)];
    by_name.erase(it);
  }
  if (!allow_extra && !by_name.empty())
    throw IoError(cat("checkpoint: ", by_name.size(),
                      " stored parameter(s) have no matching model parameter"));
}

}  // namespace cmstew
