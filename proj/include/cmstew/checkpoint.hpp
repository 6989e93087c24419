// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "cmstew/models.hpp"

namespace cmstew {

// One stored parameter; shapes and byte layout round-trip exactly.
struct CheckpointEntry {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

struct Checkpoint {
  Task task = Task::classification;
  EncoderConfig enc;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const;
};

// File layout: text manifest (format tag, task, encoder fields, parameter
// names and shapes in storage order), a "payload" marker line, each
// parameter's values as little-endian f32 in row-major order, then the
// FNV-1a-64 checksum of the payload as 8 little-endian bytes.
void save_checkpoint(const std::string& path, Task task, const EncoderConfig& enc,
                     const std::vector<ParameterT<float>*>& params);

Checkpoint load_checkpoint(const std::string& path);

// Copies stored values into `params`, matched by name.  Every parameter
// must be present with an identical shape; when `allow_extra` is set,
// entries without a matching parameter are ignored (evaluation does not
// materialize the decoder).
void bind_checkpoint(const Checkpoint& ckpt, const std::vector<ParameterT<float>*>& params,
                     bool allow_extra);

std::uint64_t fnv1a64_bytes(const void* data, std::size_t len);

}  // namespace cmstew
