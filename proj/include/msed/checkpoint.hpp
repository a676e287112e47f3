/*
 *  Copyright 2026 The MSEDenseNet Authors
 *
 *  Licensed under the Apache License, Version 2.0 (the "License");
 *  you may not use this file except in compliance with the License.
 *  You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 *  Unless required by applicable law or agreed to in writing, software
 *  distributed under the License is distributed on an "AS IS" BASIS,
 *  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 *  See the License for the specific language governing permissions and
 *  limitations under the License.
 */

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "msed/tensor.hpp"

namespace msed {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Any malformed, truncated, corrupted or incompatible checkpoint.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

/// Binary layout (all integers u32 little-endian):
///   "MSED" | version | meta length | meta bytes ("key=value\n" lines)
///   | tensor count | per tensor: name length, name, rank, dims, float32 LE values
///   | CRC-32 of every preceding byte
struct CheckpointFile {
  std::map<std::string, std::string> meta;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
  const std::string& meta_at(const std::string& key) const;
};

std::vector<std::uint8_t> encode_checkpoint(const CheckpointFile& ckpt);
CheckpointFile decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Writes through a temporary file and renames, so readers never see a
/// partially written checkpoint.
void write_checkpoint(const std::string& path, const CheckpointFile& ckpt);
CheckpointFile read_checkpoint(const std::string& path);

}  // namespace msed
