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

#include "msed/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

namespace msed {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

const NamedTensor* CheckpointFile::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

const std::string& CheckpointFile::meta_at(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw CheckpointError("checkpoint: missing metadata key '" + key + "'");
  return it->second;
}

namespace {

constexpr char kMagic[4] = {'M', 'S', 'E', 'D'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_bytes(std::vector<std::uint8_t>& out, const void* p, std::size_t n) {
  const auto* b = static_cast<const std::uint8_t*>(p);
  out.insert(out.end(), b, b + n);
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffu) throw CheckpointError(std::string("checkpoint: ") + what + " exceeds 32 bits");
  return static_cast<std::uint32_t>(v);
}

std::uint32_t crc(std::span<const std::uint8_t> bytes) {
  uLong c = crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    c = crc32(c, bytes.data() + off, chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(c);
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::span<const std::uint8_t> bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n)
      throw CheckpointError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                            std::to_string(pos_));
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const CheckpointFile& ckpt) {
  std::vector<std::uint8_t> out;
  put_bytes(out, kMagic, 4);
  put_u32(out, kCheckpointVersion);
  std::string meta;
  for (const auto& [k, v] : ckpt.meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw CheckpointError("checkpoint: metadata '" + k + "' contains a reserved character");
    meta += k + "=" + v + "\n";
  }
  put_u32(out, checked_u32(meta.size(), "metadata"));
  put_bytes(out, meta.data(), meta.size());
  put_u32(out, checked_u32(ckpt.tensors.size(), "tensor count"));
  for (const auto& t : ckpt.tensors) {
    if (shape_numel(t.shape) != t.values.size())
      throw CheckpointError("checkpoint: tensor '" + t.name + "' has " + std::to_string(t.values.size()) +
                            " values for shape " + shape_str(t.shape));
    put_u32(out, checked_u32(t.name.size(), "name length"));
    put_bytes(out, t.name.data(), t.name.size());
    put_u32(out, checked_u32(t.shape.size(), "rank"));
    for (auto d : t.shape) put_u32(out, checked_u32(d, "dimension"));
    put_bytes(out, t.values.data(), t.values.size() * sizeof(float));
  }
  put_u32(out, crc(out));
  return out;
}

CheckpointFile decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.bytes(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw CheckpointError("not a checkpoint file: bad magic");
  const auto version = r.u32("version");
  if (version == 0 || version > kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (this build reads up to " +
                          std::to_string(kCheckpointVersion) + ")");
  // Checksum before parsing, so a flipped bit is reported as corruption
  // rather than as whatever field it happened to land in.
  if (bytes.size() >= 12) {
    const auto stored = Reader(bytes.subspan(bytes.size() - 4)).u32("checksum");
    if (stored != crc(bytes.subspan(0, bytes.size() - 4)))
      throw CheckpointError("checkpoint corrupted or truncated: CRC-32 mismatch");
  }
  CheckpointFile ckpt;
  const auto meta_len = r.u32("metadata length");
  auto meta = r.bytes(meta_len, "metadata");
  std::string text(meta.begin(), meta.end());
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) throw CheckpointError("checkpoint: unterminated metadata line");
    const std::string line = text.substr(start, end - start);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("checkpoint: malformed metadata line '" + line + "'");
    ckpt.meta[line.substr(0, eq)] = line.substr(eq + 1);
    start = end + 1;
  }
  const auto count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto name_len = r.u32("tensor name length");
    auto name = r.bytes(name_len, "tensor name");
    t.name.assign(name.begin(), name.end());
    const auto rank = r.u32("tensor rank");
    if (rank > 8) throw CheckpointError("checkpoint: tensor '" + t.name + "' has implausible rank");
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      t.shape.push_back(r.u32("tensor dims"));
      numel *= t.shape.back();
    }
    if (numel > r.remaining() / sizeof(float))
      throw CheckpointError("checkpoint truncated in values of tensor '" + t.name + "'");
    auto raw = r.bytes(numel * sizeof(float), "tensor values");
    t.values.resize(numel);
    std::memcpy(t.values.data(), raw.data(), raw.size());
    ckpt.tensors.push_back(std::move(t));
  }
  const std::size_t body = r.pos();
  const auto stored = r.u32("checksum");
  if (r.remaining() != 0) throw CheckpointError("checkpoint: trailing bytes after checksum");
  if (stored != crc(bytes.subspan(0, body))) throw CheckpointError("checkpoint corrupted: CRC-32 mismatch");
  return ckpt;
}

void write_checkpoint(const std::string& path, const CheckpointFile& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("failed writing checkpoint '" + tmp.string() + "'");
  }
  fs::rename(tmp, target);
}

CheckpointFile read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path + ": " + e.what());
  }
}

}  // namespace msed
