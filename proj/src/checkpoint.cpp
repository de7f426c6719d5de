// Copyright 2026 The malnas Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "malnas/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <unordered_map>

#include "malnas/error.hpp"
#include "malnas/io.hpp"

namespace malnas {

namespace {

constexpr char kMagic[8] = {'M', 'A', 'L', 'N', 'A', 'S', 'C', 'K'};

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
  }
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get_le() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw SchemaError("checkpoint truncated");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const CheckpointArray* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& checkpoint) {
  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string config = checkpoint.config.dump();
  put_le<std::uint64_t>(out, config.size());
  out += config;
  put_le<std::uint64_t>(out, checkpoint.arrays.size());
  for (const auto& a : checkpoint.arrays) {
    if (shape_numel(a.shape) != a.values.size()) throw DimensionError("checkpoint array " + a.name + " shape/value mismatch");
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.name.size()));
    out += a.name;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) put_le<std::uint64_t>(out, d);
    for (double v : a.values) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(sizeof(kMagic)) != std::string_view(kMagic, sizeof(kMagic))) throw SchemaError("not a checkpoint (bad magic)");
  const auto version = in.get_le<std::uint32_t>();
  if (version != kCheckpointVersion) throw SchemaError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  const auto config_len = in.get_le<std::uint64_t>();
  ck.config = nlohmann::json::parse(in.take(config_len));
  const auto count = in.get_le<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointArray a;
    a.name = std::string(in.take(in.get_le<std::uint32_t>()));
    const auto rank = in.get_le<std::uint32_t>();
    for (std::uint32_t r = 0; r < rank; ++r) a.shape.push_back(in.get_le<std::uint64_t>());
    a.values.resize(shape_numel(a.shape));
    for (auto& v : a.values) v = std::bit_cast<double>(in.get_le<std::uint64_t>());
    ck.arrays.push_back(std::move(a));
  }
  if (!in.done()) throw SchemaError("trailing bytes after checkpoint");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  write_file_atomic(path, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

std::vector<CheckpointArray> capture(const ParameterList& params) {
  std::vector<CheckpointArray> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    out.push_back({p.name, p.tensor.shape(), std::vector<double>(p.tensor.data().begin(), p.tensor.data().end())});
  }
  return out;
}

void restore(const ParameterList& params, const std::vector<CheckpointArray>& arrays) {
  std::unordered_map<std::string, const CheckpointArray*> by_name;
  for (const auto& a : arrays) by_name[a.name] = &a;
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw SchemaError("checkpoint lacks parameter " + p.name);
    if (it->second->shape != p.tensor.shape()) {
      throw SchemaError("checkpoint parameter " + p.name + " has shape " + shape_string(it->second->shape) +
                        ", model expects " + shape_string(p.tensor.shape()));
    }
    auto dst = Tensor(p.tensor).mutable_data();
    std::memcpy(dst.data(), it->second->values.data(), dst.size() * sizeof(double));
  }
}

}  // namespace malnas
