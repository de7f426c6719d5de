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

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "malnas/optim.hpp"
#include "malnas/tensor.hpp"

namespace malnas {

// Binary checkpoint container, all integers and floats little-endian:
//
//   magic      8 bytes  "MALNASCK"
//   version    u32      1
//   config     u64 byte length, then UTF-8 JSON (architecture, hypers,
//                       normalization stats, ...)
//   count      u64      number of arrays
//   per array: u32 name length, name bytes, u32 rank, u64 dims[rank],
//              f64 values[product(dims)]
struct CheckpointArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  nlohmann::json config = nlohmann::json::object();
  std::vector<CheckpointArray> arrays;

  const CheckpointArray* find(const std::string& name) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Snapshot of current values (gradients are not stored).
std::vector<CheckpointArray> capture(const ParameterList& params);
// Copies values by name; every parameter must be present with a matching
// shape (SchemaError otherwise).
void restore(const ParameterList& params, const std::vector<CheckpointArray>& arrays);

}  // namespace malnas
