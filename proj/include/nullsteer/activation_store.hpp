// Copyright 2026 The nullsteer Authors.
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
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

// ACTV1 container: every artifact passed between pipeline stages.
//
//   bytes 0..4   magic "ACTV1"
//   bytes 5..8   header length, u32 little-endian
//   header       UTF-8 JSON object (keys sorted, compact)
//   payload      rows*cols IEEE-754 binary32 values, little-endian,
//                column-major (one contiguous column per sample)
//
// Required header keys: kind, rows, cols, layer, model_id, token_policy,
// dtype. Additional keys (split_tag, config_hash, ...) are carried through.

namespace nullsteer {

inline constexpr std::string_view kTraceMagic = "ACTV1";
inline constexpr std::string_view kLastPromptToken = "last_prompt_token";

enum class SplitTag { kForget, kRetain, kContrastPos, kContrastNeg, kOther };

std::string_view to_string(SplitTag tag);
// Unknown names map to kOther so traces from other producers still load.
SplitTag split_tag_from_string(std::string_view s);

// d x N matrix of hidden states; column j is sample j.
struct ActivationMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<float> data;
  int layer = -1;
  SplitTag split = SplitTag::kOther;
  std::string model_id;

  ActivationMatrix() = default;
  ActivationMatrix(int rows, int cols);

  float& at(int row, int col) {
    return data[static_cast<std::size_t>(col) * rows + row];
  }
  float at(int row, int col) const {
    return data[static_cast<std::size_t>(col) * rows + row];
  }
  std::span<const float> column(int col) const {
    return {data.data() + static_cast<std::size_t>(col) * rows,
            static_cast<std::size_t>(rows)};
  }
  std::span<float> column(int col) {
    return {data.data() + static_cast<std::size_t>(col) * rows,
            static_cast<std::size_t>(rows)};
  }
  bool operator==(const ActivationMatrix&) const = default;
};

// Raw container contents.
struct TraceFile {
  nlohmann::json meta;
  std::vector<float> payload;
};

struct ValidationReport {
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
};

// Writes any container. meta must carry rows/cols matching payload; the
// required keys are filled with defaults when absent. Throws ValidationError on
// non-finite payload before touching the file.
void write_container(const std::filesystem::path& path, nlohmann::json meta,
                     std::span<const float> payload);
TraceFile read_container(const std::filesystem::path& path);

// `extra` is merged into the header (e.g. config_hash).
void write_trace(const std::filesystem::path& path,
                 const ActivationMatrix& matrix,
                 const nlohmann::json& extra = nlohmann::json::object());
ActivationMatrix read_trace(const std::filesystem::path& path);

// Never throws; lists every violated invariant.
ValidationReport validate_trace(const std::filesystem::path& path);

// In-memory encoding used by write_container; exposed for tests and hashing.
std::vector<std::uint8_t> encode_container(const nlohmann::json& meta,
                                           std::span<const float> payload);

}  // namespace nullsteer
