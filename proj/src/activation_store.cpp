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

#include "nullsteer/activation_store.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "nullsteer/errors.hpp"

namespace nullsteer {
namespace {

using nlohmann::json;

const std::set<std::string>& known_kinds() {
  static const std::set<std::string> kinds = {"activations", "direction",
                                              "operator", "image", "toy_model"};
  return kinds;
}

void put_u32le(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32le(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void fill_defaults(json& meta) {
  if (!meta.contains("kind")) meta["kind"] = "activations";
  if (!meta.contains("layer")) meta["layer"] = -1;
  if (!meta.contains("model_id")) meta["model_id"] = "";
  if (!meta.contains("token_policy")) meta["token_policy"] = kLastPromptToken;
  if (!meta.contains("dtype")) meta["dtype"] = "f32le";
}

// Header checks shared by validate_trace and read_container.
void check_header(const json& meta, std::size_t payload_bytes,
                  std::vector<std::string>& out) {
  for (const char* key : {"kind", "model_id", "token_policy", "dtype"}) {
    if (!meta.contains(key) || !meta[key].is_string()) {
      out.push_back(std::string("missing or non-string field '") + key + "'");
    }
  }
  for (const char* key : {"rows", "cols", "layer"}) {
    if (!meta.contains(key) || !meta[key].is_number_integer()) {
      out.push_back(std::string("missing or non-integer field '") + key + "'");
    }
  }
  if (meta.contains("kind") && meta["kind"].is_string() &&
      !known_kinds().contains(meta["kind"].get<std::string>())) {
    out.push_back("unknown kind '" + meta["kind"].get<std::string>() + "'");
  }
  if (meta.contains("dtype") && meta["dtype"].is_string() &&
      meta["dtype"] != "f32le") {
    out.push_back("unsupported dtype '" + meta["dtype"].get<std::string>() +
                  "' (expected f32le)");
  }
  if (meta.value("kind", "") == "activations" &&
      meta.value("token_policy", "") != kLastPromptToken) {
    out.push_back("token_policy must be last_prompt_token for activations");
  }
  long long rows = 0;
  long long cols = 0;
  if (meta.contains("rows") && meta["rows"].is_number_integer()) {
    rows = meta["rows"].get<long long>();
    if (rows <= 0) out.push_back("rows > 0 violated");
  }
  if (meta.contains("cols") && meta["cols"].is_number_integer()) {
    cols = meta["cols"].get<long long>();
    if (cols <= 0) out.push_back("cols > 0 violated");
  }
  if (rows > 0 && cols > 0 &&
      static_cast<unsigned long long>(rows * cols) * 4ULL != payload_bytes) {
    out.push_back("rows*cols*4 != payload length (" +
                  std::to_string(rows * cols * 4) + " vs " +
                  std::to_string(payload_bytes) + ")");
  }
}

std::vector<float> decode_payload(const std::uint8_t* p, std::size_t count) {
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    out[i] = std::bit_cast<float>(get_u32le(p + 4 * i));
  }
  return out;
}

struct Parsed {
  json meta;
  const std::uint8_t* payload = nullptr;
  std::size_t payload_bytes = 0;
};

// Splits raw bytes into header and payload; appends structural problems.
bool parse_bytes(const std::vector<std::uint8_t>& bytes, Parsed& out,
                 std::vector<std::string>& problems) {
  if (bytes.size() < kTraceMagic.size() + 4 ||
      std::memcmp(bytes.data(), kTraceMagic.data(), kTraceMagic.size()) != 0) {
    problems.push_back("bad magic (expected ACTV1)");
    return false;
  }
  const std::uint32_t header_len = get_u32le(bytes.data() + kTraceMagic.size());
  const std::size_t header_start = kTraceMagic.size() + 4;
  if (bytes.size() < header_start + header_len) {
    problems.push_back("header_len exceeds file size");
    return false;
  }
  try {
    out.meta = json::parse(bytes.begin() + header_start,
                           bytes.begin() + header_start + header_len);
  } catch (const json::exception& e) {
    problems.push_back(std::string("header is not valid JSON: ") + e.what());
    return false;
  }
  if (!out.meta.is_object()) {
    problems.push_back("header is not a JSON object");
    return false;
  }
  out.payload = bytes.data() + header_start + header_len;
  out.payload_bytes = bytes.size() - header_start - header_len;
  return true;
}

}  // namespace

std::string_view to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::kForget: return "forget";
    case SplitTag::kRetain: return "retain";
    case SplitTag::kContrastPos: return "contrast_pos";
    case SplitTag::kContrastNeg: return "contrast_neg";
    case SplitTag::kOther: return "other";
  }
  return "other";
}

SplitTag split_tag_from_string(std::string_view s) {
  if (s == "forget") return SplitTag::kForget;
  if (s == "retain") return SplitTag::kRetain;
  if (s == "contrast_pos") return SplitTag::kContrastPos;
  if (s == "contrast_neg") return SplitTag::kContrastNeg;
  return SplitTag::kOther;
}

ActivationMatrix::ActivationMatrix(int r, int c)
    : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0f) {}

std::vector<std::uint8_t> encode_container(const json& meta,
                                           std::span<const float> payload) {
  const std::string header = meta.dump();
  std::vector<std::uint8_t> out;
  out.reserve(kTraceMagic.size() + 4 + header.size() + payload.size() * 4);
  out.insert(out.end(), kTraceMagic.begin(), kTraceMagic.end());
  put_u32le(out, static_cast<std::uint32_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  for (float v : payload) put_u32le(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

void write_container(const std::filesystem::path& path, json meta,
                     std::span<const float> payload) {
  fill_defaults(meta);
  std::vector<std::string> problems;
  check_header(meta, payload.size() * 4, problems);
  for (std::size_t i = 0; i < payload.size(); ++i) {
    if (!std::isfinite(payload[i])) {
      problems.push_back("non-finite entry at index " + std::to_string(i));
      break;
    }
  }
  if (!problems.empty()) throw ValidationError(problems.front());

  const auto bytes = encode_container(meta, payload);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

TraceFile read_container(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  Parsed parsed;
  std::vector<std::string> problems;
  if (!parse_bytes(bytes, parsed, problems)) {
    throw FormatError(path.string() + ": " + problems.front());
  }
  check_header(parsed.meta, parsed.payload_bytes, problems);
  if (!problems.empty()) {
    const bool size_problem =
        problems.front().rfind("rows*cols*4", 0) == 0;
    if (size_problem) throw CorruptionError(path.string() + ": " + problems.front());
    throw FormatError(path.string() + ": " + problems.front());
  }
  TraceFile file;
  file.meta = std::move(parsed.meta);
  file.payload = decode_payload(parsed.payload, parsed.payload_bytes / 4);
  for (std::size_t i = 0; i < file.payload.size(); ++i) {
    if (!std::isfinite(file.payload[i])) {
      throw ValidationError(path.string() + ": non-finite entry at index " +
                            std::to_string(i));
    }
  }
  return file;
}

void write_trace(const std::filesystem::path& path,
                 const ActivationMatrix& matrix, const json& extra) {
  if (matrix.rows <= 0 || matrix.cols <= 0) {
    throw ValidationError("activation matrix must have d > 0 and N > 0");
  }
  if (matrix.data.size() != static_cast<std::size_t>(matrix.rows) * matrix.cols) {
    throw ShapeError("activation matrix data size does not match rows*cols");
  }
  json meta = extra.is_object() ? extra : json::object();
  meta["kind"] = meta.value("kind", "activations");
  meta["rows"] = matrix.rows;
  meta["cols"] = matrix.cols;
  meta["layer"] = matrix.layer;
  meta["model_id"] = matrix.model_id;
  meta["token_policy"] = kLastPromptToken;
  meta["dtype"] = "f32le";
  meta["split_tag"] = std::string(to_string(matrix.split));
  write_container(path, std::move(meta), matrix.data);
}

ActivationMatrix read_trace(const std::filesystem::path& path) {
  TraceFile file = read_container(path);
  ActivationMatrix m;
  m.rows = file.meta["rows"].get<int>();
  m.cols = file.meta["cols"].get<int>();
  m.layer = file.meta["layer"].get<int>();
  m.model_id = file.meta["model_id"].get<std::string>();
  m.split = split_tag_from_string(file.meta.value("split_tag", "other"));
  m.data = std::move(file.payload);
  return m;
}

ValidationReport validate_trace(const std::filesystem::path& path) {
  ValidationReport report;
  std::vector<std::uint8_t> bytes;
  try {
    bytes = slurp(path);
  } catch (const Error& e) {
    report.violations.emplace_back(e.what());
    return report;
  }
  Parsed parsed;
  if (!parse_bytes(bytes, parsed, report.violations)) return report;
  check_header(parsed.meta, parsed.payload_bytes, report.violations);
  const std::size_t count = parsed.payload_bytes / 4;
  std::size_t bad = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const float v = std::bit_cast<float>(get_u32le(parsed.payload + 4 * i));
    if (!std::isfinite(v)) ++bad;
  }
  if (bad > 0) {
    report.violations.push_back("payload contains " + std::to_string(bad) +
                                " non-finite entries");
  }
  return report;
}

}  // namespace nullsteer
