/* Copyright 2026 The ctlid Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
// On-disk data model: descriptor files, manifests, masks and detections.
#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ctlid/common.hpp"
#include "json.hpp"

namespace ctlid {

namespace fs = std::filesystem;
using Json = nlohmann::json;

// count x dim single-precision matrix, row-major. Stands in for backbone
// image features.
class DescriptorMatrix {
 public:
  DescriptorMatrix() = default;
  DescriptorMatrix(std::size_t count, std::size_t dim, std::vector<float> data)
      : count_(count), dim_(dim), data_(std::move(data)) {
    if (dim_ == 0) Fail(ErrorKind::kValidation, "descriptor dim must be positive");
    if (data_.size() != count_ * dim_) {
      Fail(ErrorKind::kValidation, "descriptor data length != count*dim");
    }
    for (float v : data_) {
      if (!std::isfinite(v)) Fail(ErrorKind::kNumeric, "non-finite descriptor value");
    }
  }

  std::size_t count() const { return count_; }
  std::size_t dim() const { return dim_; }
  const std::vector<float>& data() const { return data_; }
  std::span<const float> row(std::size_t i) const {
    return {data_.data() + i * dim_, dim_};
  }

  // Gathers the given rows into a double matrix.
  Matrix Gather(std::span<const std::size_t> rows) const {
    Matrix out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim_));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r] >= count_) Fail(ErrorKind::kValidation, "row index out of range");
      auto src = row(rows[r]);
      for (std::size_t c = 0; c < dim_; ++c) out(r, c) = src[c];
    }
    return out;
  }

  Matrix ToMatrix() const {
    Matrix out(static_cast<Eigen::Index>(count_), static_cast<Eigen::Index>(dim_));
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = data_[i];
    return out;
  }

  bool operator==(const DescriptorMatrix&) const = default;

 private:
  std::size_t count_ = 0;
  std::size_t dim_ = 1;
  std::vector<float> data_;
};

struct ObjectRecord {
  std::string object_id;
  // Row indices into the owning DescriptorMatrix. Order matters: the first
  // entry is the "first query image".
  std::vector<std::size_t> image_refs;
};

struct PickRecord {
  std::string pick_id;
  ObjectRecord query_object;
  std::optional<std::string> gt_object_id;  // empty for distractor picks
};

struct BBox {
  double x = 0, y = 0, w = 0, h = 0;
  bool operator==(const BBox&) const = default;
};

// Row-major run-length mask. Runs alternate background/foreground starting
// with background; only the first run may be zero.
class SegmentMask {
 public:
  SegmentMask() = default;
  SegmentMask(std::uint32_t width, std::uint32_t height, std::vector<std::uint32_t> rle)
      : width_(width), height_(height), rle_(std::move(rle)) {
    if (width_ == 0 || height_ == 0) Fail(ErrorKind::kValidation, "mask size must be positive");
    std::uint64_t total = 0;
    for (std::size_t i = 0; i < rle_.size(); ++i) {
      if (i > 0 && rle_[i] == 0) Fail(ErrorKind::kValidation, "zero run after the first");
      total += rle_[i];
    }
    if (rle_.empty() || total != std::uint64_t{width_} * height_) {
      Fail(ErrorKind::kValidation, "mask runs do not sum to width*height");
    }
  }

  static SegmentMask Encode(std::uint32_t width, std::uint32_t height,
                            std::span<const std::uint8_t> bitmap) {
    if (bitmap.size() != std::size_t{width} * height) {
      Fail(ErrorKind::kDimension, "bitmap size != width*height");
    }
    std::vector<std::uint32_t> runs;
    std::uint8_t current = 0;
    std::uint32_t run = 0;
    for (std::uint8_t px : bitmap) {
      const std::uint8_t v = px ? 1 : 0;
      if (v != current) {
        runs.push_back(run);
        run = 0;
        current = v;
      }
      ++run;
    }
    runs.push_back(run);
    return SegmentMask(width, height, std::move(runs));
  }

  std::vector<std::uint8_t> Decode() const {
    std::vector<std::uint8_t> out;
    out.reserve(std::size_t{width_} * height_);
    std::uint8_t v = 0;
    for (std::uint32_t run : rle_) {
      out.insert(out.end(), run, v);
      v ^= 1;
    }
    return out;
  }

  std::uint64_t Area() const {
    std::uint64_t a = 0;
    for (std::size_t i = 1; i < rle_.size(); i += 2) a += rle_[i];
    return a;
  }

  std::uint32_t width() const { return width_; }
  std::uint32_t height() const { return height_; }
  const std::vector<std::uint32_t>& rle() const { return rle_; }

  bool operator==(const SegmentMask&) const = default;

 private:
  std::uint32_t width_ = 0;
  std::uint32_t height_ = 0;
  std::vector<std::uint32_t> rle_;
};

// Tight bounds of the foreground; x,y top-left pixel, w,h inclusive counts.
inline BBox MaskToBBox(const SegmentMask& mask) {
  const auto& runs = mask.rle();
  const std::uint64_t w = mask.width();
  std::uint64_t min_x = w, max_x = 0, min_y = UINT64_MAX, max_y = 0;
  bool any = false;
  std::uint64_t pos = 0;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const std::uint64_t start = pos, len = runs[i];
    pos += len;
    if (i % 2 == 0 || len == 0) continue;
    any = true;
    const std::uint64_t end = start + len - 1;
    const std::uint64_t y0 = start / w, y1 = end / w;
    min_y = std::min(min_y, y0);
    max_y = std::max(max_y, y1);
    if (y1 > y0) {
      // Run wraps a row boundary, so it touches both the left and right edges.
      min_x = 0;
      max_x = w - 1;
    } else {
      min_x = std::min(min_x, start % w);
      max_x = std::max(max_x, end % w);
    }
  }
  if (!any) Fail(ErrorKind::kValidation, "mask has no foreground pixels");
  return {static_cast<double>(min_x), static_cast<double>(min_y),
          static_cast<double>(max_x - min_x + 1), static_cast<double>(max_y - min_y + 1)};
}

struct DetectionRecord {
  std::string image_id;
  std::string label;
  double score = 0;
  BBox bbox;
  SegmentMask mask;
};

// ---------------------------------------------------------------------------
// Descriptor file: "CTLD", u32 version, u32 count, u32 dim, f32[count*dim],
// all little-endian.

inline constexpr std::array<char, 4> kDescriptorMagic = {'C', 'T', 'L', 'D'};
inline constexpr std::uint32_t kDescriptorVersion = 1;

namespace detail {

template <typename T>
void PutLE(std::vector<char>& out, T value) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  }
}

template <typename T>
T GetLE(const char* p) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bits |= static_cast<U>(static_cast<unsigned char>(p[i])) << (8 * i);
  }
  return std::bit_cast<T>(bits);
}

inline std::vector<char> ReadAll(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(ErrorKind::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void WriteAll(const fs::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) Fail(ErrorKind::kIo, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) Fail(ErrorKind::kIo, "write failed for " + path.string());
}

inline void WriteText(const fs::path& path, const std::string& text) {
  WriteAll(path, std::vector<char>(text.begin(), text.end()));
}

}  // namespace detail

inline DescriptorMatrix ParseDescriptorBytes(const std::vector<char>& bytes) {
  if (bytes.size() < 16 || !std::equal(kDescriptorMagic.begin(), kDescriptorMagic.end(), bytes.begin())) {
    Fail(ErrorKind::kFormat, "malformed descriptor header");
  }
  const auto version = detail::GetLE<std::uint32_t>(bytes.data() + 4);
  const auto count = detail::GetLE<std::uint32_t>(bytes.data() + 8);
  const auto dim = detail::GetLE<std::uint32_t>(bytes.data() + 12);
  if (version != kDescriptorVersion) Fail(ErrorKind::kFormat, "unsupported descriptor version");
  if (dim == 0) Fail(ErrorKind::kFormat, "descriptor dim must be positive");
  const std::uint64_t n = std::uint64_t{count} * dim;
  if (bytes.size() - 16 < n * 4) Fail(ErrorKind::kFormat, "truncated descriptor payload");
  if (bytes.size() - 16 > n * 4) Fail(ErrorKind::kFormat, "trailing bytes after descriptor payload");
  std::vector<float> data(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    data[i] = detail::GetLE<float>(bytes.data() + 16 + 4 * i);
    if (!std::isfinite(data[i])) Fail(ErrorKind::kNumeric, "non-finite descriptor value");
  }
  return DescriptorMatrix(count, dim, std::move(data));
}

inline DescriptorMatrix ReadDescriptorFile(const fs::path& path) {
  return ParseDescriptorBytes(detail::ReadAll(path));
}

inline std::vector<char> SerializeDescriptors(const DescriptorMatrix& m) {
  std::vector<char> out(kDescriptorMagic.begin(), kDescriptorMagic.end());
  out.reserve(16 + 4 * m.data().size());
  detail::PutLE<std::uint32_t>(out, kDescriptorVersion);
  detail::PutLE<std::uint32_t>(out, static_cast<std::uint32_t>(m.count()));
  detail::PutLE<std::uint32_t>(out, static_cast<std::uint32_t>(m.dim()));
  for (float v : m.data()) detail::PutLE<float>(out, v);
  return out;
}

inline void WriteDescriptorFile(const DescriptorMatrix& m, const fs::path& path) {
  detail::WriteAll(path, SerializeDescriptors(m));
}

// ---------------------------------------------------------------------------
// Manifests

// A loaded manifest: every image_ref indexes `descriptors`, which is the
// concatenation of all referenced descriptor files in order of first use.
struct Manifest {
  DescriptorMatrix descriptors;
  std::vector<ObjectRecord> gallery;
  std::vector<PickRecord> picks;
};

// Fails unless every labeled pick names a gallery object.
inline void CheckPickLabels(const std::vector<ObjectRecord>& gallery,
                            const std::vector<PickRecord>& picks) {
  std::unordered_set<std::string> ids;
  for (const auto& g : gallery) ids.insert(g.object_id);
  for (const auto& p : picks) {
    if (p.gt_object_id && !ids.count(*p.gt_object_id)) {
      Fail(ErrorKind::kValidation,
           "pick " + p.pick_id + " references unknown gallery object " + *p.gt_object_id);
    }
  }
}

inline Manifest ParseManifest(const Json& doc, const fs::path& base_dir) {
  if (!doc.is_object()) Fail(ErrorKind::kFormat, "manifest must be a JSON object");
  struct FileSlot {
    std::size_t offset = 0;
    std::size_t count = 0;
  };
  std::map<std::string, FileSlot> files;
  std::vector<float> data;
  std::size_t dim = 0, count = 0;

  auto resolve = [&](const Json& entry, const std::string& owner) {
    const auto file = entry.at("descriptor_file").get<std::string>();
    auto it = files.find(file);
    if (it == files.end()) {
      const fs::path p = fs::path(file).is_absolute() ? fs::path(file) : base_dir / file;
      if (!fs::exists(p)) Fail(ErrorKind::kValidation, "dangling descriptor file " + file);
      auto m = ReadDescriptorFile(p);
      if (dim != 0 && m.dim() != dim) Fail(ErrorKind::kDimension, "descriptor dim mismatch in " + file);
      dim = m.dim();
      it = files.emplace(file, FileSlot{count, m.count()}).first;
      data.insert(data.end(), m.data().begin(), m.data().end());
      count += m.count();
    }
    const auto [offset, n] = it->second;
    ObjectRecord rec;
    rec.object_id = owner;
    for (const auto& r : entry.at("rows")) {
      const auto row = r.get<std::int64_t>();
      if (row < 0 || static_cast<std::size_t>(row) >= n) {
        Fail(ErrorKind::kValidation, "dangling row reference in " + owner);
      }
      rec.image_refs.push_back(offset + static_cast<std::size_t>(row));
    }
    if (rec.image_refs.empty()) Fail(ErrorKind::kValidation, "empty image list for " + owner);
    return rec;
  };

  Manifest m;
  std::unordered_set<std::string> seen;
  for (const auto& g : doc.value("gallery", Json::array())) {
    auto id = g.at("object_id").get<std::string>();
    if (!seen.insert(id).second) Fail(ErrorKind::kValidation, "duplicate object_id " + id);
    m.gallery.push_back(resolve(g, id));
  }
  std::unordered_set<std::string> pick_ids;
  for (const auto& p : doc.value("picks", Json::array())) {
    PickRecord pick;
    pick.pick_id = p.at("pick_id").get<std::string>();
    if (!pick_ids.insert(pick.pick_id).second) {
      Fail(ErrorKind::kValidation, "duplicate pick_id " + pick.pick_id);
    }
    pick.query_object = resolve(p, pick.pick_id);
    if (p.contains("gt_object_id") && !p["gt_object_id"].is_null()) {
      pick.gt_object_id = p["gt_object_id"].get<std::string>();
    }
    m.picks.push_back(std::move(pick));
  }
  if (!m.gallery.empty()) CheckPickLabels(m.gallery, m.picks);
  m.descriptors = DescriptorMatrix(count, dim == 0 ? 1 : dim, std::move(data));
  return m;
}

inline Json ReadJsonFile(const fs::path& path) {
  std::ifstream in(path);
  if (!in) Fail(ErrorKind::kIo, "cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    Fail(ErrorKind::kFormat, path.string() + ": " + e.what());
  }
}

inline Manifest LoadManifest(const fs::path& path) {
  try {
    return ParseManifest(ReadJsonFile(path), path.parent_path());
  } catch (const Json::exception& e) {
    Fail(ErrorKind::kFormat, path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Detections file: JSON array of
//   {image_id, label, score, bbox: [x,y,w,h], width, height, rle: [...]}

inline Json DetectionToJson(const DetectionRecord& d) {
  Json j;
  j["image_id"] = d.image_id;
  j["label"] = d.label;
  j["score"] = RoundSig9(d.score);
  j["bbox"] = {d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h};
  j["width"] = d.mask.width();
  j["height"] = d.mask.height();
  j["rle"] = d.mask.rle();
  return j;
}

inline DetectionRecord DetectionFromJson(const Json& j) {
  DetectionRecord d;
  d.image_id = j.at("image_id").get<std::string>();
  d.label = j.at("label").get<std::string>();
  d.score = j.at("score").get<double>();
  if (!std::isfinite(d.score)) Fail(ErrorKind::kNumeric, "non-finite detection score");
  d.mask = SegmentMask(j.at("width").get<std::uint32_t>(), j.at("height").get<std::uint32_t>(),
                       j.at("rle").get<std::vector<std::uint32_t>>());
  if (j.contains("bbox")) {
    const auto b = j["bbox"].get<std::vector<double>>();
    if (b.size() != 4) Fail(ErrorKind::kFormat, "bbox must have four entries");
    d.bbox = {b[0], b[1], b[2], b[3]};
  } else {
    d.bbox = MaskToBBox(d.mask);
  }
  return d;
}

inline std::string DetectionsToString(const std::vector<DetectionRecord>& dets) {
  Json arr = Json::array();
  for (const auto& d : dets) arr.push_back(DetectionToJson(d));
  return arr.dump(1) + "\n";
}

inline void WriteDetectionsFile(const std::vector<DetectionRecord>& dets, const fs::path& path) {
  detail::WriteText(path, DetectionsToString(dets));
}

inline std::vector<DetectionRecord> ReadDetectionsFile(const fs::path& path) {
  const Json doc = ReadJsonFile(path);
  if (!doc.is_array()) Fail(ErrorKind::kFormat, "detections file must be a JSON array");
  std::vector<DetectionRecord> out;
  try {
    for (const auto& j : doc) out.push_back(DetectionFromJson(j));
  } catch (const Json::exception& e) {
    Fail(ErrorKind::kFormat, path.string() + ": " + e.what());
  }
  return out;
}

}  // namespace ctlid
