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
// Unseen-object detection downstream of a class-agnostic segmenter: every
// candidate segment is identified against the gallery, weak matches are
// dropped, and the survivors are painted into one instance map.
#pragma once

#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "ctlid/backbone.hpp"
#include "ctlid/codec.hpp"
#include "ctlid/matcher.hpp"

namespace ctlid {

struct CandidateSegment {
  std::string image_id;
  SegmentMask mask;
  Matrix descriptors;  // one row per crop of this segment
};

struct LabeledSegment {
  CandidateSegment segment;
  std::string object_id;
  double score = 0;
};

// Keeps a segment iff its best gallery match scores at least theta.
inline std::vector<LabeledSegment> FilterSegments(const std::vector<CandidateSegment>& segments,
                                                  const Encoder& encoder, const GalleryIndex& index,
                                                  double theta, int jobs = 1) {
  std::vector<QueryInput> queries(segments.size());
  for (std::size_t i = 0; i < segments.size(); ++i) {
    if (segments[i].mask.Area() == 0) Fail(ErrorKind::kValidation, "candidate segment with empty mask");
    queries[i] = {std::to_string(i), Encode(encoder, segments[i].descriptors)};
  }
  const auto results = MatchQueries(index, queries, 1, theta, jobs);
  std::vector<LabeledSegment> out;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    if (!results[i].accepted) continue;
    out.push_back({segments[i], results[i].ranked.front().first, results[i].ranked.front().second});
  }
  return out;
}

struct InstanceMap {
  std::uint32_t width = 0, height = 0;
  std::vector<int> labels;  // per pixel: index into detections, -1 for none
  std::vector<DetectionRecord> detections;
};

// Overlapping pixels go to the higher-scoring segment (earlier input wins
// ties). Segments left with fewer than `min_area` pixels are dropped and the
// rest are rebuilt with tight boxes.
inline InstanceMap AssembleInstanceMap(const std::vector<LabeledSegment>& segments,
                                       std::uint32_t width, std::uint32_t height,
                                       std::uint64_t min_area = 1) {
  InstanceMap map;
  map.width = width;
  map.height = height;
  const std::size_t n_px = std::size_t{width} * height;
  std::vector<int> owner(n_px, -1);

  std::vector<std::size_t> order(segments.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return segments[a].score > segments[b].score; });
  for (auto s : order) {
    const auto& mask = segments[s].segment.mask;
    if (mask.width() != width || mask.height() != height) {
      Fail(ErrorKind::kDimension, "segment mask size differs from the image");
    }
    std::size_t pos = 0;
    const auto& runs = mask.rle();
    for (std::size_t r = 0; r < runs.size(); ++r) {
      if (r % 2 == 1) {
        for (std::size_t p = pos; p < pos + runs[r]; ++p) {
          if (owner[p] == -1) owner[p] = static_cast<int>(s);
        }
      }
      pos += runs[r];
    }
  }

  std::vector<std::uint64_t> area(segments.size(), 0);
  for (int o : owner) {
    if (o >= 0) ++area[static_cast<std::size_t>(o)];
  }
  std::vector<int> remap(segments.size(), -1);
  for (std::size_t s = 0; s < segments.size(); ++s) {
    if (area[s] == 0 || area[s] < min_area) continue;
    remap[s] = static_cast<int>(map.detections.size());
    std::vector<std::uint8_t> bitmap(n_px, 0);
    for (std::size_t p = 0; p < n_px; ++p) bitmap[p] = owner[p] == static_cast<int>(s);
    DetectionRecord d;
    d.image_id = segments[s].segment.image_id;
    d.label = segments[s].object_id;
    d.score = segments[s].score;
    d.mask = SegmentMask::Encode(width, height, bitmap);
    d.bbox = MaskToBBox(d.mask);
    map.detections.push_back(std::move(d));
  }
  map.labels.resize(n_px, -1);
  for (std::size_t p = 0; p < n_px; ++p) {
    if (owner[p] >= 0) map.labels[p] = remap[static_cast<std::size_t>(owner[p])];
  }
  return map;
}

// ---------------------------------------------------------------------------
// Scene manifest: JSON array of
//   {image_id, width, height, segments: [{mask_rle, width, height,
//                                         descriptor_file, rows}]}

struct Scene {
  std::string image_id;
  std::uint32_t width = 0, height = 0;
  std::vector<CandidateSegment> segments;
};

inline std::vector<Scene> ParseSceneManifest(const Json& doc, const fs::path& base_dir) {
  if (!doc.is_array()) Fail(ErrorKind::kFormat, "scene manifest must be a JSON array");
  std::map<std::string, DescriptorMatrix> cache;
  std::vector<Scene> scenes;
  std::set<std::string> ids;
  for (const auto& s : doc) {
    Scene scene;
    scene.image_id = s.at("image_id").get<std::string>();
    if (!ids.insert(scene.image_id).second) Fail(ErrorKind::kValidation, "duplicate image_id " + scene.image_id);
    for (const auto& seg : s.at("segments")) {
      CandidateSegment c;
      c.image_id = scene.image_id;
      c.mask = SegmentMask(seg.at("width").get<std::uint32_t>(), seg.at("height").get<std::uint32_t>(),
                           seg.at("mask_rle").get<std::vector<std::uint32_t>>());
      if (c.mask.Area() == 0) Fail(ErrorKind::kValidation, "empty segment mask in " + scene.image_id);
      const auto file = seg.at("descriptor_file").get<std::string>();
      auto it = cache.find(file);
      if (it == cache.end()) {
        const fs::path p = fs::path(file).is_absolute() ? fs::path(file) : base_dir / file;
        if (!fs::exists(p)) Fail(ErrorKind::kValidation, "dangling descriptor file " + file);
        it = cache.emplace(file, ReadDescriptorFile(p)).first;
      }
      const auto rows = seg.at("rows").get<std::vector<std::size_t>>();
      if (rows.empty()) Fail(ErrorKind::kValidation, "segment without descriptor rows");
      c.descriptors = it->second.Gather(rows);
      scene.segments.push_back(std::move(c));
    }
    scene.width = s.contains("width") ? s["width"].get<std::uint32_t>()
                                      : (scene.segments.empty() ? 0 : scene.segments[0].mask.width());
    scene.height = s.contains("height") ? s["height"].get<std::uint32_t>()
                                        : (scene.segments.empty() ? 0 : scene.segments[0].mask.height());
    for (const auto& c : scene.segments) {
      if (c.mask.width() != scene.width || c.mask.height() != scene.height) {
        Fail(ErrorKind::kDimension, "segment mask size differs from image " + scene.image_id);
      }
    }
    scenes.push_back(std::move(scene));
  }
  return scenes;
}

inline std::vector<Scene> LoadSceneManifest(const fs::path& path) {
  try {
    return ParseSceneManifest(ReadJsonFile(path), path.parent_path());
  } catch (const Json::exception& e) {
    Fail(ErrorKind::kFormat, path.string() + ": " + e.what());
  }
}

struct DetectionRun {
  std::vector<DetectionRecord> detections;
  std::size_t n_candidates = 0;
  std::size_t n_accepted = 0;  // after threshold filtering
};

// With `pass_through` the accepted segments are emitted as-is, overlaps
// included.
inline DetectionRun RunDetection(const std::vector<Scene>& scenes, const GalleryIndex& index,
                                 const Encoder& encoder, double theta, bool pass_through = false,
                                 int jobs = 1) {
  DetectionRun run;
  for (const auto& scene : scenes) {
    run.n_candidates += scene.segments.size();
    const auto kept = FilterSegments(scene.segments, encoder, index, theta, jobs);
    run.n_accepted += kept.size();
    if (pass_through) {
      for (const auto& k : kept) {
        run.detections.push_back({k.segment.image_id, k.object_id, k.score,
                                  MaskToBBox(k.segment.mask), k.segment.mask});
      }
      continue;
    }
    auto map = AssembleInstanceMap(kept, scene.width, scene.height);
    for (auto& d : map.detections) run.detections.push_back(std::move(d));
  }
  return run;
}

}  // namespace ctlid
