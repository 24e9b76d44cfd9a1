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
// Deterministic synthetic identification data and detection scenes.
//
// Every object owns `n_faces` unit-norm anchor vectors that are mutually far
// apart (cosine below 0.5 to every other anchor, across all objects). A view
// of an object is one of its face anchors plus isotropic Gaussian noise.
// Gallery views cycle through the faces; pick views choose one at random. Optionally each view also carries a strong nuisance
// component confined to a fixed random subspace; raw descriptors are then
// uninformative until an encoder learns to suppress that subspace.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ctlid/codec.hpp"
#include "ctlid/common.hpp"

namespace ctlid {

struct SynthSpec {
  std::size_t n_objects = 50;
  std::size_t n_faces = 2;
  std::size_t dim = 32;
  std::size_t gallery_views = 5;
  std::size_t query_views = 3;
  double noise = 0.1;
  double distractor_fraction = 0.0;
  std::size_t train_picks_per_object = 10;
  std::size_t test_picks_per_object = 10;
  std::size_t nuisance_dim = 0;
  double nuisance_scale = 0.0;
  std::uint64_t seed = 0;
};

inline void ValidateSynthSpec(const SynthSpec& s) {
  if (s.n_objects == 0 || s.n_faces == 0 || s.dim == 0 || s.gallery_views == 0 || s.query_views == 0) {
    Fail(ErrorKind::kValidation, "synthetic counts must be at least 1");
  }
  if (!(s.noise >= 0)) Fail(ErrorKind::kValidation, "noise must be nonnegative");
  if (!(s.distractor_fraction >= 0 && s.distractor_fraction <= 1)) {
    Fail(ErrorKind::kValidation, "distractor_fraction outside [0,1]");
  }
  if (s.nuisance_dim > s.dim) Fail(ErrorKind::kValidation, "nuisance_dim exceeds dim");
  if (!(s.nuisance_scale >= 0)) Fail(ErrorKind::kValidation, "nuisance_scale must be nonnegative");
}

inline constexpr double kMaxAnchorCosine = 0.5;

// Independent RNG stream per purpose so that, e.g., the number of scenes
// does not perturb the identification data.
inline std::mt19937_64 StreamRng(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    0x5EEDu, stream};
  return std::mt19937_64(seq);
}

class SynthWorld {
 public:
  explicit SynthWorld(const SynthSpec& spec) : spec_(spec) {
    ValidateSynthSpec(spec);
    auto rng = StreamRng(spec.seed, 0);
    faces_.resize(spec.n_objects);
    for (auto& obj : faces_) {
      for (std::size_t f = 0; f < spec.n_faces; ++f) obj.push_back(NewAnchor(rng));
    }
    if (spec.nuisance_dim > 0) {
      const auto d = static_cast<Eigen::Index>(spec.dim);
      const auto m = static_cast<Eigen::Index>(spec.nuisance_dim);
      std::normal_distribution<double> normal;
      Matrix g(d, m);
      for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = normal(rng);
      Eigen::HouseholderQR<Matrix> qr(g);
      nuisance_basis_ = (qr.householderQ() * Matrix::Identity(d, m)).transpose();  // m x d
    }
  }

  const SynthSpec& spec() const { return spec_; }
  const std::vector<std::vector<Vector>>& faces() const { return faces_; }

  static std::string ObjectId(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "obj_%03zu", i);
    return buf;
  }

  // A fresh anchor at least as far from every existing anchor as the
  // objects' anchors are from each other.
  template <typename Rng>
  Vector NewAnchor(Rng& rng) {
    std::normal_distribution<double> normal;
    constexpr int kMaxAttempts = 10000;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      Vector v(static_cast<Eigen::Index>(spec_.dim));
      for (auto& x : v) x = normal(rng);
      const double n = v.norm();
      if (n < kNormEpsilon) continue;
      v /= n;
      bool ok = true;
      for (const auto& a : all_anchors_) {
        if (a.dot(v) >= kMaxAnchorCosine) {
          ok = false;
          break;
        }
      }
      if (ok) {
        all_anchors_.push_back(v);
        return v;
      }
    }
    Fail(ErrorKind::kValidation, "dim " + std::to_string(spec_.dim) +
                                     " too small to place well-separated anchors");
  }

  // Face anchor + isotropic noise (+ nuisance).
  template <typename Rng>
  Vector View(const Vector& anchor, Rng& rng) const {
    std::normal_distribution<double> normal;
    Vector v = anchor;
    for (auto& x : v) x += spec_.noise * normal(rng);
    if (spec_.nuisance_dim > 0) {
      Vector z(static_cast<Eigen::Index>(spec_.nuisance_dim));
      for (auto& x : z) x = spec_.nuisance_scale * normal(rng);
      v += nuisance_basis_.transpose() * z;
    }
    return v;
  }

  template <typename Rng>
  Vector RandomFaceView(const std::vector<Vector>& faces, Rng& rng) const {
    std::uniform_int_distribution<std::size_t> pick(0, faces.size() - 1);
    return View(faces[pick(rng)], rng);
  }

  // Raw-space centroid of an object's faces.
  Vector FaceCentroid(std::size_t object) const {
    Vector c = Vector::Zero(static_cast<Eigen::Index>(spec_.dim));
    for (const auto& f : faces_[object]) c += f;
    return c / static_cast<double>(faces_[object].size());
  }

 private:
  SynthSpec spec_;
  std::vector<std::vector<Vector>> faces_;
  std::vector<Vector> all_anchors_;
  Matrix nuisance_basis_;
};

// Accumulates descriptor rows for one output file.
class DescriptorSink {
 public:
  explicit DescriptorSink(std::size_t dim) : dim_(dim) {}
  std::size_t Add(const Vector& v) {
    for (auto x : v) data_.push_back(static_cast<float>(x));
    return count_++;
  }
  DescriptorMatrix Finish() const { return DescriptorMatrix(count_, dim_, data_); }

 private:
  std::size_t dim_;
  std::size_t count_ = 0;
  std::vector<float> data_;
};

struct IdentificationDataset {
  Json gallery_manifest, train_manifest, test_manifest;
  DescriptorMatrix gallery_descriptors, train_descriptors, test_descriptors;
};

inline constexpr char kGalleryFile[] = "gallery.bin";
inline constexpr char kTrainFile[] = "train_picks.bin";
inline constexpr char kTestFile[] = "test_picks.bin";

inline IdentificationDataset GenIdentificationDataset(const SynthSpec& spec) {
  SynthWorld world(spec);
  IdentificationDataset out;

  auto rng = StreamRng(spec.seed, 1);
  DescriptorSink gallery(spec.dim);
  Json objects = Json::array();
  for (std::size_t o = 0; o < spec.n_objects; ++o) {
    std::vector<std::size_t> rows;
    // Gallery views cycle through the faces so every face is on record.
    for (std::size_t v = 0; v < spec.gallery_views; ++v) {
      rows.push_back(gallery.Add(world.View(world.faces()[o][v % spec.n_faces], rng)));
    }
    objects.push_back({{"object_id", SynthWorld::ObjectId(o)}, {"descriptor_file", kGalleryFile}, {"rows", rows}});
  }
  out.gallery_manifest = {{"gallery", objects}, {"picks", Json::array()}};
  out.gallery_descriptors = gallery.Finish();

  auto make_split = [&](std::uint32_t stream, std::size_t per_object, const char* file,
                        const char* prefix, Json& manifest, DescriptorMatrix& descriptors) {
    auto split_rng = StreamRng(spec.seed, stream);
    const std::size_t total = per_object * spec.n_objects;
    const auto n_distractors =
        static_cast<std::size_t>(std::llround(spec.distractor_fraction * static_cast<double>(total)));
    // Distractors replace the last labeled picks.
    std::vector<std::vector<Vector>> distractor_faces(n_distractors);
    for (auto& faces : distractor_faces) {
      for (std::size_t f = 0; f < spec.n_faces; ++f) faces.push_back(world.NewAnchor(split_rng));
    }
    DescriptorSink sink(spec.dim);
    Json picks = Json::array();
    for (std::size_t i = 0; i < total; ++i) {
      const bool distractor = i >= total - n_distractors;
      const std::size_t object = i % spec.n_objects;
      const auto& faces = distractor ? distractor_faces[i - (total - n_distractors)] : world.faces()[object];
      std::vector<std::size_t> rows;
      for (std::size_t v = 0; v < spec.query_views; ++v) rows.push_back(sink.Add(world.RandomFaceView(faces, split_rng)));
      char id[48];
      std::snprintf(id, sizeof(id), "%s_%05zu", prefix, i);
      Json pick = {{"pick_id", id}, {"descriptor_file", file}, {"rows", rows}};
      if (!distractor) pick["gt_object_id"] = SynthWorld::ObjectId(object);
      picks.push_back(std::move(pick));
    }
    manifest = {{"gallery", Json::array()}, {"picks", picks}};
    descriptors = sink.Finish();
  };
  make_split(2, spec.train_picks_per_object, kTrainFile, "train", out.train_manifest, out.train_descriptors);
  make_split(3, spec.test_picks_per_object, kTestFile, "test", out.test_manifest, out.test_descriptors);
  return out;
}

// ---------------------------------------------------------------------------
// Detection scenes
//
// Objects sit in the cells of a 4x3 grid of 120 px cells as axis-aligned
// rectangles. Clean scenes have exactly one candidate per object (its true
// mask). Cluttered scenes add partial duplicates, merged pairs of
// neighbouring objects and background segments in empty cells.

enum class SceneKind { kClean, kCluttered };

struct SceneSet {
  Json manifest;  // scene manifest
  DescriptorMatrix descriptors;
  std::vector<DetectionRecord> ground_truth;
};

struct SceneLayout {
  static constexpr std::uint32_t kCell = 120;
  static constexpr std::uint32_t kCols = 4;
  static constexpr std::uint32_t kRows = 3;
  static constexpr std::uint32_t kWidth = kCell * kCols;
  static constexpr std::uint32_t kHeight = kCell * kRows;
  static constexpr std::uint32_t kMinSide = 36;
  static constexpr std::uint32_t kMaxSide = 112;
};

struct Rect {
  std::uint32_t x = 0, y = 0, w = 0, h = 0;
};

inline SegmentMask RectMask(const Rect& r, std::uint32_t width, std::uint32_t height) {
  std::vector<std::uint8_t> bitmap(std::size_t{width} * height, 0);
  for (std::uint32_t y = r.y; y < r.y + r.h; ++y) {
    for (std::uint32_t x = r.x; x < r.x + r.w; ++x) bitmap[std::size_t{y} * width + x] = 1;
  }
  return SegmentMask::Encode(width, height, bitmap);
}

inline constexpr double kBackgroundMaxCosine = 0.5;

inline SceneSet GenDetectionScenes(const SynthSpec& spec, SceneKind kind, std::size_t n_scenes,
                                   std::size_t objects_per_scene, const std::string& descriptor_file) {
  using L = SceneLayout;
  SynthWorld world(spec);
  if (objects_per_scene > L::kCols * L::kRows) Fail(ErrorKind::kValidation, "too many objects per scene");
  if (objects_per_scene > spec.n_objects) Fail(ErrorKind::kValidation, "more scene objects than gallery objects");
  auto rng = StreamRng(spec.seed, kind == SceneKind::kClean ? 10 : 11);
  DescriptorSink sink(spec.dim);
  SceneSet out;
  out.manifest = Json::array();

  std::vector<Vector> centroids;
  for (std::size_t o = 0; o < spec.n_objects; ++o) centroids.push_back(world.FaceCentroid(o).normalized());

  auto add_segment = [&](Json& segs, const Rect& r, const std::vector<std::size_t>& rows) {
    const auto mask = RectMask(r, L::kWidth, L::kHeight);
    segs.push_back({{"mask_rle", mask.rle()}, {"width", L::kWidth}, {"height", L::kHeight},
                    {"descriptor_file", descriptor_file}, {"rows", rows}});
  };
  auto uniform = [&](std::uint32_t lo, std::uint32_t hi) {
    return std::uniform_int_distribution<std::uint32_t>(lo, hi)(rng);
  };

  for (std::size_t s = 0; s < n_scenes; ++s) {
    char image_id[32];
    std::snprintf(image_id, sizeof(image_id), "scene_%04zu", s);
    std::vector<std::size_t> objects(spec.n_objects), cells(L::kCols * L::kRows);
    std::iota(objects.begin(), objects.end(), 0);
    std::iota(cells.begin(), cells.end(), 0);
    std::shuffle(objects.begin(), objects.end(), rng);
    std::shuffle(cells.begin(), cells.end(), rng);
    objects.resize(objects_per_scene);

    std::vector<int> cell_object(L::kCols * L::kRows, -1);
    std::vector<Rect> rects(objects_per_scene);
    Json segs = Json::array();
    for (std::size_t i = 0; i < objects_per_scene; ++i) {
      const auto cell = cells[i];
      cell_object[cell] = static_cast<int>(i);
      Rect r;
      r.w = uniform(L::kMinSide, L::kMaxSide);
      r.h = uniform(L::kMinSide, L::kMaxSide);
      r.x = static_cast<std::uint32_t>(cell % L::kCols) * L::kCell + uniform(0, L::kCell - r.w);
      r.y = static_cast<std::uint32_t>(cell / L::kCols) * L::kCell + uniform(0, L::kCell - r.h);
      rects[i] = r;
      DetectionRecord gt;
      gt.image_id = image_id;
      gt.label = SynthWorld::ObjectId(objects[i]);
      gt.score = 1.0;
      gt.mask = RectMask(r, L::kWidth, L::kHeight);
      gt.bbox = MaskToBBox(gt.mask);
      out.ground_truth.push_back(std::move(gt));

      std::vector<std::size_t> rows;
      for (const auto& f : world.faces()[objects[i]]) rows.push_back(sink.Add(world.View(f, rng)));
      add_segment(segs, r, rows);
    }

    if (kind == SceneKind::kCluttered) {
      // Over-segmentation: the left half of every object, seen from one face.
      for (std::size_t i = 0; i < objects_per_scene; ++i) {
        Rect half = rects[i];
        half.w = std::max<std::uint32_t>(1, half.w / 2);
        add_segment(segs, half, {sink.Add(world.RandomFaceView(world.faces()[objects[i]], rng))});
      }
      // Under-segmentation: horizontally adjacent objects merged into one box.
      for (std::uint32_t cell = 0; cell < L::kCols * L::kRows; ++cell) {
        if (cell % L::kCols + 1 == L::kCols) continue;
        const int a = cell_object[cell], b = cell_object[cell + 1];
        if (a < 0 || b < 0) continue;
        const auto& ra = rects[static_cast<std::size_t>(a)];
        const auto& rb = rects[static_cast<std::size_t>(b)];
        Rect m;
        m.x = ra.x;
        m.y = std::min(ra.y, rb.y);
        m.w = rb.x + rb.w - ra.x;
        m.h = std::max(ra.y + ra.h, rb.y + rb.h) - m.y;
        std::vector<std::size_t> rows;
        const auto& fa = world.faces()[objects[static_cast<std::size_t>(a)]];
        const auto& fb = world.faces()[objects[static_cast<std::size_t>(b)]];
        for (std::size_t f = 0; f < spec.n_faces; ++f) {
          rows.push_back(sink.Add(0.5 * (world.View(fa[f], rng) + world.View(fb[f], rng))));
        }
        add_segment(segs, m, rows);
      }
      // Background: random unit vectors far from every gallery object.
      std::normal_distribution<double> normal;
      for (std::size_t c = objects_per_scene; c < cells.size(); ++c) {
        const auto cell = cells[c];
        Rect r;
        r.w = uniform(L::kMinSide, L::kMaxSide);
        r.h = uniform(L::kMinSide, L::kMaxSide);
        r.x = static_cast<std::uint32_t>(cell % L::kCols) * L::kCell + uniform(0, L::kCell - r.w);
        r.y = static_cast<std::uint32_t>(cell / L::kCols) * L::kCell + uniform(0, L::kCell - r.h);
        Vector v(static_cast<Eigen::Index>(spec.dim));
        constexpr int kMaxAttempts = 1000;
        bool found = false;
        for (int attempt = 0; attempt < kMaxAttempts && !found; ++attempt) {
          for (auto& x : v) x = normal(rng);
          v.normalize();
          found = true;
          for (const auto& g : centroids) {
            if (g.dot(v) >= kBackgroundMaxCosine) {
              found = false;
              break;
            }
          }
        }
        if (!found) Fail(ErrorKind::kValidation, "could not place a background descriptor");
        add_segment(segs, r, {sink.Add(v)});
      }
    }
    out.manifest.push_back({{"image_id", image_id}, {"width", L::kWidth}, {"height", L::kHeight},
                            {"segments", segs}});
  }
  out.descriptors = sink.Finish();
  return out;
}

}  // namespace ctlid
