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
// Random fixtures shared by the unit tests and the acceptance binary.
#pragma once

#include <unistd.h>

#include <random>
#include <string>
#include <vector>

#include "ctlid/backbone.hpp"
#include "ctlid/batching.hpp"
#include "ctlid/evaluation.hpp"
#include "ctlid/matcher.hpp"
#include "ctlid/pipeline.hpp"
#include "ctlid/synthdata.hpp"
#include "ctlid/trainer.hpp"
#include "reference.hpp"

namespace ctlid::testing {

// Per-process scratch directory, so test processes can run in parallel.
inline fs::path ScratchDir(const std::string& name) {
  return fs::temp_directory_path() / (name + "_" + std::to_string(::getpid()));
}

// A tiny training set: 2-4 gallery objects and 1-4 picks, each with 1-3
// images of dimension `dim`.
template <typename Rng>
TrainingSet RandomTrainingSet(Rng& rng, std::size_t dim) {
  auto uni = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  std::normal_distribution<float> normal;
  std::vector<float> data;
  std::size_t rows = 0;
  auto add_images = [&](std::size_t n) {
    std::vector<std::size_t> refs;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t d = 0; d < dim; ++d) data.push_back(normal(rng));
      refs.push_back(rows++);
    }
    return refs;
  };
  TrainingSet set;
  const std::size_t n_objects = uni(2, 4);
  for (std::size_t o = 0; o < n_objects; ++o) {
    set.gallery.push_back({"o" + std::to_string(o), add_images(uni(1, 3))});
  }
  const std::size_t n_picks = uni(1, 4);
  for (std::size_t p = 0; p < n_picks; ++p) {
    PickRecord pick;
    pick.pick_id = "p" + std::to_string(p);
    pick.query_object = {pick.pick_id, add_images(uni(1, 3))};
    pick.gt_object_id = set.gallery[uni(0, n_objects - 1)].object_id;
    set.picks.push_back(std::move(pick));
  }
  set.descriptors = DescriptorMatrix(rows, dim, std::move(data));
  return set;
}

struct GradientInstance {
  Encoder encoder;
  TrainingSet set;
  TripletBatch batch;
  double margin = 0;
};

template <typename Rng>
GradientInstance RandomGradientInstanceUnchecked(Rng& rng) {
  auto uni = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  GradientInstance g;
  std::vector<std::size_t> dims = {uni(2, 8)};
  if (uni(0, 2) > 0) dims.push_back(uni(2, 8));
  dims.push_back(uni(2, 4));
  g.encoder = InitEncoder(dims, rng());
  for (auto& layer : g.encoder.layers) {
    std::normal_distribution<double> normal(0.0, 0.1);
    for (auto& b : layer.bias) b = normal(rng);
  }
  g.set = RandomTrainingSet(rng, dims.front());
  g.margin = std::uniform_real_distribution<double>(0.5, 3.0)(rng);
  const auto plan = MakeEpochPlan(g.set, rng(), 0, 32, 1, 0.5);
  g.batch = plan.batches.front();
  return g;
}

inline double BatchLossValue(const Encoder& enc, const GradientInstance& g) {
  const Matrix x = g.set.descriptors.Gather(g.batch.rows);
  return TripletBatchLoss(ComputeCentroids(Encode(enc, x), g.batch.index), g.batch.triplets, g.margin).loss;
}

// Distance of the instance from the loss's non-differentiable set: hidden
// pre-activations at 0, hinges at 0 and coincident centroids. Central
// differences are only meaningful well away from it.
inline double KinkDistance(const GradientInstance& g) {
  const Matrix x = g.set.descriptors.Gather(g.batch.rows);
  double dist = std::numeric_limits<double>::infinity();
  Matrix cur = x;
  for (std::size_t l = 0; l < g.encoder.layers.size(); ++l) {
    Matrix pre = cur * g.encoder.layers[l].weight.transpose();
    pre.rowwise() += g.encoder.layers[l].bias.transpose();
    if (l + 1 < g.encoder.layers.size()) {
      dist = std::min(dist, pre.cwiseAbs().minCoeff());
      pre = pre.cwiseMax(0.0);
    }
    cur = pre;
  }
  const Matrix c = ComputeCentroids(cur, g.batch.index);
  for (const auto& t : g.batch.triplets) {
    const double dp = (c.row(static_cast<Eigen::Index>(t.anchor)) - c.row(static_cast<Eigen::Index>(t.positive))).norm();
    const double dn = (c.row(static_cast<Eigen::Index>(t.anchor)) - c.row(static_cast<Eigen::Index>(t.negative))).norm();
    dist = std::min({dist, dp, dn, std::abs(dp - dn + g.margin)});
  }
  return dist;
}

// Random encoder with dims within [8,8,4] and one packed batch of at most
// 32 images drawn through the real epoch planner. Instances closer than
// `min_kink_distance` to a kink are redrawn.
template <typename Rng>
GradientInstance RandomGradientInstance(Rng& rng, double min_kink_distance = 1e-4) {
  for (;;) {
    auto g = RandomGradientInstanceUnchecked(rng);
    if (KinkDistance(g) >= min_kink_distance) return g;
  }
}

// Empty when `batches` is a valid greedy packing of `t`: every triplet once,
// in order; image counts add up; a batch exceeds the budget only as a
// singleton; and no batch could have taken the next batch's first triplet.
inline std::string PackingViolation(const std::vector<Triplet>& t, std::size_t budget,
                                    const std::vector<BatchSlice>& batches) {
  std::size_t next = 0;
  for (std::size_t k = 0; k < batches.size(); ++k) {
    const auto& b = batches[k];
    if (b.triplets.empty()) return "empty batch " + std::to_string(k);
    std::size_t images = 0;
    for (auto i : b.triplets) {
      if (i != next++) return "order broken in batch " + std::to_string(k);
      images += t[i].image_count;
    }
    if (images != b.image_count) return "image count mismatch in batch " + std::to_string(k);
    if (images > budget && b.triplets.size() != 1) return "oversized multi-triplet batch " + std::to_string(k);
    if (k + 1 < batches.size() && images + t[batches[k + 1].triplets.front()].image_count <= budget) {
      return "batch " + std::to_string(k) + " sealed early";
    }
  }
  if (next != t.size()) return "triplets missing";
  return {};
}

// Random gallery (up to max_g objects, plus an occasional exact duplicate of
// the first) and up to max_q queries.
struct RandomCase {
  std::vector<ObjectRecord> gallery;
  Matrix embeddings;
  std::vector<QueryInput> queries;
};

inline RandomCase RandomMatchCase(std::mt19937_64& rng, std::size_t max_q, std::size_t max_g) {
  auto uni = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  std::normal_distribution<double> normal;
  RandomCase c;
  const std::size_t dim = uni(2, 8), n_obj = uni(1, max_g), n_q = uni(0, max_q);
  std::vector<Vector> rows;
  for (std::size_t o = 0; o < n_obj; ++o) {
    ObjectRecord rec{"obj" + std::to_string(uni(0, 9999)) + "_" + std::to_string(o), {}};
    const std::size_t n = uni(1, 4);
    for (std::size_t i = 0; i < n; ++i) {
      Vector v(static_cast<Eigen::Index>(dim));
      for (auto& x : v) x = normal(rng);
      rec.image_refs.push_back(rows.size());
      rows.push_back(v);
    }
    c.gallery.push_back(std::move(rec));
  }
  // Duplicate an object now and then to exercise exact ties.
  if (n_obj > 1 && uni(0, 3) == 0) {
    c.gallery.push_back({"dup", c.gallery[0].image_refs});
  }
  c.embeddings.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < rows.size(); ++i) c.embeddings.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  for (std::size_t q = 0; q < n_q; ++q) {
    QueryInput in{"q" + std::to_string(q), Matrix(static_cast<Eigen::Index>(uni(1, 3)), static_cast<Eigen::Index>(dim))};
    for (Eigen::Index i = 0; i < in.rows.size(); ++i) in.rows.data()[i] = normal(rng);
    c.queries.push_back(std::move(in));
  }
  return c;
}

// Empty when `got` equals the brute-force `want` (scores to 1e-12).
inline std::string MatchDiff(const MatchResult& got, const MatchResult& want) {
  if (got.query_id != want.query_id) return "query id " + got.query_id + " vs " + want.query_id;
  if (got.ranked.size() != want.ranked.size()) return got.query_id + ": ranked length differs";
  for (std::size_t i = 0; i < got.ranked.size(); ++i) {
    if (got.ranked[i].first != want.ranked[i].first) {
      return got.query_id + ": rank " + std::to_string(i) + " " + got.ranked[i].first + " vs " + want.ranked[i].first;
    }
    if (std::abs(got.ranked[i].second - want.ranked[i].second) > 1e-12) {
      return got.query_id + ": score at rank " + std::to_string(i) + " differs";
    }
  }
  if (got.accepted != want.accepted) return got.query_id + ": accepted differs";
  return {};
}

struct LoadedDataset {
  Manifest gallery, train, test;
};

// Writes the descriptor files under `dir` and parses the manifests back.
inline LoadedDataset WriteDataset(const IdentificationDataset& data, const fs::path& dir) {
  fs::create_directories(dir);
  WriteDescriptorFile(data.gallery_descriptors, dir / kGalleryFile);
  WriteDescriptorFile(data.train_descriptors, dir / kTrainFile);
  WriteDescriptorFile(data.test_descriptors, dir / kTestFile);
  return {ParseManifest(data.gallery_manifest, dir), ParseManifest(data.train_manifest, dir),
          ParseManifest(data.test_manifest, dir)};
}

// Gallery plus clean and cluttered scenes written under `dir`, as the
// gen-synth subcommand lays them out. Descriptors carry no nuisance, so the
// identity encoder identifies full objects.
struct DetectionFixture {
  GalleryIndex index;
  std::vector<Scene> clean, cluttered;
  std::vector<DetectionRecord> clean_gt, cluttered_gt;
};

inline SynthSpec DetectionFixtureSpec(std::uint64_t seed) {
  SynthSpec spec;
  spec.n_objects = 20;
  spec.noise = 0.05;
  spec.seed = seed;
  return spec;
}

inline DetectionFixture MakeDetectionFixture(const fs::path& dir, std::uint64_t seed, std::size_t n_scenes = 8,
                                             GalleryMode mode = GalleryMode::kCentroid) {
  const auto spec = DetectionFixtureSpec(seed);
  fs::create_directories(dir);
  const auto data = GenIdentificationDataset(spec);
  WriteDescriptorFile(data.gallery_descriptors, dir / kGalleryFile);
  const auto gallery = ParseManifest(data.gallery_manifest, dir);
  DetectionFixture f;
  f.index = GalleryIndex::Build(gallery.gallery, Encode(IdentityEncoder(spec.dim), gallery.descriptors.ToMatrix()),
                                mode);
  const auto clean = GenDetectionScenes(spec, SceneKind::kClean, n_scenes, 4, "clean.bin");
  const auto cluttered = GenDetectionScenes(spec, SceneKind::kCluttered, n_scenes, 4, "cluttered.bin");
  WriteDescriptorFile(clean.descriptors, dir / "clean.bin");
  WriteDescriptorFile(cluttered.descriptors, dir / "cluttered.bin");
  f.clean = ParseSceneManifest(clean.manifest, dir);
  f.cluttered = ParseSceneManifest(cluttered.manifest, dir);
  f.clean_gt = clean.ground_truth;
  f.cluttered_gt = cluttered.ground_truth;
  return f;
}

}  // namespace ctlid::testing
