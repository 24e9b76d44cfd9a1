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
// Cosine-similarity gallery matching.
//
// Scores are plain cosine similarity: higher is better, the best gallery
// object is the argmax and a match is rejected when its score is below the
// threshold. Queries are always reduced to the centroid of their rows; the
// gallery side is either one centroid per object or every image embedding
// (an object then scores the max over its images).
#pragma once

#include <algorithm>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ctlid/centroid_loss.hpp"
#include "ctlid/codec.hpp"
#include "ctlid/common.hpp"

namespace ctlid {

enum class GalleryMode { kCentroid, kInstance };

inline GalleryMode ParseGalleryMode(const std::string& s) {
  if (s == "centroid") return GalleryMode::kCentroid;
  if (s == "instance") return GalleryMode::kInstance;
  Fail(ErrorKind::kValidation, "unknown gallery mode '" + s + "'");
}

inline double CosineSimilarity(const Vector& x, const Vector& y) {
  if (x.size() != y.size()) Fail(ErrorKind::kDimension, "cosine inputs differ in dimension");
  const double nx = x.norm(), ny = y.norm();
  if (nx < kNormEpsilon || ny < kNormEpsilon) Fail(ErrorKind::kNumeric, "near-zero vector in cosine");
  return std::clamp(x.dot(y) / (nx * ny), -1.0, 1.0);
}

class GalleryIndex {
 public:
  GalleryMode mode() const { return mode_; }
  const std::vector<std::string>& object_ids() const { return object_ids_; }
  // Unit-normalized entries, one per row.
  const Matrix& entries() const { return entries_; }
  // Object index of every entry.
  const std::vector<std::size_t>& entry_object() const { return entry_object_; }
  std::size_t dim() const { return static_cast<std::size_t>(entries_.cols()); }

  // `embeddings` rows are addressed by the objects' image_refs.
  static GalleryIndex Build(const std::vector<ObjectRecord>& objects, const Matrix& embeddings,
                            GalleryMode mode) {
    GalleryIndex g;
    g.mode_ = mode;
    std::vector<std::size_t> rows, ids;
    for (std::size_t o = 0; o < objects.size(); ++o) {
      if (objects[o].image_refs.empty()) {
        Fail(ErrorKind::kValidation, "gallery object " + objects[o].object_id + " has no images");
      }
      g.object_ids_.push_back(objects[o].object_id);
      for (auto r : objects[o].image_refs) {
        if (r >= static_cast<std::size_t>(embeddings.rows())) {
          Fail(ErrorKind::kValidation, "gallery image ref out of range");
        }
        rows.push_back(r);
        ids.push_back(o);
      }
    }
    Matrix gathered(static_cast<Eigen::Index>(rows.size()), embeddings.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      gathered.row(static_cast<Eigen::Index>(i)) = embeddings.row(static_cast<Eigen::Index>(rows[i]));
    }
    if (mode == GalleryMode::kCentroid) {
      if (objects.empty()) {
        g.entries_ = Matrix(0, embeddings.cols());
      } else {
        g.entries_ = ComputeCentroids(gathered, MakeCentroidIndex(std::move(ids), objects.size()));
      }
      g.entry_object_.resize(objects.size());
      std::iota(g.entry_object_.begin(), g.entry_object_.end(), 0);
    } else {
      g.entries_ = std::move(gathered);
      g.entry_object_ = std::move(ids);
    }
    for (Eigen::Index r = 0; r < g.entries_.rows(); ++r) {
      const double n = g.entries_.row(r).norm();
      if (!std::isfinite(n) || n < kNormEpsilon) {
        Fail(ErrorKind::kNumeric, "zero or non-finite gallery entry for " +
                                      g.object_ids_[g.entry_object_[static_cast<std::size_t>(r)]]);
      }
      g.entries_.row(r) /= n;
    }
    return g;
  }

 private:
  GalleryMode mode_ = GalleryMode::kCentroid;
  std::vector<std::string> object_ids_;
  Matrix entries_;
  std::vector<std::size_t> entry_object_;
};

struct QueryInput {
  std::string query_id;
  Matrix rows;  // embeddings of the query's images
};

struct MatchResult {
  std::string query_id;
  std::vector<std::pair<std::string, double>> ranked;  // descending score
  bool accepted = false;
};

namespace detail {

inline void CheckMatchArgs(std::size_t k, double theta) {
  if (k == 0) Fail(ErrorKind::kValidation, "k must be at least 1");
  if (!(theta >= -1.0 && theta <= 1.0)) Fail(ErrorKind::kValidation, "theta outside [-1,1]");
}

inline MatchResult MatchOne(const GalleryIndex& index, const QueryInput& q, std::size_t k,
                            double theta) {
  if (q.rows.rows() == 0) Fail(ErrorKind::kValidation, "query " + q.query_id + " has no rows");
  if (static_cast<std::size_t>(q.rows.cols()) != index.dim()) {
    Fail(ErrorKind::kDimension, "query dim does not match gallery");
  }
  const Vector centroid = q.rows.colwise().mean().transpose();
  const double norm = centroid.norm();
  if (!std::isfinite(norm) || norm < kNormEpsilon) {
    Fail(ErrorKind::kNumeric, "zero or non-finite query centroid for " + q.query_id);
  }
  const Vector sims = index.entries() * (centroid / norm);

  const auto n_objects = index.object_ids().size();
  std::vector<double> score(n_objects, -std::numeric_limits<double>::infinity());
  for (std::size_t e = 0; e < index.entry_object().size(); ++e) {
    auto& s = score[index.entry_object()[e]];
    s = std::max(s, std::clamp(sims[static_cast<Eigen::Index>(e)], -1.0, 1.0));
  }
  std::vector<std::size_t> order(n_objects);
  std::iota(order.begin(), order.end(), 0);
  const auto& ids = index.object_ids();
  auto better = [&](std::size_t a, std::size_t b) {
    if (score[a] != score[b]) return score[a] > score[b];
    return ids[a] < ids[b];
  };
  const std::size_t take = std::min(k, n_objects);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(), better);

  MatchResult r;
  r.query_id = q.query_id;
  for (std::size_t i = 0; i < take; ++i) r.ranked.emplace_back(ids[order[i]], score[order[i]]);
  r.accepted = !r.ranked.empty() && r.ranked.front().second >= theta;
  return r;
}

}  // namespace detail

// Top-k unique gallery objects per query, ties broken by ascending object_id.
inline std::vector<MatchResult> MatchQueries(const GalleryIndex& index,
                                             const std::vector<QueryInput>& queries,
                                             std::size_t k, double theta, int jobs = 1) {
  detail::CheckMatchArgs(k, theta);
  std::vector<MatchResult> out(queries.size());
  ParallelFor(queries.size(), jobs,
              [&](std::size_t i) { out[i] = detail::MatchOne(index, queries[i], k, theta); });
  return out;
}

struct Assignment {
  std::string query_id;
  std::optional<std::string> object_id;  // best object; empty when gallery is empty
  double score = -1;
  bool accepted = false;
};

// Independent argmax per query; several queries may map to the same object.
inline std::vector<Assignment> MatchManyToMany(const GalleryIndex& index,
                                               const std::vector<QueryInput>& queries,
                                               double theta, int jobs = 1) {
  std::vector<Assignment> out;
  for (auto& r : MatchQueries(index, queries, 1, theta, jobs)) {
    Assignment a{r.query_id, std::nullopt, -1.0, r.accepted};
    if (!r.ranked.empty()) {
      a.object_id = r.ranked.front().first;
      a.score = r.ranked.front().second;
    }
    out.push_back(std::move(a));
  }
  return out;
}

// Embeds the rows of every pick (optionally only its first image).
inline std::vector<QueryInput> PickQueries(const std::vector<PickRecord>& picks,
                                           const Matrix& embeddings, bool first_image_only) {
  std::vector<QueryInput> out;
  out.reserve(picks.size());
  for (const auto& p : picks) {
    const auto& refs = p.query_object.image_refs;
    const std::size_t n = first_image_only ? std::min<std::size_t>(1, refs.size()) : refs.size();
    QueryInput q{p.pick_id, Matrix(static_cast<Eigen::Index>(n), embeddings.cols())};
    for (std::size_t i = 0; i < n; ++i) {
      q.rows.row(static_cast<Eigen::Index>(i)) = embeddings.row(static_cast<Eigen::Index>(refs[i]));
    }
    out.push_back(std::move(q));
  }
  return out;
}

}  // namespace ctlid
