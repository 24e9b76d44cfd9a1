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
// Centroid triplet loss.
//
// Every image in a batch carries the id of the centroid it belongs to. The
// centroids are computed with an index-add followed by a division by the
// member counts, and the hinge
//
//   max(|Ca - Cp| - |Ca - Cn| + margin, 0)
//
// is applied per triplet of (anchor, positive, negative) centroids. Gradients
// flow back through the mean to every member image.
#pragma once

#include <random>
#include <span>
#include <vector>

#include "ctlid/common.hpp"

namespace ctlid {

struct CentroidIndex {
  std::vector<std::size_t> ids;     // centroid id per image row
  std::size_t n_centroids = 0;
  std::vector<std::size_t> counts;  // members per centroid, all >= 1
};

inline CentroidIndex MakeCentroidIndex(std::vector<std::size_t> ids, std::size_t n_centroids) {
  if (n_centroids == 0) Fail(ErrorKind::kValidation, "centroid index needs at least one centroid");
  CentroidIndex index{std::move(ids), n_centroids, std::vector<std::size_t>(n_centroids, 0)};
  for (auto c : index.ids) {
    if (c >= n_centroids) Fail(ErrorKind::kValidation, "centroid id out of range");
    ++index.counts[c];
  }
  for (auto n : index.counts) {
    if (n == 0) Fail(ErrorKind::kValidation, "centroid with zero members");
  }
  return index;
}

struct TripletIds {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::size_t negative = 0;
  bool operator==(const TripletIds&) const = default;
};

// Mean of the member rows of every centroid. Members are summed in ascending
// row order so the result is bit-reproducible.
inline Matrix ComputeCentroids(const Matrix& embeddings, const CentroidIndex& index) {
  if (static_cast<std::size_t>(embeddings.rows()) != index.ids.size()) {
    Fail(ErrorKind::kDimension, "embedding rows != centroid index length");
  }
  Matrix centroids = Matrix::Zero(static_cast<Eigen::Index>(index.n_centroids), embeddings.cols());
  for (std::size_t r = 0; r < index.ids.size(); ++r) {
    centroids.row(static_cast<Eigen::Index>(index.ids[r])) += embeddings.row(static_cast<Eigen::Index>(r));
  }
  for (std::size_t c = 0; c < index.n_centroids; ++c) {
    if (index.counts[c] == 0) Fail(ErrorKind::kValidation, "centroid with zero members");
    centroids.row(static_cast<Eigen::Index>(c)) /= static_cast<double>(index.counts[c]);
  }
  return centroids;
}

// Embedding row j receives centroid_grads[id(j)] / count(id(j)).
inline Matrix ScatterCentroidGrads(const Matrix& centroid_grads, const CentroidIndex& index) {
  if (static_cast<std::size_t>(centroid_grads.rows()) != index.n_centroids) {
    Fail(ErrorKind::kDimension, "centroid grad rows != n_centroids");
  }
  Matrix out(static_cast<Eigen::Index>(index.ids.size()), centroid_grads.cols());
  for (std::size_t r = 0; r < index.ids.size(); ++r) {
    const auto c = index.ids[r];
    out.row(static_cast<Eigen::Index>(r)) =
        centroid_grads.row(static_cast<Eigen::Index>(c)) / static_cast<double>(index.counts[c]);
  }
  return out;
}

namespace detail {

inline void CheckSameDims(const Vector& a, const Vector& b, const Vector& c) {
  if (a.size() != b.size() || a.size() != c.size()) {
    Fail(ErrorKind::kDimension, "triplet centroids differ in dimension");
  }
}

}  // namespace detail

inline double CtlForward(const Vector& anchor, const Vector& positive, const Vector& negative,
                         double margin) {
  detail::CheckSameDims(anchor, positive, negative);
  return std::max((anchor - positive).norm() - (anchor - negative).norm() + margin, 0.0);
}

struct CtlGrads {
  Vector anchor, positive, negative;
};

// Analytic subgradient. Zero when the hinge is inactive or exactly at the
// kink; a unit vector whose norm is below kNormEpsilon is taken as zero.
inline CtlGrads CtlBackward(const Vector& anchor, const Vector& positive, const Vector& negative,
                            double margin) {
  detail::CheckSameDims(anchor, positive, negative);
  const Vector dp = anchor - positive;
  const Vector dn = anchor - negative;
  const double np = dp.norm(), nn = dn.norm();
  const auto d = anchor.size();
  if (np - nn + margin <= 0.0) return {Vector::Zero(d), Vector::Zero(d), Vector::Zero(d)};
  const Vector u = np < kNormEpsilon ? Vector::Zero(d) : Vector(dp / np);
  const Vector v = nn < kNormEpsilon ? Vector::Zero(d) : Vector(dn / nn);
  return {u - v, -u, v};
}

struct BatchLoss {
  double loss = 0;        // mean over triplets
  Matrix centroid_grads;  // d(mean loss) / d(centroid)
};

inline BatchLoss TripletBatchLoss(const Matrix& centroids, std::span<const TripletIds> triplets,
                                  double margin) {
  BatchLoss out{0.0, Matrix::Zero(centroids.rows(), centroids.cols())};
  if (triplets.empty()) return out;
  const double scale = 1.0 / static_cast<double>(triplets.size());
  for (const auto& t : triplets) {
    const Vector a = centroids.row(static_cast<Eigen::Index>(t.anchor)).transpose();
    const Vector p = centroids.row(static_cast<Eigen::Index>(t.positive)).transpose();
    const Vector n = centroids.row(static_cast<Eigen::Index>(t.negative)).transpose();
    out.loss += CtlForward(a, p, n, margin);
    const auto g = CtlBackward(a, p, n, margin);
    out.centroid_grads.row(static_cast<Eigen::Index>(t.anchor)) += scale * g.anchor.transpose();
    out.centroid_grads.row(static_cast<Eigen::Index>(t.positive)) += scale * g.positive.transpose();
    out.centroid_grads.row(static_cast<Eigen::Index>(t.negative)) += scale * g.negative.transpose();
  }
  out.loss *= scale;
  return out;
}

enum class QueryRepresentation { kAllImages, kFirstImageOnly };

// With probability `prob` the anchor is represented by the first query image
// alone instead of the centroid of all query images.
template <typename Rng>
QueryRepresentation SampleQueryRepresentation(Rng& rng, std::size_t n_query_images, double prob) {
  if (n_query_images == 0) Fail(ErrorKind::kValidation, "query without images");
  if (!(prob >= 0.0 && prob <= 1.0)) Fail(ErrorKind::kValidation, "probability outside [0,1]");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  return unit(rng) < prob ? QueryRepresentation::kFirstImageOnly : QueryRepresentation::kAllImages;
}

}  // namespace ctlid
