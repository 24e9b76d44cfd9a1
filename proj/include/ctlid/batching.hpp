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
// Epoch triplet generation, greedy packing of variable-size triplets into
// fixed-budget batches, and round-robin assignment of batches to workers.
#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctlid/centroid_loss.hpp"
#include "ctlid/codec.hpp"

namespace ctlid {

// Gallery and picks sharing one descriptor matrix.
struct TrainingSet {
  DescriptorMatrix descriptors;
  std::vector<ObjectRecord> gallery;
  std::vector<PickRecord> picks;
};

// Concatenates the picks' descriptors after the gallery's and re-bases the
// pick row references.
inline TrainingSet MergeForTraining(const Manifest& gallery, const Manifest& picks) {
  if (gallery.descriptors.count() > 0 && picks.descriptors.count() > 0 &&
      gallery.descriptors.dim() != picks.descriptors.dim()) {
    Fail(ErrorKind::kDimension, "gallery and pick descriptors differ in dim");
  }
  CheckPickLabels(gallery.gallery, picks.picks);
  TrainingSet set;
  std::vector<float> data = gallery.descriptors.data();
  data.insert(data.end(), picks.descriptors.data().begin(), picks.descriptors.data().end());
  const std::size_t dim = gallery.descriptors.count() > 0 ? gallery.descriptors.dim() : picks.descriptors.dim();
  const std::size_t offset = gallery.descriptors.count();
  set.descriptors = DescriptorMatrix(offset + picks.descriptors.count(), dim, std::move(data));
  set.gallery = gallery.gallery;
  set.picks = picks.picks;
  for (auto& p : set.picks) {
    for (auto& r : p.query_object.image_refs) r += offset;
  }
  return set;
}

struct Triplet {
  std::size_t pick = 0;      // index into TrainingSet::picks
  std::size_t positive = 0;  // index into TrainingSet::gallery
  std::size_t negative = 0;
  QueryRepresentation query = QueryRepresentation::kAllImages;
  std::size_t image_count = 0;
};

// One triplet per labeled pick, in a seeded shuffle of pick order. Negatives
// are drawn uniformly from the other gallery objects.
template <typename Rng>
std::vector<Triplet> GenerateTriplets(const std::vector<ObjectRecord>& gallery,
                                      const std::vector<PickRecord>& picks, Rng& rng,
                                      double single_query_prob = 0.0) {
  if (gallery.size() < 2) Fail(ErrorKind::kValidation, "need at least two gallery objects");
  std::unordered_map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < gallery.size(); ++i) by_id.emplace(gallery[i].object_id, i);

  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < picks.size(); ++i) {
    if (picks[i].gt_object_id) order.push_back(i);
  }
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<Triplet> out;
  out.reserve(order.size());
  std::uniform_int_distribution<std::size_t> other(0, gallery.size() - 2);
  for (auto pi : order) {
    const auto& pick = picks[pi];
    auto it = by_id.find(*pick.gt_object_id);
    if (it == by_id.end()) {
      Fail(ErrorKind::kValidation, "pick " + pick.pick_id + " has unmatched gt_object_id");
    }
    Triplet t;
    t.pick = pi;
    t.positive = it->second;
    t.negative = other(rng);
    if (t.negative >= t.positive) ++t.negative;
    t.query = SampleQueryRepresentation(rng, pick.query_object.image_refs.size(), single_query_prob);
    const std::size_t query_images =
        t.query == QueryRepresentation::kFirstImageOnly ? 1 : pick.query_object.image_refs.size();
    t.image_count = query_images + gallery[t.positive].image_refs.size() +
                    gallery[t.negative].image_refs.size();
    out.push_back(t);
  }
  return out;
}

// Contiguous run of triplets sharing one batch.
struct BatchSlice {
  std::vector<std::size_t> triplets;
  std::size_t image_count = 0;
};

// Greedy packing in the given order. A triplet joins the open batch iff it
// still fits within `batch_size` images; otherwise the batch is sealed. A
// triplet larger than `batch_size` forms a singleton batch.
inline std::vector<BatchSlice> PackBatches(std::span<const Triplet> triplets, std::size_t batch_size) {
  if (batch_size == 0) Fail(ErrorKind::kValidation, "batch size must be positive");
  std::vector<BatchSlice> out;
  BatchSlice open;
  for (std::size_t i = 0; i < triplets.size(); ++i) {
    const auto n = triplets[i].image_count;
    if (!open.triplets.empty() && open.image_count + n > batch_size) {
      out.push_back(std::move(open));
      open = {};
    }
    open.triplets.push_back(i);
    open.image_count += n;
    if (open.image_count >= batch_size) {
      out.push_back(std::move(open));
      open = {};
    }
  }
  if (!open.triplets.empty()) out.push_back(std::move(open));
  return out;
}

// Round-robin: batch i goes to worker i % workers.
inline std::vector<std::size_t> PartitionBatches(std::size_t n_batches, std::size_t workers) {
  if (workers == 0) Fail(ErrorKind::kValidation, "worker count must be positive");
  std::vector<std::size_t> assignment(n_batches);
  for (std::size_t i = 0; i < n_batches; ++i) assignment[i] = i % workers;
  return assignment;
}

struct TripletBatch {
  std::vector<std::size_t> rows;  // descriptor rows, in centroid order
  CentroidIndex index;
  std::vector<TripletIds> triplets;
  std::size_t image_count = 0;
};

// Centroids 3t, 3t+1, 3t+2 are the query, positive and negative of the t-th
// triplet in the slice. A first-image-only query contributes one row.
inline TripletBatch BuildCentroidIndex(const TrainingSet& set, std::span<const Triplet> triplets,
                                       const BatchSlice& slice) {
  if (slice.triplets.empty()) Fail(ErrorKind::kValidation, "empty batch");
  TripletBatch batch;
  std::vector<std::size_t> ids;
  std::size_t centroid = 0;
  auto add = [&](std::span<const std::size_t> refs) {
    for (auto r : refs) {
      batch.rows.push_back(r);
      ids.push_back(centroid);
    }
    return centroid++;
  };
  for (auto ti : slice.triplets) {
    const auto& t = triplets[ti];
    std::span<const std::size_t> query = set.picks[t.pick].query_object.image_refs;
    if (t.query == QueryRepresentation::kFirstImageOnly) query = query.first(1);
    TripletIds tid;
    tid.anchor = add(query);
    tid.positive = add(set.gallery[t.positive].image_refs);
    tid.negative = add(set.gallery[t.negative].image_refs);
    batch.triplets.push_back(tid);
  }
  batch.image_count = batch.rows.size();
  batch.index = MakeCentroidIndex(std::move(ids), centroid);
  return batch;
}

struct EpochPlan {
  std::vector<Triplet> triplets;
  std::vector<TripletBatch> batches;
  std::vector<std::size_t> worker;  // batch index -> worker id
};

inline std::mt19937_64 EpochRng(std::uint64_t seed, std::size_t epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch)};
  return std::mt19937_64(seq);
}

inline EpochPlan MakeEpochPlan(const TrainingSet& set, std::uint64_t seed, std::size_t epoch,
                               std::size_t batch_size, std::size_t workers,
                               double single_query_prob) {
  auto rng = EpochRng(seed, epoch);
  EpochPlan plan;
  plan.triplets = GenerateTriplets(set.gallery, set.picks, rng, single_query_prob);
  for (const auto& slice : PackBatches(plan.triplets, batch_size)) {
    plan.batches.push_back(BuildCentroidIndex(set, plan.triplets, slice));
  }
  plan.worker = PartitionBatches(plan.batches.size(), workers);
  return plan;
}

}  // namespace ctlid
