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
// Training loop: encode -> index-add centroids -> triplet hinge -> SGD.
//
// With W workers, one optimizer step consumes W consecutive batches (batch i
// belongs to worker i % W). Each worker's gradient is computed independently
// and the step applies their mean, reduced in worker order, so results do
// not depend on how many threads run the workers.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "ctlid/backbone.hpp"
#include "ctlid/batching.hpp"
#include "ctlid/centroid_loss.hpp"

namespace ctlid {

struct TrainConfig {
  std::size_t batch_size = 64;
  double margin = 0.5;
  LrSchedule schedule;
  std::uint64_t seed = 0;
  double single_query_prob = 0.5;
  std::size_t workers = 1;
};

inline void ValidateTrainConfig(const TrainConfig& c) {
  if (c.batch_size == 0) Fail(ErrorKind::kValidation, "batch size must be positive");
  if (!(c.margin >= 0) || !std::isfinite(c.margin)) Fail(ErrorKind::kValidation, "margin must be finite and >= 0");
  if (!(c.single_query_prob >= 0 && c.single_query_prob <= 1)) {
    Fail(ErrorKind::kValidation, "single_query_prob outside [0,1]");
  }
  if (c.workers == 0) Fail(ErrorKind::kValidation, "workers must be positive");
  ValidateSchedule(c.schedule);
}

struct BatchResult {
  double loss = 0;  // mean over the batch's triplets
  ParamGrads grads;
};

inline BatchResult BatchGradient(const Encoder& encoder, const TrainingSet& set,
                                 const TripletBatch& batch, double margin) {
  const Matrix x = set.descriptors.Gather(batch.rows);
  const Matrix e = Encode(encoder, x);
  const Matrix centroids = ComputeCentroids(e, batch.index);
  const auto loss = TripletBatchLoss(centroids, batch.triplets, margin);
  const Matrix grad_e = ScatterCentroidGrads(loss.centroid_grads, batch.index);
  return {loss.loss, EncoderBackward(encoder, x, grad_e)};
}

struct EpochStats {
  std::size_t epoch = 0;
  double lr = 0;
  double mean_loss = 0;  // mean over the epoch's triplets
  std::size_t n_triplets = 0;
  std::size_t n_batches = 0;
  std::size_t n_steps = 0;
};

inline EpochStats TrainEpoch(Encoder& encoder, const TrainingSet& set, const TrainConfig& cfg,
                             std::size_t epoch, int jobs = 1) {
  const auto plan = MakeEpochPlan(set, cfg.seed, epoch, cfg.batch_size, cfg.workers, cfg.single_query_prob);
  EpochStats stats;
  stats.epoch = epoch;
  stats.lr = LrAt(cfg.schedule, epoch);
  stats.n_triplets = plan.triplets.size();
  stats.n_batches = plan.batches.size();

  double loss_sum = 0;
  for (std::size_t first = 0; first < plan.batches.size(); first += cfg.workers) {
    const std::size_t n = std::min(cfg.workers, plan.batches.size() - first);
    std::vector<BatchResult> results(n);
    ParallelFor(n, jobs, [&](std::size_t w) {
      results[w] = BatchGradient(encoder, set, plan.batches[first + w], cfg.margin);
    });
    ParamGrads step = ZeroGrads(encoder);
    for (std::size_t w = 0; w < n; ++w) {
      const auto& batch = plan.batches[first + w];
      if (!std::isfinite(results[w].loss)) {
        Fail(ErrorKind::kNumeric, "non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                                      std::to_string(first + w));
      }
      loss_sum += results[w].loss * static_cast<double>(batch.triplets.size());
      AddGrads(step, results[w].grads, 1.0 / static_cast<double>(n));
    }
    SgdStep(encoder, step, stats.lr);
    ++stats.n_steps;
  }
  stats.mean_loss = stats.n_triplets ? loss_sum / static_cast<double>(stats.n_triplets) : 0.0;
  return stats;
}

// Runs the remaining epochs of the schedule, starting after
// `ckpt.epochs_completed`. `on_epoch` sees the encoder after every epoch.
inline void Train(Checkpoint& ckpt, const TrainingSet& set, const TrainConfig& cfg, int jobs,
                  const std::function<void(const EpochStats&, const Encoder&)>& on_epoch = {}) {
  ValidateTrainConfig(cfg);
  if (set.descriptors.dim() != ckpt.encoder.input_dim()) {
    Fail(ErrorKind::kDimension, "descriptor dim does not match encoder input");
  }
  const auto total = cfg.schedule.total_epochs();
  for (std::size_t epoch = ckpt.epochs_completed; epoch < total; ++epoch) {
    const auto stats = TrainEpoch(ckpt.encoder, set, cfg, epoch, jobs);
    ckpt.epochs_completed = epoch + 1;
    if (on_epoch) on_epoch(stats, ckpt.encoder);
  }
}

}  // namespace ctlid
