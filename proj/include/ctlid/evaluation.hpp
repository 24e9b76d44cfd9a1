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
// Retrieval metrics (Recall@k) and COCO-style detection metrics.
#pragma once

#include <algorithm>
#include <array>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "ctlid/backbone.hpp"
#include "ctlid/codec.hpp"
#include "ctlid/matcher.hpp"

namespace ctlid {

// ---------------------------------------------------------------------------
// Retrieval

struct RetrievalCase {
  std::string pick_id;
  std::string gt_object_id;
  std::vector<std::string> ranked;
};

// Fraction of cases whose ground truth is among the first k ranked ids. A
// list shorter than k is a miss beyond its length.
inline double RecallAtK(const std::vector<RetrievalCase>& cases, std::size_t k) {
  if (cases.empty()) Fail(ErrorKind::kValidation, "recall over an empty case list");
  if (k == 0) Fail(ErrorKind::kValidation, "k must be at least 1");
  std::size_t hits = 0;
  for (const auto& c : cases) {
    const auto n = std::min(k, c.ranked.size());
    if (std::find(c.ranked.begin(), c.ranked.begin() + static_cast<std::ptrdiff_t>(n),
                  c.gt_object_id) != c.ranked.begin() + static_cast<std::ptrdiff_t>(n)) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(cases.size());
}

enum class EvalProtocol { kPrePick, kPostPick };

struct RetrievalMetrics {
  double recall_at_1 = 0, recall_at_2 = 0, recall_at_3 = 0;
  std::size_t n_cases = 0;
  std::size_t skipped_distractors = 0;
};

// Encodes gallery and picks, matches with the threshold disabled and
// reports Recall@{1,2,3}. Unlabeled picks are skipped and counted.
inline RetrievalMetrics EvaluateRetrieval(const Manifest& gallery, const Manifest& picks,
                                          const Encoder& encoder, EvalProtocol protocol,
                                          GalleryMode mode, int jobs = 1) {
  const auto index = GalleryIndex::Build(gallery.gallery, Encode(encoder, gallery.descriptors), mode);
  std::vector<PickRecord> labeled;
  RetrievalMetrics m;
  for (const auto& p : picks.picks) {
    if (p.gt_object_id) {
      labeled.push_back(p);
    } else {
      ++m.skipped_distractors;
    }
  }
  const Matrix embedded = Encode(encoder, picks.descriptors);
  const auto queries = PickQueries(labeled, embedded, protocol == EvalProtocol::kPrePick);
  const auto results = MatchQueries(index, queries, 3, -1.0, jobs);
  std::vector<RetrievalCase> cases;
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    RetrievalCase c{labeled[i].pick_id, *labeled[i].gt_object_id, {}};
    for (const auto& [id, score] : results[i].ranked) c.ranked.push_back(id);
    cases.push_back(std::move(c));
  }
  m.n_cases = cases.size();
  m.recall_at_1 = RecallAtK(cases, 1);
  m.recall_at_2 = RecallAtK(cases, 2);
  m.recall_at_3 = RecallAtK(cases, 3);
  return m;
}

// ---------------------------------------------------------------------------
// IoU

inline double IouBBox(const BBox& a, const BBox& b) {
  const double iw = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double ih = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = iw * ih;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// Walks both run lists in lockstep; no decoding.
inline double IouMask(const SegmentMask& a, const SegmentMask& b) {
  if (a.width() != b.width() || a.height() != b.height()) {
    Fail(ErrorKind::kDimension, "mask dimensions differ");
  }
  const auto& ra = a.rle();
  const auto& rb = b.rle();
  std::size_t ia = 0, ib = 0;
  std::uint64_t left_a = ra[0], left_b = rb[0];
  bool fg_a = false, fg_b = false;
  std::uint64_t inter = 0, uni = 0;
  for (;;) {
    while (left_a == 0 && ia + 1 < ra.size()) {
      left_a = ra[++ia];
      fg_a = !fg_a;
    }
    while (left_b == 0 && ib + 1 < rb.size()) {
      left_b = rb[++ib];
      fg_b = !fg_b;
    }
    if (left_a == 0 || left_b == 0) break;
    const std::uint64_t step = std::min(left_a, left_b);
    if (fg_a || fg_b) uni += step;
    if (fg_a && fg_b) inter += step;
    left_a -= step;
    left_b -= step;
  }
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

// ---------------------------------------------------------------------------
// COCO-style detection metrics
//
// Per class and IoU threshold 0.50:0.05:0.95, detections are matched greedily
// in descending score to the unmatched ground truth of highest IoU. AP is
// the 101-point interpolated precision, AR the final recall; both averaged
// over classes and thresholds. Area buckets follow the ground-truth area:
// medium [32^2, 96^2), large >= 96^2.
//
// Classes are the union of ground-truth and detection labels. A class with
// detections but no ground truth in scope contributes AP 0 (its detections
// are all false positives) and is left out of AR.

enum class IouKind { kBox, kMask };

struct DetMetrics {
  double ap = -1, ap50 = -1, ap75 = -1, ap_m = -1, ap_l = -1;
  double ar_1 = -1, ar_10 = -1, ar_100 = -1, ar_m = -1, ar_l = -1;
};

inline Json DetMetricsToJson(const DetMetrics& m) {
  Json j;
  j["AP"] = RoundSig9(m.ap);
  j["AP50"] = RoundSig9(m.ap50);
  j["AP75"] = RoundSig9(m.ap75);
  j["AP_M"] = RoundSig9(m.ap_m);
  j["AP_L"] = RoundSig9(m.ap_l);
  j["AR_1"] = RoundSig9(m.ar_1);
  j["AR_10"] = RoundSig9(m.ar_10);
  j["AR_100"] = RoundSig9(m.ar_100);
  j["AR_M"] = RoundSig9(m.ar_m);
  j["AR_L"] = RoundSig9(m.ar_l);
  return j;
}

struct CocoParams {
  static constexpr std::size_t kNumIouThresholds = 10;
  static constexpr std::size_t kNumRecallThresholds = 101;
  static double IouThreshold(std::size_t t) { return 0.5 + static_cast<double>(t) * 0.05; }
  static double RecallThreshold(std::size_t r) { return static_cast<double>(r) * 0.01; }
  // [lo, hi) in pixels.
  static constexpr std::array<std::array<double, 2>, 3> kAreaRanges = {{
      {0.0, std::numeric_limits<double>::infinity()},
      {32.0 * 32.0, 96.0 * 96.0},
      {96.0 * 96.0, std::numeric_limits<double>::infinity()},
  }};
  static constexpr std::array<std::size_t, 3> kMaxDets = {1, 10, 100};
};

namespace detail {

struct ImageClassEval {
  std::vector<double> dt_scores;           // sorted descending, truncated to max det
  std::vector<std::vector<int>> dt_match;  // [threshold][det] -> gt index or -1
  std::vector<std::vector<bool>> dt_ignore;
  std::size_t n_gt_counted = 0;
};

// One (image, class, area range) cell, evaluated with up to `max_det` dets.
inline ImageClassEval EvaluateCell(const std::vector<const DetectionRecord*>& gts,
                                   const std::vector<const DetectionRecord*>& dts, IouKind kind,
                                   const std::array<double, 2>& area_range, std::size_t max_det) {
  auto outside = [&](double area) { return area < area_range[0] || area >= area_range[1]; };

  // Ignored ground truth goes last (stable).
  std::vector<std::size_t> g_order(gts.size());
  std::iota(g_order.begin(), g_order.end(), 0);
  std::vector<bool> g_ignore_raw(gts.size());
  for (std::size_t g = 0; g < gts.size(); ++g) {
    g_ignore_raw[g] = outside(static_cast<double>(gts[g]->mask.Area()));
  }
  std::stable_sort(g_order.begin(), g_order.end(),
                   [&](std::size_t a, std::size_t b) { return !g_ignore_raw[a] && g_ignore_raw[b]; });

  std::vector<std::size_t> d_order(dts.size());
  std::iota(d_order.begin(), d_order.end(), 0);
  std::stable_sort(d_order.begin(), d_order.end(),
                   [&](std::size_t a, std::size_t b) { return dts[a]->score > dts[b]->score; });
  if (d_order.size() > max_det) d_order.resize(max_det);

  const std::size_t ng = gts.size(), nd = d_order.size();
  std::vector<double> ious(nd * ng);
  for (std::size_t d = 0; d < nd; ++d) {
    const auto& det = *dts[d_order[d]];
    for (std::size_t g = 0; g < ng; ++g) {
      const auto& gt = *gts[g_order[g]];
      ious[d * ng + g] = kind == IouKind::kBox ? IouBBox(det.bbox, gt.bbox) : IouMask(det.mask, gt.mask);
    }
  }
  std::vector<bool> g_ignore(ng);
  ImageClassEval out;
  for (std::size_t g = 0; g < ng; ++g) {
    g_ignore[g] = g_ignore_raw[g_order[g]];
    if (!g_ignore[g]) ++out.n_gt_counted;
  }
  for (std::size_t d = 0; d < nd; ++d) out.dt_scores.push_back(dts[d_order[d]]->score);

  for (std::size_t t = 0; t < CocoParams::kNumIouThresholds; ++t) {
    std::vector<int> gt_match(ng, -1);
    std::vector<int> dt_match(nd, -1);
    std::vector<bool> dt_ignore(nd, false);
    for (std::size_t d = 0; d < nd; ++d) {
      double best = std::min(CocoParams::IouThreshold(t), 1 - 1e-10);
      int m = -1;
      for (std::size_t g = 0; g < ng; ++g) {
        if (gt_match[g] >= 0) continue;
        // Once matched to counted ground truth, ignored ones cannot win.
        if (m > -1 && !g_ignore[static_cast<std::size_t>(m)] && g_ignore[g]) break;
        if (ious[d * ng + g] < best) continue;
        best = ious[d * ng + g];
        m = static_cast<int>(g);
      }
      if (m == -1) continue;
      dt_ignore[d] = g_ignore[static_cast<std::size_t>(m)];
      dt_match[d] = m;
      gt_match[static_cast<std::size_t>(m)] = static_cast<int>(d);
    }
    for (std::size_t d = 0; d < nd; ++d) {
      if (dt_match[d] == -1) {
        const auto& det = *dts[d_order[d]];
        const double area = kind == IouKind::kBox ? det.bbox.w * det.bbox.h
                                                  : static_cast<double>(det.mask.Area());
        if (outside(area)) dt_ignore[d] = true;
      }
    }
    out.dt_match.push_back(std::move(dt_match));
    out.dt_ignore.push_back(std::move(dt_ignore));
  }
  return out;
}

struct PrecisionRecall {
  double precision = -1;  // mean interpolated precision, -1 if undefined
  double recall = -1;
};

// Accumulates one (class, area, threshold) over images; `cells` in image
// order, each already truncated to `max_det`.
// A class with no counted gt is skipped, unless it is missing from the gt
// altogether (`unknown_class`); then its detections are all false positives.
inline PrecisionRecall Accumulate(const std::vector<const ImageClassEval*>& cells, std::size_t t,
                                  std::size_t max_det, bool unknown_class) {
  std::vector<double> scores;
  std::vector<std::pair<bool, bool>> flags;  // (matched, ignored)
  std::size_t n_gt = 0;
  for (const auto* c : cells) {
    n_gt += c->n_gt_counted;
    const std::size_t n = std::min(max_det, c->dt_scores.size());
    for (std::size_t d = 0; d < n; ++d) {
      scores.push_back(c->dt_scores[d]);
      flags.emplace_back(c->dt_match[t][d] >= 0, c->dt_ignore[t][d]);
    }
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  PrecisionRecall pr;
  if (n_gt == 0) {
    if (!unknown_class) return pr;
    const bool any_fp = std::any_of(flags.begin(), flags.end(), [](auto f) { return !f.second; });
    if (any_fp) pr.precision = 0.0;
    return pr;
  }
  std::vector<double> rc, prec;
  double tps = 0, fps = 0;
  for (auto i : order) {
    const auto [matched, ignored] = flags[i];
    if (ignored) continue;
    if (matched) {
      tps += 1;
    } else {
      fps += 1;
    }
    rc.push_back(tps / static_cast<double>(n_gt));
    prec.push_back(tps / (tps + fps));
  }
  pr.recall = rc.empty() ? 0.0 : rc.back();
  for (std::size_t i = prec.size(); i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double sum = 0;
  for (std::size_t r = 0; r < CocoParams::kNumRecallThresholds; ++r) {
    const double thr = CocoParams::RecallThreshold(r);
    const auto it = std::lower_bound(rc.begin(), rc.end(), thr);
    if (it != rc.end()) sum += prec[static_cast<std::size_t>(it - rc.begin())];
  }
  pr.precision = sum / static_cast<double>(CocoParams::kNumRecallThresholds);
  return pr;
}

inline double MeanDefined(const std::vector<double>& values) {
  double sum = 0;
  std::size_t n = 0;
  for (double v : values) {
    if (v > -1) {
      sum += v;
      ++n;
    }
  }
  return n ? sum / static_cast<double>(n) : -1.0;
}

}  // namespace detail

inline DetMetrics CocoEval(const std::vector<DetectionRecord>& detections,
                           const std::vector<DetectionRecord>& ground_truth, IouKind kind) {
  std::set<std::string> images, labels, gt_labels;
  for (const auto& g : ground_truth) {
    images.insert(g.image_id);
    gt_labels.insert(g.label);
  }
  labels = gt_labels;
  for (const auto& d : detections) {
    if (!images.count(d.image_id)) {
      Fail(ErrorKind::kValidation, "detection for unknown image " + d.image_id);
    }
    if (!std::isfinite(d.score)) Fail(ErrorKind::kNumeric, "non-finite detection score");
    labels.insert(d.label);
  }
  std::map<std::pair<std::string, std::string>, std::vector<const DetectionRecord*>> gt_cells, dt_cells;
  for (const auto& g : ground_truth) gt_cells[{g.image_id, g.label}].push_back(&g);
  for (const auto& d : detections) dt_cells[{d.image_id, d.label}].push_back(&d);

  constexpr std::size_t kMaxDet = CocoParams::kMaxDets.back();
  const std::vector<const DetectionRecord*> none;
  // [area][class][image]
  std::vector<std::vector<std::vector<detail::ImageClassEval>>> cells(CocoParams::kAreaRanges.size());
  for (std::size_t a = 0; a < CocoParams::kAreaRanges.size(); ++a) {
    for (const auto& label : labels) {
      auto& per_image = cells[a].emplace_back();
      for (const auto& image : images) {
        auto git = gt_cells.find({image, label});
        auto dit = dt_cells.find({image, label});
        per_image.push_back(detail::EvaluateCell(git == gt_cells.end() ? none : git->second,
                                                 dit == dt_cells.end() ? none : dit->second, kind,
                                                 CocoParams::kAreaRanges[a], kMaxDet));
      }
    }
  }

  auto collect = [&](std::size_t area, std::size_t max_det, std::size_t t_begin, std::size_t t_end,
                     bool want_recall) {
    std::vector<double> values;
    for (std::size_t t = t_begin; t < t_end; ++t) {
      auto label = labels.begin();
      for (const auto& per_image : cells[area]) {
        std::vector<const detail::ImageClassEval*> ptrs;
        for (const auto& c : per_image) ptrs.push_back(&c);
        const auto pr = detail::Accumulate(ptrs, t, max_det, !gt_labels.count(*label++));
        values.push_back(want_recall ? pr.recall : pr.precision);
      }
    }
    return detail::MeanDefined(values);
  };

  constexpr std::size_t kT = CocoParams::kNumIouThresholds;
  DetMetrics m;
  m.ap = collect(0, kMaxDet, 0, kT, false);
  m.ap50 = collect(0, kMaxDet, 0, 1, false);
  m.ap75 = collect(0, kMaxDet, 5, 6, false);
  m.ap_m = collect(1, kMaxDet, 0, kT, false);
  m.ap_l = collect(2, kMaxDet, 0, kT, false);
  m.ar_1 = collect(0, 1, 0, kT, true);
  m.ar_10 = collect(0, 10, 0, kT, true);
  m.ar_100 = collect(0, kMaxDet, 0, kT, true);
  m.ar_m = collect(1, kMaxDet, 0, kT, true);
  m.ar_l = collect(2, kMaxDet, 0, kT, true);
  return m;
}

}  // namespace ctlid
