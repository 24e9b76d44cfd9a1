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
// Test-only reference implementations. They recompute the library's results
// the slow way (explicit loops, decoded pixels, full sorts) and share no
// code with the routines under test beyond the data types.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "ctlid/backbone.hpp"
#include "ctlid/codec.hpp"
#include "ctlid/evaluation.hpp"
#include "ctlid/matcher.hpp"

namespace ctlid::testing {

// ---------------------------------------------------------------------------
// Masks and IoU

inline std::vector<std::uint8_t> BoxBitmap(const BBox& b, std::uint32_t width, std::uint32_t height) {
  std::vector<std::uint8_t> px(std::size_t{width} * height, 0);
  for (std::uint32_t y = 0; y < height; ++y) {
    for (std::uint32_t x = 0; x < width; ++x) {
      if (x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h) px[std::size_t{y} * width + x] = 1;
    }
  }
  return px;
}

inline double PixelIou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]) ? 1 : 0;
    uni += (a[i] || b[i]) ? 1 : 0;
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

inline std::size_t PixelCount(const std::vector<std::uint8_t>& a) {
  return static_cast<std::size_t>(std::count(a.begin(), a.end(), std::uint8_t{1}));
}

template <typename Rng>
SegmentMask RandomRectMask(Rng& rng, std::uint32_t width, std::uint32_t height) {
  std::uniform_int_distribution<std::uint32_t> xs(0, width - 1), ys(0, height - 1);
  const std::uint32_t x0 = xs(rng), y0 = ys(rng);
  const std::uint32_t w = std::uniform_int_distribution<std::uint32_t>(1, width - x0)(rng);
  const std::uint32_t h = std::uniform_int_distribution<std::uint32_t>(1, height - y0)(rng);
  return SegmentMask::Encode(width, height, BoxBitmap({double(x0), double(y0), double(w), double(h)}, width, height));
}

template <typename Rng>
SegmentMask RandomBlobMask(Rng& rng, std::uint32_t width, std::uint32_t height, double density) {
  std::bernoulli_distribution on(density);
  std::vector<std::uint8_t> px(std::size_t{width} * height);
  for (auto& p : px) p = on(rng);
  return SegmentMask::Encode(width, height, px);
}

// ---------------------------------------------------------------------------
// COCO-style evaluation with explicit loops.

struct RefCocoResult {
  std::array<double, 10> values{};  // AP AP50 AP75 AP_M AP_L AR_1 AR_10 AR_100 AR_M AR_L
};

inline std::array<double, 10> MetricsArray(const DetMetrics& m) {
  return {m.ap, m.ap50, m.ap75, m.ap_m, m.ap_l, m.ar_1, m.ar_10, m.ar_100, m.ar_m, m.ar_l};
}

inline RefCocoResult ReferenceCocoEval(const std::vector<DetectionRecord>& dets,
                                       const std::vector<DetectionRecord>& gts, bool use_masks) {
  std::set<std::string> images, classes, gt_classes;
  for (const auto& g : gts) {
    images.insert(g.image_id);
    classes.insert(g.label);
    gt_classes.insert(g.label);
  }
  for (const auto& d : dets) classes.insert(d.label);

  auto region = [&](const DetectionRecord& r) {
    if (use_masks) return r.mask.Decode();
    return BoxBitmap(r.bbox, r.mask.width(), r.mask.height());
  };
  const double inf = std::numeric_limits<double>::infinity();
  const std::array<std::array<double, 2>, 3> areas = {{{0, inf}, {1024, 9216}, {9216, inf}}};

  struct Outcome {
    double score;
    bool matched;
    bool ignored;
  };
  // [area][class][threshold][image] -> outcomes of that image's sorted dets,
  // plus counted gt per [area][class][image].
  std::map<std::tuple<int, std::string, int, std::string>, std::vector<Outcome>> outcomes;
  std::map<std::tuple<int, std::string, std::string>, int> counted;

  for (int a = 0; a < 3; ++a) {
    for (const auto& c : classes) {
      for (const auto& img : images) {
        std::vector<const DetectionRecord*> g_list, d_list;
        for (const auto& g : gts) {
          if (g.image_id == img && g.label == c) g_list.push_back(&g);
        }
        for (const auto& d : dets) {
          if (d.image_id == img && d.label == c) d_list.push_back(&d);
        }
        // Counted gt first, then ignored gt, each in input order.
        std::vector<const DetectionRecord*> g_sorted;
        std::vector<bool> g_ign;
        for (int pass = 0; pass < 2; ++pass) {
          for (const auto* g : g_list) {
            const double area = static_cast<double>(g->mask.Area());
            const bool ign = area < areas[a][0] || area >= areas[a][1];
            if (ign == (pass == 1)) {
              g_sorted.push_back(g);
              g_ign.push_back(ign);
            }
          }
        }
        int n_counted = 0;
        for (bool ig : g_ign) n_counted += ig ? 0 : 1;
        counted[{a, c, img}] = n_counted;
        // Insertion sort by descending score keeps equal scores in input order.
        std::vector<const DetectionRecord*> d_sorted;
        for (const auto* d : d_list) {
          auto pos = d_sorted.end();
          while (pos != d_sorted.begin() && (*(pos - 1))->score < d->score) --pos;
          d_sorted.insert(pos, d);
        }
        if (d_sorted.size() > 100) d_sorted.resize(100);

        for (int t = 0; t < 10; ++t) {
          const double thr = 0.5 + 0.05 * t;
          std::vector<bool> g_taken(g_sorted.size(), false);
          std::vector<Outcome> out;
          for (const auto* d : d_sorted) {
            const auto dr = region(*d);
            int m = -1;
            for (int pass = 0; pass < 2 && m < 0; ++pass) {
              double best = std::min(thr, 1 - 1e-10);
              for (std::size_t g = 0; g < g_sorted.size(); ++g) {
                if (g_taken[g] || g_ign[g] != (pass == 1)) continue;
                const double iou = PixelIou(dr, region(*g_sorted[g]));
                if (iou >= best) {
                  best = iou;
                  m = static_cast<int>(g);
                }
              }
            }
            Outcome o{d->score, m >= 0, false};
            if (m >= 0) {
              g_taken[static_cast<std::size_t>(m)] = true;
              o.ignored = g_ign[static_cast<std::size_t>(m)];
            } else {
              const double area = static_cast<double>(PixelCount(dr));
              o.ignored = area < areas[a][0] || area >= areas[a][1];
            }
            out.push_back(o);
          }
          outcomes[{a, c, t, img}] = out;
        }
      }
    }
  }

  // Returns {precision, recall}, -1 for undefined.
  auto accumulate = [&](int a, const std::string& c, int t, std::size_t max_det) {
    std::vector<Outcome> all;
    int n_gt = 0;
    for (const auto& img : images) {
      n_gt += counted[{a, c, img}];
      const auto& o = outcomes[{a, c, t, img}];
      for (std::size_t i = 0; i < o.size() && i < max_det; ++i) {
        auto pos = all.end();
        while (pos != all.begin() && (pos - 1)->score < o[i].score) --pos;
        all.insert(pos, o[i]);
      }
    }
    if (n_gt == 0) {
      // A class the ground truth knows is skipped in buckets where it has no
      // gt; a class it has never seen turns every detection into an error.
      if (gt_classes.count(c)) return std::pair{-1.0, -1.0};
      for (const auto& o : all) {
        if (!o.ignored) return std::pair{0.0, -1.0};
      }
      return std::pair{-1.0, -1.0};
    }
    std::vector<double> rc, pr;
    int tp = 0, fp = 0;
    for (const auto& o : all) {
      if (o.ignored) continue;
      (o.matched ? tp : fp) += 1;
      rc.push_back(static_cast<double>(tp) / n_gt);
      pr.push_back(static_cast<double>(tp) / (tp + fp));
    }
    double sum = 0;
    for (int r = 0; r <= 100; ++r) {
      const double thr = r * 0.01;
      double best = 0;
      for (std::size_t i = 0; i < rc.size(); ++i) {
        if (rc[i] >= thr) best = std::max(best, pr[i]);
      }
      sum += best;
    }
    return std::pair{sum / 101.0, rc.empty() ? 0.0 : rc.back()};
  };

  auto mean = [&](int a, std::size_t max_det, int t0, int t1, bool recall) {
    double sum = 0;
    int n = 0;
    for (int t = t0; t < t1; ++t) {
      for (const auto& c : classes) {
        const auto [p, r] = accumulate(a, c, t, max_det);
        const double v = recall ? r : p;
        if (v > -1) {
          sum += v;
          ++n;
        }
      }
    }
    return n ? sum / n : -1.0;
  };

  RefCocoResult res;
  res.values = {mean(0, 100, 0, 10, false), mean(0, 100, 0, 1, false), mean(0, 100, 5, 6, false),
                mean(1, 100, 0, 10, false), mean(2, 100, 0, 10, false), mean(0, 1, 0, 10, true),
                mean(0, 10, 0, 10, true),   mean(0, 100, 0, 10, true),  mean(1, 100, 0, 10, true),
                mean(2, 100, 0, 10, true)};
  return res;
}

// Random tiny scene: up to 4 images (each with gt), 6 gt objects, 8 detections over 3
// classes. Detections are jittered copies of gt or free rectangles, with
// scores on a coarse grid so ties occur.
struct TinyScene {
  std::vector<DetectionRecord> gts, dets;
};

template <typename Rng>
TinyScene RandomTinyScene(Rng& rng, std::uint32_t size = 160) {
  TinyScene s;
  auto uni = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  const int n_gt = uni(1, 6), n_images = std::min(uni(1, 4), n_gt), n_det = uni(0, 8);
  auto rect = [&](int x, int y, int w, int h) {
    x = std::clamp(x, 0, int(size) - 1);
    y = std::clamp(y, 0, int(size) - 1);
    w = std::clamp(w, 1, int(size) - x);
    h = std::clamp(h, 1, int(size) - y);
    return BBox{double(x), double(y), double(w), double(h)};
  };
  auto make = [&](const std::string& img, const std::string& label, double score, const BBox& b) {
    DetectionRecord r;
    r.image_id = img;
    r.label = label;
    r.score = score;
    r.mask = SegmentMask::Encode(size, size, BoxBitmap(b, size, size));
    r.bbox = MaskToBBox(r.mask);
    return r;
  };
  for (int g = 0; g < n_gt; ++g) {
    const auto img = "img" + std::to_string(g < n_images ? g : uni(0, n_images - 1));
    const int side = uni(0, 2) == 0 ? uni(4, 30) : uni(30, 130);
    s.gts.push_back(make(img, "c" + std::to_string(uni(0, 2)), 1.0,
                         rect(uni(0, 150), uni(0, 150), side + uni(-3, 3), side + uni(-3, 3))));
  }
  for (int d = 0; d < n_det; ++d) {
    const double score = uni(1, 10) / 10.0;
    if (uni(0, 3) > 0) {
      const auto& g = s.gts[static_cast<std::size_t>(uni(0, n_gt - 1))];
      const int j = uni(0, 3) == 0 ? 12 : 3;
      const auto label = uni(0, 5) == 0 ? "c" + std::to_string(uni(0, 3)) : g.label;
      s.dets.push_back(make(g.image_id, label, score,
                            rect(int(g.bbox.x) + uni(-j, j), int(g.bbox.y) + uni(-j, j),
                                 int(g.bbox.w) + uni(-j, j), int(g.bbox.h) + uni(-j, j))));
    } else {
      const int side = uni(4, 120);
      s.dets.push_back(make("img" + std::to_string(uni(0, n_images - 1)), "c" + std::to_string(uni(0, 2)),
                            score, rect(uni(0, 150), uni(0, 150), side, side + uni(-5, 5))));
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Matching by exhaustive similarity table.

inline double RefCosine(const Vector& x, const Vector& y) {
  double dot = 0, nx = 0, ny = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    dot += x[i] * y[i];
    nx += x[i] * x[i];
    ny += y[i] * y[i];
  }
  return dot / (std::sqrt(nx) * std::sqrt(ny));
}

inline Vector RowMean(const Matrix& m, const std::vector<std::size_t>& rows) {
  Vector c = Vector::Zero(m.cols());
  for (auto r : rows) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) c[j] += m(static_cast<Eigen::Index>(r), j);
  }
  return c / static_cast<double>(rows.size());
}

inline MatchResult ReferenceMatch(const std::vector<ObjectRecord>& gallery, const Matrix& embeddings,
                                  GalleryMode mode, const QueryInput& q, std::size_t k, double theta) {
  std::vector<std::size_t> all(static_cast<std::size_t>(q.rows.rows()));
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const Vector query = RowMean(q.rows, all);
  std::vector<std::pair<double, std::string>> table;
  for (const auto& obj : gallery) {
    double s;
    if (mode == GalleryMode::kCentroid) {
      s = RefCosine(query, RowMean(embeddings, obj.image_refs));
    } else {
      s = -2;
      for (auto r : obj.image_refs) s = std::max(s, RefCosine(query, embeddings.row(static_cast<Eigen::Index>(r)).transpose()));
    }
    table.emplace_back(s, obj.object_id);
  }
  std::sort(table.begin(), table.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  MatchResult r;
  r.query_id = q.query_id;
  for (std::size_t i = 0; i < table.size() && i < k; ++i) r.ranked.emplace_back(table[i].second, table[i].first);
  r.accepted = !r.ranked.empty() && r.ranked[0].second >= theta;
  return r;
}

// ---------------------------------------------------------------------------
// Finite differences.

inline bool CloseRel(double analytic, double numeric, double rel_tol, double abs_floor = 1e-8) {
  return std::abs(analytic - numeric) <= rel_tol * std::max(std::abs(analytic), std::abs(numeric)) + abs_floor;
}

// Central difference of `f` with respect to every parameter of `enc`, in the
// layout of ParamGrads.
inline ParamGrads NumericGrads(Encoder enc, const std::function<double(const Encoder&)>& f, double h = 1e-6) {
  ParamGrads out;
  for (std::size_t l = 0; l < enc.layers.size(); ++l) {
    Layer g{Matrix::Zero(enc.layers[l].weight.rows(), enc.layers[l].weight.cols()),
            Vector::Zero(enc.layers[l].bias.size())};
    auto probe = [&](double& p) {
      const double saved = p;
      p = saved + h;
      const double up = f(enc);
      p = saved - h;
      const double down = f(enc);
      p = saved;
      return (up - down) / (2 * h);
    };
    for (Eigen::Index i = 0; i < g.weight.size(); ++i) g.weight.data()[i] = probe(enc.layers[l].weight.data()[i]);
    for (Eigen::Index i = 0; i < g.bias.size(); ++i) g.bias[i] = probe(enc.layers[l].bias[i]);
    out.push_back(std::move(g));
  }
  return out;
}

// Worst violation of CloseRel over all parameters; <= 1 means all pass.
inline double GradMismatch(const ParamGrads& analytic, const ParamGrads& numeric, double rel_tol,
                           double abs_floor = 1e-8) {
  double worst = 0;
  auto check = [&](double a, double n) {
    const double allowed = rel_tol * std::max(std::abs(a), std::abs(n)) + abs_floor;
    worst = std::max(worst, std::abs(a - n) / allowed);
  };
  for (std::size_t l = 0; l < analytic.size(); ++l) {
    for (Eigen::Index i = 0; i < analytic[l].weight.size(); ++i) {
      check(analytic[l].weight.data()[i], numeric[l].weight.data()[i]);
    }
    for (Eigen::Index i = 0; i < analytic[l].bias.size(); ++i) check(analytic[l].bias[i], numeric[l].bias[i]);
  }
  return worst;
}

}  // namespace ctlid::testing
