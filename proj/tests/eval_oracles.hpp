// Copyright 2026 The BLO-Inst Authors
// SPDX-License-Identifier: Apache-2.0

// Exhaustive matching oracle and random mask instances for the evaluator.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

#include "bloinst/eval.hpp"
#include "bloinst/rng.hpp"

namespace bloinst::testing {


using Mask = std::vector<std::uint8_t>;

// side x side mask with the given pixels set.
inline Mask mask_of(std::size_t side, std::initializer_list<std::size_t> on) {
    Mask m(side * side, 0);
    for (auto i : on) {
        m[i] = 1;
    }
    return m;
}

struct BruteResult {
    std::size_t tp = 0;
    double total_iou = 0.0;
    std::vector<bool> gt_matched;
};

// Exhaustive search over injective pred -> gt assignments with IoU >= t,
// maximizing the TP count and then the summed IoU.
inline BruteResult brute_force(const std::vector<std::vector<double>>& iou, std::size_t n_gt, double t) {
    BruteResult best;
    best.gt_matched.assign(n_gt, false);
    std::vector<int> assign(iou.size(), -1);
    std::vector<bool> used(n_gt, false);
    auto recurse = [&](auto&& self, std::size_t p, std::size_t tp, double total) -> void {
        if (p == iou.size()) {
            if (tp > best.tp || (tp == best.tp && total > best.total_iou + 1e-15)) {
                best.tp = tp;
                best.total_iou = total;
                best.gt_matched = used;
            }
            return;
        }
        self(self, p + 1, tp, total);
        for (std::size_t g = 0; g < n_gt; ++g) {
            if (!used[g] && iou[p][g] >= t) {
                used[g] = true;
                self(self, p + 1, tp + 1, total + iou[p][g]);
                used[g] = false;
            }
        }
    };
    recurse(recurse, 0, 0, 0.0);
    return best;
}

// Random rectangle on a side x side grid.
inline Mask random_rect(Rng& rng, std::size_t side) {
    const std::size_t x0 = rng.below(side), y0 = rng.below(side);
    const std::size_t x1 = x0 + 1 + rng.below(side - x0), y1 = y0 + 1 + rng.below(side - y0);
    Mask m(side * side, 0);
    for (std::size_t y = y0; y < y1; ++y) {
        for (std::size_t x = x0; x < x1; ++x) {
            m[y * side + x] = 1;
        }
    }
    return m;
}

// Ground-truth instances with disjoint visible masks, as instance
// segmentation produces: later rectangles occlude earlier ones.
inline std::vector<Mask> random_instances(Rng& rng, std::size_t side, std::size_t count) {
    std::vector<Mask> masks;
    std::vector<int> owner(side * side, -1);
    for (std::size_t k = 0; k < count; ++k) {
        const Mask r = random_rect(rng, side);
        for (std::size_t i = 0; i < r.size(); ++i) {
            if (r[i]) {
                owner[i] = static_cast<int>(k);
            }
        }
    }
    for (std::size_t k = 0; k < count; ++k) {
        Mask m(side * side, 0);
        bool any = false;
        for (std::size_t i = 0; i < m.size(); ++i) {
            if (owner[i] == static_cast<int>(k)) {
                m[i] = 1;
                any = true;
            }
        }
        if (any) {
            masks.push_back(std::move(m));
        }
    }
    return masks;
}

// Prediction near a ground truth (grown or shrunk by a pixel) or random.
inline Mask random_prediction(Rng& rng, const std::vector<Mask>& gts, std::size_t side) {
    if (gts.empty() || rng.uniform() < 0.3) {
        return random_rect(rng, side);
    }
    Mask m = gts[rng.below(gts.size())];
    for (int flips = 0; flips < 4; ++flips) {
        m[rng.below(m.size())] ^= 1;
    }
    if (std::none_of(m.begin(), m.end(), [](auto v) { return v != 0; })) {
        m[0] = 1;
    }
    return m;
}


struct MatcherAgreement {
    std::size_t comparisons = 0;
    std::size_t tp_mismatches = 0;
    std::size_t gt_set_mismatches = 0;
    // Same TP count and matched gts, but a different prediction took a gt.
    std::size_t label_differences = 0;
};

// Greedy matcher vs. the exhaustive oracle on random instances with at most
// 4 predictions and 4 ground truths, at every IoU threshold.
inline MatcherAgreement compare_matcher_with_oracle(Rng& rng, int trials) {
    MatcherAgreement out;
    for (int trial = 0; trial < trials; ++trial) {
        const std::size_t side = 4 + rng.below(3);
        const std::vector<Mask> gts = random_instances(rng, side, 1 + rng.below(4));
        const std::size_t n_pred = rng.below(5);
        std::vector<double> conf;
        std::vector<std::vector<double>> iou;
        for (std::size_t p = 0; p < n_pred; ++p) {
            const Mask m = random_prediction(rng, gts, side);
            conf.push_back(rng.uniform());
            std::vector<double> row;
            for (const auto& g : gts) {
                row.push_back(eval::mask_iou(m, g));
            }
            iou.push_back(std::move(row));
        }
        for (double t : eval::iou_thresholds()) {
            const eval::MatchResult greedy = eval::match_instances(conf, iou, t);
            const BruteResult oracle = brute_force(iou, gts.size(), t);
            ++out.comparisons;
            const auto tp = static_cast<std::size_t>(std::count(greedy.tp.begin(), greedy.tp.end(), true));
            out.tp_mismatches += tp != oracle.tp;
            out.gt_set_mismatches += n_pred > 0 && greedy.gt_matched != oracle.gt_matched;
            double total = 0.0;
            for (std::size_t p = 0; p < n_pred; ++p) {
                if (greedy.tp[p]) {
                    total += iou[p][static_cast<std::size_t>(greedy.matched_gt[p])];
                }
            }
            out.label_differences += std::abs(total - oracle.total_iou) > 1e-12;
        }
    }
    return out;
}

}  // namespace bloinst::testing
