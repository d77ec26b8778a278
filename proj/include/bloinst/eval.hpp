// Copyright 2026 The BLO-Inst Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace bloinst::eval {

// A binary H x W mask with its class. Ground truth ignores `confidence`.
struct MaskInstance {
    std::vector<std::uint8_t> mask;
    int class_id = 0;
    double confidence = 1.0;
};

// |a & b| / |a | b|. Both empty is undefined and rejected.
double mask_iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);

struct MatchResult {
    std::vector<bool> tp;          // per prediction, in input order
    std::vector<bool> gt_matched;  // per ground truth
    std::vector<int> matched_gt;   // per prediction, -1 when false positive
};

// Greedy matching. iou[p][g] holds prediction/ground-truth overlaps; with no
// predictions the table carries no ground-truth count, so gt_matched is empty.
MatchResult match_instances(std::span<const double> confidences, const std::vector<std::vector<double>>& iou,
                            double iou_threshold);
MatchResult match_instances(std::span<const MaskInstance> preds, std::span<const MaskInstance> gts,
                            double iou_threshold);

// All-point interpolated AP of a confidence-ordered TP/FP sequence.
double average_precision(const std::vector<bool>& tp_in_order, std::size_t n_gt);

// 0.50, 0.55, ..., 0.95
std::vector<double> iou_thresholds();

struct APReport {
    double map = 0.0;
    double ap50 = 0.0;
    double ap75 = 0.0;
    std::vector<double> per_threshold;  // classwise means
    std::vector<double> per_class;      // threshold means; NaN for excluded classes
    std::size_t n_pred = 0;
    std::size_t n_gt = 0;
};

// preds[i] and gts[i] belong to image i. Predictions with empty masks are
// dropped. Classes without ground truth and without predictions are excluded
// from the classwise mean.
APReport evaluate(const std::vector<std::vector<MaskInstance>>& preds,
                  const std::vector<std::vector<MaskInstance>>& gts, std::size_t num_classes);

nlohmann::json to_json(const APReport& report, std::span<const std::string> class_names);

}  // namespace bloinst::eval
