// Copyright 2026 The BLO-Inst Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "bloinst/adcore.hpp"

namespace bloinst::loss {

using ad::Tensor;

// Axis-aligned box in image pixels, corners (x1, y1) < (x2, y2).
struct Box {
    double x1 = 0.0;
    double y1 = 0.0;
    double x2 = 0.0;
    double y2 = 0.0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
    double center_x() const { return 0.5 * (x1 + x2); }
    double center_y() const { return 0.5 * (y1 + y2); }

    static Box from(const Tensor& xyxy);
    Tensor tensor() const { return Tensor::vector({x1, y1, x2, y2}); }

    friend bool operator==(const Box&, const Box&) = default;
};

double box_iou(const Box& a, const Box& b);

struct LossWeights {
    double box = 0.3;
    double obj = 0.7;
    double cls = 0.3;
    double seg = 0.7;
};

// Balance factor and modulation exponent of the focal reweighting.
struct FocalParams {
    double alpha = 0.25;
    double gamma = 2.0;
};

void validate(const LossWeights& weights);
void validate(const FocalParams& focal);

struct LossBreakdown {
    Tensor box;
    Tensor obj;
    Tensor cls;
    Tensor seg;
    Tensor total;
};

// Plain values of a breakdown, in the order box, obj, cls, seg, total.
struct LossValues {
    double box = 0.0;
    double obj = 0.0;
    double cls = 0.0;
    double seg = 0.0;
    double total = 0.0;

    static LossValues of(const LossBreakdown& b);
    bool finite() const;
};

// 1 - CIoU for [4]-shaped xyxy boxes. Differentiable in both arguments; the
// aspect-ratio trade-off weight is differentiated too.
Tensor ciou_loss(const Tensor& box_pred, const Tensor& box_gt);

// Mean over elements of -alpha (1 - p_t)^gamma log(p_t), computed in log space.
Tensor focal_bce(const Tensor& logits, const Tensor& targets, const FocalParams& params);

// Integer pixel window [col0, col1) x [row0, row1) covered by a box after
// rounding outward and clipping to the image.
struct PixelWindow {
    std::size_t col0 = 0;
    std::size_t col1 = 0;
    std::size_t row0 = 0;
    std::size_t row1 = 0;

    bool empty() const { return col0 >= col1 || row0 >= row1; }
    std::size_t count() const { return empty() ? 0 : (col1 - col0) * (row1 - row0); }
};

PixelWindow crop_window(const Box& box, std::size_t height, std::size_t width);

// Pixelwise BCE-with-logits averaged over the pixels inside `box`.
// logits and mask_gt are [H, W]. Pixels outside the crop get zero gradient.
Tensor masked_seg_bce(const Tensor& mask_logits, const Tensor& mask_gt, const Box& box);

// Same loss when only the window's logits [rows, cols] were computed.
Tensor window_seg_bce(const Tensor& window_logits, const Tensor& mask_gt, const PixelWindow& window);

// Grid cell for each instance; -1 marks background.
struct GridGeometry {
    std::size_t grid = 8;
    double stride = 8.0;
};

std::vector<int> assign_targets(const GridGeometry& geometry, std::span<const Box> gt_boxes);

// Ground truth for one image.
struct ImageTargets {
    std::vector<Box> boxes;
    std::vector<int> classes;
    std::vector<Tensor> masks;  // [H, W] of 0/1
};

// Detector outputs for one image, one row per grid cell (row-major).
struct CellPredictions {
    Tensor boxes;       // [G*G, 4] decoded xyxy
    Tensor obj_logits;  // [G*G, 1]
    Tensor cls_logits;  // [G*G, C]
};

// Mask logits of `image` prompted with a [4] xyxy box, restricted to `window`
// ([rows, cols]); the window is the box's crop.
using PromptSegmenter =
    std::function<Tensor(std::size_t image, const Tensor& box_prompt, const PixelWindow& window)>;

LossBreakdown total_loss(const GridGeometry& geometry, std::span<const CellPredictions> predictions,
                         const PromptSegmenter& segmenter, std::span<const ImageTargets> targets,
                         const LossWeights& weights, const FocalParams& focal);

}  // namespace bloinst::loss
