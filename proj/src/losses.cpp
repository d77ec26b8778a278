// Copyright 2026 The BLO-Inst Authors
// SPDX-License-Identifier: Apache-2.0

#include "bloinst/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "bloinst/error.hpp"

namespace bloinst::loss {

using namespace ad;

namespace {

std::string box_str(const Box& b) {
    std::ostringstream os;
    os << '[' << b.x1 << ',' << b.y1 << ',' << b.x2 << ',' << b.y2 << ']';
    return os.str();
}

Tensor coord(const Tensor& box, std::size_t i) { return slice(box, 0, i, i + 1); }

}  // namespace

Box Box::from(const Tensor& xyxy) {
    if (xyxy.size() != 4) {
        throw invalid_argument("box tensor must hold 4 values, got shape " + shape_str(xyxy.shape()));
    }
    return Box{xyxy[0], xyxy[1], xyxy[2], xyxy[3]};
}

double box_iou(const Box& a, const Box& b) {
    const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

void validate(const LossWeights& w) {
    if (!(w.box >= 0.0 && w.obj >= 0.0 && w.cls >= 0.0 && w.seg >= 0.0)) {
        throw invalid_argument("loss weights must be nonnegative");
    }
}

void validate(const FocalParams& f) {
    if (!(f.alpha > 0.0 && f.alpha <= 1.0)) {
        throw invalid_argument("focal alpha must lie in (0, 1], got " + std::to_string(f.alpha));
    }
    if (!(f.gamma >= 0.0)) {
        throw invalid_argument("focal gamma must be nonnegative, got " + std::to_string(f.gamma));
    }
}

LossValues LossValues::of(const LossBreakdown& b) {
    return LossValues{b.box.item(), b.obj.item(), b.cls.item(), b.seg.item(), b.total.item()};
}

bool LossValues::finite() const {
    return std::isfinite(box) && std::isfinite(obj) && std::isfinite(cls) && std::isfinite(seg) &&
           std::isfinite(total);
}

Tensor ciou_loss(const Tensor& box_pred, const Tensor& box_gt) {
    const Box p = Box::from(box_pred);
    const Box g = Box::from(box_gt);
    if (!(p.width() > 0.0 && p.height() > 0.0)) {
        throw invalid_argument("ciou_loss: degenerate predicted box " + box_str(p));
    }
    if (!(g.width() > 0.0 && g.height() > 0.0)) {
        throw invalid_argument("ciou_loss: degenerate target box " + box_str(g));
    }
    const Tensor px1 = coord(box_pred, 0), py1 = coord(box_pred, 1);
    const Tensor px2 = coord(box_pred, 2), py2 = coord(box_pred, 3);
    const Tensor gx1 = coord(box_gt, 0), gy1 = coord(box_gt, 1);
    const Tensor gx2 = coord(box_gt, 2), gy2 = coord(box_gt, 3);

    const Tensor pw = sub(px2, px1), ph = sub(py2, py1);
    const Tensor gw = sub(gx2, gx1), gh = sub(gy2, gy1);

    const Tensor iw = relu(sub(minimum(px2, gx2), maximum(px1, gx1)));
    const Tensor ih = relu(sub(minimum(py2, gy2), maximum(py1, gy1)));
    const Tensor inter = mul(iw, ih);
    const Tensor uni = sub(add(mul(pw, ph), mul(gw, gh)), inter);
    const Tensor iou = div(inter, uni);

    // Squared distance between centers, from corner sums.
    const Tensor dx = scale(sub(add(px1, px2), add(gx1, gx2)), 0.5);
    const Tensor dy = scale(sub(add(py1, py2), add(gy1, gy2)), 0.5);
    const Tensor rho2 = add(mul(dx, dx), mul(dy, dy));
    const Tensor cw = sub(maximum(px2, gx2), minimum(px1, gx1));
    const Tensor ch = sub(maximum(py2, gy2), minimum(py1, gy1));
    const Tensor c2 = add(mul(cw, cw), mul(ch, ch));

    const Tensor dtheta = sub(atan(div(gw, gh)), atan(div(pw, ph)));
    const Tensor v = scale(mul(dtheta, dtheta), 4.0 / (std::numbers::pi * std::numbers::pi));
    // v / ((1 - IoU) + v); the tiny offset only matters when both terms vanish.
    const Tensor alpha_v = div(v, add_scalar(add(affine(iou, -1.0, 1.0), v), 1e-16));

    const Tensor ciou = sub(sub(iou, div(rho2, c2)), mul(alpha_v, v));
    return affine(ciou, -1.0, 1.0);
}

Tensor focal_bce(const Tensor& logits, const Tensor& targets, const FocalParams& params) {
    validate(params);
    if (logits.shape() != targets.shape()) {
        throw invalid_argument("focal_bce: logits " + shape_str(logits.shape()) + " vs targets " +
                               shape_str(targets.shape()));
    }
    std::vector<double> sign(targets.size());
    for (std::size_t i = 0; i < sign.size(); ++i) {
        const double t = targets[i];
        if (t != 0.0 && t != 1.0) {
            throw invalid_argument("focal_bce: targets must be 0 or 1, got " + std::to_string(t));
        }
        sign[i] = t == 1.0 ? 1.0 : -1.0;
    }
    // z = +-logit so that p_t = sigmoid(z), log p_t = -softplus(-z),
    // and (1 - p_t)^gamma = exp(-gamma * softplus(z)).
    const Tensor z = mul(logits, Tensor(logits.shape(), std::move(sign)));
    Tensor per_element = softplus(neg(z));
    if (params.gamma != 0.0) {
        per_element = mul(exp(scale(softplus(z), -params.gamma)), per_element);
    }
    return scale(mean(per_element), params.alpha);
}

PixelWindow crop_window(const Box& box, std::size_t height, std::size_t width) {
    auto clip = [](double v, std::size_t hi) {
        if (!(v > 0.0)) {
            return std::size_t{0};
        }
        return std::min(hi, static_cast<std::size_t>(v));
    };
    PixelWindow w;
    w.col0 = clip(std::floor(box.x1), width);
    w.col1 = clip(std::ceil(box.x2), width);
    w.row0 = clip(std::floor(box.y1), height);
    w.row1 = clip(std::ceil(box.y2), height);
    return w;
}

Tensor masked_seg_bce(const Tensor& mask_logits, const Tensor& mask_gt, const Box& box) {
    if (mask_logits.rank() != 2 || mask_logits.shape() != mask_gt.shape()) {
        throw invalid_argument("masked_seg_bce: logits " + shape_str(mask_logits.shape()) + " vs mask " +
                               shape_str(mask_gt.shape()));
    }
    const PixelWindow w = crop_window(box, mask_logits.shape()[0], mask_logits.shape()[1]);
    if (w.empty()) {
        throw invalid_argument("masked_seg_bce: box " + box_str(box) + " covers no pixels of a " +
                               shape_str(mask_logits.shape()) + " mask");
    }
    return window_seg_bce(slice(slice(mask_logits, 0, w.row0, w.row1), 1, w.col0, w.col1), mask_gt, w);
}

Tensor window_seg_bce(const Tensor& window_logits, const Tensor& mask_gt, const PixelWindow& window) {
    if (window.empty() || mask_gt.rank() != 2 || window.row1 > mask_gt.shape()[0] ||
        window.col1 > mask_gt.shape()[1]) {
        throw invalid_argument("window_seg_bce: window does not fit a " + shape_str(mask_gt.shape()) + " mask");
    }
    const Shape shape{window.row1 - window.row0, window.col1 - window.col0};
    if (window_logits.shape() != shape) {
        throw invalid_argument("window_seg_bce: logits " + shape_str(window_logits.shape()) + " for window " +
                               shape_str(shape));
    }
    const Tensor t = slice(slice(mask_gt.detach(), 0, window.row0, window.row1), 1, window.col0, window.col1);
    // BCE with logits: softplus(x) - t x.
    return mean(sub(softplus(window_logits), mul(window_logits, t)));
}

std::vector<int> assign_targets(const GridGeometry& geometry, std::span<const Box> gt_boxes) {
    const std::size_t g = geometry.grid;
    std::vector<int> cells(g * g, -1);
    auto cell_of = [&](double v) {
        const double c = std::floor(v / geometry.stride);
        if (c < 0.0) {
            return std::size_t{0};
        }
        return std::min(g - 1, static_cast<std::size_t>(c));
    };
    for (std::size_t i = 0; i < gt_boxes.size(); ++i) {
        const Box& b = gt_boxes[i];
        const std::size_t cell = cell_of(b.center_y()) * g + cell_of(b.center_x());
        const int holder = cells[cell];
        // Larger area wins; equal areas keep the lower index already placed.
        if (holder < 0 || b.area() > gt_boxes[static_cast<std::size_t>(holder)].area()) {
            cells[cell] = static_cast<int>(i);
        }
    }
    return cells;
}

LossBreakdown total_loss(const GridGeometry& geometry, std::span<const CellPredictions> predictions,
                         const PromptSegmenter& segmenter, std::span<const ImageTargets> targets,
                         const LossWeights& weights, const FocalParams& focal) {
    validate(weights);
    if (predictions.size() != targets.size() || predictions.empty()) {
        throw invalid_argument("total_loss: " + std::to_string(predictions.size()) + " predictions for " +
                               std::to_string(targets.size()) + " targets");
    }
    const std::size_t cells = geometry.grid * geometry.grid;

    std::vector<Tensor> obj_logits;
    std::vector<double> obj_targets;
    std::vector<Tensor> box_terms;
    std::vector<Tensor> cls_rows;
    std::vector<double> cls_targets;
    std::vector<Tensor> seg_terms;

    for (std::size_t b = 0; b < predictions.size(); ++b) {
        const CellPredictions& pred = predictions[b];
        const ImageTargets& gt = targets[b];
        if (pred.boxes.shape() != Shape{cells, 4} || pred.obj_logits.shape() != Shape{cells, 1}) {
            throw invalid_argument("total_loss: predictions " + shape_str(pred.boxes.shape()) +
                                   " do not match a grid of " + std::to_string(cells) + " cells");
        }
        if (gt.classes.size() != gt.boxes.size() || (segmenter && gt.masks.size() != gt.boxes.size())) {
            throw invalid_argument("total_loss: inconsistent targets for image " + std::to_string(b));
        }
        const std::size_t num_classes = pred.cls_logits.shape()[1];
        const std::vector<int> assignment = assign_targets(geometry, gt.boxes);

        obj_logits.push_back(pred.obj_logits);
        for (std::size_t c = 0; c < cells; ++c) {
            obj_targets.push_back(assignment[c] >= 0 ? 1.0 : 0.0);
        }
        for (std::size_t c = 0; c < cells; ++c) {
            if (assignment[c] < 0) {
                continue;
            }
            const auto k = static_cast<std::size_t>(assignment[c]);
            const Tensor box = reshape(slice(pred.boxes, 0, c, c + 1), {4});
            box_terms.push_back(ciou_loss(box, gt.boxes[k].tensor()));

            cls_rows.push_back(slice(pred.cls_logits, 0, c, c + 1));
            const int cls = gt.classes[k];
            if (cls < 0 || static_cast<std::size_t>(cls) >= num_classes) {
                throw invalid_argument("total_loss: class id " + std::to_string(cls) + " outside " +
                                       std::to_string(num_classes) + " classes");
            }
            for (std::size_t j = 0; j < num_classes; ++j) {
                cls_targets.push_back(static_cast<int>(j) == cls ? 1.0 : 0.0);
            }
            if (segmenter) {
                const Tensor& mask = gt.masks[k];
                const PixelWindow w = crop_window(Box::from(box), mask.shape()[0], mask.shape()[1]);
                if (w.empty()) {
                    throw invalid_argument("total_loss: predicted box " + box_str(Box::from(box)) +
                                           " covers no pixels");
                }
                seg_terms.push_back(window_seg_bce(segmenter(b, box, w), mask, w));
            }
        }
    }

    auto mean_of = [](const std::vector<Tensor>& terms) {
        if (terms.empty()) {
            return Tensor::scalar(0.0);
        }
        Tensor acc = terms[0];
        for (std::size_t i = 1; i < terms.size(); ++i) {
            acc = add(acc, terms[i]);
        }
        return scale(acc, 1.0 / static_cast<double>(terms.size()));
    };

    LossBreakdown out;
    const Tensor all_obj = concat(obj_logits, 0);
    // Focal sum over all cells normalized by the positive count (at least 1).
    const auto positives = static_cast<double>(std::count(obj_targets.begin(), obj_targets.end(), 1.0));
    const double obj_norm = static_cast<double>(obj_targets.size()) / std::max(positives, 1.0);
    out.obj = scale(focal_bce(all_obj, Tensor(all_obj.shape(), std::move(obj_targets)), focal), obj_norm);
    out.box = mean_of(box_terms);
    if (cls_rows.empty()) {
        out.cls = Tensor::scalar(0.0);
    } else {
        const Tensor rows = concat(cls_rows, 0);
        // Summed over classes, averaged over positive cells.
        const double classes = static_cast<double>(rows.shape()[1]);
        out.cls = scale(focal_bce(rows, Tensor(rows.shape(), std::move(cls_targets)), focal), classes);
    }
    out.seg = mean_of(seg_terms);
    out.total = add(add(add(scale(out.box, weights.box), scale(out.obj, weights.obj)), scale(out.cls, weights.cls)),
                    scale(out.seg, weights.seg));
    return out;
}

}  // namespace bloinst::loss
