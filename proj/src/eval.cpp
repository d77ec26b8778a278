// Copyright 2026 The BLO-Inst Authors
// SPDX-License-Identifier: Apache-2.0

#include "bloinst/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "bloinst/error.hpp"

namespace bloinst::eval {

double mask_iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
    if (a.size() != b.size()) {
        throw invalid_argument("mask_iou: masks of " + std::to_string(a.size()) + " and " + std::to_string(b.size()) +
                               " pixels");
    }
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool x = a[i] != 0, y = b[i] != 0;
        inter += x && y;
        uni += x || y;
    }
    if (uni == 0) {
        throw invalid_argument("mask_iou: both masks are empty");
    }
    return static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

// Indices sorted by confidence descending, ties by lower index.
std::vector<std::size_t> confidence_order(std::span<const double> confidences) {
    std::vector<std::size_t> order(confidences.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return confidences[a] > confidences[b]; });
    return order;
}

}  // namespace

MatchResult match_instances(std::span<const double> confidences, const std::vector<std::vector<double>>& iou,
                            double iou_threshold) {
    const std::size_t n_pred = confidences.size();
    if (iou.size() != n_pred) {
        throw invalid_argument("match_instances: IoU table has " + std::to_string(iou.size()) + " rows for " +
                               std::to_string(n_pred) + " predictions");
    }
    const std::size_t n_gt = n_pred == 0 ? 0 : iou[0].size();
    MatchResult r;
    r.tp.assign(n_pred, false);
    r.matched_gt.assign(n_pred, -1);
    const std::size_t gts = n_gt;
    r.gt_matched.assign(gts, false);
    for (std::size_t p : confidence_order(confidences)) {
        int best = -1;
        double best_iou = -1.0;
        for (std::size_t g = 0; g < gts; ++g) {
            if (r.gt_matched[g] || iou[p][g] < iou_threshold) {
                continue;
            }
            if (iou[p][g] > best_iou) {
                best_iou = iou[p][g];
                best = static_cast<int>(g);
            }
        }
        if (best >= 0) {
            r.tp[p] = true;
            r.matched_gt[p] = best;
            r.gt_matched[static_cast<std::size_t>(best)] = true;
        }
    }
    return r;
}

MatchResult match_instances(std::span<const MaskInstance> preds, std::span<const MaskInstance> gts,
                            double iou_threshold) {
    std::vector<double> conf;
    std::vector<std::vector<double>> iou;
    for (const auto& p : preds) {
        conf.push_back(p.confidence);
        std::vector<double> row;
        for (const auto& g : gts) {
            row.push_back(mask_iou(p.mask, g.mask));
        }
        iou.push_back(std::move(row));
    }
    MatchResult r = match_instances(conf, iou, iou_threshold);
    r.gt_matched.resize(gts.size(), false);
    return r;
}

double average_precision(const std::vector<bool>& tp_in_order, std::size_t n_gt) {
    if (n_gt == 0) {
        return 0.0;
    }
    const std::size_t n = tp_in_order.size();
    std::vector<double> precision(n), recall(n);
    std::size_t tp = 0;
    for (std::size_t i = 0; i < n; ++i) {
        tp += tp_in_order[i];
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        recall[i] = static_cast<double>(tp) / static_cast<double>(n_gt);
    }
    // Precision envelope: best precision at any equal or higher recall.
    for (std::size_t i = n; i-- > 1;) {
        precision[i - 1] = std::max(precision[i - 1], precision[i]);
    }
    double ap = 0.0;
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return ap;
}

std::vector<double> iou_thresholds() {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) {
        t.push_back(static_cast<double>(50 + 5 * i) / 100.0);
    }
    return t;
}

APReport evaluate(const std::vector<std::vector<MaskInstance>>& preds,
                  const std::vector<std::vector<MaskInstance>>& gts, std::size_t num_classes) {
    if (preds.size() != gts.size()) {
        throw invalid_argument("evaluate: predictions for " + std::to_string(preds.size()) + " images, ground truth for " +
                               std::to_string(gts.size()));
    }
    const std::vector<double> thresholds = iou_thresholds();
    APReport report;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    std::vector<std::vector<double>> ap(num_classes, std::vector<double>(thresholds.size(), nan));

    for (std::size_t c = 0; c < num_classes; ++c) {
        const int cls = static_cast<int>(c);
        std::size_t n_gt = 0, n_pred = 0;
        // Per image: kept predictions of this class and their IoU table.
        struct ImageTable {
            std::vector<double> conf;
            std::vector<std::vector<double>> iou;
        };
        std::vector<ImageTable> tables(preds.size());
        for (std::size_t i = 0; i < preds.size(); ++i) {
            std::vector<const MaskInstance*> class_gts;
            for (const auto& g : gts[i]) {
                if (g.class_id < 0 || static_cast<std::size_t>(g.class_id) >= num_classes) {
                    throw invalid_argument("evaluate: ground-truth class " + std::to_string(g.class_id) +
                                           " outside " + std::to_string(num_classes) + " classes");
                }
                if (g.class_id == cls) {
                    class_gts.push_back(&g);
                }
            }
            n_gt += class_gts.size();
            for (const auto& p : preds[i]) {
                if (p.class_id != cls || std::none_of(p.mask.begin(), p.mask.end(), [](auto v) { return v != 0; })) {
                    continue;
                }
                tables[i].conf.push_back(p.confidence);
                std::vector<double> row;
                for (const auto* g : class_gts) {
                    row.push_back(mask_iou(p.mask, g->mask));
                }
                tables[i].iou.push_back(std::move(row));
            }
            n_pred += tables[i].conf.size();
        }
        report.n_gt += n_gt;
        report.n_pred += n_pred;
        if (n_gt == 0 && n_pred == 0) {
            continue;
        }
        for (std::size_t t = 0; t < thresholds.size(); ++t) {
            struct Scored {
                double conf;
                std::size_t image;
                std::size_t index;
                bool tp;
            };
            std::vector<Scored> pooled;
            for (std::size_t i = 0; i < tables.size(); ++i) {
                if (tables[i].conf.empty()) {
                    continue;
                }
                const MatchResult m = match_instances(tables[i].conf, tables[i].iou, thresholds[t]);
                for (std::size_t k = 0; k < m.tp.size(); ++k) {
                    pooled.push_back({tables[i].conf[k], i, k, m.tp[k]});
                }
            }
            std::sort(pooled.begin(), pooled.end(), [](const Scored& a, const Scored& b) {
                if (a.conf != b.conf) {
                    return a.conf > b.conf;
                }
                return a.image != b.image ? a.image < b.image : a.index < b.index;
            });
            std::vector<bool> seq;
            for (const auto& s : pooled) {
                seq.push_back(s.tp);
            }
            ap[c][t] = average_precision(seq, n_gt);
        }
    }

    report.per_threshold.assign(thresholds.size(), 0.0);
    report.per_class.assign(num_classes, nan);
    std::size_t included = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (std::isnan(ap[c][0])) {
            continue;
        }
        ++included;
        double sum = 0.0;
        for (std::size_t t = 0; t < thresholds.size(); ++t) {
            report.per_threshold[t] += ap[c][t];
            sum += ap[c][t];
        }
        report.per_class[c] = sum / static_cast<double>(thresholds.size());
    }
    if (included > 0) {
        for (auto& v : report.per_threshold) {
            v /= static_cast<double>(included);
        }
    }
    report.map = std::accumulate(report.per_threshold.begin(), report.per_threshold.end(), 0.0) /
                 static_cast<double>(thresholds.size());
    report.ap50 = report.per_threshold[0];
    report.ap75 = report.per_threshold[5];
    return report;
}

nlohmann::json to_json(const APReport& report, std::span<const std::string> class_names) {
    nlohmann::json per_class = nlohmann::json::object();
    for (std::size_t c = 0; c < report.per_class.size(); ++c) {
        const std::string name = c < class_names.size() ? class_names[c] : std::to_string(c);
        per_class[name] = std::isnan(report.per_class[c]) ? nlohmann::json(nullptr) : nlohmann::json(report.per_class[c]);
    }
    return {{"mAP", report.map},
            {"AP50", report.ap50},
            {"AP75", report.ap75},
            {"per_threshold", report.per_threshold},
            {"per_class", per_class},
            {"n_pred", report.n_pred},
            {"n_gt", report.n_gt}};
}

}  // namespace bloinst::eval
