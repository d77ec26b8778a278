// Copyright 2026 The BLO-Inst Authors
// SPDX-License-Identifier: Apache-2.0

#include "bloinst/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

namespace bloinst::engine {

using nlohmann::json;

const char* strategy_name(Strategy s) {
    switch (s) {
    case Strategy::bilevel_first: return "bilevel-first";
    case Strategy::bilevel_second: return "bilevel-second";
    case Strategy::single_level: return "single-level";
    case Strategy::separate: return "separate";
    }
    return "?";
}

Strategy strategy_from_name(const std::string& name) {
    for (auto s : {Strategy::bilevel_first, Strategy::bilevel_second, Strategy::single_level, Strategy::separate}) {
        if (name == strategy_name(s)) {
            return s;
        }
    }
    throw invalid_argument("unknown strategy '" + name +
                           "' (expected bilevel-first, bilevel-second, single-level or separate)");
}

const char* stage_name(Stage s) {
    switch (s) {
    case Stage::pretrain: return "pretrain";
    case Stage::bilevel: return "bilevel";
    case Stage::joint: return "joint";
    case Stage::detector_only: return "detector";
    case Stage::segmenter_only: return "segmenter";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Config

void validate(const TrainConfig& c) {
    loss::validate(c.weights);
    loss::validate(c.focal);
    if (!(c.alpha >= 0.0) || !(c.beta >= 0.0) || !std::isfinite(c.alpha) || !std::isfinite(c.beta)) {
        throw invalid_argument("learning rates must be finite and non-negative");
    }
    if (c.T < 1) {
        throw invalid_argument("T must be at least 1");
    }
    if (!(c.gamma_split > 0.0) || !std::isfinite(c.gamma_split)) {
        throw invalid_argument("gamma_split must be positive");
    }
    if (!(c.eps_scale > 0.0)) {
        throw invalid_argument("eps_scale must be positive");
    }
    if (c.batch_lower < 1 || c.batch_upper < 1) {
        throw invalid_argument("batch sizes must be at least 1");
    }
    if (!(c.conf_threshold > 0.0 && c.conf_threshold < 1.0)) {
        throw invalid_argument("conf threshold must lie in (0, 1), got " + std::to_string(c.conf_threshold));
    }
    if (!(c.nms_iou > 0.0 && c.nms_iou < 1.0)) {
        throw invalid_argument("nms IoU must lie in (0, 1), got " + std::to_string(c.nms_iou));
    }
}

json to_json(const TrainConfig& c) {
    return {{"alpha", c.alpha},
            {"beta", c.beta},
            {"lambda_box", c.weights.box},
            {"lambda_obj", c.weights.obj},
            {"lambda_cls", c.weights.cls},
            {"lambda_seg", c.weights.seg},
            {"focal_alpha", c.focal.alpha},
            {"focal_gamma", c.focal.gamma},
            {"T", c.T},
            {"gamma_split", c.gamma_split},
            {"order", c.order == Order::first ? "first" : "second"},
            {"eps_scale", c.eps_scale},
            {"pretrain_iters", c.pretrain_iters},
            {"seed", c.seed},
            {"batch_lower", c.batch_lower},
            {"batch_upper", c.batch_upper},
            {"eval_every", c.eval_every},
            {"lr_decay", c.lr_decay},
            {"train_heads", c.train_heads},
            {"train_decoder_base", c.train_decoder_base},
            {"conf", c.conf_threshold},
            {"nms", c.nms_iou}};
}

TrainConfig train_config_from_json(const json& j) {
    if (!j.is_object()) {
        throw invalid_argument("training config must be a JSON object");
    }
    TrainConfig c;
    const json known = to_json(c);
    for (const auto& [key, value] : j.items()) {
        if (!known.contains(key)) {
            throw invalid_argument("unknown training config key '" + key + "'");
        }
    }
    try {
        auto read = [&](const char* key, auto& field) {
            if (j.contains(key)) {
                j.at(key).get_to(field);
            }
        };
        read("alpha", c.alpha);
        read("beta", c.beta);
        read("lambda_box", c.weights.box);
        read("lambda_obj", c.weights.obj);
        read("lambda_cls", c.weights.cls);
        read("lambda_seg", c.weights.seg);
        read("focal_alpha", c.focal.alpha);
        read("focal_gamma", c.focal.gamma);
        read("T", c.T);
        read("gamma_split", c.gamma_split);
        if (j.contains("order")) {
            const auto order = j.at("order").get<std::string>();
            if (order != "first" && order != "second") {
                throw invalid_argument("order must be 'first' or 'second', got '" + order + "'");
            }
            c.order = order == "first" ? Order::first : Order::second;
        }
        read("eps_scale", c.eps_scale);
        read("pretrain_iters", c.pretrain_iters);
        read("seed", c.seed);
        read("batch_lower", c.batch_lower);
        read("batch_upper", c.batch_upper);
        read("eval_every", c.eval_every);
        read("lr_decay", c.lr_decay);
        read("train_heads", c.train_heads);
        read("train_decoder_base", c.train_decoder_base);
        read("conf", c.conf_threshold);
        read("nms", c.nms_iou);
    } catch (const json::exception& e) {
        throw invalid_argument(std::string("training config: ") + e.what());
    }
    validate(c);
    return c;
}

// ---------------------------------------------------------------------------
// Splitting and sampling

SplitData split_dataset(std::size_t n, double gamma_split, std::uint64_t seed) {
    if (!(gamma_split > 0.0)) {
        throw invalid_argument("split: gamma must be positive");
    }
    const auto n1 = static_cast<std::size_t>(std::llround(static_cast<double>(n) * gamma_split / (1.0 + gamma_split)));
    if (n < 2 || n1 < 1 || n1 >= n) {
        throw invalid_argument("split: " + std::to_string(n) + " samples at gamma " + std::to_string(gamma_split) +
                               " leave a split empty");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(std::span(order));
    SplitData s;
    s.d1.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n1));
    s.d2.assign(order.begin() + static_cast<std::ptrdiff_t>(n1), order.end());
    return s;
}

BatchSampler::BatchSampler(std::vector<std::size_t> pool, std::size_t batch, std::uint64_t seed)
    : pool_(std::move(pool)), batch_(batch), cursor_(0), rng_(seed) {
    if (pool_.empty() || batch_ == 0) {
        throw invalid_argument("batch sampler needs a non-empty pool and batch size");
    }
    batch_ = std::min(batch_, pool_.size());
    cursor_ = pool_.size();
}

std::vector<std::size_t> BatchSampler::next() {
    std::vector<std::size_t> out;
    out.reserve(batch_);
    while (out.size() < batch_) {
        if (cursor_ == pool_.size()) {
            rng_.shuffle(std::span(pool_));
            cursor_ = 0;
        }
        out.push_back(pool_[cursor_++]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Generic level updates

namespace {

ParamSet track(const ParamSet& params, const Selection& sel, ad::Tape& tape, std::vector<Tensor>& leaves) {
    ParamSet out = params;
    leaves.assign(params.size(), Tensor());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (sel && sel(out[i].role)) {
            leaves[i] = tape.leaf(out[i].value);
            out[i].value = leaves[i];
        }
    }
    return out;
}

std::vector<Tensor> collect(const ad::Gradients& g, const std::vector<Tensor>& leaves) {
    std::vector<Tensor> out(leaves.size());
    for (std::size_t i = 0; i < leaves.size(); ++i) {
        if (!leaves[i].empty()) {
            out[i] = g.of(leaves[i]);
        }
    }
    return out;
}

bool all_finite(const ParamSet& params) {
    for (const auto& p : params) {
        for (double v : p.value.values()) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
    }
    return true;
}

const Selection kNone = [](ParamRole) { return false; };

}  // namespace

Evaluation evaluate_loss(const LossFn& fn, const ParamSet& theta, const ParamSet& phi, Batch batch,
                         const Selection& theta_sel, const Selection& phi_sel) {
    ad::Tape tape;
    std::vector<Tensor> theta_leaves, phi_leaves;
    const ParamSet th = track(theta, theta_sel, tape, theta_leaves);
    const ParamSet ph = track(phi, phi_sel, tape, phi_leaves);
    const loss::LossBreakdown b = fn(th, ph, batch);
    Evaluation e;
    e.values = loss::LossValues::of(b);
    if (!e.values.finite()) {
        return e;
    }
    const ad::Gradients g = tape.backward(b.total);
    e.theta_grad = collect(g, theta_leaves);
    e.phi_grad = collect(g, phi_leaves);
    return e;
}

ParamSet sgd_update(const ParamSet& params, const std::vector<Tensor>& grad, double lr) {
    ParamSet out = params;
    for (std::size_t i = 0; i < out.size() && i < grad.size(); ++i) {
        if (grad[i].empty()) {
            continue;
        }
        const Tensor& p = params[i].value;
        std::vector<double> v(p.size());
        for (std::size_t k = 0; k < v.size(); ++k) {
            v[k] = p[k] - lr * grad[i][k];
        }
        out[i].value = Tensor(p.shape(), std::move(v));
    }
    return out;
}

double grad_norm(const std::vector<Tensor>& grad) {
    double s = 0.0;
    for (const auto& g : grad) {
        for (double v : g.values()) {
            s += v * v;
        }
    }
    return std::sqrt(s);
}

LevelStep lower_step(const LossFn& fn, const ParamSet& theta, const ParamSet& phi, Batch batch, double alpha,
                     const Selection& theta_sel) {
    if (batch.empty()) {
        throw invalid_argument("lower_step: empty batch");
    }
    const Evaluation e = evaluate_loss(fn, theta, phi, batch, theta_sel, kNone);
    if (!e.values.finite()) {
        return {theta, e.values};
    }
    return {sgd_update(theta, e.theta_grad, alpha), e.values};
}

LevelStep upper_step_first_order(const LossFn& fn, const ParamSet& phi, const ParamSet& theta_prime, Batch batch,
                                 double beta, const Selection& phi_sel) {
    if (batch.empty()) {
        throw invalid_argument("upper_step: empty batch");
    }
    const Evaluation e = evaluate_loss(fn, theta_prime, phi, batch, kNone, phi_sel);
    if (!e.values.finite()) {
        return {phi, e.values};
    }
    return {sgd_update(phi, e.phi_grad, beta), e.values};
}

Hypergradient second_order_hypergradient(const LossFn& fn, const ParamSet& phi, const ParamSet& theta,
                                         const ParamSet& theta_prime, Batch batch_d1, Batch batch_d2, double alpha,
                                         double eps_scale, const Selection& theta_sel, const Selection& phi_sel) {
    Hypergradient h;
    if (alpha == 0.0) {
        // First-order switch: identical computation to the first-order step.
        const Evaluation e = evaluate_loss(fn, theta_prime, phi, batch_d2, kNone, phi_sel);
        h.grad = e.phi_grad;
        h.values = e.values;
        return h;
    }
    const Evaluation d2 = evaluate_loss(fn, theta_prime, phi, batch_d2, theta_sel, phi_sel);
    h.values = d2.values;
    h.grad = d2.phi_grad;
    if (!d2.values.finite()) {
        return h;
    }
    const double norm = grad_norm(d2.theta_grad);
    if (norm < 1e-12) {
        h.second_term_skipped = true;
        return h;
    }
    const double eps = eps_scale / norm;
    h.epsilon = eps;
    const ParamSet plus = sgd_update(theta, d2.theta_grad, -eps);
    const ParamSet minus = sgd_update(theta, d2.theta_grad, eps);
    const Evaluation ep = evaluate_loss(fn, plus, phi, batch_d1, kNone, phi_sel);
    const Evaluation em = evaluate_loss(fn, minus, phi, batch_d1, kNone, phi_sel);
    if (!ep.values.finite() || !em.values.finite()) {
        h.values.total = std::numeric_limits<double>::quiet_NaN();
        return h;
    }
    const double coeff = alpha / (2.0 * eps);
    for (std::size_t i = 0; i < h.grad.size(); ++i) {
        if (h.grad[i].empty()) {
            continue;
        }
        const Tensor& direct = h.grad[i];
        std::vector<double> v(direct.size());
        for (std::size_t k = 0; k < v.size(); ++k) {
            v[k] = direct[k] - coeff * (ep.phi_grad[i][k] - em.phi_grad[i][k]);
        }
        h.grad[i] = Tensor(direct.shape(), std::move(v));
    }
    return h;
}

UpperStep upper_step_second_order(const LossFn& fn, const ParamSet& phi, const ParamSet& theta,
                                  const ParamSet& theta_prime, Batch batch_d1, Batch batch_d2, double alpha,
                                  double beta, double eps_scale, const Selection& theta_sel,
                                  const Selection& phi_sel) {
    if (batch_d1.empty() || batch_d2.empty()) {
        throw invalid_argument("upper_step: empty batch");
    }
    const Hypergradient h = second_order_hypergradient(fn, phi, theta, theta_prime, batch_d1, batch_d2, alpha,
                                                       eps_scale, theta_sel, phi_sel);
    if (!h.values.finite()) {
        return {phi, h.values, h.second_term_skipped};
    }
    return {sgd_update(phi, h.grad, beta), h.values, h.second_term_skipped};
}

// ---------------------------------------------------------------------------
// Instance problem

Selection theta_selection(const TrainConfig& cfg) {
    const bool heads = cfg.train_heads;
    const bool base = cfg.train_decoder_base;
    return [heads, base](ParamRole r) {
        return r == ParamRole::lora_a || r == ParamRole::lora_b || (heads && r == ParamRole::head) ||
               (base && r == ParamRole::decoder_base);
    };
}

Selection detector_selection() {
    return [](ParamRole r) { return r == ParamRole::detector; };
}

model::ModelConfig model_config_for(const data::Dataset& dataset, model::ModelConfig base) {
    base.image_size = dataset.image_size;
    base.mask_size = dataset.image_size;
    base.channels = dataset.channels;
    base.num_classes = dataset.classes.size();
    model::validate(base);
    return base;
}

InstanceProblem::InstanceProblem(const data::Dataset& dataset, const model::ModelConfig& cfg)
    : dataset_(&dataset), cfg_(cfg) {
    if (dataset.image_size != cfg.image_size || dataset.channels != cfg.channels ||
        dataset.classes.size() != cfg.num_classes) {
        throw Error(ErrorCode::compatibility,
                    "dataset (" + std::to_string(dataset.image_size) + "px, " + std::to_string(dataset.classes.size()) +
                        " classes) does not match the model (" + std::to_string(cfg.image_size) + "px, " +
                        std::to_string(cfg.num_classes) + " classes)");
    }
    // Encoder weights do not depend on the run seed.
    const model::SegmenterParams frozen = model::init_segmenter(cfg, 0);
    features_.reserve(dataset.samples.size());
    targets_.reserve(dataset.samples.size());
    for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
        features_.push_back(model::encode_image(dataset.image_tensor(i), frozen, cfg));
        targets_.push_back(dataset.targets(i));
    }
}

loss::LossBreakdown InstanceProblem::loss(const ParamSet& theta, const ParamSet& phi, Batch batch,
                                          const loss::LossWeights& weights, const loss::FocalParams& focal) const {
    const std::size_t plane = cfg_.channels * cfg_.image_size * cfg_.image_size;
    std::vector<double> pixels;
    pixels.reserve(batch.size() * plane);
    std::vector<loss::ImageTargets> targets;
    targets.reserve(batch.size());
    for (std::size_t idx : batch) {
        const auto& img = dataset_->samples.at(idx).image;
        pixels.insert(pixels.end(), img.begin(), img.end());
        targets.push_back(targets_[idx]);
    }
    const Tensor images({batch.size(), cfg_.channels, cfg_.image_size, cfg_.image_size}, std::move(pixels));
    const std::vector<loss::CellPredictions> cells =
        model::cell_predictions(model::detector_forward(images, phi, cfg_), cfg_);
    for (const auto& c : cells) {
        const auto v = c.boxes.values();
        if (!std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); })) {
            // Non-finite detector output: report a non-finite loss instead of failing on the boxes.
            const Tensor nan = Tensor::scalar(std::numeric_limits<double>::quiet_NaN());
            return {nan, nan, nan, nan, nan};
        }
    }
    loss::PromptSegmenter segmenter;
    if (weights.seg > 0.0) {
        segmenter = [&](std::size_t b, const Tensor& box, const loss::PixelWindow& window) {
            return model::segmenter_window(features_[batch[b]], box, theta, cfg_, window);
        };
    }
    return loss::total_loss(cfg_.grid_geometry(), cells, segmenter, targets, weights, focal);
}

LossFn InstanceProblem::loss_fn(const loss::LossWeights& weights, const loss::FocalParams& focal) const {
    return [this, weights, focal](const ParamSet& theta, const ParamSet& phi, Batch batch) {
        return loss(theta, phi, batch, weights, focal);
    };
}

std::vector<std::vector<eval::MaskInstance>> predict(const data::Dataset& dataset, const ParamSet& phi,
                                                     const ParamSet& theta, const model::ModelConfig& cfg,
                                                     double conf_threshold, double nms_iou) {
    const std::size_t side = cfg.image_size;
    std::vector<std::vector<eval::MaskInstance>> out(dataset.samples.size());
    for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
        const Tensor image = dataset.image_tensor(i);
        const Tensor grid =
            model::detector_forward(ad::reshape(image, {1, cfg.channels, side, side}), phi, cfg);
        const auto detections = model::decode_detections(grid, cfg, conf_threshold, nms_iou);
        if (detections.empty()) {
            continue;
        }
        const model::EncodedImage features = model::encode_image(image, theta, cfg);
        for (const auto& d : detections) {
            const loss::PixelWindow w = loss::crop_window(d.box, side, side);
            if (w.empty()) {
                continue;
            }
            const Tensor box = d.box.tensor();
            const Tensor logits = model::segmenter_window(features, box, theta, cfg, w);
            eval::MaskInstance inst;
            inst.mask.assign(side * side, 0);
            const std::size_t cols = w.col1 - w.col0;
            bool any = false;
            for (std::size_t r = w.row0; r < w.row1; ++r) {
                for (std::size_t c = w.col0; c < w.col1; ++c) {
                    // sigmoid(x) >= 0.5 exactly when x >= 0.
                    if (logits[(r - w.row0) * cols + (c - w.col0)] >= 0.0) {
                        inst.mask[r * side + c] = 1;
                        any = true;
                    }
                }
            }
            if (!any) {
                continue;
            }
            inst.class_id = d.class_id;
            inst.confidence = d.confidence();
            out[i].push_back(std::move(inst));
        }
    }
    return out;
}

std::vector<std::vector<eval::MaskInstance>> ground_truth(const data::Dataset& dataset) {
    std::vector<std::vector<eval::MaskInstance>> out(dataset.samples.size());
    for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
        for (const auto& inst : dataset.samples[i].instances) {
            out[i].push_back({inst.mask, inst.class_id, 1.0});
        }
    }
    return out;
}

eval::APReport evaluate_model(const data::Dataset& dataset, const ParamSet& phi, const ParamSet& theta,
                              const model::ModelConfig& cfg, double conf_threshold, double nms_iou) {
    return eval::evaluate(predict(dataset, phi, theta, cfg, conf_threshold, nms_iou), ground_truth(dataset),
                          cfg.num_classes);
}

// ---------------------------------------------------------------------------
// Training loops

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

loss::LossWeights detection_only(loss::LossWeights w) {
    w.seg = 0.0;
    return w;
}

loss::LossWeights segmentation_only(const loss::LossWeights& w) { return {0.0, 0.0, 0.0, w.seg}; }

double rate_scale(const TrainConfig& cfg, std::size_t t, std::size_t total) {
    if (!cfg.lr_decay) {
        return 1.0;
    }
    return 1.0 - static_cast<double>(t - 1) / static_cast<double>(total);
}

std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), 0);
    return v;
}

// Seeds of the independent random streams of one run.
enum Stream : std::uint64_t { kSplit = 1, kDetectorInit, kSegmenterInit, kPretrain, kLower, kUpper, kJoint };

struct RunState {
    const TrainConfig& cfg;
    const model::ModelConfig& model_cfg;
    const data::Dataset* test;
    InstanceProblem problem;
    ParamSet phi;
    ParamSet theta;
    TrainTrace trace;
    Clock::time_point start = Clock::now();

    RunState(const TrainConfig& c, const model::ModelConfig& m, const data::Dataset& data, const data::Dataset* t)
        : cfg(c), model_cfg(m), test(t), problem(data, m) {
        validate(c);
        if (data.samples.size() < 2) {
            throw invalid_argument("training needs at least 2 samples");
        }
        phi = model::init_detector(m, mix_seed(c.seed, kDetectorInit));
        theta = model::init_segmenter(m, mix_seed(c.seed, kSegmenterInit));
        const auto all = all_indices(data.samples.size());
        phi = pretrain_detector(problem, phi, all, c, &trace.pretrain);
    }

    [[noreturn]] void diverge(std::size_t t, const std::string& where, const loss::LossValues& v) {
        throw DivergenceError("training diverged at iteration " + std::to_string(t) + " (" + where +
                                  "): non-finite loss or parameters, last total " + std::to_string(v.total),
                              t, phi, theta, trace);
    }

    void finish_row(TraceRow& row) {
        row.wall_seconds = seconds_since(start);
        if (test != nullptr && cfg.eval_every > 0 && row.iteration % cfg.eval_every == 0) {
            row.ap = evaluate_model(*test, phi, theta, model_cfg, cfg.conf_threshold, cfg.nms_iou);
        }
        trace.rows.push_back(std::move(row));
    }

    TrainResult result() {
        TrainResult r{phi, theta, std::move(trace), std::nullopt};
        if (test != nullptr) {
            r.final_ap = evaluate_model(*test, phi, theta, model_cfg, cfg.conf_threshold, cfg.nms_iou);
        }
        return r;
    }
};

}  // namespace

ParamSet pretrain_detector(const InstanceProblem& problem, const ParamSet& phi, std::span<const std::size_t> samples,
                           const TrainConfig& cfg, std::vector<loss::LossValues>* losses) {
    if (cfg.pretrain_iters == 0) {
        return phi;
    }
    const LossFn fn = problem.loss_fn(detection_only(cfg.weights), cfg.focal);
    BatchSampler sampler({samples.begin(), samples.end()}, cfg.batch_lower + cfg.batch_upper,
                         mix_seed(cfg.seed, kPretrain));
    const model::SegmenterParams unused;
    ParamSet current = phi;
    for (std::size_t t = 1; t <= cfg.pretrain_iters; ++t) {
        const auto batch = sampler.next();
        const LevelStep step = upper_step_first_order(fn, current, unused, batch, cfg.beta, detector_selection());
        if (!step.values.finite() || !all_finite(step.params)) {
            throw DivergenceError("detector pretraining diverged at step " + std::to_string(t), t, current, unused,
                                  {});
        }
        if (losses != nullptr) {
            losses->push_back(step.values);
        }
        current = step.params;
    }
    return current;
}

TrainResult train(const TrainConfig& cfg, const model::ModelConfig& model_cfg, const data::Dataset& data,
                  const data::Dataset* test_data, StepObserver* observer) {
    RunState run(cfg, model_cfg, data, test_data);
    const SplitData split = split_dataset(data.samples.size(), cfg.gamma_split, mix_seed(cfg.seed, kSplit));
    run.trace.d1_size = split.d1.size();
    run.trace.d2_size = split.d2.size();
    const LossFn fn = run.problem.loss_fn(cfg.weights, cfg.focal);
    const Selection theta_sel = theta_selection(cfg);
    const Selection phi_sel = detector_selection();
    BatchSampler s1(split.d1, cfg.batch_lower, mix_seed(cfg.seed, kLower));
    BatchSampler s2(split.d2, cfg.batch_upper, mix_seed(cfg.seed, kUpper));

    for (std::size_t t = 1; t <= cfg.T; ++t) {
        const double scale = rate_scale(cfg, t, cfg.T);
        const auto b1 = s1.next();
        const auto b2 = s2.next();
        TraceRow row;
        row.iteration = t;
        row.stage = Stage::bilevel;

        const LevelStep lower = lower_step(fn, run.theta, run.phi, b1, cfg.alpha * scale, theta_sel);
        row.lower = lower.values;
        if (!lower.values.finite() || !all_finite(lower.params)) {
            run.diverge(t, "lower level", lower.values);
        }
        if (observer != nullptr) {
            observer->lower(t, run.phi, run.theta, lower.params);
        }

        UpperStep upper;
        if (cfg.order == Order::first) {
            LevelStep s = upper_step_first_order(fn, run.phi, lower.params, b2, cfg.beta * scale, phi_sel);
            upper = {std::move(s.params), s.values, false};
        } else {
            upper = upper_step_second_order(fn, run.phi, run.theta, lower.params, b1, b2, cfg.alpha * scale,
                                            cfg.beta * scale, cfg.eps_scale, theta_sel, phi_sel);
        }
        row.upper = upper.values;
        row.second_term_skipped = upper.second_term_skipped;
        if (!upper.values.finite() || !all_finite(upper.params)) {
            run.diverge(t, "upper level", upper.values);
        }
        if (observer != nullptr) {
            observer->upper(t, lower.params, run.phi, upper.params);
        }
        run.trace.second_term_skips += upper.second_term_skipped;
        run.theta = lower.params;
        run.phi = upper.params;
        run.finish_row(row);
    }
    return run.result();
}

TrainResult train_single_level(const TrainConfig& cfg, const model::ModelConfig& model_cfg,
                               const data::Dataset& data, const data::Dataset* test_data) {
    RunState run(cfg, model_cfg, data, test_data);
    run.trace.d1_size = data.samples.size();
    run.trace.d2_size = 0;
    const LossFn fn = run.problem.loss_fn(cfg.weights, cfg.focal);
    const Selection theta_sel = theta_selection(cfg);
    const Selection phi_sel = detector_selection();
    BatchSampler sampler(all_indices(data.samples.size()), cfg.batch_lower + cfg.batch_upper,
                         mix_seed(cfg.seed, kJoint));
    for (std::size_t t = 1; t <= cfg.T; ++t) {
        const double scale = rate_scale(cfg, t, cfg.T);
        const auto batch = sampler.next();
        const Evaluation e = evaluate_loss(fn, run.theta, run.phi, batch, theta_sel, phi_sel);
        TraceRow row;
        row.iteration = t;
        row.stage = Stage::joint;
        row.lower = row.upper = e.values;
        if (!e.values.finite()) {
            run.diverge(t, "joint step", e.values);
        }
        ParamSet theta = sgd_update(run.theta, e.theta_grad, cfg.alpha * scale);
        ParamSet phi = sgd_update(run.phi, e.phi_grad, cfg.beta * scale);
        if (!all_finite(theta) || !all_finite(phi)) {
            run.diverge(t, "joint step", e.values);
        }
        run.theta = std::move(theta);
        run.phi = std::move(phi);
        run.finish_row(row);
    }
    return run.result();
}

TrainResult train_separate(const TrainConfig& cfg, const model::ModelConfig& model_cfg, const data::Dataset& data,
                           const data::Dataset* test_data, StepObserver* observer) {
    RunState run(cfg, model_cfg, data, test_data);
    run.trace.d1_size = data.samples.size();
    run.trace.d2_size = 0;
    const std::size_t stage1 = cfg.T / 2;
    const std::size_t stage2 = cfg.T - stage1;
    const Selection theta_sel = theta_selection(cfg);
    const Selection phi_sel = detector_selection();
    const std::size_t batch = cfg.batch_lower + cfg.batch_upper;
    const auto all = all_indices(data.samples.size());

    const LossFn det_fn = run.problem.loss_fn(detection_only(cfg.weights), cfg.focal);
    BatchSampler s_det(all, batch, mix_seed(cfg.seed, kUpper));
    for (std::size_t t = 1; t <= stage1; ++t) {
        const LevelStep s =
            upper_step_first_order(det_fn, run.phi, run.theta, s_det.next(), cfg.beta * rate_scale(cfg, t, stage1),
                                   phi_sel);
        TraceRow row;
        row.iteration = t;
        row.stage = Stage::detector_only;
        row.upper = s.values;
        if (!s.values.finite() || !all_finite(s.params)) {
            run.diverge(t, "detector stage", s.values);
        }
        if (observer != nullptr) {
            observer->upper(t, run.theta, run.phi, s.params);
        }
        run.phi = s.params;
        run.finish_row(row);
    }

    const LossFn seg_fn = run.problem.loss_fn(segmentation_only(cfg.weights), cfg.focal);
    BatchSampler s_seg(all, batch, mix_seed(cfg.seed, kLower));
    for (std::size_t k = 1; k <= stage2; ++k) {
        const std::size_t t = stage1 + k;
        const LevelStep s =
            lower_step(seg_fn, run.theta, run.phi, s_seg.next(), cfg.alpha * rate_scale(cfg, k, stage2), theta_sel);
        TraceRow row;
        row.iteration = t;
        row.stage = Stage::segmenter_only;
        row.lower = s.values;
        if (!s.values.finite() || !all_finite(s.params)) {
            run.diverge(t, "segmenter stage", s.values);
        }
        if (observer != nullptr) {
            observer->lower(t, run.phi, run.theta, s.params);
        }
        run.theta = s.params;
        run.finish_row(row);
    }
    return run.result();
}

TrainResult run_strategy(Strategy strategy, TrainConfig cfg, const model::ModelConfig& model_cfg,
                         const data::Dataset& data, const data::Dataset* test_data) {
    switch (strategy) {
    case Strategy::bilevel_first: cfg.order = Order::first; return train(cfg, model_cfg, data, test_data);
    case Strategy::bilevel_second: cfg.order = Order::second; return train(cfg, model_cfg, data, test_data);
    case Strategy::single_level: return train_single_level(cfg, model_cfg, data, test_data);
    case Strategy::separate: return train_separate(cfg, model_cfg, data, test_data);
    }
    throw invalid_argument("unknown strategy");
}

}  // namespace bloinst::engine
