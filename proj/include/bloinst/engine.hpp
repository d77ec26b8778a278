// Copyright 2026 The BLO-Inst Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bloinst/data.hpp"
#include "bloinst/error.hpp"
#include "bloinst/eval.hpp"
#include "bloinst/losses.hpp"
#include "bloinst/models.hpp"
#include "bloinst/rng.hpp"
#include "json.hpp"

namespace bloinst::engine {

using ad::Tensor;
using model::ParamRole;
using model::ParamSet;

enum class Order { first, second };
enum class Strategy { bilevel_first, bilevel_second, single_level, separate };

const char* strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);

struct TrainConfig {
    double alpha = 1e-3;  // lower level (segmenter) learning rate
    double beta = 1e-3;   // upper level (detector) learning rate
    loss::LossWeights weights;
    loss::FocalParams focal;
    std::size_t T = 2000;
    double gamma_split = 1.0;  // |D1| / |D2|
    Order order = Order::first;
    double eps_scale = 0.01;
    std::size_t pretrain_iters = 100;
    std::uint64_t seed = 0;
    std::size_t batch_lower = 4;
    std::size_t batch_upper = 4;
    std::size_t eval_every = 0;  // 0: final evaluation only
    bool lr_decay = false;       // linear decay of both rates to zero over T
    bool train_heads = true;
    bool train_decoder_base = false;
    double conf_threshold = 0.25;
    double nms_iou = 0.5;
};

void validate(const TrainConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);
// Missing keys keep their defaults; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Splitting and sampling

struct SplitData {
    std::vector<std::size_t> d1;  // segmenter updates
    std::vector<std::size_t> d2;  // detector updates
};

// Seeded shuffle of 0..n-1, then the first round(n * gamma / (1 + gamma)) go
// to D1.
SplitData split_dataset(std::size_t n, double gamma_split, std::uint64_t seed);

// Without-replacement batches from a reshuffled pool, one epoch at a time.
class BatchSampler {
public:
    BatchSampler(std::vector<std::size_t> pool, std::size_t batch, std::uint64_t seed);
    std::vector<std::size_t> next();

private:
    std::vector<std::size_t> pool_;
    std::size_t batch_;
    std::size_t cursor_;
    Rng rng_;
};

// ---------------------------------------------------------------------------
// Generic level updates over a loss L(theta, phi; batch)

using Batch = std::span<const std::size_t>;
using LossFn = std::function<loss::LossBreakdown(const ParamSet& theta, const ParamSet& phi, Batch batch)>;
using Selection = std::function<bool(ParamRole)>;

// Gradients are indexed like the parameter set; unselected entries are empty.
struct Evaluation {
    loss::LossValues values;
    std::vector<Tensor> theta_grad;
    std::vector<Tensor> phi_grad;
};

Evaluation evaluate_loss(const LossFn& fn, const ParamSet& theta, const ParamSet& phi, Batch batch,
                         const Selection& theta_sel, const Selection& phi_sel);

// p - lr * g on entries with a gradient; others are shared unchanged.
ParamSet sgd_update(const ParamSet& params, const std::vector<Tensor>& grad, double lr);

double grad_norm(const std::vector<Tensor>& grad);

struct LevelStep {
    ParamSet params;
    loss::LossValues values;
};

// theta' = theta - alpha * grad_theta L(theta, phi; batch). phi is a constant.
LevelStep lower_step(const LossFn& fn, const ParamSet& theta, const ParamSet& phi, Batch batch, double alpha,
                     const Selection& theta_sel);

// phi' = phi - beta * grad_phi L(theta', phi; batch) with theta' constant.
LevelStep upper_step_first_order(const LossFn& fn, const ParamSet& phi, const ParamSet& theta_prime, Batch batch,
                                 double beta, const Selection& phi_sel);

struct Hypergradient {
    std::vector<Tensor> grad;  // indexed like phi
    loss::LossValues values;   // L_D2 at (theta', phi)
    bool second_term_skipped = false;
    double epsilon = 0.0;
};

// grad_phi L_D2(theta', phi)
//   - alpha * [grad_phi L_D1(theta+, phi) - grad_phi L_D1(theta-, phi)] / (2 eps),
// theta+- = theta +- eps * g, g = grad_theta' L_D2(theta', phi), eps = eps_scale / |g|.
// The second term is skipped when alpha == 0 or |g| < 1e-12.
Hypergradient second_order_hypergradient(const LossFn& fn, const ParamSet& phi, const ParamSet& theta,
                                         const ParamSet& theta_prime, Batch batch_d1, Batch batch_d2, double alpha,
                                         double eps_scale, const Selection& theta_sel, const Selection& phi_sel);

struct UpperStep {
    ParamSet params;
    loss::LossValues values;
    bool second_term_skipped = false;
};

UpperStep upper_step_second_order(const LossFn& fn, const ParamSet& phi, const ParamSet& theta,
                                  const ParamSet& theta_prime, Batch batch_d1, Batch batch_d2, double alpha,
                                  double beta, double eps_scale, const Selection& theta_sel,
                                  const Selection& phi_sel);

// ---------------------------------------------------------------------------
// Instance segmentation problem

Selection theta_selection(const TrainConfig& cfg);
Selection detector_selection();

// Holds the dataset, the frozen encoder features of every sample, and the
// loss over a batch of sample indices.
class InstanceProblem {
public:
    InstanceProblem(const data::Dataset& dataset, const model::ModelConfig& cfg);

    const data::Dataset& dataset() const { return *dataset_; }
    const model::ModelConfig& model_config() const { return cfg_; }
    const model::EncodedImage& features(std::size_t sample) const { return features_.at(sample); }

    loss::LossBreakdown loss(const ParamSet& theta, const ParamSet& phi, Batch batch,
                             const loss::LossWeights& weights, const loss::FocalParams& focal) const;
    LossFn loss_fn(const loss::LossWeights& weights, const loss::FocalParams& focal) const;

private:
    const data::Dataset* dataset_;
    model::ModelConfig cfg_;
    std::vector<model::EncodedImage> features_;
    std::vector<loss::ImageTargets> targets_;
};

// Decode, segment, and binarize: the predictions scored by the evaluator.
std::vector<std::vector<eval::MaskInstance>> predict(const data::Dataset& dataset, const ParamSet& phi,
                                                     const ParamSet& theta, const model::ModelConfig& cfg,
                                                     double conf_threshold, double nms_iou);

std::vector<std::vector<eval::MaskInstance>> ground_truth(const data::Dataset& dataset);

eval::APReport evaluate_model(const data::Dataset& dataset, const ParamSet& phi, const ParamSet& theta,
                              const model::ModelConfig& cfg, double conf_threshold, double nms_iou);

// ---------------------------------------------------------------------------
// Training

enum class Stage { pretrain, bilevel, joint, detector_only, segmenter_only };

const char* stage_name(Stage s);

struct TraceRow {
    std::size_t iteration = 0;  // 1-based within the main loop
    Stage stage = Stage::bilevel;
    loss::LossValues lower;
    loss::LossValues upper;
    std::optional<eval::APReport> ap;
    double wall_seconds = 0.0;
    bool second_term_skipped = false;
};

struct TrainTrace {
    std::vector<TraceRow> rows;
    std::vector<loss::LossValues> pretrain;  // detection loss per warmup step
    std::size_t d1_size = 0;
    std::size_t d2_size = 0;
    std::size_t second_term_skips = 0;
};

// Optional observer, called after each main-loop iteration.
struct StepObserver {
    virtual ~StepObserver() = default;
    // Parameters before and after each level update.
    virtual void lower(std::size_t iteration, const ParamSet& phi, const ParamSet& theta_before,
                       const ParamSet& theta_after) {
        (void)iteration, (void)phi, (void)theta_before, (void)theta_after;
    }
    virtual void upper(std::size_t iteration, const ParamSet& theta, const ParamSet& phi_before,
                       const ParamSet& phi_after) {
        (void)iteration, (void)theta, (void)phi_before, (void)phi_after;
    }
};

struct TrainResult {
    ParamSet phi;
    ParamSet theta;
    TrainTrace trace;
    std::optional<eval::APReport> final_ap;
};

// Raised when a loss or parameter turns non-finite; carries the last finite
// parameters.
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, std::size_t iteration, ParamSet phi, ParamSet theta, TrainTrace trace)
        : Error(ErrorCode::divergence, what),
          iteration(iteration),
          last_good_phi(std::move(phi)),
          last_good_theta(std::move(theta)),
          trace(std::move(trace)) {}

    std::size_t iteration;
    ParamSet last_good_phi;
    ParamSet last_good_theta;
    TrainTrace trace;
};

// Detection-only warmup: pretrain_iters steps at rate beta on all training
// samples with the segmentation weight forced to zero.
ParamSet pretrain_detector(const InstanceProblem& problem, const ParamSet& phi, std::span<const std::size_t> samples,
                           const TrainConfig& cfg, std::vector<loss::LossValues>* losses = nullptr);

// test_data may be null, which disables evaluation.
TrainResult train(const TrainConfig& cfg, const model::ModelConfig& model_cfg, const data::Dataset& data,
                  const data::Dataset* test_data, StepObserver* observer = nullptr);
TrainResult train_single_level(const TrainConfig& cfg, const model::ModelConfig& model_cfg,
                               const data::Dataset& data, const data::Dataset* test_data);
TrainResult train_separate(const TrainConfig& cfg, const model::ModelConfig& model_cfg, const data::Dataset& data,
                           const data::Dataset* test_data, StepObserver* observer = nullptr);

// Dispatches on the strategy; bilevel-second forces the second-order upper step.
TrainResult run_strategy(Strategy strategy, TrainConfig cfg, const model::ModelConfig& model_cfg,
                         const data::Dataset& data, const data::Dataset* test_data);

// Model geometry matching a dataset.
model::ModelConfig model_config_for(const data::Dataset& dataset, model::ModelConfig base = {});

}  // namespace bloinst::engine
