// Copyright 2026 The BLO-Inst Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bloinst/adcore.hpp"
#include "bloinst/losses.hpp"

namespace bloinst::model {

using ad::Tensor;

// Geometry and widths of the toy detector and segmenter.
struct ModelConfig {
    std::size_t image_size = 64;
    std::size_t channels = 3;
    std::size_t num_classes = 3;
    std::size_t grid_stride = 8;
    std::size_t mask_size = 64;
    std::size_t encoder_stride = 1;
    std::size_t encoder_channels = 8;
    std::size_t detector_width = 16;
    std::size_t token_dim = 8;
    std::size_t hidden_dim = 32;
    std::size_t lora_rank = 4;
    double lora_scale = 1.0;

    std::size_t grid() const { return image_size / grid_stride; }
    loss::GridGeometry grid_geometry() const {
        return {grid(), static_cast<double>(grid_stride)};
    }
    double max_box_size() const { return static_cast<double>(image_size); }
};

void validate(const ModelConfig& cfg);

// Seed of the frozen encoder and decoder base weights. Fixed so that every run
// adapts the same "pretrained" segmenter.
inline constexpr std::uint64_t kFrozenSeed = 0x5A11DEC0DEULL;

enum class ParamRole { detector, encoder, decoder_base, lora_a, lora_b, head };

const char* role_name(ParamRole role);
ParamRole role_from_name(const std::string& name);

struct Param {
    std::string name;
    ParamRole role;
    Tensor value;
};

// Ordered, named parameter tensors.
class ParamSet {
public:
    void add(std::string name, ParamRole role, Tensor value);

    std::size_t size() const { return params_.size(); }
    const Param& operator[](std::size_t i) const { return params_[i]; }
    Param& operator[](std::size_t i) { return params_[i]; }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    const Tensor& get(const std::string& name) const;
    std::size_t index_of(const std::string& name) const;

    std::size_t numel() const;
    std::size_t numel(const std::function<bool(ParamRole)>& select) const;

    // FNV-1a over names, shapes, and values of the selected parameters.
    std::string digest(const std::function<bool(ParamRole)>& select) const;
    std::string digest() const;

    bool operator==(const ParamSet& other) const;

private:
    std::vector<Param> params_;
};

using DetectorParams = ParamSet;
using SegmenterParams = ParamSet;

DetectorParams init_detector(const ModelConfig& cfg, std::uint64_t seed);
// Frozen encoder and decoder base from kFrozenSeed; heads and LoRA A from
// `seed`; LoRA B zero.
SegmenterParams init_segmenter(const ModelConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Detector (prompt generator)

// images: [N, C, H, W]. Returns raw per-cell outputs [N, G, G, 5 + C] laid out
// as (tx, ty, tw, th, objectness, class logits...).
// Detector input standardization: (x - mean) / std.
inline constexpr double kPixelMean = 0.3;
inline constexpr double kPixelStd = 0.25;

Tensor detector_forward(const Tensor& images, const DetectorParams& phi, const ModelConfig& cfg);

// Decodes raw grids into per-image box/objectness/class rows (differentiable).
// Box: center = (cell + sigmoid(t)) * stride, size = sigmoid(t) * max_size.
std::vector<loss::CellPredictions> cell_predictions(const Tensor& grid, const ModelConfig& cfg);

struct Detection {
    loss::Box box;
    double objectness = 0.0;
    std::vector<double> class_scores;
    int class_id = 0;
    std::size_t cell = 0;

    double confidence() const;
};

// grid: one image, [G, G, 5 + C] (or [1, G, G, 5 + C]).
std::vector<Detection> decode_detections(const Tensor& grid, const ModelConfig& cfg, double conf_threshold,
                                         double nms_iou);

// Inverse of decoding for a set of detections; all other cells get a
// vanishing objectness.
Tensor encode_detections(const std::vector<Detection>& detections, const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Segmenter

// (frozen_W + scale * B A) applied to the rows of x: x [n, d_in] -> [n, d_out].
// frozen_W: [d_out, d_in], A: [r, d_in], B: [d_out, r].
Tensor lora_apply(const Tensor& x, const Tensor& frozen_w, const Tensor& a, const Tensor& b, double scale);

struct EncodedImage {
    Tensor map;     // [F, H / stride, W / stride]
    Tensor pixels;  // [M * M, F], nearest-resampled to the mask grid
    Tensor pooled;  // [1, F]
};

// Frozen encoder; never records tape entries.
EncodedImage encode_image(const Tensor& image, const SegmenterParams& theta, const ModelConfig& cfg);

// Clamps an xyxy [4] box into the image (differentiable inside the image).
Tensor clamp_box(const Tensor& box, const ModelConfig& cfg);

// Mask logits [M, M] for a box prompt given as continuous xyxy coordinates.
Tensor segmenter_forward(const EncodedImage& features, const Tensor& box_prompt, const SegmenterParams& theta,
                         const ModelConfig& cfg);

// The same logits restricted to a pixel window: [rows, cols]. Pixels are
// independent given the prompt, so this equals slicing segmenter_forward.
Tensor segmenter_window(const EncodedImage& features, const Tensor& box_prompt, const SegmenterParams& theta,
                        const ModelConfig& cfg, const loss::PixelWindow& window);

// Names of the adapted maps and their (d_in, d_out).
struct LoraSite {
    std::string name;
    std::size_t d_in;
    std::size_t d_out;
};
std::vector<LoraSite> lora_sites(const ModelConfig& cfg);

}  // namespace bloinst::model
