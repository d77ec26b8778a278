// Copyright 2026 The BLO-Inst Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bloinst/losses.hpp"
#include "bloinst/models.hpp"
#include "json.hpp"

namespace bloinst::data {

using ad::Tensor;

struct Instance {
    loss::Box box;
    int class_id = 0;
    std::vector<std::uint8_t> mask;  // row-major H x W, 0/1
};

struct Sample {
    std::uint64_t id = 0;
    std::vector<double> image;  // C x H x W in [0, 1]
    std::vector<Instance> instances;
};

struct Dataset {
    std::size_t image_size = 64;
    std::size_t channels = 3;
    std::vector<std::string> classes;
    std::vector<Sample> samples;

    std::size_t instance_count() const;
    Tensor image_tensor(std::size_t i) const;  // [C, H, W]
    loss::ImageTargets targets(std::size_t i) const;
    bool operator==(const Dataset& other) const;
};

enum class ShapeKind { disk, square, triangle };

const char* shape_name(ShapeKind kind);
ShapeKind shape_from_name(const std::string& name);

struct GenerateOptions {
    std::size_t n = 200;
    std::size_t image_size = 64;
    std::vector<ShapeKind> classes = {ShapeKind::disk, ShapeKind::square, ShapeKind::triangle};
    std::size_t density = 3;
    std::uint64_t seed = 0;
};

// Each sample is drawn from its own stream, mix_seed(seed, index), and holds
// 1..density shapes painted back to front. Masks keep only visible pixels,
// fully hidden shapes are dropped and boxes are the tight pixel extents.
Dataset generate_shapes(const GenerateOptions& options);

// Tight [x1, y1, x2, y2) pixel extent of a mask; throws on an empty mask.
loss::Box mask_box(const std::vector<std::uint8_t>& mask, std::size_t height, std::size_t width);

// Row-major run lengths, starting with a (possibly empty) run of zeros.
std::vector<std::uint64_t> rle_encode(const std::vector<std::uint8_t>& mask);
std::vector<std::uint8_t> rle_decode(const std::vector<std::uint64_t>& counts, std::size_t pixels);

inline constexpr int kAnnotationVersion = 1;
inline constexpr const char* kAnnotationFile = "annotations.json";

// Writes <dir>/annotations.json plus one raw little-endian float64 image blob
// per sample under <dir>/images/.
void save_annotations(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_annotations(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    model::ModelConfig model;
    std::vector<std::string> classes;
    nlohmann::json config;  // training configuration echo
    model::DetectorParams phi;
    model::SegmenterParams theta;
};

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Digest of the checkpoint payload (both parameter sets in file order).
std::string checkpoint_digest(const Checkpoint& checkpoint);

nlohmann::json to_json(const model::ModelConfig& cfg);
model::ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace bloinst::data
