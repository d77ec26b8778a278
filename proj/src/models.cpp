// Copyright 2026 The BLO-Inst Authors
// SPDX-License-Identifier: Apache-2.0

#include "bloinst/models.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

#include "bloinst/digest.hpp"
#include "bloinst/error.hpp"
#include "bloinst/rng.hpp"

namespace bloinst::model {

using namespace ad;

void validate(const ModelConfig& cfg) {
    if (cfg.image_size < 8 || cfg.channels == 0 || cfg.num_classes == 0) {
        throw invalid_argument("model config: image_size >= 8, channels >= 1 and num_classes >= 1 required");
    }
    if (!std::has_single_bit(cfg.grid_stride) || cfg.grid_stride < 2 || cfg.grid_stride > 16 ||
        cfg.image_size % cfg.grid_stride != 0) {
        throw invalid_argument("model config: grid stride " + std::to_string(cfg.grid_stride) +
                               " must be a power of two in [2, 16] dividing image size " +
                               std::to_string(cfg.image_size));
    }
    if (cfg.mask_size != cfg.image_size) {
        throw invalid_argument("model config: mask size must equal image size");
    }
    if ((cfg.encoder_stride != 1 && cfg.encoder_stride != 2) || cfg.image_size % cfg.encoder_stride != 0) {
        throw invalid_argument("model config: encoder stride must be 1 or 2");
    }
    if (cfg.lora_rank == 0 || cfg.hidden_dim == 0 || cfg.token_dim == 0 || cfg.encoder_channels == 0 ||
        cfg.detector_width == 0) {
        throw invalid_argument("model config: widths and LoRA rank must be positive");
    }
}

const char* role_name(ParamRole role) {
    switch (role) {
    case ParamRole::detector: return "detector";
    case ParamRole::encoder: return "encoder";
    case ParamRole::decoder_base: return "decoder_base";
    case ParamRole::lora_a: return "lora_a";
    case ParamRole::lora_b: return "lora_b";
    case ParamRole::head: return "head";
    }
    return "?";
}

ParamRole role_from_name(const std::string& name) {
    for (auto r : {ParamRole::detector, ParamRole::encoder, ParamRole::decoder_base, ParamRole::lora_a,
                   ParamRole::lora_b, ParamRole::head}) {
        if (name == role_name(r)) {
            return r;
        }
    }
    throw Error(ErrorCode::compatibility, "unknown parameter role '" + name + "'");
}

// ---------------------------------------------------------------------------
// ParamSet

void ParamSet::add(std::string name, ParamRole role, Tensor value) {
    for (const auto& p : params_) {
        if (p.name == name) {
            throw invalid_argument("duplicate parameter " + name);
        }
    }
    params_.push_back({std::move(name), role, value.detach()});
}

std::size_t ParamSet::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (params_[i].name == name) {
            return i;
        }
    }
    throw invalid_argument("no parameter named " + name);
}

const Tensor& ParamSet::get(const std::string& name) const { return params_[index_of(name)].value; }

std::size_t ParamSet::numel() const {
    return numel([](ParamRole) { return true; });
}

std::size_t ParamSet::numel(const std::function<bool(ParamRole)>& select) const {
    std::size_t n = 0;
    for (const auto& p : params_) {
        if (select(p.role)) {
            n += p.value.size();
        }
    }
    return n;
}

std::string ParamSet::digest(const std::function<bool(ParamRole)>& select) const {
    Fnv1a h;
    for (const auto& p : params_) {
        if (!select(p.role)) {
            continue;
        }
        h.update(p.name);
        h.update(shape_str(p.value.shape()));
        h.update(p.value.values());
    }
    return h.hex();
}

std::string ParamSet::digest() const {
    return digest([](ParamRole) { return true; });
}

bool ParamSet::operator==(const ParamSet& other) const {
    if (params_.size() != other.params_.size()) {
        return false;
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const Param& a = params_[i];
        const Param& b = other.params_[i];
        if (a.name != b.name || a.role != b.role || a.value.shape() != b.value.shape()) {
            return false;
        }
        if (!std::equal(a.value.values().begin(), a.value.values().end(), b.value.values().begin(),
                        [](double x, double y) { return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y); })) {
            return false;
        }
    }
    return true;
}

// ---------------------------------------------------------------------------
// Initialization

namespace {

Tensor normal(Rng& rng, Shape shape, double stddev) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) {
        x = stddev * rng.normal();
    }
    return Tensor(std::move(shape), std::move(v));
}

Tensor he_conv(Rng& rng, std::size_t out, std::size_t in, std::size_t k) {
    return normal(rng, {out, in, k, k}, std::sqrt(2.0 / static_cast<double>(in * k * k)));
}

std::size_t stride_two_layers(const ModelConfig& cfg) {
    return static_cast<std::size_t>(std::countr_zero(cfg.grid_stride));
}

constexpr std::size_t kPositionFeatures = 4;

// Prior objectness of 1% so the first steps are not dominated by negatives.
constexpr double kObjectnessPriorLogit = -4.59511985013459;
// Most pixels inside a tight box belong to the object; start at 75%.
constexpr double kMaskPriorLogit = 1.09861228866811;

}  // namespace

DetectorParams init_detector(const ModelConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    Rng rng(mix_seed(seed, 0xD7));
    DetectorParams phi;
    std::size_t in = cfg.channels;
    const std::size_t downs = stride_two_layers(cfg);
    for (std::size_t i = 0; i <= downs; ++i) {
        const std::size_t out = i == 0 ? std::max<std::size_t>(cfg.detector_width / 2, 1) : cfg.detector_width;
        const std::string name = "det.conv" + std::to_string(i + 1);
        phi.add(name + ".weight", ParamRole::detector, he_conv(rng, out, in, 3));
        phi.add(name + ".bias", ParamRole::detector, Tensor::zeros({out}));
        in = out;
    }
    const std::size_t k = 5 + cfg.num_classes;
    phi.add("det.head.weight", ParamRole::detector, normal(rng, {k, in, 1, 1}, 0.01));
    std::vector<double> bias(k, 0.0);
    bias[4] = kObjectnessPriorLogit;
    for (std::size_t c = 5; c < k; ++c) {
        bias[c] = kObjectnessPriorLogit;
    }
    phi.add("det.head.bias", ParamRole::detector, Tensor::vector(std::move(bias)));
    return phi;
}

std::vector<LoraSite> lora_sites(const ModelConfig& cfg) {
    return {
        {"token", cfg.token_dim + cfg.encoder_channels, cfg.hidden_dim},
        {"pixel", cfg.encoder_channels + kPositionFeatures, cfg.hidden_dim},
    };
}

SegmenterParams init_segmenter(const ModelConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    SegmenterParams theta;
    Rng frozen(kFrozenSeed);
    const std::size_t f = cfg.encoder_channels;
    const std::size_t f1 = std::max<std::size_t>(f, 4);
    theta.add("enc.conv1.weight", ParamRole::encoder, he_conv(frozen, f1, cfg.channels, 3));
    theta.add("enc.conv1.bias", ParamRole::encoder, normal(frozen, {f1}, 0.1));
    theta.add("enc.conv2.weight", ParamRole::encoder, he_conv(frozen, f, f1, 3));
    theta.add("enc.conv2.bias", ParamRole::encoder, normal(frozen, {f}, 0.1));
    for (const auto& site : lora_sites(cfg)) {
        theta.add("dec." + site.name + ".weight", ParamRole::decoder_base,
                  normal(frozen, {site.d_out, site.d_in}, std::sqrt(2.0 / static_cast<double>(site.d_in))));
        theta.add("dec." + site.name + ".bias", ParamRole::decoder_base, normal(frozen, {site.d_out}, 0.5));
    }

    Rng rng(mix_seed(seed, 0x5E));
    for (const auto& site : lora_sites(cfg)) {
        theta.add("lora." + site.name + ".A", ParamRole::lora_a,
                  normal(rng, {cfg.lora_rank, site.d_in}, 1.0 / std::sqrt(static_cast<double>(site.d_in))));
        theta.add("lora." + site.name + ".B", ParamRole::lora_b, Tensor::zeros({site.d_out, cfg.lora_rank}));
    }
    theta.add("head.prompt.weight", ParamRole::head, normal(rng, {cfg.token_dim, 4}, 1.0));
    theta.add("head.prompt.bias", ParamRole::head, Tensor::zeros({cfg.token_dim}));
    theta.add("head.out.weight", ParamRole::head,
              normal(rng, {cfg.hidden_dim, cfg.hidden_dim}, 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim))));
    theta.add("head.out.bias", ParamRole::head, Tensor::zeros({cfg.hidden_dim}));
    theta.add("head.mask.bias", ParamRole::head, Tensor::vector({kMaskPriorLogit}));
    return theta;
}

// ---------------------------------------------------------------------------
// Detector

Tensor detector_forward(const Tensor& images, const DetectorParams& phi, const ModelConfig& cfg) {
    if (images.rank() != 4 || images.shape()[1] != cfg.channels || images.shape()[2] != cfg.image_size ||
        images.shape()[3] != cfg.image_size) {
        throw invalid_argument("detector_forward: expected [N," + std::to_string(cfg.channels) + "," +
                               std::to_string(cfg.image_size) + "," + std::to_string(cfg.image_size) +
                               "] images, got " + shape_str(images.shape()));
    }
    const std::size_t downs = stride_two_layers(cfg);
    // Fixed pixel standardization.
    Tensor x = affine(images, 1.0 / kPixelStd, -kPixelMean / kPixelStd);
    for (std::size_t i = 0; i <= downs; ++i) {
        const std::string name = "det.conv" + std::to_string(i + 1);
        const int stride = i < downs ? 2 : 1;
        x = relu(conv2d(x, phi.get(name + ".weight"), phi.get(name + ".bias"), stride, 1));
    }
    x = conv2d(x, phi.get("det.head.weight"), phi.get("det.head.bias"), 1, 0);

    // [N, K, G, G] -> [N, G, G, K]
    const std::size_t n = x.shape()[0], k = x.shape()[1], g = x.shape()[2];
    std::vector<Tensor> per_image;
    per_image.reserve(n);
    for (std::size_t b = 0; b < n; ++b) {
        const Tensor planes = reshape(slice(x, 0, b, b + 1), {k, g * g});
        per_image.push_back(reshape(transpose(planes), {1, g, g, k}));
    }
    return concat(per_image, 0);
}

std::vector<loss::CellPredictions> cell_predictions(const Tensor& grid, const ModelConfig& cfg) {
    const std::size_t g = cfg.grid();
    const std::size_t k = 5 + cfg.num_classes;
    if (grid.rank() != 4 || grid.shape()[1] != g || grid.shape()[2] != g || grid.shape()[3] != k) {
        throw invalid_argument("cell_predictions: expected [N," + std::to_string(g) + "," + std::to_string(g) + "," +
                               std::to_string(k) + "] grid, got " + shape_str(grid.shape()));
    }
    std::vector<double> cols(g * g), rows(g * g);
    for (std::size_t c = 0; c < g * g; ++c) {
        cols[c] = static_cast<double>(c % g);
        rows[c] = static_cast<double>(c / g);
    }
    const Tensor col_offset({g * g, 1}, cols);
    const Tensor row_offset({g * g, 1}, rows);
    const double stride = static_cast<double>(cfg.grid_stride);
    const double max_size = cfg.max_box_size();

    std::vector<loss::CellPredictions> out;
    for (std::size_t b = 0; b < grid.shape()[0]; ++b) {
        const Tensor cells = reshape(slice(grid, 0, b, b + 1), {g * g, k});
        auto column = [&](std::size_t i) { return slice(cells, 1, i, i + 1); };
        const Tensor cx = scale(add(sigmoid(column(0)), col_offset), stride);
        const Tensor cy = scale(add(sigmoid(column(1)), row_offset), stride);
        const Tensor half_w = scale(sigmoid(column(2)), 0.5 * max_size);
        const Tensor half_h = scale(sigmoid(column(3)), 0.5 * max_size);
        loss::CellPredictions p;
        p.boxes = concat({sub(cx, half_w), sub(cy, half_h), add(cx, half_w), add(cy, half_h)}, 1);
        p.obj_logits = column(4);
        p.cls_logits = slice(cells, 1, 5, k);
        out.push_back(std::move(p));
    }
    return out;
}

double Detection::confidence() const {
    double best = 0.0;
    for (double s : class_scores) {
        best = std::max(best, s);
    }
    return objectness * best;
}

namespace {

double sigmoid_value(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

double logit_value(double p) {
    p = std::clamp(p, 1e-12, 1.0 - 1e-12);
    return std::log(p / (1.0 - p));
}

loss::Box clamp_to_image(loss::Box b, double size) {
    b.x1 = std::clamp(b.x1, 0.0, size);
    b.y1 = std::clamp(b.y1, 0.0, size);
    b.x2 = std::clamp(b.x2, 0.0, size);
    b.y2 = std::clamp(b.y2, 0.0, size);
    return b;
}

}  // namespace

std::vector<Detection> decode_detections(const Tensor& grid, const ModelConfig& cfg, double conf_threshold,
                                         double nms_iou) {
    if (!(conf_threshold > 0.0 && conf_threshold < 1.0) || !(nms_iou > 0.0 && nms_iou < 1.0)) {
        throw invalid_argument("decode_detections: thresholds must lie in (0, 1)");
    }
    const std::size_t g = cfg.grid();
    const std::size_t k = 5 + cfg.num_classes;
    if (grid.size() != g * g * k) {
        throw invalid_argument("decode_detections: grid " + shape_str(grid.shape()) + " does not hold " +
                               std::to_string(g) + "x" + std::to_string(g) + "x" + std::to_string(k) + " values");
    }
    const double stride = static_cast<double>(cfg.grid_stride);
    const double max_size = cfg.max_box_size();
    std::vector<Detection> candidates;
    for (std::size_t c = 0; c < g * g; ++c) {
        const double* row = grid.data() + c * k;
        const double obj = sigmoid_value(row[4]);
        if (obj < conf_threshold) {
            continue;
        }
        const double cx = (static_cast<double>(c % g) + sigmoid_value(row[0])) * stride;
        const double cy = (static_cast<double>(c / g) + sigmoid_value(row[1])) * stride;
        const double hw = 0.5 * sigmoid_value(row[2]) * max_size;
        const double hh = 0.5 * sigmoid_value(row[3]) * max_size;
        Detection d;
        d.box = clamp_to_image({cx - hw, cy - hh, cx + hw, cy + hh}, static_cast<double>(cfg.image_size));
        d.objectness = obj;
        d.cell = c;
        d.class_scores.resize(cfg.num_classes);
        for (std::size_t j = 0; j < cfg.num_classes; ++j) {
            d.class_scores[j] = sigmoid_value(row[5 + j]);
            if (d.class_scores[j] > d.class_scores[static_cast<std::size_t>(d.class_id)]) {
                d.class_id = static_cast<int>(j);
            }
        }
        candidates.push_back(std::move(d));
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Detection& a, const Detection& b) { return a.objectness > b.objectness; });
    std::vector<Detection> kept;
    for (auto& d : candidates) {
        bool suppressed = false;
        for (const auto& k2 : kept) {
            if (loss::box_iou(d.box, k2.box) > nms_iou) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) {
            kept.push_back(std::move(d));
        }
    }
    return kept;
}

Tensor encode_detections(const std::vector<Detection>& detections, const ModelConfig& cfg) {
    const std::size_t g = cfg.grid();
    const std::size_t k = 5 + cfg.num_classes;
    const double stride = static_cast<double>(cfg.grid_stride);
    std::vector<double> v(g * g * k, 0.0);
    for (std::size_t c = 0; c < g * g; ++c) {
        v[c * k + 4] = -40.0;
    }
    for (const auto& d : detections) {
        const auto col = std::min(g - 1, static_cast<std::size_t>(std::max(0.0, d.box.center_x() / stride)));
        const auto row = std::min(g - 1, static_cast<std::size_t>(std::max(0.0, d.box.center_y() / stride)));
        double* out = v.data() + (row * g + col) * k;
        out[0] = logit_value(d.box.center_x() / stride - static_cast<double>(col));
        out[1] = logit_value(d.box.center_y() / stride - static_cast<double>(row));
        out[2] = logit_value(d.box.width() / cfg.max_box_size());
        out[3] = logit_value(d.box.height() / cfg.max_box_size());
        out[4] = logit_value(d.objectness);
        for (std::size_t j = 0; j < cfg.num_classes && j < d.class_scores.size(); ++j) {
            out[5 + j] = logit_value(d.class_scores[j]);
        }
    }
    return Tensor({g, g, k}, std::move(v));
}

// ---------------------------------------------------------------------------
// Segmenter

Tensor lora_apply(const Tensor& x, const Tensor& frozen_w, const Tensor& a, const Tensor& b, double scale) {
    if (frozen_w.rank() != 2 || a.rank() != 2 || b.rank() != 2 || x.rank() != 2) {
        throw invalid_argument("lora_apply: expected matrices");
    }
    const std::size_t d_out = frozen_w.shape()[0];
    const std::size_t d_in = frozen_w.shape()[1];
    if (a.shape()[1] != d_in || b.shape()[0] != d_out || x.shape()[1] != d_in) {
        throw invalid_argument("lora_apply: shapes W " + shape_str(frozen_w.shape()) + ", A " + shape_str(a.shape()) +
                               ", B " + shape_str(b.shape()) + ", x " + shape_str(x.shape()) + " do not conform");
    }
    if (a.shape()[0] != b.shape()[1]) {
        throw invalid_argument("lora_apply: rank mismatch, A has " + std::to_string(a.shape()[0]) + " rows but B has " +
                               std::to_string(b.shape()[1]) + " columns");
    }
    const Tensor base = matmul(x, transpose(frozen_w.detach()));
    const Tensor low = matmul(matmul(x, transpose(a)), transpose(b));
    return add(base, ad::scale(low, scale));
}

EncodedImage encode_image(const Tensor& image, const SegmenterParams& theta, const ModelConfig& cfg) {
    if (image.rank() != 3 || image.shape()[0] != cfg.channels || image.shape()[1] != cfg.image_size ||
        image.shape()[2] != cfg.image_size) {
        throw invalid_argument("encode_image: unexpected image shape " + shape_str(image.shape()));
    }
    const Tensor x = reshape(image.detach(), {1, cfg.channels, cfg.image_size, cfg.image_size});
    const Tensor h1 = relu(conv2d(x, theta.get("enc.conv1.weight").detach(), theta.get("enc.conv1.bias").detach(), 1, 1));
    const Tensor h2 = relu(conv2d(h1, theta.get("enc.conv2.weight").detach(), theta.get("enc.conv2.bias").detach(),
                                  static_cast<int>(cfg.encoder_stride), 1));
    const std::size_t f = h2.shape()[1], fh = h2.shape()[2], fw = h2.shape()[3];
    EncodedImage out;
    out.map = reshape(h2, {f, fh, fw});

    const std::size_t m = cfg.mask_size;
    std::vector<double> pixels(m * m * f);
    const double* src = h2.data();
    for (std::size_t r = 0; r < m; ++r) {
        const std::size_t sr = r * fh / m;
        for (std::size_t c = 0; c < m; ++c) {
            const std::size_t sc = c * fw / m;
            for (std::size_t ch = 0; ch < f; ++ch) {
                pixels[(r * m + c) * f + ch] = src[(ch * fh + sr) * fw + sc];
            }
        }
    }
    out.pixels = Tensor({m * m, f}, std::move(pixels));
    std::vector<double> pooled(f, 0.0);
    for (std::size_t ch = 0; ch < f; ++ch) {
        for (std::size_t i = 0; i < fh * fw; ++i) {
            pooled[ch] += src[ch * fh * fw + i];
        }
        pooled[ch] /= static_cast<double>(fh * fw);
    }
    out.pooled = Tensor({1, f}, std::move(pooled));
    return out;
}

Tensor clamp_box(const Tensor& box, const ModelConfig& cfg) {
    const Tensor lo = Tensor::zeros({4});
    const Tensor hi = Tensor::full({4}, static_cast<double>(cfg.image_size));
    return minimum(maximum(reshape(box, {4}), lo), hi);
}

Tensor segmenter_forward(const EncodedImage& features, const Tensor& box_prompt, const SegmenterParams& theta,
                         const ModelConfig& cfg) {
    return segmenter_window(features, box_prompt, theta, cfg, {0, cfg.mask_size, 0, cfg.mask_size});
}

Tensor segmenter_window(const EncodedImage& features, const Tensor& box_prompt, const SegmenterParams& theta,
                        const ModelConfig& cfg, const loss::PixelWindow& window) {
    const std::size_t m = cfg.mask_size;
    const std::size_t f = cfg.encoder_channels;
    if (features.pixels.shape() != Shape{m * m, f} || box_prompt.size() != 4) {
        throw invalid_argument("segmenter_forward: features " + shape_str(features.pixels.shape()) + " / box " +
                               shape_str(box_prompt.shape()) + " do not match the configured geometry");
    }
    if (window.empty() || window.row1 > m || window.col1 > m) {
        throw invalid_argument("segmenter_forward: pixel window outside the " + std::to_string(m) + "x" +
                               std::to_string(m) + " mask");
    }
    const std::size_t rows = window.row1 - window.row0;
    const std::size_t cols = window.col1 - window.col0;
    const std::size_t n = rows * cols;
    const Tensor box = clamp_box(box_prompt, cfg);
    const double s = static_cast<double>(cfg.image_size);
    const double lora_scale = cfg.lora_scale;

    // Prompt token: embedded normalized corners fused with pooled image features.
    const Tensor corners = reshape(ad::scale(box, 1.0 / s), {1, 4});
    const Tensor embed = relu(add(matmul(corners, transpose(theta.get("head.prompt.weight"))),
                                  reshape(theta.get("head.prompt.bias"), {1, cfg.token_dim})));
    const Tensor token = concat({embed, features.pooled}, 1);
    const Tensor hidden = relu(add(lora_apply(token, theta.get("dec.token.weight"), theta.get("lora.token.A"),
                                              theta.get("lora.token.B"), lora_scale),
                                   reshape(theta.get("dec.token.bias"), {1, cfg.hidden_dim})));
    const Tensor mask_vector = add(matmul(hidden, transpose(theta.get("head.out.weight"))),
                                   reshape(theta.get("head.out.bias"), {1, cfg.hidden_dim}));

    // Window pixels: encoder features and centre coordinates.
    std::vector<double> feats(n * f), px(n), py(n);
    const double pitch = s / static_cast<double>(m);
    const double* src = features.pixels.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            const std::size_t pixel = (window.row0 + r) * m + window.col0 + c;
            std::copy(src + pixel * f, src + (pixel + 1) * f, feats.begin() + static_cast<std::ptrdiff_t>(i * f));
            px[i] = (static_cast<double>(window.col0 + c) + 0.5) * pitch;
            py[i] = (static_cast<double>(window.row0 + r) + 0.5) * pitch;
        }
    }

    // Position relative to the box: a = 2u - 1 and 1 - a^2 per axis.
    auto spread = [&](std::size_t i) { return broadcast(slice(box, 0, i, i + 1), {n, 1}); };
    const Tensor x1 = spread(0), y1 = spread(1), x2 = spread(2), y2 = spread(3);
    const Tensor ax = affine(div(sub(Tensor({n, 1}, std::move(px)), x1), sub(x2, x1)), 2.0, -1.0);
    const Tensor ay = affine(div(sub(Tensor({n, 1}, std::move(py)), y1), sub(y2, y1)), 2.0, -1.0);
    const Tensor inside_x = affine(mul(ax, ax), -1.0, 1.0);
    const Tensor inside_y = affine(mul(ay, ay), -1.0, 1.0);
    const Tensor pixel_in = concat({Tensor({n, f}, std::move(feats)), ax, ay, inside_x, inside_y}, 1);

    const Tensor pixel_embed =
        relu(add(lora_apply(pixel_in, theta.get("dec.pixel.weight"), theta.get("lora.pixel.A"),
                            theta.get("lora.pixel.B"), lora_scale),
                 broadcast(reshape(theta.get("dec.pixel.bias"), {1, cfg.hidden_dim}), {n, cfg.hidden_dim})));
    const Tensor logits = add(matmul(pixel_embed, transpose(mask_vector)),
                              broadcast(theta.get("head.mask.bias"), {n, 1}));
    return reshape(logits, {rows, cols});
}

}  // namespace bloinst::model
