// Copyright 2026 The BLO-Inst Authors
// SPDX-License-Identifier: Apache-2.0

#include "bloinst/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "bloinst/digest.hpp"
#include "bloinst/error.hpp"
#include "bloinst/rng.hpp"

namespace bloinst::data {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Dataset

std::size_t Dataset::instance_count() const {
    std::size_t n = 0;
    for (const auto& s : samples) {
        n += s.instances.size();
    }
    return n;
}

Tensor Dataset::image_tensor(std::size_t i) const {
    return Tensor({channels, image_size, image_size}, samples.at(i).image);
}

loss::ImageTargets Dataset::targets(std::size_t i) const {
    loss::ImageTargets t;
    for (const auto& inst : samples.at(i).instances) {
        t.boxes.push_back(inst.box);
        t.classes.push_back(inst.class_id);
        t.masks.emplace_back(ad::Shape{image_size, image_size}, std::vector<double>(inst.mask.begin(), inst.mask.end()));
    }
    return t;
}

bool Dataset::operator==(const Dataset& other) const {
    if (image_size != other.image_size || channels != other.channels || classes != other.classes ||
        samples.size() != other.samples.size()) {
        return false;
    }
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const Sample& a = samples[i];
        const Sample& b = other.samples[i];
        if (a.id != b.id || a.image != b.image || a.instances.size() != b.instances.size()) {
            return false;
        }
        for (std::size_t k = 0; k < a.instances.size(); ++k) {
            const Instance& x = a.instances[k];
            const Instance& y = b.instances[k];
            if (!(x.box == y.box) || x.class_id != y.class_id || x.mask != y.mask) {
                return false;
            }
        }
    }
    return true;
}

const char* shape_name(ShapeKind kind) {
    switch (kind) {
    case ShapeKind::disk: return "disk";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
    }
    return "?";
}

ShapeKind shape_from_name(const std::string& name) {
    for (auto k : {ShapeKind::disk, ShapeKind::square, ShapeKind::triangle}) {
        if (name == shape_name(k)) {
            return k;
        }
    }
    throw invalid_argument("unknown shape class '" + name + "' (expected disk, square or triangle)");
}

// ---------------------------------------------------------------------------
// Generator

loss::Box mask_box(const std::vector<std::uint8_t>& mask, std::size_t height, std::size_t width) {
    std::size_t c0 = width, c1 = 0, r0 = height, r1 = 0;
    for (std::size_t r = 0; r < height; ++r) {
        for (std::size_t c = 0; c < width; ++c) {
            if (mask[r * width + c]) {
                c0 = std::min(c0, c);
                c1 = std::max(c1, c + 1);
                r0 = std::min(r0, r);
                r1 = std::max(r1, r + 1);
            }
        }
    }
    if (c0 >= c1) {
        throw invalid_argument("mask_box: empty mask");
    }
    return {static_cast<double>(c0), static_cast<double>(r0), static_cast<double>(c1), static_cast<double>(r1)};
}

namespace {

bool covers(ShapeKind kind, double dx, double dy, double r) {
    switch (kind) {
    case ShapeKind::disk: return dx * dx + dy * dy <= r * r;
    case ShapeKind::square: return std::abs(dx) <= r && std::abs(dy) <= r;
    case ShapeKind::triangle: return dy >= -r && dy <= r && std::abs(dx) <= 0.5 * (dy + r);
    }
    return false;
}

Sample generate_one(const GenerateOptions& o, std::size_t index) {
    Rng rng(mix_seed(o.seed, index));
    const std::size_t s = o.image_size;
    const std::size_t plane = s * s;
    Sample sample;
    sample.id = index;
    sample.image.resize(3 * plane);

    double background[3];
    for (double& b : background) {
        b = rng.uniform(0.0, 0.3);
    }
    for (std::size_t ch = 0; ch < 3; ++ch) {
        for (std::size_t i = 0; i < plane; ++i) {
            sample.image[ch * plane + i] = background[ch];
        }
    }

    // Owner of each pixel after painting back to front; -1 is background.
    std::vector<int> owner(plane, -1);
    const std::size_t count = 1 + rng.below(o.density);
    std::vector<int> classes(count);
    const double r_min = 0.08 * static_cast<double>(s);
    const double r_max = 0.2 * static_cast<double>(s);
    for (std::size_t k = 0; k < count; ++k) {
        const std::size_t cls = rng.below(o.classes.size());
        classes[k] = static_cast<int>(cls);
        const ShapeKind kind = o.classes[cls];
        const double r = rng.uniform(r_min, r_max);
        const double cx = rng.uniform(r, static_cast<double>(s) - r);
        const double cy = rng.uniform(r, static_cast<double>(s) - r);
        double color[3];
        for (double& c : color) {
            c = rng.uniform(0.45, 1.0);
        }
        for (std::size_t y = 0; y < s; ++y) {
            for (std::size_t x = 0; x < s; ++x) {
                if (!covers(kind, static_cast<double>(x) + 0.5 - cx, static_cast<double>(y) + 0.5 - cy, r)) {
                    continue;
                }
                owner[y * s + x] = static_cast<int>(k);
                for (std::size_t ch = 0; ch < 3; ++ch) {
                    sample.image[ch * plane + y * s + x] = color[ch];
                }
            }
        }
    }
    for (auto& v : sample.image) {
        v = std::clamp(v + 0.04 * rng.normal(), 0.0, 1.0);
    }

    for (std::size_t k = 0; k < count; ++k) {
        Instance inst;
        inst.class_id = classes[k];
        inst.mask.assign(plane, 0);
        bool any = false;
        for (std::size_t i = 0; i < plane; ++i) {
            if (owner[i] == static_cast<int>(k)) {
                inst.mask[i] = 1;
                any = true;
            }
        }
        if (!any) {
            continue;
        }
        inst.box = mask_box(inst.mask, s, s);
        sample.instances.push_back(std::move(inst));
    }
    return sample;
}

}  // namespace

Dataset generate_shapes(const GenerateOptions& options) {
    if (options.n == 0) {
        throw invalid_argument("generate: n must be at least 1");
    }
    if (options.image_size < 32) {
        throw invalid_argument("generate: image size must be at least 32, got " + std::to_string(options.image_size));
    }
    if (options.classes.empty() || options.density == 0) {
        throw invalid_argument("generate: need at least one class and density >= 1");
    }
    Dataset d;
    d.image_size = options.image_size;
    d.channels = 3;
    for (auto k : options.classes) {
        d.classes.push_back(shape_name(k));
    }
    d.samples.reserve(options.n);
    for (std::size_t i = 0; i < options.n; ++i) {
        d.samples.push_back(generate_one(options, i));
    }
    return d;
}

// ---------------------------------------------------------------------------
// RLE

std::vector<std::uint64_t> rle_encode(const std::vector<std::uint8_t>& mask) {
    std::vector<std::uint64_t> counts;
    std::uint8_t current = 0;
    std::uint64_t run = 0;
    for (std::uint8_t v : mask) {
        const std::uint8_t bit = v ? 1 : 0;
        if (bit != current) {
            counts.push_back(run);
            current = bit;
            run = 0;
        }
        ++run;
    }
    counts.push_back(run);
    return counts;
}

std::vector<std::uint8_t> rle_decode(const std::vector<std::uint64_t>& counts, std::size_t pixels) {
    std::vector<std::uint8_t> mask;
    mask.reserve(pixels);
    std::uint8_t value = 0;
    for (std::uint64_t run : counts) {
        if (run > pixels - mask.size()) {
            throw Error(ErrorCode::io, "malformed RLE: runs exceed " + std::to_string(pixels) + " pixels");
        }
        mask.insert(mask.end(), run, value);
        value ^= 1;
    }
    if (mask.size() != pixels) {
        throw Error(ErrorCode::io, "malformed RLE: runs sum to " + std::to_string(mask.size()) + ", expected " +
                                       std::to_string(pixels));
    }
    return mask;
}

// ---------------------------------------------------------------------------
// Annotation files

namespace {

std::string bytes_digest(const void* data, std::size_t n) {
    Fnv1a h;
    h.update(std::span(static_cast<const unsigned char*>(data), n));
    return h.hex();
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw io_error("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, const void* data, std::size_t n) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out) {
        throw io_error("cannot write " + path.string());
    }
}

std::string image_file(std::uint64_t id) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "images/%06llu.bin", static_cast<unsigned long long>(id));
    return buf;
}

}  // namespace

void save_annotations(const Dataset& dataset, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir / "images", ec);
    if (ec) {
        throw io_error("cannot create " + (dir / "images").string() + ": " + ec.message());
    }
    json images = json::array();
    json annotations = json::array();
    std::uint64_t next_id = 0;
    const std::size_t s = dataset.image_size;
    for (const auto& sample : dataset.samples) {
        const std::size_t bytes = sample.image.size() * sizeof(double);
        const std::string file = image_file(sample.id);
        write_file(dir / file, sample.image.data(), bytes);
        images.push_back({{"id", sample.id},
                          {"file", file},
                          {"width", s},
                          {"height", s},
                          {"channels", dataset.channels},
                          {"digest", bytes_digest(sample.image.data(), bytes)}});
        for (const auto& inst : sample.instances) {
            const auto& b = inst.box;
            annotations.push_back({{"id", next_id++},
                                   {"image_id", sample.id},
                                   {"category_id", inst.class_id},
                                   {"bbox", {b.x1, b.y1, b.width(), b.height()}},
                                   {"segmentation", {{"size", {s, s}}, {"counts", rle_encode(inst.mask)}}}});
        }
    }
    json categories = json::array();
    for (std::size_t c = 0; c < dataset.classes.size(); ++c) {
        categories.push_back({{"id", c}, {"name", dataset.classes[c]}});
    }
    const json doc = {{"format", "bloinst-annotations"},
                      {"version", kAnnotationVersion},
                      {"image_size", s},
                      {"channels", dataset.channels},
                      {"categories", categories},
                      {"images", images},
                      {"annotations", annotations}};
    const std::string text = doc.dump(1);
    write_file(dir / kAnnotationFile, text.data(), text.size());
}

Dataset load_annotations(const fs::path& dir) {
    const fs::path file = dir / kAnnotationFile;
    json doc;
    try {
        doc = json::parse(read_file(file));
    } catch (const json::parse_error& e) {
        throw io_error("malformed annotation file " + file.string() + ": " + e.what());
    }
    try {
        if (doc.at("format") != "bloinst-annotations") {
            throw io_error(file.string() + " is not an annotation file");
        }
        const int version = doc.at("version").get<int>();
        if (version != kAnnotationVersion) {
            throw Error(ErrorCode::compatibility, "annotation format version " + std::to_string(version) +
                                                      " is not supported (expected " +
                                                      std::to_string(kAnnotationVersion) + ")");
        }
        Dataset d;
        d.image_size = doc.at("image_size").get<std::size_t>();
        d.channels = doc.at("channels").get<std::size_t>();
        const std::size_t plane = d.image_size * d.image_size;
        for (const auto& c : doc.at("categories")) {
            if (c.at("id").get<std::size_t>() != d.classes.size()) {
                throw io_error("category ids must be 0..C-1 in order");
            }
            d.classes.push_back(c.at("name").get<std::string>());
        }
        std::vector<std::size_t> index_of_id;
        for (const auto& im : doc.at("images")) {
            Sample sample;
            sample.id = im.at("id").get<std::uint64_t>();
            const fs::path blob = dir / im.at("file").get<std::string>();
            const std::string bytes = read_file(blob);
            if (bytes.size() != d.channels * plane * sizeof(double)) {
                throw io_error("image blob " + blob.string() + " holds " + std::to_string(bytes.size()) +
                               " bytes, expected " + std::to_string(d.channels * plane * sizeof(double)));
            }
            if (bytes_digest(bytes.data(), bytes.size()) != im.at("digest").get<std::string>()) {
                throw io_error("digest mismatch for image blob " + blob.string());
            }
            sample.image.resize(d.channels * plane);
            std::memcpy(sample.image.data(), bytes.data(), bytes.size());
            if (sample.id >= index_of_id.size()) {
                index_of_id.resize(sample.id + 1, SIZE_MAX);
            }
            index_of_id[sample.id] = d.samples.size();
            d.samples.push_back(std::move(sample));
        }
        for (const auto& a : doc.at("annotations")) {
            const auto image_id = a.at("image_id").get<std::uint64_t>();
            if (image_id >= index_of_id.size() || index_of_id[image_id] == SIZE_MAX) {
                throw io_error("annotation refers to unknown image " + std::to_string(image_id));
            }
            Instance inst;
            inst.class_id = a.at("category_id").get<int>();
            if (inst.class_id < 0 || static_cast<std::size_t>(inst.class_id) >= d.classes.size()) {
                throw io_error("annotation category " + std::to_string(inst.class_id) + " is undefined");
            }
            const auto bbox = a.at("bbox").get<std::vector<double>>();
            if (bbox.size() != 4) {
                throw io_error("bbox must have 4 numbers");
            }
            inst.box = {bbox[0], bbox[1], bbox[0] + bbox[2], bbox[1] + bbox[3]};
            const auto& seg = a.at("segmentation");
            const auto size = seg.at("size").get<std::vector<std::size_t>>();
            if (size.size() != 2 || size[0] != d.image_size || size[1] != d.image_size) {
                throw io_error("segmentation size does not match the image size");
            }
            inst.mask = rle_decode(seg.at("counts").get<std::vector<std::uint64_t>>(), plane);
            d.samples[index_of_id[image_id]].instances.push_back(std::move(inst));
        }
        return d;
    } catch (const json::exception& e) {
        throw io_error("malformed annotation file " + file.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

json to_json(const model::ModelConfig& c) {
    return {{"image_size", c.image_size},         {"channels", c.channels},
            {"num_classes", c.num_classes},       {"grid_stride", c.grid_stride},
            {"mask_size", c.mask_size},           {"encoder_stride", c.encoder_stride},
            {"encoder_channels", c.encoder_channels}, {"detector_width", c.detector_width},
            {"token_dim", c.token_dim},           {"hidden_dim", c.hidden_dim},
            {"lora_rank", c.lora_rank},           {"lora_scale", c.lora_scale}};
}

model::ModelConfig model_config_from_json(const json& j) {
    model::ModelConfig c;
    auto read = [&](const char* key, auto& field) {
        if (j.contains(key)) {
            j.at(key).get_to(field);
        }
    };
    try {
        read("image_size", c.image_size);
        read("channels", c.channels);
        read("num_classes", c.num_classes);
        read("grid_stride", c.grid_stride);
        read("mask_size", c.mask_size);
        read("encoder_stride", c.encoder_stride);
        read("encoder_channels", c.encoder_channels);
        read("detector_width", c.detector_width);
        read("token_dim", c.token_dim);
        read("hidden_dim", c.hidden_dim);
        read("lora_rank", c.lora_rank);
        read("lora_scale", c.lora_scale);
    } catch (const json::exception& e) {
        throw invalid_argument(std::string("model config: ") + e.what());
    }
    model::validate(c);
    return c;
}

namespace {

constexpr char kMagic[4] = {'B', 'L', 'O', 'I'};

void append_params(const model::ParamSet& set, const char* which, json& entries, std::string& payload) {
    for (const auto& p : set) {
        entries.push_back({{"set", which},
                           {"name", p.name},
                           {"role", model::role_name(p.role)},
                           {"shape", p.value.shape()}});
        payload.append(reinterpret_cast<const char*>(p.value.data()), p.value.size() * sizeof(double));
    }
}

std::string payload_of(const Checkpoint& c, json& entries) {
    std::string payload;
    append_params(c.phi, "phi", entries, payload);
    append_params(c.theta, "theta", entries, payload);
    return payload;
}

}  // namespace

std::string checkpoint_digest(const Checkpoint& checkpoint) {
    json entries = json::array();
    const std::string payload = payload_of(checkpoint, entries);
    return bytes_digest(payload.data(), payload.size());
}

void save_checkpoint(const Checkpoint& checkpoint, const fs::path& path) {
    json entries = json::array();
    const std::string payload = payload_of(checkpoint, entries);
    const json header = {{"model", to_json(checkpoint.model)},
                         {"classes", checkpoint.classes},
                         {"config", checkpoint.config},
                         {"dtype", "float64-le"},
                         {"params", entries},
                         {"payload_bytes", payload.size()},
                         {"digest", bytes_digest(payload.data(), payload.size())}};
    const std::string text = header.dump();
    std::string out(kMagic, 4);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t header_len = text.size();
    out.append(reinterpret_cast<const char*>(&version), sizeof version);
    out.append(reinterpret_cast<const char*>(&header_len), sizeof header_len);
    out += text;
    out += payload;
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
    write_file(path, out.data(), out.size());
}

Checkpoint load_checkpoint(const fs::path& path) {
    const std::string bytes = read_file(path);
    constexpr std::size_t prefix = 4 + sizeof(std::uint32_t) + sizeof(std::uint64_t);
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw io_error(path.string() + ": bad magic, not a checkpoint");
    }
    if (bytes.size() < prefix) {
        throw io_error(path.string() + ": truncated checkpoint, expected at least " + std::to_string(prefix) +
                       " bytes, found " + std::to_string(bytes.size()));
    }
    std::uint32_t version = 0;
    std::uint64_t header_len = 0;
    std::memcpy(&version, bytes.data() + 4, sizeof version);
    std::memcpy(&header_len, bytes.data() + 8, sizeof header_len);
    if (version != kCheckpointVersion) {
        throw Error(ErrorCode::compatibility, path.string() + ": checkpoint format version " +
                                                  std::to_string(version) + " is not supported by this reader (expects " +
                                                  std::to_string(kCheckpointVersion) + ")");
    }
    if (header_len > bytes.size() - prefix) {
        throw io_error(path.string() + ": truncated checkpoint, expected at least " +
                       std::to_string(prefix + header_len) + " bytes, found " + std::to_string(bytes.size()));
    }
    json header;
    try {
        header = json::parse(bytes.substr(prefix, header_len));
    } catch (const json::parse_error& e) {
        throw io_error(path.string() + ": malformed checkpoint header: " + e.what());
    }
    try {
        const auto payload_bytes = header.at("payload_bytes").get<std::size_t>();
        const std::size_t expected = prefix + header_len + payload_bytes;
        if (bytes.size() != expected) {
            throw io_error(path.string() + ": truncated checkpoint, expected " + std::to_string(expected) +
                           " bytes, found " + std::to_string(bytes.size()));
        }
        if (header.at("dtype") != "float64-le") {
            throw Error(ErrorCode::compatibility, path.string() + ": unsupported dtype " + header.at("dtype").dump());
        }
        const char* payload = bytes.data() + prefix + header_len;
        if (bytes_digest(payload, payload_bytes) != header.at("digest").get<std::string>()) {
            throw io_error(path.string() + ": checkpoint digest mismatch");
        }
        Checkpoint c;
        c.model = model_config_from_json(header.at("model"));
        c.classes = header.at("classes").get<std::vector<std::string>>();
        c.config = header.at("config");
        std::size_t offset = 0;
        for (const auto& e : header.at("params")) {
            const auto shape = e.at("shape").get<ad::Shape>();
            const std::size_t n = ad::shape_numel(shape);
            if (offset + n * sizeof(double) > payload_bytes) {
                throw io_error(path.string() + ": parameter table exceeds payload");
            }
            std::vector<double> v(n);
            std::memcpy(v.data(), payload + offset, n * sizeof(double));
            offset += n * sizeof(double);
            const std::string set = e.at("set").get<std::string>();
            auto& target = set == "phi" ? c.phi : set == "theta" ? c.theta : throw io_error("unknown set " + set);
            target.add(e.at("name").get<std::string>(), model::role_from_name(e.at("role").get<std::string>()),
                       Tensor(shape, std::move(v)));
        }
        if (offset != payload_bytes) {
            throw io_error(path.string() + ": payload holds " + std::to_string(payload_bytes - offset) +
                           " unaccounted bytes");
        }
        return c;
    } catch (const json::exception& e) {
        throw io_error(path.string() + ": malformed checkpoint header: " + e.what());
    }
}

}  // namespace bloinst::data
