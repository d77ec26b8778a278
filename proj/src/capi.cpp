// Copyright 2026 The BLO-Inst Authors
// SPDX-License-Identifier: Apache-2.0

#include "bloinst/bloinst.h"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <new>
#include <optional>
#include <string>

#include "bloinst/data.hpp"
#include "bloinst/engine.hpp"
#include "bloinst/error.hpp"
#include "json.hpp"

using nlohmann::json;
using namespace bloinst;

struct bloi_dataset {
    data::Dataset value;
};

struct bloi_model {
    data::Checkpoint checkpoint;
    std::optional<engine::TrainTrace> trace;
    std::optional<eval::APReport> final_ap;
    std::optional<std::size_t> diverged_at;
};

namespace {

thread_local std::string last_error;

bloi_status fail(bloi_status status, const std::string& message) {
    last_error = message;
    return status;
}

// Runs `body`, mapping exceptions to status codes.
template <typename F>
bloi_status guarded(F&& body) {
    try {
        last_error.clear();
        body();
        return BLOI_OK;
    } catch (const Error& e) {
        return fail(static_cast<bloi_status>(e.code()), e.what());
    } catch (const json::exception& e) {
        return fail(BLOI_ERR_USAGE, std::string("invalid JSON: ") + e.what());
    } catch (const std::bad_alloc&) {
        return fail(BLOI_ERR_INTERNAL, "out of memory");
    } catch (const std::exception& e) {
        return fail(BLOI_ERR_INTERNAL, e.what());
    }
}

char* copy_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (out == nullptr) {
        throw std::bad_alloc();
    }
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

void require(const void* p, const char* what) {
    if (p == nullptr) {
        throw invalid_argument(std::string(what) + " must not be null");
    }
}

json parse_object(const char* text, const char* what) {
    if (text == nullptr || *text == '\0') {
        return json::object();
    }
    json j = json::parse(text);
    if (!j.is_object()) {
        throw invalid_argument(std::string(what) + " must be a JSON object");
    }
    return j;
}

json losses_json(const loss::LossValues& v) {
    return {{"box", v.box}, {"obj", v.obj}, {"cls", v.cls}, {"seg", v.seg}, {"total", v.total}};
}

bloi_losses to_c(const loss::LossValues& v) { return {v.box, v.obj, v.cls, v.seg, v.total}; }

const json kModelKeys = data::to_json(model::ModelConfig{});

bloi_model* make_model(const engine::TrainResult& r, const model::ModelConfig& mc, const data::Dataset& train,
                       const json& config) {
    auto* m = new bloi_model;
    m->checkpoint.model = mc;
    m->checkpoint.classes = train.classes;
    m->checkpoint.config = config;
    m->checkpoint.phi = r.phi;
    m->checkpoint.theta = r.theta;
    m->trace = r.trace;
    m->final_ap = r.final_ap;
    return m;
}

}  // namespace

extern "C" {

const char* bloi_version(void) { return "1.0.0"; }

const char* bloi_last_error(void) { return last_error.c_str(); }

void bloi_string_free(char* s) { std::free(s); }

bloi_status bloi_dataset_generate(const char* options_json, bloi_dataset** out) {
    return guarded([&] {
        require(out, "out");
        *out = nullptr;
        const json j = parse_object(options_json, "generator options");
        data::GenerateOptions o;
        for (const auto& [key, value] : j.items()) {
            if (key == "n") {
                o.n = value.get<std::size_t>();
            } else if (key == "size") {
                o.image_size = value.get<std::size_t>();
            } else if (key == "density") {
                o.density = value.get<std::size_t>();
            } else if (key == "seed") {
                o.seed = value.get<std::uint64_t>();
            } else if (key == "classes") {
                o.classes.clear();
                for (const auto& name : value) {
                    o.classes.push_back(data::shape_from_name(name.get<std::string>()));
                }
            } else {
                throw invalid_argument("unknown generator option '" + key + "'");
            }
        }
        *out = new bloi_dataset{data::generate_shapes(o)};
    });
}

bloi_status bloi_dataset_load(const char* dir, bloi_dataset** out) {
    return guarded([&] {
        require(dir, "dir");
        require(out, "out");
        *out = nullptr;
        *out = new bloi_dataset{data::load_annotations(dir)};
    });
}

bloi_status bloi_dataset_save(const bloi_dataset* dataset, const char* dir) {
    return guarded([&] {
        require(dataset, "dataset");
        require(dir, "dir");
        data::save_annotations(dataset->value, dir);
    });
}

bloi_status bloi_dataset_info(const bloi_dataset* dataset, char** info_json) {
    return guarded([&] {
        require(dataset, "dataset");
        require(info_json, "info_json");
        const auto& d = dataset->value;
        const json j = {{"images", d.samples.size()},
                        {"instances", d.instance_count()},
                        {"image_size", d.image_size},
                        {"channels", d.channels},
                        {"classes", d.classes}};
        *info_json = copy_string(j.dump());
    });
}

void bloi_dataset_free(bloi_dataset* dataset) { delete dataset; }

bloi_status bloi_default_config(char** config_json) {
    return guarded([&] {
        require(config_json, "config_json");
        json j = engine::to_json(engine::TrainConfig{});
        j["model"] = kModelKeys;
        *config_json = copy_string(j.dump(2));
    });
}

bloi_status bloi_train(const bloi_dataset* train, const bloi_dataset* test, const char* strategy,
                       const char* config_json, bloi_model** out) {
    return guarded([&] {
        require(train, "train");
        require(strategy, "strategy");
        require(out, "out");
        *out = nullptr;
        const engine::Strategy s = engine::strategy_from_name(strategy);
        json j = parse_object(config_json, "training config");
        json model_json = json::object();
        if (j.contains("model")) {
            model_json = j.at("model");
            j.erase("model");
            if (!model_json.is_object()) {
                throw invalid_argument("\"model\" must be a JSON object");
            }
            for (const auto& [key, value] : model_json.items()) {
                if (!kModelKeys.contains(key)) {
                    throw invalid_argument("unknown model key '" + key + "'");
                }
            }
        }
        engine::TrainConfig cfg = engine::train_config_from_json(j);
        if (s == engine::Strategy::bilevel_second) {
            cfg.order = engine::Order::second;
        } else if (s == engine::Strategy::bilevel_first) {
            cfg.order = engine::Order::first;
        }
        const model::ModelConfig mc =
            engine::model_config_for(train->value, data::model_config_from_json(model_json));
        if (test != nullptr && (test->value.classes != train->value.classes ||
                                test->value.image_size != train->value.image_size)) {
            throw Error(ErrorCode::compatibility, "test set classes or image size differ from the training set");
        }
        const json echo = {{"strategy", strategy}, {"train", engine::to_json(cfg)}};
        try {
            const engine::TrainResult r =
                engine::run_strategy(s, cfg, mc, train->value, test != nullptr ? &test->value : nullptr);
            *out = make_model(r, mc, train->value, echo);
        } catch (const engine::DivergenceError& e) {
            engine::TrainResult partial{e.last_good_phi, e.last_good_theta, e.trace, std::nullopt};
            *out = make_model(partial, mc, train->value, echo);
            (*out)->diverged_at = e.iteration;
            throw;
        }
    });
}

size_t bloi_model_trace_length(const bloi_model* model) {
    return model != nullptr && model->trace ? model->trace->rows.size() : 0;
}

bloi_status bloi_model_trace_row(const bloi_model* model, size_t index, bloi_trace_row* row) {
    return guarded([&] {
        require(model, "model");
        require(row, "row");
        if (!model->trace || index >= model->trace->rows.size()) {
            throw invalid_argument("trace row " + std::to_string(index) + " out of range");
        }
        const engine::TraceRow& r = model->trace->rows[index];
        *row = bloi_trace_row{};
        row->iteration = r.iteration;
        row->stage = engine::stage_name(r.stage);
        const bool lower = r.stage != engine::Stage::detector_only;
        const bool upper = r.stage != engine::Stage::segmenter_only;
        row->has_lower = lower;
        row->has_upper = upper;
        row->lower = to_c(r.lower);
        row->upper = to_c(r.upper);
        row->has_ap = r.ap.has_value();
        if (r.ap) {
            row->map = r.ap->map;
            row->ap50 = r.ap->ap50;
            row->ap75 = r.ap->ap75;
        }
        row->wall_seconds = r.wall_seconds;
        row->second_term_skipped = r.second_term_skipped;
    });
}

bloi_status bloi_model_summary(const bloi_model* model, char** summary_json) {
    return guarded([&] {
        require(model, "model");
        require(summary_json, "summary_json");
        const auto& c = model->checkpoint;
        json j = {{"config", c.config}, {"model", data::to_json(c.model)}, {"classes", c.classes}};
        if (model->trace) {
            const auto& t = *model->trace;
            j["d1"] = t.d1_size;
            j["d2"] = t.d2_size;
            j["iterations"] = t.rows.size();
            j["second_term_skips"] = t.second_term_skips;
            if (!t.pretrain.empty()) {
                j["pretrain"] = {{"first", losses_json(t.pretrain.front())}, {"last", losses_json(t.pretrain.back())}};
            }
            if (!t.rows.empty()) {
                j["wall_seconds"] = t.rows.back().wall_seconds;
            }
        }
        if (model->final_ap) {
            j["final"] = eval::to_json(*model->final_ap, c.classes);
        }
        if (model->diverged_at) {
            j["diverged_at"] = *model->diverged_at;
        }
        *summary_json = copy_string(j.dump(2));
    });
}

bloi_status bloi_model_save(const bloi_model* model, const char* path) {
    return guarded([&] {
        require(model, "model");
        require(path, "path");
        data::save_checkpoint(model->checkpoint, path);
    });
}

bloi_status bloi_model_load(const char* path, bloi_model** out) {
    return guarded([&] {
        require(path, "path");
        require(out, "out");
        *out = nullptr;
        auto* m = new bloi_model;
        try {
            m->checkpoint = data::load_checkpoint(path);
        } catch (...) {
            delete m;
            throw;
        }
        *out = m;
    });
}

bloi_status bloi_model_digest(const bloi_model* model, char** digest) {
    return guarded([&] {
        require(model, "model");
        require(digest, "digest");
        *digest = copy_string(data::checkpoint_digest(model->checkpoint));
    });
}

bloi_status bloi_model_evaluate(const bloi_model* model, const bloi_dataset* dataset, double conf_threshold,
                                double nms_iou, char** report_json) {
    return guarded([&] {
        require(model, "model");
        require(dataset, "dataset");
        require(report_json, "report_json");
        if (!(conf_threshold > 0.0 && conf_threshold < 1.0)) {
            throw invalid_argument("conf threshold must lie in (0, 1), got " + std::to_string(conf_threshold));
        }
        if (!(nms_iou > 0.0 && nms_iou < 1.0)) {
            throw invalid_argument("nms IoU must lie in (0, 1), got " + std::to_string(nms_iou));
        }
        const auto& c = model->checkpoint;
        const auto& d = dataset->value;
        if (d.classes.size() != c.model.num_classes || d.image_size != c.model.image_size ||
            d.channels != c.model.channels) {
            throw Error(ErrorCode::compatibility,
                        "dataset has " + std::to_string(d.classes.size()) + " classes at " +
                            std::to_string(d.image_size) + "px; the model expects " +
                            std::to_string(c.model.num_classes) + " classes at " + std::to_string(c.model.image_size) +
                            "px");
        }
        const eval::APReport r = engine::evaluate_model(d, c.phi, c.theta, c.model, conf_threshold, nms_iou);
        json j = eval::to_json(r, c.classes);
        j["conf"] = conf_threshold;
        j["nms"] = nms_iou;
        *report_json = copy_string(j.dump(2));
    });
}

void bloi_model_free(bloi_model* model) { delete model; }

}  // extern "C"
