// Copyright 2026 The BLO-Inst Authors
// SPDX-License-Identifier: Apache-2.0

// bloinst command-line tool: generate, train, eval, ablate.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "bloinst/bloinst.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Carries a C API status out of nested helpers.
struct Failure {
    int code;
    std::string message;
};

void check(bloi_status status, const std::string& context) {
    if (status != BLOI_OK) {
        throw Failure{static_cast<int>(status), context + ": " + bloi_last_error()};
    }
}

std::string take(char* s) {
    std::string out = s != nullptr ? s : "";
    bloi_string_free(s);
    return out;
}

struct DatasetDeleter {
    void operator()(bloi_dataset* d) const { bloi_dataset_free(d); }
};
struct ModelDeleter {
    void operator()(bloi_model* m) const { bloi_model_free(m); }
};
using DatasetPtr = std::unique_ptr<bloi_dataset, DatasetDeleter>;
using ModelPtr = std::unique_ptr<bloi_model, ModelDeleter>;

DatasetPtr load_dataset(const std::string& dir) {
    bloi_dataset* d = nullptr;
    check(bloi_dataset_load(dir.c_str(), &d), "loading " + dir);
    return DatasetPtr(d);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    f << text;
    if (!f) {
        throw Failure{BLOI_ERR_IO, "cannot write " + path.string()};
    }
}

void make_dirs(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw Failure{BLOI_ERR_IO, "cannot create " + dir.string() + ": " + ec.message()};
    }
}

json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw Failure{BLOI_ERR_IO, "cannot read " + path};
    }
    try {
        json j = json::parse(f);
        if (!j.is_object()) {
            throw Failure{BLOI_ERR_USAGE, path + ": config must be a JSON object"};
        }
        return j;
    } catch (const json::exception& e) {
        throw Failure{BLOI_ERR_USAGE, path + ": " + e.what()};
    }
}

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

// ---------------------------------------------------------------------------
// Training flags shared by train and ablate. Flags override --config values.

struct TrainFlags {
    std::string config_path;
    std::map<std::string, std::optional<double>> numbers;
    std::map<std::string, std::optional<double>> model_numbers;
    std::optional<bool> lr_decay;
    std::optional<bool> freeze_heads;
    std::optional<bool> train_decoder_base;

    void add_to(CLI::App* app) {
        app->add_option("--config", config_path, "JSON config file; flags take precedence");
        static const std::vector<std::pair<const char*, const char*>> kNumbers = {
            {"alpha", "lower-level (segmenter) learning rate"},
            {"beta", "upper-level (detector) learning rate"},
            {"T", "outer iterations"},
            {"gamma-split", "|D1| / |D2| ratio"},
            {"eps-scale", "finite-difference step numerator"},
            {"pretrain-iters", "detector warmup steps"},
            {"seed", "run seed"},
            {"batch-lower", "segmenter batch size"},
            {"batch-upper", "detector batch size"},
            {"eval-every", "test evaluation period (0: final only)"},
            {"lambda-box", "box loss weight"},
            {"lambda-obj", "objectness loss weight"},
            {"lambda-cls", "class loss weight"},
            {"lambda-seg", "segmentation loss weight"},
            {"focal-alpha", "focal balance factor"},
            {"focal-gamma", "focal modulation exponent"},
            {"conf", "evaluation confidence threshold"},
            {"nms", "evaluation NMS IoU"},
        };
        for (const auto& [name, help] : kNumbers) {
            app->add_option(std::string("--") + name, numbers[name], help)->type_name(type_of(name));
        }
        static const std::vector<std::pair<const char*, const char*>> kModel = {
            {"lora-rank", "LoRA rank"},
            {"hidden-dim", "decoder hidden width"},
            {"detector-width", "detector channels"},
            {"grid-stride", "detector grid stride"},
        };
        for (const auto& [name, help] : kModel) {
            app->add_option(std::string("--") + name, model_numbers[name], help)->type_name(type_of(name));
        }
        app->add_flag("--lr-decay,!--no-lr-decay", lr_decay, "linear learning-rate decay");
        app->add_flag("--freeze-heads", freeze_heads, "train only the LoRA pairs");
        app->add_flag("--train-decoder-base", train_decoder_base, "also train the decoder base weights");
    }

    static std::string key_of(std::string flag) {
        static const std::map<std::string, std::string> kRenamed = {{"gamma-split", "gamma_split"},
                                                                    {"eps-scale", "eps_scale"},
                                                                    {"pretrain-iters", "pretrain_iters"},
                                                                    {"batch-lower", "batch_lower"},
                                                                    {"batch-upper", "batch_upper"},
                                                                    {"eval-every", "eval_every"},
                                                                    {"lambda-box", "lambda_box"},
                                                                    {"lambda-obj", "lambda_obj"},
                                                                    {"lambda-cls", "lambda_cls"},
                                                                    {"lambda-seg", "lambda_seg"},
                                                                    {"focal-alpha", "focal_alpha"},
                                                                    {"focal-gamma", "focal_gamma"},
                                                                    {"lora-rank", "lora_rank"},
                                                                    {"hidden-dim", "hidden_dim"},
                                                                    {"detector-width", "detector_width"},
                                                                    {"grid-stride", "grid_stride"}};
        const auto it = kRenamed.find(flag);
        return it == kRenamed.end() ? flag : it->second;
    }

    static bool is_integer(const std::string& key) {
        static const std::vector<std::string> kIntegers = {"T",          "pretrain_iters", "seed",
                                                           "batch_lower", "batch_upper",   "eval_every",
                                                           "lora_rank",  "hidden_dim",     "detector_width",
                                                           "grid_stride"};
        return std::find(kIntegers.begin(), kIntegers.end(), key) != kIntegers.end();
    }

    static std::string type_of(const std::string& flag) { return is_integer(key_of(flag)) ? "INT" : "FLOAT"; }

    static json number(const std::string& key, double v) {
        if (is_integer(key)) {
            if (v < 0 || v != std::floor(v)) {
                throw Failure{BLOI_ERR_USAGE, "--" + key + " must be a non-negative integer"};
            }
            return static_cast<std::uint64_t>(v);
        }
        return v;
    }

    // Config file merged with explicit flags; "strategy" stays in the result.
    json effective() const {
        json j = config_path.empty() ? json::object() : read_json_file(config_path);
        for (const auto& [flag, value] : numbers) {
            if (value) {
                const std::string key = key_of(flag);
                j[key] = number(key, *value);
            }
        }
        for (const auto& [flag, value] : model_numbers) {
            if (value) {
                const std::string key = key_of(flag);
                j["model"][key] = number(key, *value);
            }
        }
        if (lr_decay) {
            j["lr_decay"] = *lr_decay;
        }
        if (freeze_heads && *freeze_heads) {
            j["train_heads"] = false;
        }
        if (train_decoder_base) {
            j["train_decoder_base"] = *train_decoder_base;
        }
        return j;
    }
};

// Full echo of a run: defaults, then config values.
json complete_config(const json& partial, const std::string& strategy) {
    char* defaults = nullptr;
    check(bloi_default_config(&defaults), "default config");
    json j = json::parse(take(defaults));
    for (const auto& [key, value] : partial.items()) {
        if (key == "model") {
            for (const auto& [mk, mv] : value.items()) {
                j["model"][mk] = mv;
            }
        } else {
            j[key] = value;
        }
    }
    j["strategy"] = strategy;
    return j;
}

// Geometry keys come from the dataset; leave them out of the request.
json train_request(json config) {
    config.erase("strategy");
    for (const char* k : {"image_size", "channels", "num_classes", "mask_size"}) {
        config["model"].erase(k);
    }
    return config;
}

std::string trace_csv(const bloi_model* model) {
    std::ostringstream os;
    os << "iteration,stage";
    for (const char* level : {"lower", "upper"}) {
        for (const char* c : {"box", "obj", "cls", "seg", "total"}) {
            os << ',' << level << '_' << c;
        }
    }
    os << ",map,ap50,ap75,second_term_skipped,wall_seconds\n";
    const size_t n = bloi_model_trace_length(model);
    for (size_t i = 0; i < n; ++i) {
        bloi_trace_row r;
        check(bloi_model_trace_row(model, i, &r), "trace");
        os << r.iteration << ',' << r.stage;
        for (int level = 0; level < 2; ++level) {
            const bloi_losses& l = level == 0 ? r.lower : r.upper;
            const bool has = level == 0 ? r.has_lower : r.has_upper;
            for (double v : {l.box, l.obj, l.cls, l.seg, l.total}) {
                os << ',';
                if (has) {
                    os << fmt(v);
                }
            }
        }
        if (r.has_ap) {
            os << ',' << fmt(r.map) << ',' << fmt(r.ap50) << ',' << fmt(r.ap75);
        } else {
            os << ",,,";
        }
        os << ',' << r.second_term_skipped << ',' << fmt(r.wall_seconds) << '\n';
    }
    return os.str();
}

struct RunOutcome {
    int status = BLOI_OK;
    std::string error;
    json summary;
};

// Trains and writes model.bloi, trace.csv, summary.json and config.json.
RunOutcome run_training(const bloi_dataset* train, const bloi_dataset* test, const json& config,
                        const fs::path& out, bool save_model) {
    make_dirs(out);
    const std::string strategy = config.at("strategy").get<std::string>();
    write_text(out / "config.json", config.dump(2) + "\n");
    bloi_model* raw = nullptr;
    const std::string request = train_request(config).dump();
    RunOutcome outcome;
    outcome.status = bloi_train(train, test, strategy.c_str(), request.c_str(), &raw);
    ModelPtr model(raw);
    if (outcome.status != BLOI_OK) {
        outcome.error = bloi_last_error();
    }
    if (model) {
        if (save_model) {
            check(bloi_model_save(model.get(), (out / "model.bloi").string().c_str()), "saving checkpoint");
        }
        write_text(out / "trace.csv", trace_csv(model.get()));
        char* s = nullptr;
        check(bloi_model_summary(model.get(), &s), "summary");
        outcome.summary = json::parse(take(s));
        if (!outcome.error.empty()) {
            outcome.summary["error"] = outcome.error;
        }
        write_text(out / "summary.json", outcome.summary.dump(2) + "\n");
    }
    return outcome;
}

// ---------------------------------------------------------------------------
// Commands

int cmd_generate(std::size_t n, std::size_t size, const std::vector<std::string>& classes, std::size_t density,
                 std::uint64_t seed, const std::string& out) {
    json options = {{"n", n}, {"size", size}, {"density", density}, {"seed", seed}};
    if (!classes.empty()) {
        options["classes"] = classes;
    }
    bloi_dataset* raw = nullptr;
    check(bloi_dataset_generate(options.dump().c_str(), &raw), "generate");
    DatasetPtr d(raw);
    check(bloi_dataset_save(d.get(), out.c_str()), "saving dataset");
    char* info = nullptr;
    check(bloi_dataset_info(d.get(), &info), "info");
    const json j = json::parse(take(info));
    std::cout << "generated " << j["images"] << " images, " << j["instances"] << " instances, classes "
              << j["classes"].dump() << " -> " << out << "\n";
    return 0;
}

int cmd_train(const TrainFlags& flags, const std::string& strategy_flag, const std::string& data_dir,
              const std::string& test_dir, const std::string& out) {
    json partial = flags.effective();
    std::string strategy = partial.value("strategy", std::string("bilevel-first"));
    if (!strategy_flag.empty()) {
        strategy = strategy_flag;
    }
    partial.erase("strategy");
    const json config = complete_config(partial, strategy);
    const DatasetPtr train = load_dataset(data_dir);
    const DatasetPtr test = test_dir.empty() ? nullptr : load_dataset(test_dir);
    const RunOutcome r = run_training(train.get(), test.get(), config, out, true);
    if (r.status != BLOI_OK) {
        std::cerr << "error: " << r.error << "\n";
        if (r.status == BLOI_ERR_DIVERGENCE) {
            std::cerr << "last good checkpoint kept in " << (fs::path(out) / "model.bloi").string() << "\n";
        }
        return r.status;
    }
    std::cout << strategy << ": " << r.summary.value("iterations", 0) << " iterations";
    if (r.summary.contains("final")) {
        const auto& f = r.summary["final"];
        std::cout << ", test mAP " << fmt(f["mAP"]) << " AP50 " << fmt(f["AP50"]) << " AP75 " << fmt(f["AP75"]);
    }
    std::cout << " -> " << out << "\n";
    return 0;
}

int cmd_eval(const std::string& model_path, const std::string& data_dir, double conf, double nms,
             const std::string& out) {
    bloi_model* raw = nullptr;
    check(bloi_model_load(model_path.c_str(), &raw), "loading " + model_path);
    ModelPtr model(raw);
    const DatasetPtr data = load_dataset(data_dir);
    char* report = nullptr;
    check(bloi_model_evaluate(model.get(), data.get(), conf, nms, &report), "evaluate");
    const std::string text = take(report);
    if (!out.empty()) {
        write_text(out, text + "\n");
    }
    const json j = json::parse(text);
    std::cout << "mAP " << fmt(j["mAP"]) << " AP50 " << fmt(j["AP50"]) << " AP75 " << fmt(j["AP75"]) << " ("
              << j["n_pred"] << " predictions, " << j["n_gt"] << " instances)\n";
    return 0;
}

struct Cell {
    std::string strategy;
    double gamma;
    std::uint64_t seed;
    std::string dir;
    RunOutcome outcome;
};

std::string gamma_label(double g) {
    std::ostringstream os;
    os << g;
    return os.str();
}

int cmd_ablate(const TrainFlags& flags, std::vector<std::string> strategies, std::vector<double> gammas,
               std::vector<std::uint64_t> seeds, const std::string& data_dir, const std::string& test_dir,
               const std::string& out, bool force) {
    if (seeds.empty() || strategies.empty() || gammas.empty()) {
        throw Failure{BLOI_ERR_USAGE, "ablate needs at least one strategy, gamma and seed"};
    }
    const fs::path sweep = fs::path(out) / "sweep.csv";
    if (fs::exists(sweep) && !force) {
        throw Failure{BLOI_ERR_USAGE, sweep.string() + " exists; refusing to overwrite without --force"};
    }
    json base = flags.effective();
    base.erase("strategy");
    const DatasetPtr train = load_dataset(data_dir);
    const DatasetPtr test = load_dataset(test_dir);

    std::vector<Cell> cells;
    for (const auto& s : strategies) {
        for (double g : gammas) {
            for (auto seed : seeds) {
                std::ostringstream dir;
                dir << "cells/" << s << "_g" << gamma_label(g) << "_s" << seed;
                cells.push_back({s, g, seed, dir.str(), {}});
            }
        }
    }
    // Validate every configuration before spending time on runs.
    for (const auto& s : strategies) {
        (void)complete_config(base, s);
        if (s != "bilevel-first" && s != "bilevel-second" && s != "single-level" && s != "separate") {
            throw Failure{BLOI_ERR_USAGE, "unknown strategy '" + s + "'"};
        }
    }

    unsigned threads = 1;
    if (const char* env = std::getenv("BLOI_THREADS")) {
        threads = static_cast<unsigned>(std::max(1, std::atoi(env)));
    }
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) {
            Cell& c = cells[i];
            json partial = base;
            partial["seed"] = c.seed;
            partial["gamma_split"] = c.gamma;
            const json config = complete_config(partial, c.strategy);
            try {
                c.outcome = run_training(train.get(), test.get(), config, fs::path(out) / c.dir, false);
            } catch (const Failure& f) {
                c.outcome.status = f.code;
                c.outcome.error = f.message;
            }
            std::cerr << c.dir << ": "
                      << (c.outcome.status == BLOI_OK ? "ok" : "failed (" + c.outcome.error + ")") << "\n";
        }
    };
    std::vector<std::thread> pool;
    for (unsigned t = 1; t < std::min<std::size_t>(threads, cells.size()); ++t) {
        pool.emplace_back(worker);
    }
    worker();
    for (auto& t : pool) {
        t.join();
    }

    std::ostringstream csv;
    csv << "kind,strategy,gamma,seed,status,map,ap50,ap75,map_std,ap50_std,ap75_std,n,d1,d2,wall_seconds\n";
    auto status_of = [](const RunOutcome& o) -> std::string {
        switch (o.status) {
        case BLOI_OK: return "ok";
        case BLOI_ERR_DIVERGENCE: return "diverged";
        default: return "error";
        }
    };
    int failures = 0;
    for (const auto& c : cells) {
        const auto& s = c.outcome.summary;
        csv << "run," << c.strategy << ',' << gamma_label(c.gamma) << ',' << c.seed << ',' << status_of(c.outcome);
        if (c.outcome.status == BLOI_OK && s.contains("final")) {
            csv << ',' << fmt(s["final"]["mAP"]) << ',' << fmt(s["final"]["AP50"]) << ',' << fmt(s["final"]["AP75"]);
        } else {
            csv << ",,,";
            ++failures;
        }
        csv << ",,,,1," << s.value("d1", 0) << ',' << s.value("d2", 0) << ',' << fmt(s.value("wall_seconds", 0.0))
            << '\n';
    }
    for (const auto& st : strategies) {
        for (double g : gammas) {
            std::vector<std::array<double, 3>> vals;
            for (const auto& c : cells) {
                if (c.strategy == st && c.gamma == g && c.outcome.status == BLOI_OK &&
                    c.outcome.summary.contains("final")) {
                    const auto& f = c.outcome.summary["final"];
                    vals.push_back({f["mAP"].get<double>(), f["AP50"].get<double>(), f["AP75"].get<double>()});
                }
            }
            std::array<double, 3> mean{}, sd{};
            for (std::size_t k = 0; k < 3; ++k) {
                for (const auto& v : vals) {
                    mean[k] += v[k];
                }
                mean[k] = vals.empty() ? 0.0 : mean[k] / static_cast<double>(vals.size());
                for (const auto& v : vals) {
                    sd[k] += (v[k] - mean[k]) * (v[k] - mean[k]);
                }
                sd[k] = vals.size() > 1 ? std::sqrt(sd[k] / static_cast<double>(vals.size() - 1)) : 0.0;
            }
            csv << "aggregate," << st << ',' << gamma_label(g) << ",," << (vals.empty() ? "empty" : "ok") << ','
                << fmt(mean[0]) << ',' << fmt(mean[1]) << ',' << fmt(mean[2]) << ',' << fmt(sd[0]) << ','
                << fmt(sd[1]) << ',' << fmt(sd[2]) << ',' << vals.size() << ",,,\n";
        }
    }
    write_text(sweep, csv.str());
    std::cout << cells.size() << " runs (" << failures << " failed) -> " << sweep.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bi-level training of a detector and a LoRA-adapted promptable segmenter"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(bloi_version()));

    // generate
    auto* gen = app.add_subcommand("generate", "write a synthetic shapes dataset");
    std::size_t gen_n = 200, gen_size = 64, gen_density = 3;
    std::uint64_t gen_seed = 0;
    std::vector<std::string> gen_classes;
    std::string gen_out;
    gen->add_option("--n", gen_n, "number of images")->capture_default_str();
    gen->add_option("--size", gen_size, "image side in pixels")->capture_default_str();
    gen->add_option("--classes", gen_classes, "comma-separated subset of disk,square,triangle")->delimiter(',');
    gen->add_option("--density", gen_density, "maximum shapes per image")->capture_default_str();
    gen->add_option("--seed", gen_seed, "generator seed")->capture_default_str();
    gen->add_option("--out", gen_out, "output directory")->required();

    // train
    auto* train = app.add_subcommand("train", "train a model");
    TrainFlags train_flags;
    std::string train_strategy, train_data, train_test, train_out;
    train->add_option("--strategy", train_strategy,
                      "bilevel-first | bilevel-second | single-level | separate (default bilevel-first)");
    train->add_option("--data", train_data, "training dataset directory")->required();
    train->add_option("--test", train_test, "held-out dataset directory for evaluation");
    train->add_option("--out", train_out, "output directory")->required();
    train_flags.add_to(train);

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string ev_model, ev_data, ev_out;
    double ev_conf = 0.25, ev_nms = 0.5;
    ev->add_option("--model", ev_model, "checkpoint file")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--conf", ev_conf, "objectness threshold")->capture_default_str();
    ev->add_option("--nms", ev_nms, "NMS IoU threshold")->capture_default_str();
    ev->add_option("--out", ev_out, "report file (JSON)");

    // ablate
    auto* ab = app.add_subcommand("ablate", "sweep strategies x split ratios x seeds");
    TrainFlags ab_flags;
    std::vector<std::string> ab_strategies{"bilevel-first", "single-level"};
    std::vector<double> ab_gammas{1.0};
    std::vector<std::uint64_t> ab_seeds{1, 2, 3, 4, 5};
    std::string ab_data, ab_test, ab_out;
    bool ab_force = false;
    ab->add_option("--strategies", ab_strategies, "comma-separated strategies")->delimiter(',')->capture_default_str();
    ab->add_option("--gammas", ab_gammas, "comma-separated split ratios")->delimiter(',')->capture_default_str();
    ab->add_option("--seeds", ab_seeds, "comma-separated seeds")->delimiter(',')->capture_default_str();
    ab->add_option("--data", ab_data, "training dataset directory")->required();
    ab->add_option("--test", ab_test, "held-out dataset directory")->required();
    ab->add_option("--out", ab_out, "output directory")->required();
    ab->add_flag("--force", ab_force, "overwrite an existing sweep");
    ab_flags.add_to(ab);
    ab->remove_option(ab->get_option("--seed"));
    ab->remove_option(ab->get_option("--gamma-split"));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return BLOI_ERR_USAGE;
    }

    try {
        if (*gen) {
            return cmd_generate(gen_n, gen_size, gen_classes, gen_density, gen_seed, gen_out);
        }
        if (*train) {
            return cmd_train(train_flags, train_strategy, train_data, train_test, train_out);
        }
        if (*ev) {
            return cmd_eval(ev_model, ev_data, ev_conf, ev_nms, ev_out);
        }
        if (*ab) {
            return cmd_ablate(ab_flags, ab_strategies, ab_gammas, ab_seeds, ab_data, ab_test, ab_out, ab_force);
        }
    } catch (const Failure& f) {
        std::cerr << "error: " << f.message << "\n";
        return f.code;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return BLOI_ERR_INTERNAL;
    }
    return BLOI_ERR_USAGE;
}
