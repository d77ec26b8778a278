// Copyright 2026 The BLO-Inst Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero when a hard criterion fails. Usage: acceptance [output-dir]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "bilevel_oracles.hpp"
#include "bloinst/data.hpp"
#include "bloinst/engine.hpp"
#include "bloinst/eval.hpp"
#include "bloinst/losses.hpp"
#include "eval_oracles.hpp"
#include "loss_cases.hpp"
#include "op_cases.hpp"
#include "tmpdir.hpp"

namespace fs = std::filesystem;
using namespace bloinst;
using engine::Strategy;
using model::ParamRole;
using model::ParamSet;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Report {
    std::map<int, std::pair<std::string, Outcome>> lines;
    std::vector<int> soft;

    void record(int id, const std::string& name, Outcome o, bool soft_gate = false) {
        std::printf("%s %d %s: %s%s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(),
                    soft_gate ? " [soft gate]" : "");
        std::fflush(stdout);
        if (soft_gate) {
            soft.push_back(id);
        }
        lines[id] = {name, std::move(o)};
    }

    // Runs `body`; an exception fails the criterion.
    void run(int id, const std::string& name, const std::function<Outcome()>& body, bool soft_gate = false) {
        Outcome o;
        try {
            o = body();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        record(id, name, std::move(o), soft_gate);
    }

    int exit_code() const {
        int hard_failures = 0, passed = 0;
        for (const auto& [id, line] : lines) {
            passed += line.second.pass;
            const bool soft_gate = std::find(soft.begin(), soft.end(), id) != soft.end();
            hard_failures += !line.second.pass && !soft_gate;
        }
        std::printf("acceptance: %d/%zu criteria passed, %d hard failure(s)\n", passed, lines.size(), hard_failures);
        return hard_failures == 0 ? 0 : 1;
    }
};

void progress(const std::string& msg) {
    std::fprintf(stderr, "  .. %s\n", msg.c_str());
    std::fflush(stderr);
}

// ---- 1 --------------------------------------------------------------------

Outcome gradient_checks() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    std::string worst_name;
    std::size_t families = 0, cases = 0;
    auto sweep = [&](const std::vector<testing::OpFamily>& fams, std::uint64_t salt) {
        for (const auto& family : fams) {
            Rng rng(mix_seed(salt, std::hash<std::string>{}(family.name) & 0xffff));
            for (int i = 0; i < 100; ++i) {
                auto c = family.make(rng, static_cast<std::uint64_t>(i));
                const double e = testing::grad_check(c.fn, c.inputs, 1e-5);
                if (e > worst) {
                    worst = e;
                    worst_name = family.name;
                }
                ++cases;
            }
            ++families;
        }
    };
    sweep(testing::op_families(), 101);
    sweep(testing::loss_families(), 202);
    const double s = seconds_since(t0);
    return {worst <= 1e-5 && s <= 120.0,
            std::to_string(families) + " families x 100 cases, worst relative error " + fmt("%.2e", worst) + " (" +
                worst_name + "), " + fmt("%.1f", s) + " s"};
}

// ---- 2 --------------------------------------------------------------------

Outcome loss_unit_values() {
    using ad::Tensor;
    std::vector<std::string> failures;
    auto expect = [&](bool ok, const std::string& what) {
        if (!ok) {
            failures.push_back(what);
        }
    };

    const double ciou = loss::ciou_loss(Tensor::vector({0, 0, 2, 2}), Tensor::vector({1, 0, 3, 2})).item();
    const double ciou_exact = 1.0 - (1.0 / 3.0 - 1.0 / 13.0);
    expect(std::abs(ciou - ciou_exact) <= 1e-9, "ciou closed form");
    expect(fmt("%.6f", ciou) == "0.743590", "ciou rounds to 0.743590");

    const double focal =
        loss::focal_bce(Tensor::vector({std::log(9.0)}), Tensor::vector({1.0}), {0.25, 2.0}).item();
    const double focal_exact = 0.25 * 0.01 * -std::log(0.9);
    expect(std::abs(focal - focal_exact) <= 1e-9, "focal closed form");
    expect(fmt("%.3e", focal) == "2.634e-04", "focal rounds to 2.634e-4");

    Rng rng(33);
    double bce_worst = 0.0;
    for (int i = 0; i < 200; ++i) {
        const Tensor x = testing::random_tensor(rng, {9}, -30.0, 30.0);
        const Tensor t = testing::random_binary(rng, {9});
        double bce = 0.0;
        for (std::size_t k = 0; k < 9; ++k) {
            const double z = t[k] == 1.0 ? x[k] : -x[k];
            bce += std::max(-z, 0.0) + std::log1p(std::exp(-std::abs(z)));
        }
        bce_worst = std::max(bce_worst, std::abs(loss::focal_bce(x, t, {1.0, 0.0}).item() - bce / 9.0));
    }
    expect(bce_worst <= 1e-12, "gamma 0 reduces to BCE");

    ad::Tape tape;
    const Tensor gt = testing::random_binary(rng, {16, 16});
    const Tensor logits = tape.leaf(testing::random_tensor(rng, {16, 16}, -3.0, 3.0));
    const loss::Box box{3.2, 4.7, 11.1, 9.0};  // cols [3,12), rows [4,9)
    const Tensor g = tape.backward(loss::masked_seg_bce(logits, gt, box)).of(logits);
    std::size_t outside_nonzero = 0, inside_zero = 0;
    for (std::size_t r = 0; r < 16; ++r) {
        for (std::size_t c = 0; c < 16; ++c) {
            const bool inside = c >= 3 && c < 12 && r >= 4 && r < 9;
            outside_nonzero += !inside && g[r * 16 + c] != 0.0;
            inside_zero += inside && g[r * 16 + c] == 0.0;
        }
    }
    expect(outside_nonzero == 0 && inside_zero == 0, "masked BCE gradient support");

    std::string detail = "ciou " + fmt("%.12f", ciou) + ", focal " + fmt("%.10e", focal) + ", BCE worst " +
                         fmt("%.1e", bce_worst) + ", out-of-box gradient entries nonzero: " +
                         std::to_string(outside_nonzero);
    for (const auto& f : failures) {
        detail += "; failed: " + f;
    }
    return {failures.empty(), detail};
}

// ---- 3 --------------------------------------------------------------------

Outcome hypergradient_oracle() {
    using testing::BilevelOracle;
    const auto t0 = Clock::now();
    Rng rng(3030);
    double worst = 0.0;
    const int n_quadratic = 60;
    for (int k = 0; k < n_quadratic; ++k) {
        const BilevelOracle o = BilevelOracle::random(rng);
        const auto theta = testing::random_vector(rng, o.dim_theta);
        const auto phi = testing::random_vector(rng, o.dim_phi);
        const double alpha = rng.uniform(0.05, 0.9);
        worst = std::max(worst, testing::relative_error(testing::engine_hypergradient(o, theta, phi, alpha, 0.01),
                                                        o.exact_hypergradient(theta, phi, alpha)));
    }
    int shrinks = 0;
    const int n_cubic = 20;
    std::vector<double> ratios;
    for (int k = 0; k < n_cubic; ++k) {
        const BilevelOracle o = BilevelOracle::random(rng, 0.8);
        const auto theta = testing::random_vector(rng, o.dim_theta);
        const auto phi = testing::random_vector(rng, o.dim_phi);
        const auto exact = o.exact_hypergradient(theta, phi, 0.5);
        const double e1 = testing::relative_error(testing::engine_hypergradient(o, theta, phi, 0.5, 0.01), exact);
        const double e2 = testing::relative_error(testing::engine_hypergradient(o, theta, phi, 0.5, 0.005), exact);
        shrinks += e2 < e1;
        ratios.push_back(e1 / e2);
    }
    std::sort(ratios.begin(), ratios.end());
    const double s = seconds_since(t0);
    return {worst <= 1e-3 && shrinks == n_cubic && s <= 60.0,
            std::to_string(n_quadratic) + " quadratic instances, worst relative error " + fmt("%.2e", worst) +
                "; cubic: halving eps_scale 0.01 -> 0.005 reduced the error in " + std::to_string(shrinks) + "/" +
                std::to_string(n_cubic) + " instances, median error ratio " + fmt("%.2f", ratios[ratios.size() / 2]) +
                "; " + fmt("%.2f", s) + " s"};
}

// ---- shared desk-scale setup ----------------------------------------------

// 200 train / 100 test images at the generator defaults, default model.
struct Desk {
    data::Dataset train;
    data::Dataset test;
    model::ModelConfig model;

    Desk() {
        data::GenerateOptions o;
        o.seed = 1001;
        train = data::generate_shapes(o);
        o.n = 100;
        o.seed = 2002;
        test = data::generate_shapes(o);
        model = engine::model_config_for(train);
    }
};

bool is_encoder(ParamRole r) { return r == ParamRole::encoder; }
bool is_decoder_base(ParamRole r) { return r == ParamRole::decoder_base; }

// Per-step digests, for comparing two training runs update by update.
struct RecordingObserver : engine::StepObserver {
    std::vector<std::string> digests;
    void lower(std::size_t, const ParamSet&, const ParamSet&, const ParamSet& after) override {
        digests.push_back("L" + after.digest());
    }
    void upper(std::size_t, const ParamSet&, const ParamSet&, const ParamSet& after) override {
        digests.push_back("U" + after.digest());
    }
};

// Tracks phi and theta across steps: lower steps must leave phi alone, upper
// steps theta, and the frozen segmenter weights never move.
struct FlowObserver : engine::StepObserver {
    explicit FlowObserver(const ParamSet& frozen_reference)
        : encoder(frozen_reference.digest(is_encoder)), decoder_base(frozen_reference.digest(is_decoder_base)) {}

    std::string encoder, decoder_base, phi, theta;
    std::size_t lower_steps = 0, upper_steps = 0;
    std::size_t phi_changed_by_lower = 0, theta_changed_by_upper = 0, frozen_changed = 0;

    void check_frozen(const ParamSet& t) {
        frozen_changed += t.digest(is_encoder) != encoder;
        frozen_changed += t.digest(is_decoder_base) != decoder_base;
    }
    void lower(std::size_t, const ParamSet& p, const ParamSet& before, const ParamSet& after) override {
        ++lower_steps;
        const std::string d = p.digest();
        phi_changed_by_lower += !phi.empty() && d != phi;
        phi = d;
        check_frozen(before);
        check_frozen(after);
        theta = after.digest();
    }
    void upper(std::size_t, const ParamSet& t, const ParamSet& before, const ParamSet& after) override {
        ++upper_steps;
        theta_changed_by_upper += t.digest() != theta;
        phi_changed_by_lower += before.digest() != phi;
        check_frozen(t);
        phi = after.digest();
    }
};

struct Run {
    std::string strategy;
    double gamma = 1.0;
    std::uint64_t seed = 0;
    std::string status = "ok";
    double map = 0.0, ap50 = 0.0, ap75 = 0.0;
    double seconds = 0.0;
    std::size_t d1 = 0, d2 = 0;
};

class Runner {
public:
    Runner(const Desk& desk, fs::path csv) : desk_(desk), csv_(std::move(csv)) {
        std::ofstream(csv_) << "strategy,gamma,seed,status,map,ap50,ap75,d1,d2,wall_seconds\n";
    }

    // One training run at the default configuration. Divergent runs score 0.
    Run run(Strategy s, double gamma, std::uint64_t seed, engine::StepObserver* observer = nullptr) {
        engine::TrainConfig cfg;
        cfg.T = 2000;
        cfg.gamma_split = gamma;
        cfg.seed = seed;
        Run r{engine::strategy_name(s), gamma, seed};
        progress("training " + r.strategy + " gamma " + fmt("%g", gamma) + " seed " + std::to_string(seed));
        const auto t0 = Clock::now();
        try {
            // run_strategy takes no observer; for bilevel-first it is train() at first order.
            const engine::TrainResult out =
                s == Strategy::bilevel_first
                    ? engine::train(cfg, desk_.model, desk_.train, &desk_.test, observer)
                    : engine::run_strategy(s, cfg, desk_.model, desk_.train, &desk_.test);
            const eval::APReport& ap = out.final_ap.value();
            r.map = ap.map;
            r.ap50 = ap.ap50;
            r.ap75 = ap.ap75;
            r.d1 = out.trace.d1_size;
            r.d2 = out.trace.d2_size;
        } catch (const engine::DivergenceError& e) {
            r.status = "diverged@" + std::to_string(e.iteration);
        }
        r.seconds = seconds_since(t0);
        progress("  mAP " + fmt("%.4f", r.map) + " in " + fmt("%.1f", r.seconds) + " s");
        std::ofstream(csv_, std::ios::app) << r.strategy << ',' << fmt("%g", r.gamma) << ',' << r.seed << ','
                                           << r.status << ',' << fmt("%.6f", r.map) << ',' << fmt("%.6f", r.ap50)
                                           << ',' << fmt("%.6f", r.ap75) << ',' << r.d1 << ',' << r.d2 << ','
                                           << fmt("%.2f", r.seconds) << '\n';
        return r;
    }

private:
    const Desk& desk_;
    fs::path csv_;
};

struct Stats {
    double mean = 0.0, std = 0.0, seconds = 0.0;
    std::size_t diverged = 0;
};

Stats stats(const std::vector<Run>& runs) {
    Stats s;
    for (const auto& r : runs) {
        s.mean += r.map;
        s.seconds += r.seconds;
        s.diverged += r.status != "ok";
    }
    s.mean /= static_cast<double>(runs.size());
    for (const auto& r : runs) {
        s.std += (r.map - s.mean) * (r.map - s.mean);
    }
    s.std = runs.size() > 1 ? std::sqrt(s.std / static_cast<double>(runs.size() - 1)) : 0.0;
    return s;
}

std::string describe(const std::string& name, const Stats& s) {
    std::string out = name + " " + fmt("%.4f", s.mean) + " +- " + fmt("%.4f", s.std);
    if (s.diverged > 0) {
        out += " (" + std::to_string(s.diverged) + " diverged)";
    }
    return out;
}

// ---- 4 --------------------------------------------------------------------

Outcome first_order_switch(const Desk& desk) {
    engine::TrainConfig cfg;
    cfg.T = 100;
    cfg.alpha = 0.0;
    cfg.seed = 11;
    RecordingObserver a, b;
    cfg.order = engine::Order::first;
    const auto first = engine::train(cfg, desk.model, desk.train, nullptr, &a);
    cfg.order = engine::Order::second;
    const auto second = engine::train(cfg, desk.model, desk.train, nullptr, &b);
    std::size_t differing = 0;
    for (std::size_t i = 0; i < std::min(a.digests.size(), b.digests.size()); ++i) {
        differing += a.digests[i] != b.digests[i];
    }
    const bool same = a.digests.size() == 200 && a.digests == b.digests && first.phi == second.phi &&
                      first.theta == second.theta;
    return {same, std::to_string(a.digests.size()) + " updates over 100 steps, " + std::to_string(differing) +
                      " differing; final phi " + (first.phi == second.phi ? "identical" : "differs") +
                      ", final theta " + (first.theta == second.theta ? "identical" : "differs")};
}

// ---- 6 --------------------------------------------------------------------

Outcome evaluator_checks() {
    Rng rng(6060);
    const testing::MatcherAgreement agree = testing::compare_matcher_with_oracle(rng, 500);

    const eval::MaskInstance gt{testing::mask_of(4, {0, 1, 2, 3}), 0, 1.0};
    const eval::MaskInstance pred{testing::mask_of(4, {0, 1, 2, 4}), 0, 0.8};
    const eval::APReport r = eval::evaluate({{pred}}, {{gt}}, 1);
    const double envelope = eval::average_precision({true, false, true}, 2);
    const bool hand = eval::mask_iou(pred.mask, gt.mask) == 0.6 && std::abs(r.map - 0.30) <= 1e-12 &&
                      std::abs(r.ap50 - 1.0) <= 1e-12 && std::abs(r.ap75) <= 1e-12 &&
                      std::abs(envelope - 5.0 / 6.0) <= 1e-12;
    return {agree.tp_mismatches == 0 && agree.gt_set_mismatches == 0 && hand,
            "500 instances x " + std::to_string(eval::iou_thresholds().size()) +
                " thresholds: TP-count mismatches " + std::to_string(agree.tp_mismatches) +
                ", matched-gt mismatches " + std::to_string(agree.gt_set_mismatches) +
                " (equal-TP alternative pairings " + std::to_string(agree.label_differences) + "); hand case mAP " +
                fmt("%.15f", r.map) + " AP50 " + fmt("%.1f", r.ap50) + " AP75 " + fmt("%.1f", r.ap75) +
                ", envelope AP " + fmt("%.15f", envelope)};
}

// ---- 10 -------------------------------------------------------------------

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), {}};
}

Outcome determinism(const Desk& desk) {
    testing::TempDir tmp;
    engine::TrainConfig cfg;
    cfg.T = 100;
    cfg.seed = 5;
    auto checkpoint = [&](const engine::TrainResult& r) {
        data::Checkpoint c;
        c.model = desk.model;
        c.classes = desk.train.classes;
        c.config = engine::to_json(cfg);
        c.phi = r.phi;
        c.theta = r.theta;
        return c;
    };
    const auto a = checkpoint(engine::train(cfg, desk.model, desk.train, nullptr));
    const auto b = checkpoint(engine::train(cfg, desk.model, desk.train, nullptr));
    data::save_checkpoint(a, tmp.path() / "a.bloi");
    data::save_checkpoint(b, tmp.path() / "b.bloi");
    const bool identical = slurp(tmp.path() / "a.bloi") == slurp(tmp.path() / "b.bloi");

    const data::Checkpoint back = data::load_checkpoint(tmp.path() / "a.bloi");
    const bool checkpoint_lossless = back.phi == a.phi && back.theta == a.theta && back.config == a.config &&
                                     back.classes == a.classes &&
                                     data::checkpoint_digest(back) == data::checkpoint_digest(a);
    data::save_annotations(desk.train, tmp.path() / "train");
    const bool annotations_lossless = data::load_annotations(tmp.path() / "train") == desk.train;
    return {identical && checkpoint_lossless && annotations_lossless,
            std::string("same config and seed: checkpoints ") + (identical ? "byte-identical" : "differ") +
                " (digest " + data::checkpoint_digest(a) + "); checkpoint round trip " +
                (checkpoint_lossless ? "lossless" : "lossy") + "; annotation round trip " +
                (annotations_lossless ? "lossless" : "lossy")};
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path out_dir = argc > 1 ? fs::path(argv[1]) : fs::current_path();
    fs::create_directories(out_dir);
    Report report;

    report.run(1, "autodiff gradients", gradient_checks);
    report.run(2, "loss unit values", loss_unit_values);
    report.run(3, "hypergradient oracle", hypergradient_oracle);

    const Desk desk;
    progress("desk data: " + std::to_string(desk.train.samples.size()) + " train / " +
             std::to_string(desk.test.samples.size()) + " test images");
    report.run(4, "first-order switch", [&] { return first_order_switch(desk); });
    report.run(6, "AP evaluator", evaluator_checks);
    report.run(10, "determinism and persistence", [&] { return determinism(desk); });

    Runner runner(desk, out_dir / "acceptance_runs.csv");
    const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::map<std::string, std::vector<Run>> runs;
    FlowObserver flow(model::init_segmenter(desk.model, 0));

    // Criterion 7 is timed on its own: bilevel-first and single-level.
    double trend_seconds = 0.0;
    for (auto seed : seeds) {
        const Run r = runner.run(Strategy::bilevel_first, 1.0, seed, seed == 1 ? &flow : nullptr);
        trend_seconds += r.seconds;
        runs["bf1"].push_back(r);
    }
    for (auto seed : seeds) {
        const Run r = runner.run(Strategy::single_level, 1.0, seed);
        trend_seconds += r.seconds;
        runs["sl"].push_back(r);
    }

    report.run(5, "flow isolation and freezing", [&] {
        const model::ModelConfig& mc = desk.model;
        std::size_t bad_sites = 0;
        const ParamSet theta = model::init_segmenter(mc, 1);
        for (const auto& site : model::lora_sites(mc)) {
            const std::size_t n = theta.get("lora." + site.name + ".A").size() +
                                  theta.get("lora." + site.name + ".B").size();
            bad_sites += n != mc.lora_rank * (site.d_in + site.d_out);
        }
        const bool ok = flow.lower_steps == 2000 && flow.upper_steps == 2000 && flow.phi_changed_by_lower == 0 &&
                        flow.theta_changed_by_upper == 0 && flow.frozen_changed == 0 && bad_sites == 0 &&
                        mc.lora_rank == 4;
        return Outcome{ok, std::to_string(flow.lower_steps) + " lower / " + std::to_string(flow.upper_steps) +
                               " upper steps: phi changed by lower " + std::to_string(flow.phi_changed_by_lower) +
                               ", theta changed by upper " + std::to_string(flow.theta_changed_by_upper) +
                               ", frozen encoder/decoder changes " + std::to_string(flow.frozen_changed) +
                               "; LoRA sites with count != r(d_in+d_out) at r=" + std::to_string(mc.lora_rank) +
                               ": " + std::to_string(bad_sites) + "/" +
                               std::to_string(model::lora_sites(mc).size())};
    });

    report.run(7, "bilevel-first vs single-level", [&] {
        const Stats bf = stats(runs["bf1"]), sl = stats(runs["sl"]);
        return Outcome{bf.mean >= sl.mean && trend_seconds <= 1200.0,
                       "mean final mAP over 5 seeds: " + describe("bilevel-first", bf) + ", " +
                           describe("single-level", sl) + "; " + fmt("%.0f", trend_seconds) + " s (limit 1200)"};
    });

    for (auto seed : seeds) {
        runs["sep"].push_back(runner.run(Strategy::separate, 1.0, seed));
    }
    report.run(9, "bilevel-first vs separate", [&] {
        const Stats bf = stats(runs["bf1"]), sep = stats(runs["sep"]);
        return Outcome{bf.mean >= sep.mean, "mean final mAP over 5 seeds: " + describe("bilevel-first", bf) + ", " +
                                                describe("separate", sep)};
    });

    for (double gamma : {0.25, 4.0}) {
        for (auto seed : seeds) {
            runs["bf" + fmt("%g", gamma)].push_back(runner.run(Strategy::bilevel_first, gamma, seed));
        }
    }
    report.run(
        8, "split ratio sweep",
        [&] {
            const Stats lo = stats(runs["bf0.25"]), mid = stats(runs["bf1"]), hi = stats(runs["bf4"]);
            const bool ok = mid.mean >= lo.mean - lo.std && mid.mean >= hi.mean - hi.std;
            return Outcome{ok, "mean final mAP over 5 seeds: " + describe("gamma 0.25", lo) + ", " +
                                   describe("gamma 1", mid) + ", " + describe("gamma 4", hi) + "; runs in " +
                                   (out_dir / "acceptance_runs.csv").string()};
        },
        true);

    // Reported only.
    for (auto seed : seeds) {
        runs["bs"].push_back(runner.run(Strategy::bilevel_second, 1.0, seed));
    }
    const Stats bs = stats(runs["bs"]), bf = stats(runs["bf1"]);
    std::printf("INFO bilevel-second vs bilevel-first (not gated): %s, %s, difference %+.4f\n",
                describe("bilevel-second", bs).c_str(), describe("bilevel-first", bf).c_str(), bs.mean - bf.mean);
    return report.exit_code();
}
