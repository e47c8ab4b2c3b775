// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "emcad/emcad.hpp"
#include "oracles.hpp"

using namespace emcad;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw Error("cannot read " + p.string());
    return {std::istreambuf_iterator<char>(f), {}};
}

TrainConfig desk_config() {
    TrainConfig c;
    c.seed = 7;
    c.epochs = 20;
    c.batch_size = 8;
    c.optimizer.lr = 1e-4;
    c.optimizer.weight_decay = 1e-4;
    c.model = ModelConfig::with_channels({8, 16, 24, 32});
    c.data.synthetic = true;
    c.data.count = 200;
    c.data.size = 64;
    return c;
}

Outcome parameter_budget() {
    const auto t0 = Clock::now();
    Prng p(1);
    Decoder<float> d(DecoderConfig{}, InitConfig{}, p);
    const std::size_t n = count_params(d).total_params;
    const double dt = seconds_since(t0);
    const bool ok = n >= 506000 * 0.95 && n <= 506000 * 1.05 && dt < 1.0;
    return {ok, fmt("decoder params %zu (target 506000 +/- 5%%), %.3f s", n, dt)};
}

Outcome flop_budget() {
    const auto t0 = Clock::now();
    Prng p(1);
    Decoder<float> d(DecoderConfig{}, InitConfig{}, p);
    const CostReport r = count_flops(d, 224, 224);
    const double g = static_cast<double>(r.total_flops()) / 1e9;
    const double dt = seconds_since(t0);
    return {g >= 0.05 && g <= 0.25 && dt < 1.0,
            fmt("decoder %.4f GFLOPs at 224x224 (conv-only %.4f), band [0.05, 0.25], %.3f s", g,
                static_cast<double>(r.conv_flops()) / 1e9, dt)};
}

Outcome mutation_combinatorics() {
    Prng p(3);
    Tensor4<double> t({2, 1, 16, 16});
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = p.uniform() < 0.3;
    std::vector<Var<double>> four;
    for (std::size_t s : {2, 4, 8, 16}) four.emplace_back(Tensor4<double>::randn({2, 1, s, s}, p, 1.0), true);
    const std::size_t n4 = mutation_loss(four, t, LossConfig{}).report.per_subset.size();
    const Var<double> one(Tensor4<double>::randn({2, 1, 16, 16}, p, 1.0), true);
    const auto single = mutation_loss<double>({one}, t, LossConfig{});
    const auto same = mutation_loss<double>({one, one, one, one}, t, LossConfig{});
    const double rel = std::abs(same.report.total - 15 * single.report.total) / (15 * single.report.total);
    const bool ok = n4 == 15 && single.report.per_subset.size() == 1 && rel < 1e-6;
    return {ok, fmt("4 heads -> %zu subsets, 1 head -> %zu, identical heads rel. error %.2e", n4,
                    single.report.per_subset.size(), rel)};
}

Outcome initial_loss() {
    data::SyntheticOptions o;
    o.count = 40;
    o.seed = 7;
    const data::Dataset ds = data::make_synthetic(o);
    SegmentationModel<float> m(ModelConfig{}, 7);
    set_mode<float>(m, Mode::train);
    bool ok = true;
    std::string vals;
    for (std::size_t b = 0; b < 4; ++b) {
        std::vector<std::size_t> idx;
        for (std::size_t k = 0; k < 8; ++k) idx.push_back(b * 8 + k);
        const Batch batch = make_batch(ds.train, idx);
        const auto out = m.forward(Var<float>(batch.image));
        const double l = mutation_loss(out.p, batch.mask, LossConfig{}).report.total;
        ok = ok && l >= 8 && l <= 20;
        vals += (vals.empty() ? "" : ", ") + fmt("%.3f", l);
    }
    return {ok, "untrained default model, 4 phantom batches of 8: loss " + vals + " (band [8, 20])"};
}

Outcome gradient_suite() {
    const auto t0 = Clock::now();
    std::size_t n = 0, failed = 0;
    double worst = 0;
    std::string worst_name;
    for (const auto& c : gradcheck_cases("all")) {
        const auto r = run_case(c, GradcheckOptions{});
        ++n;
        if (!r.report.passed()) {
            ++failed;
            std::cerr << "  gradcheck failed: " << c.scope << "/" << c.name << " " << r.report.max_rel_error << '\n';
        }
        if (r.report.max_rel_error >= worst) {
            worst = r.report.max_rel_error;
            worst_name = c.scope + "/" + c.name;
        }
    }
    const double dt = seconds_since(t0);
    return {failed == 0 && dt < 120,
            fmt("%zu cases, %zu failed, worst %.2e (%s), %.1f s", n, failed, worst, worst_name.c_str(), dt)};
}

struct DeskRun {
    TrainResult result;
    double seconds = 0;
};

DeskRun desk_run(const fs::path& dir) {
    fs::remove_all(dir);
    TrainHooks hooks;
    hooks.on_epoch = [](const EpochSummary& s) {
        std::cerr << fmt("  epoch %2zu  loss %.4f  dice %.4f  (%.1f s)\n", s.epoch, s.mean_loss, s.mean_dice, s.seconds);
    };
    const auto t0 = Clock::now();
    DeskRun r{train(desk_config(), dir, false, hooks), 0};
    r.seconds = seconds_since(t0);
    return r;
}

Outcome desk_training(const DeskRun& run) {
    const auto& s = run.result.series;
    const double first = s.epoch_loss.front().second, last = s.epoch_loss.back().second;
    const bool ok = run.result.epochs_run == 20 && run.result.final_dice >= 0.90 && last < 0.5 * first &&
                    run.seconds <= 600;
    return {ok, fmt("final test Dice %.4f (>= 0.90), epoch loss %.3f -> %.3f (ratio %.3f < 0.5), %.0f s",
                    run.result.final_dice, first, last, last / first, run.seconds)};
}

Outcome volume_ingest(const fs::path& work, const fs::path& checkpoint) {
    const fs::path vol = work / "volumes", out = work / "preprocessed";
    fs::remove_all(vol);
    fs::remove_all(out);
    Prng p(11);
    for (const char* pid : {"patient_001", "patient_002"})
        data::write_volume(vol / pid, data::synth_volume(p, pid, 240, 240, 155));
    const data::DirectorySummary sum = data::preprocess_directory(vol, out, {});
    const data::AuditReport audit = data::audit(sum.manifest);
    const auto train = data::load_split(sum.manifest, "train");
    const auto test = data::load_split(sum.manifest, "test");
    SegmentationModel<float> model = load_model<float>(read_checkpoint(checkpoint));
    const EvalResult ev = evaluate(model, test);
    const bool ok = sum.kept == 310 && audit.ok() && train.size() == 155 && test.size() == 155 &&
                    train[0].image.shape() == Shape{1, 3, 224, 224} && std::isfinite(ev.mean_dice);
    return {ok, fmt("2 volumes 240x240x155 -> %zu slices, audit %s, loaded %zu/%zu at 224x224, eval Dice %.4f",
                    sum.kept, audit.ok() ? "clean" : "FAILED", train.size(), test.size(), ev.mean_dice)};
}

Outcome determinism(const fs::path& a, const fs::path& b) {
    std::string differing;
    for (const char* f : {"loss_iteration.csv", "loss_epoch.csv", "dice_epoch.csv", "last.ckpt", "best.ckpt"})
        if (slurp(a / f) != slurp(b / f)) differing += std::string(differing.empty() ? "" : ", ") + f;
    return {differing.empty(), differing.empty() ? "two seed-7 runs: CSVs and checkpoints byte-identical"
                                                 : "files differ: " + differing};
}

Outcome oracles(const fs::path& work) {
    Prng p(2024);
    std::size_t dice_bad = 0, conv_bad = 0, npy_bad = 0;
    for (int t = 0; t < 1000; ++t) {
        const std::size_t n = 1 + p.below(64);
        const double density = p.uniform();
        std::vector<float> a(n), b(n);
        for (std::size_t i = 0; i < n; ++i) {
            a[i] = p.uniform() < density;
            b[i] = p.uniform() < density;
        }
        dice_bad += dice_score<float>(a, b) != test_oracles::counted_dice(a, b);
    }
    for (int t = 0; t < 100; ++t) {
        const std::size_t groups = 1 + p.below(3);
        const std::size_t cin = groups * (1 + p.below(3)), cout = groups * (1 + p.below(3));
        const std::size_t k = 1 + 2 * p.below(3), stride = 1 + p.below(2), pad = p.below(k);
        std::size_t h = k + p.below(5), w = k + p.below(5);
        while ((h + 2 * pad - k) % stride) ++h;
        while ((w + 2 * pad - k) % stride) ++w;
        const auto x = Tensor4<double>::randn({1 + p.below(2), cin, h, w}, p, 1.0);
        const auto wt = Tensor4<double>::randn({cout, cin / groups, k, k}, p, 1.0);
        const auto y = conv2d_forward<double>(x, wt, nullptr, ConvGeometry{stride, pad, groups, false});
        const auto ref = test_oracles::brute_conv(x, wt, nullptr, stride, pad, groups);
        bool same = y.shape() == ref.shape();
        for (std::size_t i = 0; same && i < y.numel(); ++i) same = std::abs(y[i] - ref[i]) <= 1e-12;
        conv_bad += !same;
    }
    fs::create_directories(work);
    for (int t = 0; t < 100; ++t) {
        std::vector<std::size_t> shape(1 + p.below(4));
        std::size_t n = 1;
        for (auto& d : shape) n *= (d = 1 + p.below(8));
        std::vector<float> v(n);
        for (auto& x : v) x = static_cast<float>(p.normal() * 100);
        const fs::path f = work / "oracle.npy";
        npy::write<float>(f, shape, v);
        std::vector<std::size_t> got;
        const auto back = npy::read_exact<float>(f, &got);
        npy_bad += got != shape || std::memcmp(back.data(), v.data(), n * sizeof(float)) != 0;
    }
    return {dice_bad + conv_bad + npy_bad == 0,
            fmt("mismatches: dice %zu/1000, grouped conv %zu/100, NPY round-trip %zu/100", dice_bad, conv_bad, npy_bad)};
}

Outcome split_integrity() {
    std::vector<std::string> ids;
    for (int i = 1; i <= 369; ++i) ids.push_back(fmt("BraTS20_Training_%03d", i));
    const data::Split s = data::split_patients(ids, 0.8, 7);
    std::set<std::string> tr(s.train.begin(), s.train.end());
    std::size_t overlap = 0;
    for (const auto& t : s.test) overlap += tr.count(t);
    const bool ok = s.train.size() == 295 && s.test.size() == 74 && overlap == 0 && tr.size() == 295;
    return {ok, fmt("369 ids -> %zu train / %zu test, overlap %zu", s.train.size(), s.test.size(), overlap)};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance checks"};
    std::string work = "acceptance_work";
    app.add_option("--work", work, "scratch directory");
    CLI11_PARSE(app, argc, argv);
    const fs::path w = work;
    fs::create_directories(w);

    int failures = 0;
    auto report = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << name << "): " << o.detail
                  << std::endl;
    };

    report(1, "parameter budget", parameter_budget);
    report(2, "FLOP budget", flop_budget);
    report(3, "mutation combinatorics", mutation_combinatorics);
    report(4, "initial loss", initial_loss);
    report(5, "gradient suite", gradient_suite);

    DeskRun run_a, run_b;
    std::string run_error;
    try {
        run_a = desk_run(w / "run_a");
    } catch (const std::exception& e) {
        run_error = e.what();
    }
    report(6, "desk-scale training", [&] {
        if (!run_error.empty()) throw Error(run_error);
        return desk_training(run_a);
    });
    report(7, "volume ingest", [&] { return volume_ingest(w, w / "run_a" / "best.ckpt"); });
    report(8, "determinism", [&] {
        if (!run_error.empty()) throw Error(run_error);
        run_b = desk_run(w / "run_b");
        return determinism(w / "run_a", w / "run_b");
    });
    report(9, "oracles", [&] { return oracles(w / "oracles"); });
    report(10, "split integrity", split_integrity);

    std::cout << (failures ? std::to_string(failures) + " criterion(s) failed" : "all criteria passed") << std::endl;
    return failures ? 1 : 0;
}
