#pragma once

// Training run: versioned JSON config, epoch loop with MUTATION loss and
// AdamW, per-epoch evaluation, best/last checkpoints and resume.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "emcad/checkpoint.hpp"
#include "emcad/metrics.hpp"

namespace emcad {

inline constexpr int kTrainConfigVersion = 1;

struct DataConfig {
    bool synthetic = false;
    std::string manifest; // used when synthetic is false
    std::size_t count = 200;
    std::size_t size = 64;
    double difficulty = 0.5;
    double train_fraction = 0.8;
};

struct TrainConfig {
    int version = kTrainConfigVersion;
    std::uint64_t seed = 7;
    std::size_t epochs = 50;
    std::size_t batch_size = 6;
    std::size_t max_iterations = 50000;
    double eval_threshold = 0.5;
    AdamWConfig optimizer;
    LossConfig loss;
    ModelConfig model;
    DataConfig data;
    std::string output_dir = "runs";

    void validate() const {
        if (version != kTrainConfigVersion)
            throw ValidationError("unsupported config version " + std::to_string(version) + " (expected " +
                                  std::to_string(kTrainConfigVersion) + ")");
        if (epochs < 1) throw ValidationError("epochs must be >= 1");
        if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
        if (max_iterations < 1) throw ValidationError("max_iterations must be >= 1");
        if (!(eval_threshold > 0 && eval_threshold < 1)) throw ValidationError("eval_threshold must lie in (0, 1)");
        optimizer.validate();
        loss.validate();
        model.validate();
        if (data.synthetic) {
            if (data.count < 2) throw ValidationError("data.count must be >= 2");
            if (data.size < 32 || data.size % 32) throw ValidationError("data.size must be a positive multiple of 32");
            if (!(data.train_fraction > 0 && data.train_fraction < 1))
                throw ValidationError("data.train_fraction must lie in (0, 1)");
        } else {
            if (data.manifest.empty()) throw ValidationError("data.manifest is required unless data.synthetic is true");
            if (!std::filesystem::is_regular_file(data.manifest))
                throw ValidationError("manifest " + data.manifest + " does not exist");
        }
    }
};

inline void to_json(nlohmann::json& j, const DataConfig& d) {
    j = {{"synthetic", d.synthetic}, {"manifest", d.manifest},     {"count", d.count},
         {"size", d.size},           {"difficulty", d.difficulty}, {"train_fraction", d.train_fraction}};
}

inline void from_json(const nlohmann::json& j, DataConfig& d) {
    constexpr const char* w = "data";
    detail::reject_unknown_keys(j, w, {"synthetic", "manifest", "count", "size", "difficulty", "train_fraction"});
    detail::read_opt(j, "synthetic", d.synthetic, w);
    detail::read_opt(j, "manifest", d.manifest, w);
    detail::read_opt(j, "count", d.count, w);
    detail::read_opt(j, "size", d.size, w);
    detail::read_opt(j, "difficulty", d.difficulty, w);
    detail::read_opt(j, "train_fraction", d.train_fraction, w);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"version", c.version},
         {"seed", c.seed},
         {"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"max_iterations", c.max_iterations},
         {"eval_threshold", c.eval_threshold},
         {"optimizer", c.optimizer},
         {"loss", c.loss},
         {"model", c.model},
         {"data", c.data},
         {"output_dir", c.output_dir}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    constexpr const char* w = "config";
    detail::reject_unknown_keys(j, w,
                                {"version", "seed", "epochs", "batch_size", "max_iterations", "eval_threshold",
                                 "optimizer", "loss", "model", "data", "output_dir"});
    if (!j.contains("version")) throw ValidationError("config lacks the 'version' key");
    detail::read_opt(j, "version", c.version, w);
    detail::read_opt(j, "seed", c.seed, w);
    detail::read_opt(j, "epochs", c.epochs, w);
    detail::read_opt(j, "batch_size", c.batch_size, w);
    detail::read_opt(j, "max_iterations", c.max_iterations, w);
    detail::read_opt(j, "eval_threshold", c.eval_threshold, w);
    if (j.contains("optimizer")) from_json(j.at("optimizer"), c.optimizer);
    if (j.contains("loss")) from_json(j.at("loss"), c.loss);
    if (j.contains("model")) from_json(j.at("model"), c.model);
    if (j.contains("data")) from_json(j.at("data"), c.data);
    detail::read_opt(j, "output_dir", c.output_dir, w);
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ValidationError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return j.get<TrainConfig>(); // validated by the caller after any overrides
}

/// Independent stream derived from a run seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    Prng p(seed ^ (0x9e3779b97f4a7c15ull * (stream + 1)));
    return p.next_u64();
}

inline nlohmann::json prng_to_json(const Prng& p) {
    const Prng::State s = p.state();
    return {{"state", hex64(s.counter)}, {"has_spare", s.has_spare}, {"spare", double_bits(s.spare)}};
}

inline void prng_from_json(const nlohmann::json& j, Prng& p) {
    Prng::State s;
    s.counter = parse_hex64(j.at("state").get<std::string>());
    s.has_spare = j.at("has_spare");
    s.spare = double_from_bits(j.at("spare").get<std::string>());
    p.restore(s);
}

struct Batch {
    Tensor4<float> image;
    Tensor4<float> mask;
};

inline Batch make_batch(const std::vector<data::Slice>& slices, const std::vector<std::size_t>& idx) {
    const Shape is = slices.at(idx.at(0)).image.shape(), ms = slices.at(idx[0]).mask.shape();
    Batch b{Tensor4<float>({idx.size(), is.c, is.h, is.w}), Tensor4<float>({idx.size(), 1, ms.h, ms.w})};
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const auto& s = slices.at(idx[k]);
        if (s.image.shape() != is || s.mask.shape() != ms)
            throw ShapeError("slices in a batch must share a shape (" + s.patient_id + ")");
        std::copy(s.image.data().begin(), s.image.data().end(), b.image.plane(k, 0));
        std::copy(s.mask.data().begin(), s.mask.data().end(), b.mask.plane(k, 0));
    }
    return b;
}

struct EpochSummary {
    std::size_t epoch = 0;
    std::size_t iterations = 0; // cumulative
    double mean_loss = 0;
    double mean_dice = 0;
    double best_dice = 0;
    bool improved = false;
    double seconds = 0;
};

struct TrainResult {
    MetricSeries series;
    std::size_t epochs_run = 0;
    std::size_t iterations = 0;
    double best_dice = 0;
    double final_dice = 0;
    std::filesystem::path run_dir;
};

struct TrainHooks {
    std::function<void(std::size_t iteration, const LossReport&)> on_iteration;
    std::function<void(const EpochSummary&)> on_epoch;
    /// Return true to stop after the current epoch (used to simulate an
    /// interruption).
    std::function<bool(const EpochSummary&)> stop_after;
};

inline data::Dataset load_training_data(const TrainConfig& cfg) {
    if (cfg.data.synthetic) {
        data::SyntheticOptions o;
        o.count = cfg.data.count;
        o.size = cfg.data.size;
        o.difficulty = cfg.data.difficulty;
        o.train_fraction = cfg.data.train_fraction;
        o.seed = cfg.seed;
        return data::make_synthetic(o);
    }
    data::Dataset d{data::load_split(cfg.data.manifest, "train"), data::load_split(cfg.data.manifest, "test")};
    if (d.train.empty()) throw ValidationError("manifest " + cfg.data.manifest + " has no train records");
    if (d.test.empty()) throw ValidationError("manifest " + cfg.data.manifest + " has no test records");
    return d;
}

/// Runs (or resumes) training into run_dir. Files written there:
/// config.json, last.ckpt, best.ckpt, metrics.json and the report CSV/SVGs.
/// When resume is set and run_dir/last.ckpt exists, training continues from
/// the epoch after the one it records.
inline TrainResult train(const TrainConfig& cfg, const std::filesystem::path& run_dir, const data::Dataset& ds,
                         bool resume = false, const TrainHooks& hooks = {}) {
    namespace fs = std::filesystem;
    cfg.validate();
    if (ds.train.empty()) throw ValidationError("training set is empty");
    if (ds.test.empty()) throw ValidationError("test set is empty");
    fs::create_directories(run_dir);

    SegmentationModel<float> model(cfg.model, cfg.seed);
    AdamW<float> optim(named_parameters<float>(model), cfg.optimizer);
    Prng shuffle(derive_seed(cfg.seed, 1));
    TrainResult res;
    res.run_dir = run_dir;
    std::size_t start_epoch = 1, iteration = 0;

    const fs::path last = run_dir / "last.ckpt", best = run_dir / "best.ckpt";
    if (resume && fs::exists(last)) {
        const CheckpointFile ck = read_checkpoint(last);
        if (nlohmann::json(ck.model_config()) != nlohmann::json(cfg.model))
            throw ValidationError("checkpoint model config does not match the run config");
        restore_model(ck, model);
        restore_optimizer(ck, optim);
        const auto& m = ck.meta();
        prng_from_json(m.at("shuffle_prng"), shuffle);
        res.series = m.at("series").get<MetricSeries>();
        iteration = m.at("iteration");
        start_epoch = m.at("epoch").get<std::size_t>() + 1;
        res.best_dice = double_from_bits(m.at("best_dice").get<std::string>());
        res.epochs_run = start_epoch - 1;
        res.iterations = iteration;
    } else {
        std::ofstream(run_dir / "config.json") << nlohmann::json(cfg).dump(2) << '\n';
    }
    set_mode<float>(model, Mode::train);

    std::vector<std::size_t> order(ds.train.size());
    for (std::size_t epoch = start_epoch; epoch <= cfg.epochs && iteration < cfg.max_iterations; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[shuffle.below(i + 1)]);

        double loss_sum = 0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < order.size() && iteration < cfg.max_iterations; start += cfg.batch_size) {
            const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                               order.begin() + static_cast<std::ptrdiff_t>(
                                                                   std::min(order.size(), start + cfg.batch_size)));
            const Batch b = make_batch(ds.train, idx);
            ++iteration;
            const std::string where = " at iteration " + std::to_string(iteration) + " (epoch " + std::to_string(epoch) + ")";
            MutationLoss<float> ml;
            try {
                SegOutputs<float> out = model.forward(Var<float>(b.image));
                ml = mutation_loss(out.p, b.mask, cfg.loss);
                if (!std::isfinite(ml.report.total)) throw NumericError("non-finite loss" + where);
                backward(ml.total);
                optim.step();
                optim.zero_grad();
            } catch (const NumericError& e) {
                if (std::string(e.what()).find(where) != std::string::npos) throw;
                throw NumericError("non-finite values" + where + ": " + e.what());
            }
            const double loss = ml.report.total;
            loss_sum += loss;
            ++steps;
            res.series.iteration_loss.emplace_back(iteration, loss);
            if (hooks.on_iteration) hooks.on_iteration(iteration, ml.report);
        }

        const EvalResult ev = evaluate(model, ds.test, cfg.eval_threshold);
        EpochSummary s;
        s.epoch = epoch;
        s.iterations = iteration;
        s.mean_loss = loss_sum / static_cast<double>(steps);
        s.mean_dice = ev.mean_dice;
        s.improved = res.series.mean_dice.empty() || ev.mean_dice > res.best_dice;
        res.series.add_epoch(epoch, s.mean_loss, ev.mean_dice);
        res.best_dice = res.series.best_dice.back();
        s.best_dice = res.best_dice;
        res.final_dice = ev.mean_dice;
        res.epochs_run = epoch;
        res.iterations = iteration;

        const nlohmann::json meta = {{"epoch", epoch},
                                     {"iteration", iteration},
                                     {"seed", cfg.seed},
                                     {"mean_dice", double_bits(ev.mean_dice)},
                                     {"best_dice", double_bits(res.best_dice)},
                                     {"shuffle_prng", prng_to_json(shuffle)},
                                     {"series", res.series}};
        save_checkpoint(last, model, &optim, meta);
        if (s.improved) save_checkpoint(best, model, &optim, meta);
        emit_reports(res.series, run_dir);
        s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (hooks.on_epoch) hooks.on_epoch(s);
        if (hooks.stop_after && hooks.stop_after(s)) break;
    }

    std::ofstream(run_dir / "metrics.json") << nlohmann::json{{"epochs_run", res.epochs_run},
                                                             {"iterations", res.iterations},
                                                             {"final_mean_dice", res.final_dice},
                                                             {"best_mean_dice", res.best_dice}}
                                                   .dump(2)
                                            << '\n';
    return res;
}

inline TrainResult train(const TrainConfig& cfg, const std::filesystem::path& run_dir, bool resume = false,
                         const TrainHooks& hooks = {}) {
    cfg.validate();
    return train(cfg, run_dir, load_training_data(cfg), resume, hooks);
}

} // namespace emcad
