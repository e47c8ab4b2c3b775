// emcad command-line tool: preprocess, synth, train, eval, gradcheck, count.
//
// Exit codes: 0 success, 1 validation error (bad arguments, config, data or
// files), 2 runtime or numeric error.

#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "emcad/emcad.hpp"

namespace fs = std::filesystem;
using namespace emcad;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

struct Options {
    std::string config;
    std::uint64_t seed = 7;
    bool seed_set = false;
    bool synthetic = false;
    bool drop_empty = false;
    std::size_t modality = 0;
    std::string out;
    std::size_t resolution = 224;

    // subcommand specific
    std::string volume_dir;
    double train_fraction = 0.8;
    std::size_t count = 200;
    std::size_t size = 64;
    double difficulty = 0.5;
    std::size_t volumes = 0;
    std::size_t slices = 155;
    std::size_t volume_resolution = 240;
    std::string manifest;
    std::string checkpoint;
    std::string resume;
    std::size_t epochs = 0;
    std::string scope = "all";
};

std::string timestamp() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y%m%d-%H%M%S");
    return os.str();
}

void write_json(const fs::path& p, const nlohmann::json& j) {
    std::ofstream f(p, std::ios::trunc);
    if (!f) throw Error("cannot write " + p.string());
    f << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------

int cmd_preprocess(const Options& o) {
    if (o.volume_dir.empty()) throw ValidationError("preprocess needs a volume directory");
    if (o.out.empty()) throw ValidationError("preprocess needs --out DIR");
    data::DirectoryOptions dopt;
    dopt.modality = o.modality;
    dopt.drop_empty = o.drop_empty;
    dopt.train_fraction = o.train_fraction;
    dopt.seed = o.seed;
    const data::DirectorySummary sum = data::preprocess_directory(o.volume_dir, o.out, dopt);
    std::cout << "volumes: " << sum.volumes << "\nslices kept: " << sum.kept << "\nslices dropped: " << sum.dropped
              << "\ntrain patients: " << sum.split.train.size() << "\ntest patients: " << sum.split.test.size()
              << "\nmanifest: " << sum.manifest.string() << '\n';
    if (sum.kept == 0) std::cerr << "warning: no slices kept (all slices were empty)\n";
    return kExitOk;
}

int cmd_synth(const Options& o) {
    if (o.out.empty()) throw ValidationError("synth needs --out DIR");
    if (o.volumes > 0) {
        if (o.volume_resolution < 16 || o.slices < 1) throw ValidationError("volume size too small");
        Prng prng(o.seed);
        for (std::size_t i = 0; i < o.volumes; ++i) {
            char id[32];
            std::snprintf(id, sizeof id, "patient_%03zu", i);
            const data::Volume v = data::synth_volume(prng, id, o.volume_resolution, o.volume_resolution, o.slices);
            data::write_volume(fs::path(o.out) / id, v);
        }
        std::cout << "wrote " << o.volumes << " volume(s) of " << o.volume_resolution << "x" << o.volume_resolution << "x"
                  << o.slices << " to " << o.out << '\n';
        return kExitOk;
    }
    data::SyntheticOptions so;
    so.count = o.count;
    so.size = o.size;
    so.difficulty = o.difficulty;
    so.train_fraction = o.train_fraction;
    so.seed = o.seed;
    const data::Dataset d = data::make_synthetic(so);
    const nlohmann::json meta = {{"seed", so.seed},
                                 {"synthetic", true},
                                 {"count", so.count},
                                 {"size", so.size},
                                 {"difficulty", so.difficulty},
                                 {"train_fraction", so.train_fraction}};
    const auto recs = data::write_dataset(o.out, d, meta);
    std::cout << "phantoms: " << recs.size() << " (train " << d.train.size() << ", test " << d.test.size()
              << ")\nmanifest: " << (fs::path(o.out) / "manifest.jsonl").string() << '\n';
    return kExitOk;
}

int cmd_train(const Options& o) {
    TrainConfig cfg;
    if (!o.config.empty()) cfg = load_train_config(o.config);
    if (o.seed_set) cfg.seed = o.seed;
    if (o.synthetic) cfg.data.synthetic = true;
    if (!o.manifest.empty()) {
        cfg.data.synthetic = false;
        cfg.data.manifest = o.manifest;
    }
    if (o.epochs) cfg.epochs = o.epochs;
    if (!o.out.empty()) cfg.output_dir = o.out;
    cfg.validate();

    fs::path run_dir;
    if (!o.resume.empty()) {
        run_dir = o.resume;
        if (!fs::exists(run_dir / "last.ckpt")) throw ValidationError("no last.ckpt in " + run_dir.string());
    } else {
        run_dir = fs::path(cfg.output_dir) / (timestamp() + "_seed" + std::to_string(cfg.seed));
    }
    std::cout << "run directory: " << run_dir.string() << std::endl;

    TrainHooks hooks;
    std::ofstream iter_log;
    fs::create_directories(run_dir);
    iter_log.open(run_dir / "train.log", std::ios::app);
    hooks.on_iteration = [&](std::size_t it, const LossReport& r) {
        iter_log << "iteration " << it << " loss " << fmt_number(r.total) << '\n';
    };
    hooks.on_epoch = [](const EpochSummary& s) {
        std::cout << "epoch " << std::setw(3) << s.epoch << "  iterations " << std::setw(6) << s.iterations
                  << "  mean loss " << std::fixed << std::setprecision(4) << s.mean_loss << "  mean dice "
                  << s.mean_dice << "  best dice " << s.best_dice << (s.improved ? "  *" : "") << "  ("
                  << std::setprecision(1) << s.seconds << " s)" << std::defaultfloat << std::endl;
    };
    const TrainResult r = train(cfg, run_dir, !o.resume.empty(), hooks);
    std::cout << "epochs: " << r.epochs_run << "  iterations: " << r.iterations << "  final mean dice: "
              << fmt_number(r.final_dice) << "  best mean dice: " << fmt_number(r.best_dice) << '\n';
    return kExitOk;
}

int cmd_eval(const Options& o) {
    if (o.checkpoint.empty()) throw ValidationError("eval needs --checkpoint PATH");
    if (o.manifest.empty()) throw ValidationError("eval needs --manifest PATH");
    const CheckpointFile ck = read_checkpoint(o.checkpoint);
    SegmentationModel<float> model = load_model<float>(ck);
    const auto test = data::load_split(o.manifest, "test");
    if (test.empty()) throw ValidationError("manifest " + o.manifest + " has no test records");
    if (model.config().decoder.num_classes != 1) throw ValidationError("eval expects a binary model");
    if (test.front().image.shape().c != model.config().encoder.in_channels)
        throw ValidationError("checkpoint expects " + std::to_string(model.config().encoder.in_channels) +
                              " input channels, manifest images have " + std::to_string(test.front().image.shape().c));
    const EvalResult ev = evaluate(model, test);

    const fs::path out = o.out.empty() ? fs::path(o.checkpoint).parent_path() : fs::path(o.out);
    fs::create_directories(out.empty() ? fs::path(".") : out);
    std::ofstream csv(out / "eval_cases.csv", std::ios::trunc);
    csv << "patient_id,slice_index,dice\n";
    for (const auto& c : ev.cases) csv << c.patient_id << ',' << c.slice_index << ',' << fmt_number(c.dice) << '\n';
    write_json(out / "eval.json", {{"checkpoint", o.checkpoint},
                                   {"manifest", o.manifest},
                                   {"cases", ev.cases.size()},
                                   {"mean_dice", ev.mean_dice}});
    std::cout << "cases: " << ev.cases.size() << "\nmean dice: " << fmt_number(ev.mean_dice) << '\n';
    return kExitOk;
}

int cmd_gradcheck(const Options& o) {
    const auto cases = gradcheck_cases(o.scope);
    GradcheckOptions opt;
    bool all_ok = true;
    std::cout << std::left << std::setw(8) << "scope" << std::setw(46) << "case" << std::right << std::setw(14)
              << "max rel err" << std::setw(9) << "time" << "  status\n";
    for (const auto& c : cases) {
        const GradcheckResult r = run_case(c, opt);
        const bool ok = r.report.passed();
        all_ok = all_ok && ok;
        std::cout << std::left << std::setw(8) << r.scope << std::setw(46) << r.name << std::right << std::setw(14)
                  << std::scientific << std::setprecision(3) << r.report.max_rel_error << std::defaultfloat
                  << std::setw(8) << std::fixed << std::setprecision(1) << r.seconds << "s" << std::defaultfloat
                  << "  " << (ok ? "PASS" : "FAIL") << std::endl;
    }
    std::cout << (all_ok ? "all cases passed" : "gradient check FAILED") << " (tolerance " << opt.tolerance << ")\n";
    return all_ok ? kExitOk : kExitRuntime;
}

int cmd_count(const Options& o) {
    ModelConfig mc;
    if (!o.config.empty()) {
        std::ifstream f(o.config);
        if (!f) throw ValidationError("cannot open config " + o.config);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(f);
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("config " + o.config + " is not valid JSON: " + e.what());
        }
        // Either a full training config or a bare model config.
        if (j.contains("version")) mc = j.get<TrainConfig>().model;
        else mc = j.get<ModelConfig>();
    }
    mc.validate();
    SegmentationModel<float> model(mc, o.seed);
    const CostReport dec = count_flops(model.decoder(), o.resolution, o.resolution);
    const CostReport full = count_flops(model, o.resolution, o.resolution);
    std::cout << "decoder\n" << format_cost_table(dec);
    std::cout << "\nencoder + decoder: params " << full.total_params << ", FLOPs " << full.total_flops() << '\n';
    const nlohmann::json j = {{"decoder", to_json(dec)}, {"model", to_json(full)}, {"config", mc}};
    if (!o.out.empty()) {
        fs::create_directories(o.out);
        write_json(fs::path(o.out) / "cost.json", j);
    }
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"EMCAD decoder training and evaluation tool"};
    app.require_subcommand(1);
    Options o;

    auto common = [&](CLI::App* sc) {
        sc->add_option("--seed", o.seed, "random seed")->each([&](const std::string&) { o.seed_set = true; });
        sc->add_option("--out", o.out, "output directory");
    };

    auto* pre = app.add_subcommand("preprocess", "slice NPY volumes into a normalized 2D dataset");
    pre->add_option("volume_dir", o.volume_dir, "directory of <patient>/{image,label}.npy")->required();
    pre->add_flag("--drop-empty", o.drop_empty, "skip slices without tumor pixels");
    pre->add_option("--modality", o.modality, "modality index for rank-4 volumes (default 0)");
    pre->add_option("--train-fraction", o.train_fraction, "fraction of patients used for training");
    common(pre);

    auto* syn = app.add_subcommand("synth", "write a synthetic phantom dataset or synthetic volumes");
    syn->add_option("--count", o.count, "number of phantoms");
    syn->add_option("--size", o.size, "phantom side length");
    syn->add_option("--difficulty", o.difficulty, "noise level");
    syn->add_option("--train-fraction", o.train_fraction, "fraction of phantoms used for training");
    syn->add_option("--volumes", o.volumes, "write this many BraTS-shaped volumes instead of phantoms");
    syn->add_option("--resolution", o.volume_resolution, "volume height and width (with --volumes)");
    syn->add_option("--slices", o.slices, "volume depth (with --volumes)");
    common(syn);

    auto* tr = app.add_subcommand("train", "train a model");
    tr->add_option("--config", o.config, "training config JSON");
    tr->add_flag("--synthetic", o.synthetic, "train on generated phantoms");
    tr->add_option("--manifest", o.manifest, "dataset manifest");
    tr->add_option("--epochs", o.epochs, "override the configured epoch count");
    tr->add_option("--resume", o.resume, "continue the run in this directory from last.ckpt");
    common(tr);

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a manifest's test split");
    ev->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
    ev->add_option("--manifest", o.manifest, "dataset manifest")->required();
    ev->add_option("--out", o.out, "output directory (default: the checkpoint's directory)");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    gc->add_option("scope", o.scope, "ops, blocks, full or all")
        ->check(CLI::IsMember({"ops", "blocks", "full", "all"}));

    auto* cnt = app.add_subcommand("count", "parameter and FLOP report");
    cnt->add_option("--config", o.config, "training or model config JSON");
    cnt->add_option("--resolution", o.resolution, "square input resolution");
    common(cnt);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitValidation;
    }

    try {
        if (*pre) return cmd_preprocess(o);
        if (*syn) return cmd_synth(o);
        if (*tr) return cmd_train(o);
        if (*ev) return cmd_eval(o);
        if (*gc) return cmd_gradcheck(o);
        if (*cnt) return cmd_count(o);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitRuntime;
}
