#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "emcad/train.hpp"

using namespace emcad;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / "emcad_test_train" / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), {}};
}

TrainConfig small_config() {
    TrainConfig c;
    c.seed = 11;
    c.epochs = 3;
    c.batch_size = 4;
    c.optimizer.lr = 1e-3;
    c.model = ModelConfig::with_channels({8, 16, 24, 32});
    c.data.synthetic = true;
    c.data.count = 10;
    c.data.size = 32;
    return c;
}

const char* kArtifacts[] = {"loss_iteration.csv", "loss_epoch.csv", "dice_epoch.csv", "last.ckpt", "best.ckpt"};

} // namespace

TEST(TrainConfig, RejectsUnknownKeysAndVersions) {
    const nlohmann::json good = small_config();
    EXPECT_NO_THROW(good.get<TrainConfig>().validate());

    nlohmann::json extra = good;
    extra["learning_rate"] = 0.1;
    EXPECT_THROW(extra.get<TrainConfig>(), ValidationError);

    nlohmann::json nested = good;
    nested["optimizer"]["momentum"] = 0.9;
    EXPECT_THROW(nested.get<TrainConfig>(), ValidationError);

    nlohmann::json version = good;
    version["version"] = 2;
    EXPECT_THROW(version.get<TrainConfig>().validate(), ValidationError);

    nlohmann::json missing = good;
    missing.erase("version");
    EXPECT_THROW(missing.get<TrainConfig>(), ValidationError);

    nlohmann::json typed = good;
    typed["epochs"] = "three";
    EXPECT_THROW(typed.get<TrainConfig>(), ValidationError);

    TrainConfig no_data = small_config();
    no_data.data.synthetic = false;
    EXPECT_THROW(no_data.validate(), ValidationError);
}

TEST(TrainConfig, JsonRoundTrip) {
    TrainConfig c = small_config();
    c.loss.w_dice = 0.5;
    const nlohmann::json j = c;
    EXPECT_EQ(nlohmann::json(j.get<TrainConfig>()), j);
}

TEST(Train, SameSeedGivesIdenticalArtifacts) {
    const TrainConfig cfg = small_config();
    const fs::path a = fresh_dir("det_a"), b = fresh_dir("det_b");
    const auto ra = train(cfg, a), rb = train(cfg, b);
    EXPECT_EQ(ra.epochs_run, 3u);
    EXPECT_EQ(ra.iterations, 6u); // 8 training slices, batch 4
    for (const char* f : kArtifacts) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
    EXPECT_EQ(ra.series.iteration_loss, rb.series.iteration_loss);
    for (const auto& [it, loss] : ra.series.iteration_loss) EXPECT_TRUE(std::isfinite(loss)) << it;
}

TEST(Train, ResumeMatchesUninterruptedRun) {
    const TrainConfig cfg = small_config();
    const fs::path full = fresh_dir("resume_full"), part = fresh_dir("resume_part");
    train(cfg, full);
    TrainHooks stop;
    stop.stop_after = [](const EpochSummary& s) { return s.epoch == 1; };
    const auto first = train(cfg, part, false, stop);
    EXPECT_EQ(first.epochs_run, 1u);
    const auto rest = train(cfg, part, true);
    EXPECT_EQ(rest.epochs_run, 3u);
    for (const char* f : kArtifacts) EXPECT_EQ(slurp(full / f), slurp(part / f)) << f;
}

TEST(Train, NonFiniteLossAborts) {
    TrainConfig cfg = small_config();
    cfg.optimizer.lr = 1e300;
    try {
        train(cfg, fresh_dir("nan"));
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("non-finite"), std::string::npos) << msg;
        EXPECT_NE(msg.find(" at iteration "), std::string::npos) << msg;
        EXPECT_NE(msg.find("(epoch 1)"), std::string::npos) << msg;
    }
}

TEST(Train, EmptyManifestSplitRejected) {
    const fs::path root = fresh_dir("manifest");
    data::SyntheticOptions opt;
    opt.count = 4;
    opt.size = 32;
    data::Dataset d = data::make_synthetic(opt);
    d.test.clear();
    data::write_dataset(root, d, nlohmann::json::object());
    TrainConfig cfg = small_config();
    cfg.data.synthetic = false;
    cfg.data.manifest = (root / "manifest.jsonl").string();
    EXPECT_THROW(train(cfg, fresh_dir("manifest_run")), ValidationError);
}

TEST(Train, DerivedSeedsDiffer) {
    EXPECT_NE(derive_seed(7, 0), derive_seed(7, 1));
    EXPECT_NE(derive_seed(7, 1), derive_seed(8, 1));
    EXPECT_EQ(derive_seed(7, 1), derive_seed(7, 1));
}
