#pragma once

// Data pipeline: synthetic phantoms and volumes, volume preprocessing,
// patient-level splitting, slice files + JSON-lines manifest, loading.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include "emcad/npy.hpp"
#include "emcad/ops.hpp"
#include "emcad/tensor.hpp"
#include "json.hpp"

namespace emcad::data {

namespace fs = std::filesystem;

inline constexpr std::array<double, 3> kImageNetMean{0.485, 0.456, 0.406};
inline constexpr std::array<double, 3> kImageNetStd{0.229, 0.224, 0.225};

/// One normalized 2D sample: image (1, 3, H, W), mask (1, 1, H, W) in {0, 1}.
struct Slice {
    std::string patient_id;
    std::size_t slice_index = 0;
    Tensor4<float> image;
    Tensor4<float> mask;
};

/// Replicates a [0, 1] intensity map into 3 channels standardized with the
/// ImageNet constants.
inline Tensor4<float> to_imagenet_rgb(const std::vector<double>& unit, std::size_t h, std::size_t w) {
    Tensor4<float> img({1, 3, h, w});
    for (std::size_t c = 0; c < 3; ++c) {
        float* p = img.plane(0, c);
        for (std::size_t i = 0; i < h * w; ++i)
            p[i] = static_cast<float>((unit[i] - kImageNetMean[c]) / kImageNetStd[c]);
    }
    return img;
}

// ---------------------------------------------------------------------------
// Phantoms

struct Phantom {
    Tensor4<float> image; // (1, 1, size, size) raw intensities
    Tensor4<float> mask;  // (1, 1, size, size)
};

inline constexpr double kMinMaskFraction = 0.01;
inline constexpr double kMaxMaskFraction = 0.4;

/// 1-3 random ellipses, each adding an offset U(0.5, 1) on a zero background,
/// plus N(0, (0.3 * difficulty)^2) noise everywhere. Layouts are redrawn until
/// the mask fraction lies in [0.01, 0.4].
inline Phantom synth_phantom(Prng& prng, std::size_t size, double difficulty) {
    if (size < 16) throw ValidationError("phantom size must be >= 16");
    if (!(difficulty >= 0)) throw ValidationError("phantom difficulty must be >= 0");
    const double s = static_cast<double>(size);
    std::vector<double> img(size * size);
    std::vector<std::uint8_t> mask(size * size);
    for (;;) {
        std::fill(img.begin(), img.end(), 0.0);
        std::fill(mask.begin(), mask.end(), 0);
        const std::size_t count = 1 + prng.below(3);
        for (std::size_t e = 0; e < count; ++e) {
            const double cy = prng.uniform(0.2, 0.8) * s, cx = prng.uniform(0.2, 0.8) * s;
            const double a = prng.uniform(s / 12, s / 5), b = prng.uniform(s / 12, s / 5);
            const double th = prng.uniform(0, std::numbers::pi);
            const double offset = prng.uniform(0.5, 1.0);
            const double ct = std::cos(th), st = std::sin(th);
            for (std::size_t y = 0; y < size; ++y)
                for (std::size_t x = 0; x < size; ++x) {
                    const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
                    const double u = dx * ct + dy * st, v = -dx * st + dy * ct;
                    if ((u / a) * (u / a) + (v / b) * (v / b) <= 1.0) {
                        mask[y * size + x] = 1;
                        img[y * size + x] += offset;
                    }
                }
        }
        const auto fg = static_cast<double>(std::count(mask.begin(), mask.end(), 1));
        const double frac = fg / static_cast<double>(mask.size());
        if (frac >= kMinMaskFraction && frac <= kMaxMaskFraction) break;
    }
    if (difficulty > 0)
        for (auto& v : img) v += 0.3 * difficulty * prng.normal();
    Phantom p{Tensor4<float>({1, 1, size, size}), Tensor4<float>({1, 1, size, size})};
    for (std::size_t i = 0; i < img.size(); ++i) {
        p.image[i] = static_cast<float>(img[i]);
        p.mask[i] = static_cast<float>(mask[i]);
    }
    return p;
}

/// Min-max scaled and ImageNet-standardized training sample.
inline Slice phantom_slice(const Phantom& p, const std::string& patient_id) {
    const Shape& s = p.image.shape();
    std::vector<double> v(p.image.data().begin(), p.image.data().end());
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    const double mn = *lo, range = *hi - *lo;
    if (!(range > 0)) throw ValidationError("constant phantom image");
    for (auto& x : v) x = (x - mn) / range;
    return {patient_id, 0, to_imagenet_rgb(v, s.h, s.w), p.mask};
}

// ---------------------------------------------------------------------------
// Splitting

struct Split {
    std::vector<std::string> train;
    std::vector<std::string> test;
};

/// Sorts the ids, shuffles them with the seed (Fisher-Yates) and assigns the
/// first floor(fraction * n) to train. Both lists are returned sorted.
inline Split split_patients(std::vector<std::string> ids, double fraction, std::uint64_t seed) {
    if (ids.empty()) throw ValidationError("split_patients: empty id list");
    if (!(fraction > 0 && fraction < 1)) throw ValidationError("split fraction must lie in (0, 1)");
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
        throw ValidationError("split_patients: duplicate patient id '" + *std::adjacent_find(ids.begin(), ids.end()) +
                              "'");
    Prng prng(seed);
    for (std::size_t i = ids.size() - 1; i > 0; --i) std::swap(ids[i], ids[prng.below(i + 1)]);
    const auto n_train = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(ids.size()) + 1e-9));
    Split s;
    s.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

// ---------------------------------------------------------------------------
// Synthetic phantom dataset (one phantom per patient)

struct Dataset {
    std::vector<Slice> train;
    std::vector<Slice> test;
};

struct SyntheticOptions {
    std::size_t count = 200;
    std::size_t size = 64;
    double difficulty = 0.5;
    double train_fraction = 0.8;
    std::uint64_t seed = 7;
};

inline std::string phantom_id(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "phantom_%04zu", i);
    return buf;
}

inline Dataset make_synthetic(const SyntheticOptions& opt) {
    if (opt.count < 2) throw ValidationError("synthetic dataset needs at least 2 phantoms");
    Prng prng(opt.seed);
    std::vector<Slice> all;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < opt.count; ++i) {
        ids.push_back(phantom_id(i));
        all.push_back(phantom_slice(synth_phantom(prng, opt.size, opt.difficulty), ids.back()));
    }
    const Split split = split_patients(ids, opt.train_fraction, opt.seed);
    const std::set<std::string> train(split.train.begin(), split.train.end());
    Dataset d;
    for (auto& s : all) (train.count(s.patient_id) ? d.train : d.test).push_back(std::move(s));
    return d;
}

// ---------------------------------------------------------------------------
// Volumes

/// Rank-3 volume stored C-order as (h, w, slices).
struct Volume {
    std::string patient_id;
    std::size_t h = 0, w = 0, slices = 0;
    std::vector<float> image;
    std::vector<std::int32_t> label;

    std::size_t index(std::size_t y, std::size_t x, std::size_t z) const { return (y * w + x) * slices + z; }
};

inline bool legal_label(std::int32_t v) { return v == 0 || v == 1 || v == 2 || v == 4; }

struct PreprocessOptions {
    bool drop_empty = false;
    double low_percentile = 1.0;
    double high_percentile = 99.0;
};

/// Linear-interpolated percentile (the numpy default).
inline double percentile(std::vector<float> v, double pct) {
    if (v.empty()) throw ValidationError("percentile of empty data");
    const double pos = pct / 100.0 * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(lo), v.end());
    const double a = v[lo];
    double b = a;
    if (hi != lo) b = *std::min_element(v.begin() + static_cast<std::ptrdiff_t>(lo) + 1, v.end());
    return a + (b - a) * (pos - static_cast<double>(lo));
}

inline void validate_volume(const Volume& v) {
    const std::size_t n = v.h * v.w * v.slices;
    if (n == 0) throw ValidationError("volume " + v.patient_id + " is empty");
    if (v.image.size() != n || v.label.size() != n)
        throw ValidationError("volume " + v.patient_id + ": image/label sizes do not match the shape");
    for (float x : v.image)
        if (!std::isfinite(x)) throw ValidationError("volume " + v.patient_id + " has non-finite intensities");
    for (std::int32_t l : v.label)
        if (!legal_label(l))
            throw ValidationError("volume " + v.patient_id + " has label " + std::to_string(l) +
                                  " outside {0, 1, 2, 4}");
}

/// Percentile clip, min-max scale, 3-channel ImageNet standardization and
/// binary masks (label > 0), one Slice per z index. With drop_empty, slices
/// without tumor pixels are skipped and counted in *dropped.
inline std::vector<Slice> preprocess_volume(const Volume& v, const PreprocessOptions& opt,
                                            std::size_t* dropped = nullptr) {
    validate_volume(v);
    const auto [mn_it, mx_it] = std::minmax_element(v.image.begin(), v.image.end());
    if (*mn_it == *mx_it) throw ValidationError("volume " + v.patient_id + " is constant (min == max)");
    const double lo = percentile(v.image, opt.low_percentile);
    const double hi = percentile(v.image, opt.high_percentile);
    if (!(hi > lo))
        throw ValidationError("volume " + v.patient_id + ": intensity range collapses after percentile clipping");

    std::vector<Slice> out;
    std::size_t skipped = 0;
    std::vector<double> unit(v.h * v.w);
    for (std::size_t z = 0; z < v.slices; ++z) {
        Tensor4<float> mask({1, 1, v.h, v.w});
        bool any = false;
        for (std::size_t y = 0; y < v.h; ++y)
            for (std::size_t x = 0; x < v.w; ++x) {
                const std::size_t i = v.index(y, x, z);
                const double c = std::clamp(static_cast<double>(v.image[i]), lo, hi);
                unit[y * v.w + x] = (c - lo) / (hi - lo);
                const bool fg = v.label[i] > 0;
                mask[y * v.w + x] = fg ? 1.0f : 0.0f;
                any = any || fg;
            }
        if (opt.drop_empty && !any) {
            ++skipped;
            continue;
        }
        out.push_back({v.patient_id, z, to_imagenet_rgb(unit, v.h, v.w), std::move(mask)});
    }
    if (dropped) *dropped = skipped;
    return out;
}

/// BraTS-shaped synthetic volume: an ellipsoidal "brain" with a tumor made of
/// edema (2) around enhancing tissue (4) around a necrotic core (1).
inline Volume synth_volume(Prng& prng, const std::string& patient_id, std::size_t h = 240, std::size_t w = 240,
                           std::size_t slices = 155) {
    Volume v{patient_id, h, w, slices, std::vector<float>(h * w * slices), std::vector<std::int32_t>(h * w * slices)};
    const double H = static_cast<double>(h), W = static_cast<double>(w), S = static_cast<double>(slices);
    const double ty = prng.uniform(0.35, 0.65) * H, tx = prng.uniform(0.35, 0.65) * W, tz = prng.uniform(0.4, 0.6) * S;
    const double r = prng.uniform(0.08, 0.14) * std::min(H, W);
    const double rz = r * S / std::min(H, W);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t z = 0; z < slices; ++z) {
                const double by = (static_cast<double>(y) - H / 2) / (0.42 * H);
                const double bx = (static_cast<double>(x) - W / 2) / (0.36 * W);
                const double bz = (static_cast<double>(z) - S / 2) / (0.45 * S);
                const std::size_t i = v.index(y, x, z);
                if (by * by + bx * bx + bz * bz > 1) continue;
                const double dy = static_cast<double>(y) - ty, dx = static_cast<double>(x) - tx;
                const double dz = (static_cast<double>(z) - tz) * r / rz;
                const double d = std::sqrt(dy * dy + dx * dx + dz * dz) / r;
                double intensity = 300.0 + 40.0 * prng.normal();
                std::int32_t label = 0;
                if (d < 0.4) {
                    label = 1;
                    intensity = 150.0 + 30.0 * prng.normal();
                } else if (d < 0.7) {
                    label = 4;
                    intensity = 700.0 + 60.0 * prng.normal();
                } else if (d < 1.0) {
                    label = 2;
                    intensity = 450.0 + 50.0 * prng.normal();
                }
                v.image[i] = static_cast<float>(std::max(0.0, intensity));
                v.label[i] = label;
            }
    return v;
}

/// Reads <dir>/image.npy (rank 3, or rank 4 with a trailing modality axis)
/// and <dir>/label.npy (rank 3). The patient id is the directory name.
inline Volume read_volume(const fs::path& dir, std::size_t modality = 0) {
    const npy::Array img = npy::read(dir / "image.npy");
    const npy::Array lab = npy::read(dir / "label.npy");
    if (img.shape.size() != 3 && img.shape.size() != 4)
        throw ValidationError(dir.string() + ": image.npy must be rank 3 or 4");
    if (lab.shape.size() != 3) throw ValidationError(dir.string() + ": label.npy must be rank 3");
    if (!std::equal(lab.shape.begin(), lab.shape.end(), img.shape.begin()))
        throw ValidationError(dir.string() + ": image and label shapes differ");
    Volume v;
    v.patient_id = dir.filename().string();
    v.h = lab.shape[0];
    v.w = lab.shape[1];
    v.slices = lab.shape[2];
    const std::vector<float> raw = img.as<float>();
    if (img.shape.size() == 4) {
        const std::size_t m = img.shape[3];
        if (modality >= m)
            throw ValidationError(dir.string() + ": modality " + std::to_string(modality) + " out of range (volume has " +
                                  std::to_string(m) + ")");
        v.image.resize(raw.size() / m);
        for (std::size_t i = 0; i < v.image.size(); ++i) v.image[i] = raw[i * m + modality];
    } else {
        if (modality != 0) throw ValidationError(dir.string() + ": single-modality volume, modality must be 0");
        v.image = raw;
    }
    const std::vector<double> lv = lab.as<double>();
    v.label.resize(lv.size());
    for (std::size_t i = 0; i < lv.size(); ++i) {
        if (lv[i] != std::floor(lv[i])) throw ValidationError(dir.string() + ": non-integer label value");
        v.label[i] = static_cast<std::int32_t>(lv[i]);
    }
    return v;
}

inline void write_volume(const fs::path& dir, const Volume& v) {
    fs::create_directories(dir);
    const std::vector<std::size_t> shape{v.h, v.w, v.slices};
    npy::write<float>(dir / "image.npy", shape, v.image);
    std::vector<std::uint8_t> lab(v.label.begin(), v.label.end());
    npy::write<std::uint8_t>(dir / "label.npy", shape, lab);
}

// ---------------------------------------------------------------------------
// Slice files and manifest

struct ManifestRecord {
    std::string patient_id;
    std::size_t slice_index = 0;
    std::string image_path; // relative to the manifest directory
    std::string mask_path;
    std::string split;
};

inline void to_json(nlohmann::json& j, const ManifestRecord& r) {
    j = nlohmann::json{{"patient_id", r.patient_id},
                       {"slice_index", r.slice_index},
                       {"image_path", r.image_path},
                       {"mask_path", r.mask_path},
                       {"split", r.split}};
}

inline void from_json(const nlohmann::json& j, ManifestRecord& r) {
    j.at("patient_id").get_to(r.patient_id);
    j.at("slice_index").get_to(r.slice_index);
    j.at("image_path").get_to(r.image_path);
    j.at("mask_path").get_to(r.mask_path);
    j.at("split").get_to(r.split);
    if (r.split != "train" && r.split != "test") throw ValidationError("manifest split must be train or test");
}

inline std::string slice_stem(std::size_t k) { return "slice_" + std::to_string(k); }

/// Writes <root>/<split>/<pid>/slice_<k>.{img,mask}.npy and returns the record.
inline ManifestRecord write_slice(const fs::path& root, const Slice& s, const std::string& split) {
    const fs::path rel_dir = fs::path(split) / s.patient_id;
    fs::create_directories(root / rel_dir);
    const std::string stem = slice_stem(s.slice_index);
    const fs::path img = rel_dir / (stem + ".img.npy"), msk = rel_dir / (stem + ".mask.npy");
    const Shape& is = s.image.shape();
    npy::write<float>(root / img, {is.c, is.h, is.w}, s.image.data());
    std::vector<std::uint8_t> m(s.mask.numel());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = s.mask[i] > 0.5f ? 1 : 0;
    npy::write<std::uint8_t>(root / msk, {is.h, is.w}, m);
    return {s.patient_id, s.slice_index, img.generic_string(), msk.generic_string(), split};
}

inline void sort_records(std::vector<ManifestRecord>& recs) {
    std::sort(recs.begin(), recs.end(), [](const ManifestRecord& a, const ManifestRecord& b) {
        return a.patient_id != b.patient_id ? a.patient_id < b.patient_id : a.slice_index < b.slice_index;
    });
}

inline void write_manifest(const fs::path& path, std::vector<ManifestRecord> recs, const nlohmann::json& meta) {
    sort_records(recs);
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot write " + path.string());
    for (const auto& r : recs) f << nlohmann::json(r).dump() << '\n';
    fs::path meta_path = path;
    meta_path.replace_extension(".meta.json");
    std::ofstream m(meta_path, std::ios::trunc);
    m << meta.dump(2) << '\n';
    if (!f || !m) throw Error("failed writing manifest " + path.string());
}

inline std::vector<ManifestRecord> read_manifest(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw ValidationError("cannot open manifest " + path.string());
    std::vector<ManifestRecord> recs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            recs.push_back(nlohmann::json::parse(line).get<ManifestRecord>());
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return recs;
}

/// Writes both splits and the manifest; returns the records written.
inline std::vector<ManifestRecord> write_dataset(const fs::path& root, const Dataset& d, const nlohmann::json& meta) {
    fs::create_directories(root);
    std::vector<ManifestRecord> recs;
    for (const auto& s : d.train) recs.push_back(write_slice(root, s, "train"));
    for (const auto& s : d.test) recs.push_back(write_slice(root, s, "test"));
    write_manifest(root / "manifest.jsonl", recs, meta);
    sort_records(recs);
    return recs;
}

struct DirectoryOptions {
    std::size_t modality = 0;
    bool drop_empty = false;
    double train_fraction = 0.8;
    std::uint64_t seed = 7;
};

struct DirectorySummary {
    std::size_t volumes = 0;
    std::size_t kept = 0;
    std::size_t dropped = 0;
    Split split;
    fs::path manifest;
};

/// Preprocesses every patient directory under volume_dir (see read_volume),
/// splits by patient and writes slice files plus manifest.jsonl into out.
/// Volumes are processed in parallel; all read/validation failures are
/// collected and reported together.
inline DirectorySummary preprocess_directory(const fs::path& volume_dir, const fs::path& out,
                                             const DirectoryOptions& opt) {
    if (!fs::is_directory(volume_dir)) throw ValidationError("volume directory " + volume_dir.string() + " does not exist");
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(volume_dir))
        if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) throw ValidationError("no patient directories under " + volume_dir.string());

    struct Outcome {
        std::string patient_id;
        std::vector<Slice> slices;
        std::size_t dropped = 0;
        std::string error;
    };
    std::vector<Outcome> outcomes(dirs.size());
    PreprocessOptions popt;
    popt.drop_empty = opt.drop_empty;
    parallel_for(dirs.size(), [&](std::size_t i) {
        Outcome& r = outcomes[i];
        r.patient_id = dirs[i].filename().string();
        try {
            r.slices = preprocess_volume(read_volume(dirs[i], opt.modality), popt, &r.dropped);
        } catch (const Error& e) {
            r.error = e.what();
        }
    });

    std::vector<std::string> ids;
    std::string failures;
    std::size_t failed = 0;
    for (const auto& r : outcomes) {
        if (r.error.empty()) {
            ids.push_back(r.patient_id);
        } else {
            ++failed;
            failures += "\n  " + r.patient_id + ": " + r.error;
        }
    }
    if (failed) throw ValidationError("failed to read " + std::to_string(failed) + " volume(s):" + failures);

    DirectorySummary sum;
    sum.volumes = ids.size();
    sum.split = split_patients(ids, opt.train_fraction, opt.seed);
    const std::set<std::string> train(sum.split.train.begin(), sum.split.train.end());
    fs::create_directories(out);
    std::vector<std::vector<ManifestRecord>> per(outcomes.size());
    parallel_for(outcomes.size(), [&](std::size_t i) {
        const std::string sp = train.count(outcomes[i].patient_id) ? "train" : "test";
        for (const auto& s : outcomes[i].slices) per[i].push_back(write_slice(out, s, sp));
    });
    std::vector<ManifestRecord> recs;
    for (std::size_t i = 0; i < per.size(); ++i) {
        recs.insert(recs.end(), per[i].begin(), per[i].end());
        sum.kept += outcomes[i].slices.size();
        sum.dropped += outcomes[i].dropped;
    }
    const nlohmann::json meta = {{"seed", opt.seed},
                                 {"source", fs::absolute(volume_dir).string()},
                                 {"modality", opt.modality},
                                 {"drop_empty", opt.drop_empty},
                                 {"train_fraction", opt.train_fraction},
                                 {"percentiles", {popt.low_percentile, popt.high_percentile}},
                                 {"train_patients", sum.split.train.size()},
                                 {"test_patients", sum.split.test.size()}};
    sum.manifest = out / "manifest.jsonl";
    write_manifest(sum.manifest, recs, meta);
    return sum;
}

/// Crops the centre so that height and width are multiples of `multiple`.
inline Slice center_crop(const Slice& s, std::size_t multiple) {
    const Shape& is = s.image.shape();
    const std::size_t h = is.h / multiple * multiple, w = is.w / multiple * multiple;
    if (h == 0 || w == 0)
        throw ValidationError("slice " + std::to_string(is.h) + "x" + std::to_string(is.w) + " is smaller than " +
                              std::to_string(multiple));
    if (h == is.h && w == is.w) return s;
    const std::size_t y0 = (is.h - h) / 2, x0 = (is.w - w) / 2;
    Slice out{s.patient_id, s.slice_index, Tensor4<float>({1, is.c, h, w}), Tensor4<float>({1, 1, h, w})};
    for (std::size_t c = 0; c < is.c; ++c)
        for (std::size_t y = 0; y < h; ++y)
            std::copy_n(s.image.plane(0, c) + (y + y0) * is.w + x0, w, out.image.plane(0, c) + y * w);
    for (std::size_t y = 0; y < h; ++y)
        std::copy_n(s.mask.plane(0, 0) + (y + y0) * is.w + x0, w, out.mask.plane(0, 0) + y * w);
    return out;
}

inline Slice load_slice(const fs::path& root, const ManifestRecord& r) {
    std::vector<std::size_t> is, ms;
    std::vector<float> img = npy::read_exact<float>(root / r.image_path, &is);
    std::vector<std::uint8_t> msk = npy::read_exact<std::uint8_t>(root / r.mask_path, &ms);
    if (is.size() != 3 || is[0] != 3) throw ValidationError(r.image_path + ": expected a (3, H, W) image");
    if (ms.size() != 2 || ms[0] != is[1] || ms[1] != is[2])
        throw ValidationError(r.mask_path + ": mask shape does not match its image");
    Slice s{r.patient_id, r.slice_index, Tensor4<float>({1, 3, is[1], is[2]}, std::move(img)),
            Tensor4<float>({1, 1, ms[0], ms[1]})};
    for (std::size_t i = 0; i < msk.size(); ++i) {
        if (msk[i] > 1) throw ValidationError(r.mask_path + ": mask is not binary");
        s.mask[i] = static_cast<float>(msk[i]);
    }
    return s;
}

/// Loads one split of a manifest, centre-cropping to a multiple of `multiple`.
inline std::vector<Slice> load_split(const fs::path& manifest, const std::string& split, std::size_t multiple = 32) {
    const fs::path root = manifest.parent_path();
    std::vector<Slice> out;
    for (const auto& r : read_manifest(manifest))
        if (r.split == split) out.push_back(center_crop(load_slice(root, r), multiple));
    return out;
}

struct AuditReport {
    std::size_t records = 0;
    std::size_t train = 0, test = 0;
    std::vector<std::string> problems;
    bool ok() const { return problems.empty(); }
};

/// Every referenced file exists and parses, masks are binary, image values
/// lie in the normalized range, and no patient appears in both splits.
inline AuditReport audit(const fs::path& manifest) {
    AuditReport rep;
    const fs::path root = manifest.parent_path();
    std::map<std::string, std::set<std::string>> splits_of;
    for (const auto& r : read_manifest(manifest)) {
        ++rep.records;
        (r.split == "train" ? rep.train : rep.test) += 1;
        splits_of[r.patient_id].insert(r.split);
        try {
            Slice s = load_slice(root, r);
            for (std::size_t c = 0; c < 3; ++c) {
                const double lo = (0 - kImageNetMean[c]) / kImageNetStd[c] - 1e-5;
                const double hi = (1 - kImageNetMean[c]) / kImageNetStd[c] + 1e-5;
                const float* p = s.image.plane(0, c);
                for (std::size_t i = 0; i < s.image.shape().spatial(); ++i)
                    if (!(p[i] >= lo && p[i] <= hi)) {
                        rep.problems.push_back(r.image_path + ": value outside the normalized range");
                        break;
                    }
            }
        } catch (const Error& e) {
            rep.problems.push_back(e.what());
        }
    }
    for (const auto& [pid, splits] : splits_of)
        if (splits.size() > 1) rep.problems.push_back("patient " + pid + " appears in both splits");
    return rep;
}

} // namespace emcad::data
