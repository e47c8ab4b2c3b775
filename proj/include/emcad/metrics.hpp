#pragma once

// Dice evaluation, parameter/FLOP accounting, metric series and CSV/SVG
// report emission.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "emcad/data.hpp"
#include "emcad/encoder.hpp"

namespace emcad {

/// 2|A n B| / (|A| + |B|); two empty masks score 1. Masks must hold only 0/1.
template <class T>
double dice_score(std::span<const T> pred, std::span<const T> gt) {
    if (pred.size() != gt.size()) throw ShapeError("dice_score: masks differ in size");
    std::uint64_t inter = 0, np = 0, ng = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const T a = pred[i], b = gt[i];
        if ((a != T(0) && a != T(1)) || (b != T(0) && b != T(1)))
            throw ValidationError("dice_score: masks must be binary");
        const bool pa = a == T(1), pb = b == T(1);
        np += pa;
        ng += pb;
        inter += pa && pb;
    }
    if (np + ng == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

template <class T>
double dice_score(const Tensor4<T>& pred, const Tensor4<T>& gt) {
    if (pred.shape() != gt.shape())
        throw ShapeError("dice_score: shapes " + pred.shape().str() + " and " + gt.shape().str() + " differ");
    return dice_score<T>(pred.data(), gt.data());
}

struct CaseDice {
    std::string patient_id;
    std::size_t slice_index = 0;
    double dice = 0;
};

struct EvalResult {
    double mean_dice = 0;
    std::vector<CaseDice> cases;
};

/// Binary prediction from the final head: sigmoid(p4) upsampled to the mask
/// resolution, thresholded.
template <class T>
Tensor4<T> predict_mask(SegmentationModel<T>& model, const Tensor4<T>& image, std::size_t out_h, std::size_t out_w,
                        double threshold = 0.5) {
    if (model.config().decoder.num_classes != 1) throw ValidationError("predict_mask expects a binary model");
    SegOutputs<T> out = model.forward(Var<T>(image));
    Tensor4<T> prob = activation_forward(out.p[3].value(), Activation::sigmoid);
    if (prob.shape().h != out_h || prob.shape().w != out_w) prob = upsample_bilinear_forward(prob, out_h, out_w);
    for (std::size_t i = 0; i < prob.numel(); ++i) prob[i] = prob[i] > threshold ? T(1) : T(0);
    return prob;
}

/// Mean per-slice Dice over the slices, BN in eval mode. The previous mode is
/// restored afterwards. Slices are batched `batch` at a time.
template <class T>
EvalResult evaluate(SegmentationModel<T>& model, const std::vector<data::Slice>& slices, double threshold = 0.5,
                    std::size_t batch = 8) {
    if (slices.empty()) throw ValidationError("evaluate: empty test set");
    set_mode<T>(model, Mode::eval);
    EvalResult r;
    double sum = 0;
    for (std::size_t start = 0; start < slices.size(); start += batch) {
        const std::size_t n = std::min(batch, slices.size() - start);
        const Shape is = slices[start].image.shape();
        const Shape ms = slices[start].mask.shape();
        Tensor4<T> img({n, is.c, is.h, is.w});
        for (std::size_t b = 0; b < n; ++b) {
            const auto& s = slices[start + b];
            if (s.image.shape() != is || s.mask.shape() != ms)
                throw ShapeError("evaluate: slices in one batch must share a shape");
            std::copy(s.image.data().begin(), s.image.data().end(), img.plane(b, 0));
        }
        const Tensor4<T> pred = predict_mask(model, img, ms.h, ms.w, threshold);
        for (std::size_t b = 0; b < n; ++b) {
            const auto& s = slices[start + b];
            const std::span<const T> p(pred.plane(b, 0), ms.spatial());
            std::vector<T> g(s.mask.data().begin(), s.mask.data().end());
            const double d = dice_score<T>(p, g);
            r.cases.push_back({s.patient_id, s.slice_index, d});
            sum += d;
        }
    }
    set_mode<T>(model, Mode::train);
    r.mean_dice = sum / static_cast<double>(r.cases.size());
    return r;
}

// ---------------------------------------------------------------------------
// Cost accounting

inline constexpr const char* kCostConvention =
    "MACs = output pixels * c_out * (c_in / groups) * k^2 per convolution; "
    "FLOPs = 2 * MACs + non-MAC ops (BN 2 ops/element, activation 1 op/element, "
    "elementwise add/mul/gate 1 op/element, pooling 1 op/input element); batch 1; "
    "the reference resolution behind published GFLOP figures is not stated, 224x224 is assumed";

struct CostEntry {
    std::string block;
    std::size_t params = 0;
    std::uint64_t macs = 0;
    std::uint64_t other_ops = 0;
    std::uint64_t flops() const { return 2 * macs + other_ops; }
};

struct CostReport {
    std::vector<CostEntry> blocks;
    std::size_t total_params = 0;
    std::uint64_t total_macs = 0;
    std::uint64_t total_other_ops = 0;
    std::size_t input_h = 0, input_w = 0;
    std::string convention = kCostConvention;

    std::uint64_t total_flops() const { return 2 * total_macs + total_other_ops; }
    std::uint64_t conv_flops() const { return 2 * total_macs; }
};

namespace detail {

/// Top-level block of a dotted parameter name: "mscam4.cab.fc1.weight" ->
/// "mscam4", "encoder.stage2.0.conv.weight" -> "encoder.stage2".
inline std::string block_of(const std::string& name) {
    const std::size_t dot = name.find('.');
    if (dot == std::string::npos) return name;
    if (name.compare(0, dot, "encoder") == 0) {
        const std::size_t dot2 = name.find('.', dot + 1);
        return name.substr(0, dot2);
    }
    return name.substr(0, dot);
}

template <class T, class M>
std::vector<std::pair<std::string, std::size_t>> params_by_block(M& module) {
    std::vector<std::pair<std::string, std::size_t>> out;
    for (auto& [name, p] : named_parameters<T>(module)) {
        const std::string b = block_of(name);
        auto it = std::find_if(out.begin(), out.end(), [&](const auto& e) { return e.first == b; });
        if (it == out.end()) out.emplace_back(b, p.value().numel());
        else it->second += p.value().numel();
    }
    return out;
}

inline void merge_params(CostReport& r, const std::vector<std::pair<std::string, std::size_t>>& params) {
    for (const auto& [b, n] : params) {
        auto it = std::find_if(r.blocks.begin(), r.blocks.end(), [&](const CostEntry& e) { return e.block == b; });
        if (it == r.blocks.end()) r.blocks.push_back({b, n, 0, 0});
        else it->params += n;
        r.total_params += n;
    }
}

inline void merge_trace(CostReport& r, const CostTrace& t) {
    for (const auto& e : t.entries()) {
        auto it = std::find_if(r.blocks.begin(), r.blocks.end(), [&](const CostEntry& c) { return c.block == e.block; });
        if (it == r.blocks.end()) r.blocks.push_back({e.block, 0, e.macs, e.other_ops});
        else {
            it->macs += e.macs;
            it->other_ops += e.other_ops;
        }
        r.total_macs += e.macs;
        r.total_other_ops += e.other_ops;
    }
}

inline void check_resolution(std::size_t h, std::size_t w) {
    if (h == 0 || w == 0 || h % 32 || w % 32)
        throw ValidationError("resolution must be a positive multiple of 32, got " + std::to_string(h) + "x" +
                              std::to_string(w));
}

} // namespace detail

/// Trainable parameters per block; BN running statistics are excluded.
template <class T>
CostReport count_params(Decoder<T>& decoder) {
    CostReport r;
    detail::merge_params(r, detail::params_by_block<T>(decoder));
    return r;
}

template <class T>
CostReport count_params(SegmentationModel<T>& model) {
    CostReport r;
    detail::merge_params(r, detail::params_by_block<T>(model.encoder()));
    for (auto& e : r.blocks) e.block = "encoder." + e.block;
    r.total_params = 0;
    for (auto& e : r.blocks) r.total_params += e.params;
    detail::merge_params(r, detail::params_by_block<T>(model.decoder()));
    return r;
}

/// Decoder-only cost at an input image resolution (the decoder sees the
/// stride 4..32 pyramid of that image).
template <class T>
CostReport count_flops(Decoder<T>& decoder, std::size_t input_h, std::size_t input_w) {
    detail::check_resolution(input_h, input_w);
    CostReport r = count_params(decoder);
    CostTrace t;
    decoder.trace(1, input_h, input_w, t);
    detail::merge_trace(r, t);
    r.input_h = input_h;
    r.input_w = input_w;
    return r;
}

template <class T>
CostReport count_flops(SegmentationModel<T>& model, std::size_t input_h, std::size_t input_w) {
    detail::check_resolution(input_h, input_w);
    CostReport r = count_params(model);
    CostTrace t;
    model.encoder().trace({1, model.config().encoder.in_channels, input_h, input_w}, t);
    model.decoder().trace(1, input_h, input_w, t);
    detail::merge_trace(r, t);
    r.input_h = input_h;
    r.input_w = input_w;
    return r;
}

inline nlohmann::json to_json(const CostReport& r) {
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& b : r.blocks)
        blocks.push_back(
            {{"block", b.block}, {"params", b.params}, {"macs", b.macs}, {"other_ops", b.other_ops}, {"flops", b.flops()}});
    return {{"blocks", blocks},
            {"total_params", r.total_params},
            {"total_macs", r.total_macs},
            {"total_flops", r.total_flops()},
            {"gflops", static_cast<double>(r.total_flops()) * 1e-9},
            {"resolution", {r.input_h, r.input_w}},
            {"convention", r.convention}};
}

inline std::string format_cost_table(const CostReport& r) {
    std::ostringstream os;
    os << std::left << std::setw(18) << "block" << std::right << std::setw(12) << "params" << std::setw(16) << "MACs"
       << std::setw(16) << "FLOPs" << '\n';
    for (const auto& b : r.blocks)
        os << std::left << std::setw(18) << b.block << std::right << std::setw(12) << b.params << std::setw(16) << b.macs
           << std::setw(16) << b.flops() << '\n';
    os << std::left << std::setw(18) << "total" << std::right << std::setw(12) << r.total_params << std::setw(16)
       << r.total_macs << std::setw(16) << r.total_flops() << '\n';
    os << std::fixed << std::setprecision(4) << "params: " << static_cast<double>(r.total_params) * 1e-6
       << " M, FLOPs: " << static_cast<double>(r.total_flops()) * 1e-9 << " G at " << r.input_h << "x" << r.input_w
       << '\n';
    os << "convention: " << r.convention << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// Metric series and reports

struct MetricSeries {
    std::vector<std::pair<std::size_t, double>> iteration_loss; // (iteration, loss)
    std::vector<std::pair<std::size_t, double>> epoch_loss;     // (epoch, mean loss)
    std::vector<double> mean_dice;                              // per epoch
    std::vector<double> best_dice;                              // running max of mean_dice

    void add_epoch(std::size_t epoch, double mean_loss, double dice) {
        epoch_loss.emplace_back(epoch, mean_loss);
        mean_dice.push_back(dice);
        best_dice.push_back(best_dice.empty() ? dice : std::max(best_dice.back(), dice));
    }
};

inline void to_json(nlohmann::json& j, const MetricSeries& s) {
    j = {{"iteration_loss", s.iteration_loss},
         {"epoch_loss", s.epoch_loss},
         {"mean_dice", s.mean_dice},
         {"best_dice", s.best_dice}};
}

inline void from_json(const nlohmann::json& j, MetricSeries& s) {
    j.at("iteration_loss").get_to(s.iteration_loss);
    j.at("epoch_loss").get_to(s.epoch_loss);
    j.at("mean_dice").get_to(s.mean_dice);
    j.at("best_dice").get_to(s.best_dice);
}

/// Shortest round-trip decimal representation, '.' separator.
inline std::string fmt_number(double v) {
    std::ostringstream os;
    os.imbue(std::locale::classic());
    os << std::setprecision(9) << v;
    return os.str();
}

namespace detail {

struct Line {
    std::string label;
    std::string color;
    std::vector<std::pair<double, double>> points;
};

inline std::string escape_xml(const std::string& s) {
    std::string o;
    for (char c : s) {
        if (c == '<') o += "&lt;";
        else if (c == '>') o += "&gt;";
        else if (c == '&') o += "&amp;";
        else o += c;
    }
    return o;
}

inline std::string svg_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                             const std::vector<Line>& lines) {
    const double W = 640, H = 400, ml = 70, mr = 20, mt = 40, mb = 50;
    double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
    for (const auto& l : lines)
        for (const auto& [x, y] : l.points) {
            x0 = std::min(x0, x);
            x1 = std::max(x1, x);
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
        }
    if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    auto px = [&](double x) { return ml + (x - x0) / (x1 - x0) * (W - ml - mr); };
    auto py = [&](double y) { return H - mb - (y - y0) / (y1 - y0) * (H - mt - mb); };
    std::ostringstream os;
    os.imbue(std::locale::classic());
    os << std::fixed << std::setprecision(2);
    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
       << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << W << "\" height=\"" << H
       << "\" viewBox=\"0 0 " << W << ' ' << H << "\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">"
       << escape_xml(title) << "</text>\n"
       << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr << "\" y2=\"" << H - mb
       << "\" stroke=\"black\"/>\n"
       << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << H - mb << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double fy = y0 + (y1 - y0) * i / 4.0, fx = x0 + (x1 - x0) * i / 4.0;
        os << "<text x=\"" << ml - 6 << "\" y=\"" << py(fy) + 4
           << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << fmt_number(fy) << "</text>\n"
           << "<text x=\"" << px(fx) << "\" y=\"" << H - mb + 16
           << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << fmt_number(fx) << "</text>\n";
    }
    os << "<text x=\"" << (ml + W - mr) / 2 << "\" y=\"" << H - 10
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << escape_xml(xlabel) << "</text>\n"
       << "<text x=\"16\" y=\"" << (mt + H - mb) / 2 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
       << "font-size=\"12\" transform=\"rotate(-90 16 " << (mt + H - mb) / 2 << ")\">" << escape_xml(ylabel)
       << "</text>\n";
    for (std::size_t li = 0; li < lines.size(); ++li) {
        const auto& l = lines[li];
        os << "<polyline fill=\"none\" stroke=\"" << l.color << "\" stroke-width=\"1.5\" points=\"";
        for (const auto& [x, y] : l.points) os << px(x) << ',' << py(y) << ' ';
        os << "\"/>\n";
        os << "<text x=\"" << W - mr - 120 << "\" y=\"" << mt + 14 * (li + 1) << "\" fill=\"" << l.color
           << "\" font-family=\"sans-serif\" font-size=\"12\">" << escape_xml(l.label) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + p.string());
    f << text;
    if (!f) throw Error("failed writing " + p.string());
}

} // namespace detail

/// Writes loss_iteration.csv, loss_epoch.csv, dice_epoch.csv and one SVG per
/// panel into out_dir; returns the paths written.
inline std::vector<std::filesystem::path> emit_reports(const MetricSeries& s, const std::filesystem::path& out_dir) {
    if (s.iteration_loss.empty() || s.epoch_loss.empty()) throw ValidationError("emit_reports: empty metric series");
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec || !std::filesystem::is_directory(out_dir)) throw Error("cannot create report directory " + out_dir.string());

    std::vector<std::filesystem::path> written;
    auto emit = [&](const std::string& name, const std::string& text) {
        detail::write_text(out_dir / name, text);
        written.push_back(out_dir / name);
    };

    std::string a = "iteration,loss\n", b = "epoch,mean_loss\n", c = "epoch,mean_dice,best_dice\n";
    detail::Line la{"loss", "#1f77b4", {}}, lb{"mean loss", "#1f77b4", {}};
    detail::Line lmean{"mean Dice", "#2ca02c", {}}, lbest{"best Dice", "#d62728", {}};
    for (const auto& [it, v] : s.iteration_loss) {
        a += std::to_string(it) + "," + fmt_number(v) + "\n";
        la.points.emplace_back(static_cast<double>(it), v);
    }
    for (const auto& [ep, v] : s.epoch_loss) {
        b += std::to_string(ep) + "," + fmt_number(v) + "\n";
        lb.points.emplace_back(static_cast<double>(ep), v);
    }
    for (std::size_t i = 0; i < s.mean_dice.size(); ++i) {
        const std::size_t ep = i < s.epoch_loss.size() ? s.epoch_loss[i].first : i + 1;
        c += std::to_string(ep) + "," + fmt_number(s.mean_dice[i]) + "," + fmt_number(s.best_dice[i]) + "\n";
        lmean.points.emplace_back(static_cast<double>(ep), s.mean_dice[i]);
        lbest.points.emplace_back(static_cast<double>(ep), s.best_dice[i]);
    }
    emit("loss_iteration.csv", a);
    emit("loss_epoch.csv", b);
    emit("dice_epoch.csv", c);
    emit("loss_iteration.svg", detail::svg_chart("(a) Per-iteration training loss", "iteration", "loss", {la}));
    emit("loss_epoch.svg", detail::svg_chart("(b) Mean training loss per epoch", "epoch", "loss", {lb}));
    emit("dice_epoch.svg", detail::svg_chart("(c) Test Dice per epoch", "epoch", "Dice", {lmean, lbest}));
    return written;
}

} // namespace emcad
