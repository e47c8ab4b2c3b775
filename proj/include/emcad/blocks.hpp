#pragma once

// EMCAD decoder: channel/spatial attention, multi-scale depthwise
// convolution, the grouped attention gate, the up-convolution block,
// segmentation heads, and the four-stage assembly.

#include <array>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "emcad/layers.hpp"

namespace emcad {

struct DecoderConfig {
    std::array<std::size_t, 4> channels{32, 64, 160, 256};
    std::vector<std::size_t> kernel_scales{1, 3, 5};
    double mscb_expansion = 2.0;
    std::size_t cab_reduction = 16;
    std::size_t sab_kernel = 7;
    std::size_t lgag_kernel = 3;
    std::size_t num_classes = 1;
    /// Skip connection around MSCB when input and output widths agree.
    bool mscb_residual = true;

    void validate() const {
        for (std::size_t i = 0; i < 4; ++i) {
            if (channels[i] == 0) throw ValidationError("decoder channels must be positive");
            if (i > 0 && channels[i] <= channels[i - 1])
                throw ValidationError("decoder channels must be strictly increasing");
        }
        if (kernel_scales.empty()) throw ValidationError("kernel_scales must not be empty");
        for (std::size_t k : kernel_scales)
            if (k == 0 || k % 2 == 0) throw ValidationError("kernel_scales must be odd and >= 1");
        if (!(mscb_expansion > 0)) throw ValidationError("mscb_expansion must be positive");
        if (cab_reduction == 0) throw ValidationError("cab_reduction must be positive");
        if (sab_kernel % 2 == 0) throw ValidationError("sab_kernel must be odd");
        if (lgag_kernel % 2 == 0) throw ValidationError("lgag_kernel must be odd");
        if (num_classes == 0) throw ValidationError("num_classes must be >= 1");
    }
};

/// Weight initialization knobs.
struct InitConfig {
    /// Multiplier on the He std for convolutions that feed a BatchNorm.
    double bn_conv_gain = 0.01;
    /// Initial foreground probability encoded in the binary head bias.
    double head_prior = 0.15;

    void validate() const {
        if (!(bn_conv_gain > 0)) throw ValidationError("bn_conv_gain must be positive");
        if (!(head_prior > 0 && head_prior < 1)) throw ValidationError("head_prior must lie in (0, 1)");
    }
};

inline double he_std(std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); }

/// Pyramid features at strides 4, 8, 16, 32 (x[0] is the shallowest).
template <class T>
struct StageFeatures {
    std::array<Var<T>, 4> x;

    void validate(const std::array<std::size_t, 4>& channels) const {
        for (std::size_t i = 0; i < 4; ++i) {
            if (!x[i].defined()) throw ShapeError("stage feature " + std::to_string(i + 1) + " is missing");
            if (x[i].shape().c != channels[i])
                throw ShapeError("stage feature x" + std::to_string(i + 1) + " has " + std::to_string(x[i].shape().c) +
                                 " channels, expected " + std::to_string(channels[i]));
            if (i > 0) {
                const Shape& a = x[i - 1].shape();
                const Shape& b = x[i].shape();
                if (a.n != b.n || a.h != 2 * b.h || a.w != 2 * b.w)
                    throw ShapeError("stage features must halve in size: x" + std::to_string(i) + " " + a.str() +
                                     ", x" + std::to_string(i + 1) + " " + b.str());
            }
        }
    }
};

/// Head logits; p[0] = p1 (deepest, stride 32) ... p[3] = p4 (final, stride 4).
template <class T>
struct SegOutputs {
    std::array<Var<T>, 4> p;
};

// ---------------------------------------------------------------------------

/// Channel attention: shared two-layer 1x1 MLP over avg- and max-pooled
/// descriptors, summed, squashed by a sigmoid and applied per channel.
template <class T>
class ChannelAttention {
public:
    ChannelAttention() = default;
    ChannelAttention(std::size_t c, std::size_t reduction, Prng& prng) {
        const std::size_t hidden = std::max<std::size_t>(c / reduction, 4);
        fc1_ = Conv2d<T>(c, hidden, 1, {}, false, prng, he_std(c));
        fc2_ = Conv2d<T>(hidden, c, 1, {}, false, prng, he_std(hidden));
    }

    Var<T> attention(const Var<T>& x) const {
        auto mlp = [&](const Var<T>& v) { return fc2_.forward(ag::relu(fc1_.forward(v))); };
        return ag::sigmoid(ag::add(mlp(ag::pool_global(x, PoolKind::avg)), mlp(ag::pool_global(x, PoolKind::max))));
    }

    Var<T> forward(const Var<T>& x) const { return ag::gate(x, attention(x)); }

    Shape trace(const Shape& in, CostTrace& t) const {
        const std::uint64_t pooled = in.n * in.c;
        t.add_ops(2 * in.numel()); // avg and max pooling
        Shape s{in.n, in.c, 1, 1};
        for (int branch = 0; branch < 2; ++branch) {
            Shape h = fc1_.trace(s, t);
            t.add_ops(kActivationOpsPerElement * h.numel());
            fc2_.trace(h, t);
        }
        t.add_ops(pooled * (kElementwiseOpsPerElement + kActivationOpsPerElement));
        t.add_ops(kElementwiseOpsPerElement * in.numel()); // gating
        return in;
    }

    void visit(const std::string& prefix, ModuleVisitor<T>& v) {
        fc1_.visit(join_name(prefix, "fc1"), v);
        fc2_.visit(join_name(prefix, "fc2"), v);
    }

    Conv2d<T>& fc1() { return fc1_; }
    Conv2d<T>& fc2() { return fc2_; }

private:
    Conv2d<T> fc1_, fc2_;
};

/// Spatial attention: k x k conv over [channel mean, channel max], sigmoid,
/// applied at every pixel across channels.
template <class T>
class SpatialAttention {
public:
    SpatialAttention() = default;
    SpatialAttention(std::size_t kernel, Prng& prng)
        : conv_(2, 1, kernel, {1, kernel / 2, 1}, true, prng, he_std(2 * kernel * kernel)) {}

    Var<T> attention(const Var<T>& x) const {
        auto desc = ag::concat_channels(ag::channel_pool(x, PoolKind::avg), ag::channel_pool(x, PoolKind::max));
        return ag::sigmoid(conv_.forward(desc));
    }

    Var<T> forward(const Var<T>& x) const { return ag::gate(x, attention(x)); }

    Shape trace(const Shape& in, CostTrace& t) const {
        t.add_ops(2 * in.numel());
        Shape m = conv_.trace({in.n, 2, in.h, in.w}, t);
        t.add_ops(kActivationOpsPerElement * m.numel());
        t.add_ops(kElementwiseOpsPerElement * in.numel());
        return in;
    }

    void visit(const std::string& prefix, ModuleVisitor<T>& v) { conv_.visit(join_name(prefix, "conv"), v); }

    Conv2d<T>& conv() { return conv_; }

private:
    Conv2d<T> conv_;
};

/// Multi-scale convolution block (inverted residual):
/// 1x1 expand -> BN -> ReLU6 -> sum of parallel depthwise k x k convs -> BN
/// -> ReLU6 -> channel shuffle -> 1x1 project -> BN (+ identity skip).
template <class T>
class MultiScaleConvBlock {
public:
    MultiScaleConvBlock() = default;
    MultiScaleConvBlock(std::size_t c_in, std::size_t c_out, const DecoderConfig& cfg, const InitConfig& init,
                        Prng& prng)
        : c_in_(c_in), c_out_(c_out), residual_(cfg.mscb_residual && c_in == c_out),
          shuffle_groups_(cfg.kernel_scales.size()) {
        hidden_ = static_cast<std::size_t>(std::ceil(cfg.mscb_expansion * static_cast<double>(c_in)));
        const double g = init.bn_conv_gain;
        expand_ = Conv2d<T>(c_in, hidden_, 1, {}, false, prng, g * he_std(c_in));
        bn_expand_ = BatchNorm2d<T>(hidden_);
        for (std::size_t k : cfg.kernel_scales)
            depthwise_.emplace_back(hidden_, hidden_, k, ConvGeometry{1, k / 2, hidden_}, false, prng,
                                    g * he_std(k * k));
        bn_depthwise_ = BatchNorm2d<T>(hidden_);
        project_ = Conv2d<T>(hidden_, c_out, 1, {}, false, prng, g * he_std(hidden_));
        bn_project_ = BatchNorm2d<T>(c_out);
    }

    Var<T> forward(const Var<T>& x) {
        if (x.shape().c != c_in_)
            throw ShapeError("MSCB expects " + std::to_string(c_in_) + " channels, got " + x.shape().str());
        Var<T> y = ag::relu6(bn_expand_.forward(expand_.forward(x)));
        Var<T> sum = depthwise_[0].forward(y);
        for (std::size_t i = 1; i < depthwise_.size(); ++i) sum = ag::add(sum, depthwise_[i].forward(y));
        y = ag::relu6(bn_depthwise_.forward(sum));
        y = ag::channel_shuffle(y, shuffle_groups_);
        y = bn_project_.forward(project_.forward(y));
        return residual_ ? ag::add(x, y) : y;
    }

    Shape trace(const Shape& in, CostTrace& t) const {
        Shape h = expand_.trace(in, t);
        bn_expand_.trace(h, t);
        t.add_ops(kActivationOpsPerElement * h.numel());
        for (const auto& dw : depthwise_) dw.trace(h, t);
        t.add_ops(kElementwiseOpsPerElement * h.numel() * (depthwise_.size() - 1));
        bn_depthwise_.trace(h, t);
        t.add_ops(kActivationOpsPerElement * h.numel());
        Shape out = project_.trace(h, t);
        bn_project_.trace(out, t);
        if (residual_) t.add_ops(kElementwiseOpsPerElement * out.numel());
        return out;
    }

    void visit(const std::string& prefix, ModuleVisitor<T>& v) {
        expand_.visit(join_name(prefix, "expand"), v);
        bn_expand_.visit(join_name(prefix, "bn_expand"), v);
        for (std::size_t i = 0; i < depthwise_.size(); ++i)
            depthwise_[i].visit(join_name(prefix, "depthwise" + std::to_string(i)), v);
        bn_depthwise_.visit(join_name(prefix, "bn_depthwise"), v);
        project_.visit(join_name(prefix, "project"), v);
        bn_project_.visit(join_name(prefix, "bn_project"), v);
    }

    std::size_t hidden_channels() const { return hidden_; }
    bool residual() const { return residual_; }

private:
    std::size_t c_in_ = 0, c_out_ = 0, hidden_ = 0;
    bool residual_ = false;
    std::size_t shuffle_groups_ = 1;
    Conv2d<T> expand_;
    BatchNorm2d<T> bn_expand_;
    std::vector<Conv2d<T>> depthwise_;
    BatchNorm2d<T> bn_depthwise_;
    Conv2d<T> project_;
    BatchNorm2d<T> bn_project_;
};

/// MSCAM: channel attention, then spatial attention, then MSCB.
template <class T>
class MultiScaleAttentionModule {
public:
    MultiScaleAttentionModule() = default;
    MultiScaleAttentionModule(std::size_t c, const DecoderConfig& cfg, const InitConfig& init, Prng& prng)
        : cab_(c, cfg.cab_reduction, prng), sab_(cfg.sab_kernel, prng), mscb_(c, c, cfg, init, prng) {}

    Var<T> forward(const Var<T>& x) { return mscb_.forward(sab_.forward(cab_.forward(x))); }

    Shape trace(const Shape& in, CostTrace& t) const { return mscb_.trace(sab_.trace(cab_.trace(in, t), t), t); }

    void visit(const std::string& prefix, ModuleVisitor<T>& v) {
        cab_.visit(join_name(prefix, "cab"), v);
        sab_.visit(join_name(prefix, "sab"), v);
        mscb_.visit(join_name(prefix, "mscb"), v);
    }

    ChannelAttention<T>& cab() { return cab_; }
    SpatialAttention<T>& sab() { return sab_; }
    MultiScaleConvBlock<T>& mscb() { return mscb_; }

private:
    ChannelAttention<T> cab_;
    SpatialAttention<T> sab_;
    MultiScaleConvBlock<T> mscb_;
};

/// Large-kernel grouped attention gate. The gating signal g and the skip
/// feature x pass through grouped k x k convs + BN, are summed and rectified,
/// then a 1x1 conv + BN + sigmoid yields a one-channel gate applied to x.
template <class T>
class GroupedAttentionGate {
public:
    GroupedAttentionGate() = default;
    GroupedAttentionGate(std::size_t c_gate, std::size_t c_skip, const DecoderConfig& cfg, const InitConfig& init,
                         Prng& prng) {
        const std::size_t c_int = c_skip;
        const std::size_t k = cfg.lgag_kernel;
        const double g = init.bn_conv_gain;
        const std::size_t groups_g = std::gcd(c_gate, c_int), groups_x = std::gcd(c_skip, c_int);
        conv_gate_ = Conv2d<T>(c_gate, c_int, k, {1, k / 2, groups_g}, false, prng,
                               g * he_std(c_gate / groups_g * k * k));
        bn_gate_ = BatchNorm2d<T>(c_int);
        conv_skip_ = Conv2d<T>(c_skip, c_int, k, {1, k / 2, groups_x}, false, prng,
                               g * he_std(c_skip / groups_x * k * k));
        bn_skip_ = BatchNorm2d<T>(c_int);
        psi_ = Conv2d<T>(c_int, 1, 1, {}, false, prng, g * he_std(c_int));
        bn_psi_ = BatchNorm2d<T>(1);
    }

    Var<T> attention(const Var<T>& g, const Var<T>& x) {
        const Shape& gs = g.shape();
        const Shape& xs = x.shape();
        if (gs.n != xs.n || gs.h != xs.h || gs.w != xs.w)
            throw ShapeError("LGAG: gating signal " + gs.str() + " and skip feature " + xs.str() +
                             " differ spatially");
        Var<T> q = ag::relu(ag::add(bn_gate_.forward(conv_gate_.forward(g)), bn_skip_.forward(conv_skip_.forward(x))));
        return ag::sigmoid(bn_psi_.forward(psi_.forward(q)));
    }

    Var<T> forward(const Var<T>& g, const Var<T>& x) { return ag::gate(x, attention(g, x)); }

    Shape trace(const Shape& gs, const Shape& xs, CostTrace& t) const {
        Shape a = conv_gate_.trace(gs, t);
        bn_gate_.trace(a, t);
        Shape b = conv_skip_.trace(xs, t);
        bn_skip_.trace(b, t);
        t.add_ops((kElementwiseOpsPerElement + kActivationOpsPerElement) * a.numel());
        Shape p = psi_.trace(a, t);
        bn_psi_.trace(p, t);
        t.add_ops(kActivationOpsPerElement * p.numel());
        t.add_ops(kElementwiseOpsPerElement * xs.numel());
        return xs;
    }

    void visit(const std::string& prefix, ModuleVisitor<T>& v) {
        conv_gate_.visit(join_name(prefix, "conv_gate"), v);
        bn_gate_.visit(join_name(prefix, "bn_gate"), v);
        conv_skip_.visit(join_name(prefix, "conv_skip"), v);
        bn_skip_.visit(join_name(prefix, "bn_skip"), v);
        psi_.visit(join_name(prefix, "psi"), v);
        bn_psi_.visit(join_name(prefix, "bn_psi"), v);
    }

    Conv2d<T>& psi() { return psi_; }
    BatchNorm2d<T>& bn_psi() { return bn_psi_; }

private:
    Conv2d<T> conv_gate_, conv_skip_, psi_;
    BatchNorm2d<T> bn_gate_, bn_skip_, bn_psi_;
};

/// Efficient up-convolution: nearest 2x upsample, 3x3 depthwise conv, BN,
/// ReLU, 1x1 conv to the next stage's width.
template <class T>
class UpConvBlock {
public:
    UpConvBlock() = default;
    UpConvBlock(std::size_t c_in, std::size_t c_out, const InitConfig& init, Prng& prng)
        : depthwise_(c_in, c_in, 3, {1, 1, c_in}, false, prng, init.bn_conv_gain * he_std(9)), bn_(c_in),
          project_(c_in, c_out, 1, {}, true, prng, he_std(c_in)) {}

    Var<T> forward(const Var<T>& x) {
        return project_.forward(ag::relu(bn_.forward(depthwise_.forward(ag::upsample_nearest2x(x)))));
    }

    Shape trace(const Shape& in, CostTrace& t) const {
        Shape up{in.n, in.c, 2 * in.h, 2 * in.w};
        Shape d = depthwise_.trace(up, t);
        bn_.trace(d, t);
        t.add_ops(kActivationOpsPerElement * d.numel());
        return project_.trace(d, t);
    }

    void visit(const std::string& prefix, ModuleVisitor<T>& v) {
        depthwise_.visit(join_name(prefix, "depthwise"), v);
        bn_.visit(join_name(prefix, "bn"), v);
        project_.visit(join_name(prefix, "project"), v);
    }

private:
    Conv2d<T> depthwise_;
    BatchNorm2d<T> bn_;
    Conv2d<T> project_;
};

/// 1x1 conv to class logits. Binary heads start at the configured prior.
template <class T>
class SegmentationHead {
public:
    SegmentationHead() = default;
    SegmentationHead(std::size_t c, std::size_t num_classes, const InitConfig& init, Prng& prng)
        : conv_(c, num_classes, 1, {}, true, prng, std::sqrt(1.0 / static_cast<double>(c)),
                num_classes == 1 ? std::log(init.head_prior / (1.0 - init.head_prior)) : 0.0) {}

    Var<T> forward(const Var<T>& x) const { return conv_.forward(x); }
    Shape trace(const Shape& in, CostTrace& t) const { return conv_.trace(in, t); }
    void visit(const std::string& prefix, ModuleVisitor<T>& v) { conv_.visit(join_name(prefix, "conv"), v); }

    Conv2d<T>& conv() { return conv_; }

private:
    Conv2d<T> conv_;
};

// ---------------------------------------------------------------------------

/// Four-stage decoder. Stage 4 (deepest) is refined and emits p1; each
/// shallower stage upsamples the previous refined map, gates the skip
/// feature with it, adds the two, refines, and emits the next prediction.
template <class T>
class Decoder {
public:
    Decoder() = default;
    Decoder(const DecoderConfig& cfg, const InitConfig& init, Prng& prng) : cfg_(cfg) {
        cfg.validate();
        init.validate();
        const auto& ch = cfg.channels;
        refine_[3] = MultiScaleAttentionModule<T>(ch[3], cfg, init, prng);
        heads_[0] = SegmentationHead<T>(ch[3], cfg.num_classes, init, prng);
        for (int stage = 2; stage >= 0; --stage) {
            up_[stage] = UpConvBlock<T>(ch[stage + 1], ch[stage], init, prng);
            gates_[stage] = GroupedAttentionGate<T>(ch[stage], ch[stage], cfg, init, prng);
            refine_[stage] = MultiScaleAttentionModule<T>(ch[stage], cfg, init, prng);
            heads_[3 - stage] = SegmentationHead<T>(ch[stage], cfg.num_classes, init, prng);
        }
    }

    SegOutputs<T> forward(const StageFeatures<T>& f) {
        f.validate(cfg_.channels);
        SegOutputs<T> out;
        Var<T> d = run_stage("mscam4", [&] { return refine_[3].forward(f.x[3]); });
        out.p[0] = heads_[0].forward(d);
        for (int stage = 2; stage >= 0; --stage) {
            const std::string id = std::to_string(stage + 1);
            Var<T> u = run_stage("eucb" + id, [&] { return up_[stage].forward(d); });
            Var<T> a = run_stage("lgag" + id, [&] { return gates_[stage].forward(u, f.x[stage]); });
            d = run_stage("mscam" + id, [&] { return refine_[stage].forward(ag::add(u, a)); });
            out.p[3 - stage] = heads_[3 - stage].forward(d);
        }
        return out;
    }

    /// Cost of one forward pass given stage-4 feature shapes derived from
    /// the input resolution (strides 4..32).
    void trace(std::size_t batch, std::size_t input_h, std::size_t input_w, CostTrace& t) const {
        std::array<Shape, 4> xs;
        for (std::size_t i = 0; i < 4; ++i) {
            const std::size_t stride = std::size_t{4} << i;
            xs[i] = {batch, cfg_.channels[i], input_h / stride, input_w / stride};
        }
        t.begin_block("mscam4");
        Shape d = refine_[3].trace(xs[3], t);
        t.begin_block("head1");
        heads_[0].trace(d, t);
        for (int stage = 2; stage >= 0; --stage) {
            const std::string id = std::to_string(stage + 1);
            t.begin_block("eucb" + id);
            Shape u = up_[stage].trace(d, t);
            t.begin_block("lgag" + id);
            gates_[stage].trace(u, xs[stage], t);
            t.begin_block("mscam" + id);
            t.add_ops(kElementwiseOpsPerElement * u.numel());
            d = refine_[stage].trace(u, t);
            t.begin_block("head" + std::to_string(4 - stage));
            heads_[3 - stage].trace(d, t);
        }
    }

    void visit(const std::string& prefix, ModuleVisitor<T>& v) {
        refine_[3].visit(join_name(prefix, "mscam4"), v);
        heads_[0].visit(join_name(prefix, "head1"), v);
        for (int stage = 2; stage >= 0; --stage) {
            const std::string id = std::to_string(stage + 1);
            up_[stage].visit(join_name(prefix, "eucb" + id), v);
            gates_[stage].visit(join_name(prefix, "lgag" + id), v);
            refine_[stage].visit(join_name(prefix, "mscam" + id), v);
            heads_[3 - stage].visit(join_name(prefix, "head" + std::to_string(4 - stage)), v);
        }
    }

    const DecoderConfig& config() const { return cfg_; }
    SegmentationHead<T>& head(std::size_t i) { return heads_.at(i); }

private:
    template <class F>
    Var<T> run_stage(const std::string& name, F&& f) {
        try {
            return f();
        } catch (const ShapeError& e) {
            throw ShapeError("decoder stage " + name + ": " + e.what());
        }
    }

    DecoderConfig cfg_;
    std::array<MultiScaleAttentionModule<T>, 4> refine_;
    std::array<UpConvBlock<T>, 3> up_;
    std::array<GroupedAttentionGate<T>, 3> gates_;
    std::array<SegmentationHead<T>, 4> heads_;
};

} // namespace emcad
