#pragma once

// Convolutional pyramid encoder producing stride 4/8/16/32 features with the
// channel signature the decoder consumes.

#include <array>
#include <string>
#include <vector>

#include "emcad/blocks.hpp"

namespace emcad {

struct EncoderConfig {
    std::array<std::size_t, 4> channels{32, 64, 160, 256};
    std::size_t in_channels = 3;
    std::size_t stem_kernel = 3;
    std::size_t blocks_per_stage = 1;

    void validate() const {
        for (std::size_t c : channels)
            if (c == 0) throw ValidationError("encoder channels must be positive");
        if (stem_kernel % 2 == 0) throw ValidationError("stem_kernel must be odd");
    }
};

/// conv k x k (stride s) -> BN -> ReLU.
template <class T>
class ConvBnRelu {
public:
    ConvBnRelu() = default;
    ConvBnRelu(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, const InitConfig& init, Prng& prng)
        : conv_(in, out, k, ConvGeometry{stride, k / 2, 1, stride > 1}, false, prng,
                init.bn_conv_gain * he_std(in * k * k)),
          bn_(out) {}

    Var<T> forward(const Var<T>& x) { return ag::relu(bn_.forward(conv_.forward(x))); }

    Shape trace(const Shape& in, CostTrace& t) const {
        Shape out = conv_.trace(in, t);
        bn_.trace(out, t);
        t.add_ops(kActivationOpsPerElement * out.numel());
        return out;
    }

    void visit(const std::string& prefix, ModuleVisitor<T>& v) {
        conv_.visit(join_name(prefix, "conv"), v);
        bn_.visit(join_name(prefix, "bn"), v);
    }

private:
    Conv2d<T> conv_;
    BatchNorm2d<T> bn_;
};

template <class T>
class Encoder {
public:
    Encoder() = default;
    Encoder(const EncoderConfig& cfg, const InitConfig& init, Prng& prng) : cfg_(cfg) {
        cfg.validate();
        std::size_t prev = cfg.in_channels;
        for (std::size_t s = 0; s < 4; ++s) {
            auto& units = stages_[s];
            const std::size_t c = cfg.channels[s];
            if (s == 0) {
                // stride 4 stem as two stride-2 convs
                units.emplace_back(prev, c, cfg.stem_kernel, 2, init, prng);
                units.emplace_back(c, c, cfg.stem_kernel, 2, init, prng);
            } else {
                units.emplace_back(prev, c, 3, 2, init, prng);
            }
            for (std::size_t b = 0; b < cfg.blocks_per_stage; ++b) units.emplace_back(c, c, 3, 1, init, prng);
            prev = c;
        }
    }

    StageFeatures<T> forward(const Var<T>& image) {
        const Shape& s = image.shape();
        check_input(s);
        StageFeatures<T> f;
        Var<T> x = image;
        for (std::size_t st = 0; st < 4; ++st) {
            for (auto& u : stages_[st]) x = u.forward(x);
            f.x[st] = x;
        }
        return f;
    }

    void check_input(const Shape& s) const {
        if (s.c != cfg_.in_channels)
            throw ShapeError("encoder expects " + std::to_string(cfg_.in_channels) + " input channels, got " +
                             s.str());
        if (s.h % 32 != 0 || s.w % 32 != 0)
            throw ShapeError("encoder input height and width must be divisible by 32, got " + s.str());
    }

    std::array<Shape, 4> trace(const Shape& in, CostTrace& t) const {
        check_input(in);
        std::array<Shape, 4> out;
        Shape s = in;
        for (std::size_t st = 0; st < 4; ++st) {
            t.begin_block("encoder.stage" + std::to_string(st + 1));
            for (const auto& u : stages_[st]) s = u.trace(s, t);
            out[st] = s;
        }
        return out;
    }

    void visit(const std::string& prefix, ModuleVisitor<T>& v) {
        for (std::size_t st = 0; st < 4; ++st)
            for (std::size_t i = 0; i < stages_[st].size(); ++i)
                stages_[st][i].visit(join_name(prefix, "stage" + std::to_string(st + 1) + "." + std::to_string(i)), v);
    }

    const EncoderConfig& config() const { return cfg_; }

private:
    EncoderConfig cfg_;
    std::array<std::vector<ConvBnRelu<T>>, 4> stages_;
};

struct ModelConfig {
    EncoderConfig encoder;
    DecoderConfig decoder;
    InitConfig init;

    void validate() const {
        encoder.validate();
        decoder.validate();
        init.validate();
        if (encoder.channels != decoder.channels)
            throw ValidationError("encoder and decoder channel lists must match");
    }

    static ModelConfig with_channels(const std::array<std::size_t, 4>& ch) {
        ModelConfig m;
        m.encoder.channels = ch;
        m.decoder.channels = ch;
        return m;
    }
};

/// Encoder + decoder. Parameters are initialised from a single PRNG stream
/// (encoder first) so the seed fully determines the model.
template <class T>
class SegmentationModel {
public:
    SegmentationModel() = default;
    SegmentationModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg.validate();
        Prng prng(seed);
        encoder_ = Encoder<T>(cfg.encoder, cfg.init, prng);
        decoder_ = Decoder<T>(cfg.decoder, cfg.init, prng);
    }

    SegOutputs<T> forward(const Var<T>& image) { return decoder_.forward(encoder_.forward(image)); }

    void visit(const std::string& prefix, ModuleVisitor<T>& v) {
        encoder_.visit(join_name(prefix, "encoder"), v);
        decoder_.visit(join_name(prefix, "decoder"), v);
    }

    Encoder<T>& encoder() { return encoder_; }
    Decoder<T>& decoder() { return decoder_; }
    const ModelConfig& config() const { return cfg_; }

private:
    ModelConfig cfg_;
    Encoder<T> encoder_;
    Decoder<T> decoder_;
};

} // namespace emcad
