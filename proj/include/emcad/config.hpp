#pragma once

// JSON (de)serialization of the configuration structs. Unknown keys are
// rejected; missing keys keep their defaults.

#include <initializer_list>
#include <string>

#include "emcad/encoder.hpp"
#include "emcad/loss.hpp"
#include "emcad/optim.hpp"
#include "json.hpp"

namespace emcad {

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const char* what, std::initializer_list<const char*> known) {
    if (!j.is_object()) throw ValidationError(std::string(what) + " must be a JSON object");
    for (const auto& item : j.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || item.key() == k;
        if (!ok) throw ValidationError(std::string("unknown key '") + item.key() + "' in " + what);
    }
}

template <class V>
void read_opt(const nlohmann::json& j, const char* key, V& out, const char* what) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const nlohmann::json::exception&) {
        throw ValidationError(std::string(what) + "." + key + " has the wrong type");
    }
}

} // namespace detail

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
    j = {{"channels", c.channels},
         {"in_channels", c.in_channels},
         {"stem_kernel", c.stem_kernel},
         {"blocks_per_stage", c.blocks_per_stage}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
    constexpr const char* w = "encoder";
    detail::reject_unknown_keys(j, w, {"channels", "in_channels", "stem_kernel", "blocks_per_stage"});
    detail::read_opt(j, "channels", c.channels, w);
    detail::read_opt(j, "in_channels", c.in_channels, w);
    detail::read_opt(j, "stem_kernel", c.stem_kernel, w);
    detail::read_opt(j, "blocks_per_stage", c.blocks_per_stage, w);
}

inline void to_json(nlohmann::json& j, const DecoderConfig& c) {
    j = {{"channels", c.channels},         {"kernel_scales", c.kernel_scales}, {"mscb_expansion", c.mscb_expansion},
         {"cab_reduction", c.cab_reduction}, {"sab_kernel", c.sab_kernel},       {"lgag_kernel", c.lgag_kernel},
         {"num_classes", c.num_classes},   {"mscb_residual", c.mscb_residual}};
}

inline void from_json(const nlohmann::json& j, DecoderConfig& c) {
    constexpr const char* w = "decoder";
    detail::reject_unknown_keys(j, w,
                                {"channels", "kernel_scales", "mscb_expansion", "cab_reduction", "sab_kernel",
                                 "lgag_kernel", "num_classes", "mscb_residual"});
    detail::read_opt(j, "channels", c.channels, w);
    detail::read_opt(j, "kernel_scales", c.kernel_scales, w);
    detail::read_opt(j, "mscb_expansion", c.mscb_expansion, w);
    detail::read_opt(j, "cab_reduction", c.cab_reduction, w);
    detail::read_opt(j, "sab_kernel", c.sab_kernel, w);
    detail::read_opt(j, "lgag_kernel", c.lgag_kernel, w);
    detail::read_opt(j, "num_classes", c.num_classes, w);
    detail::read_opt(j, "mscb_residual", c.mscb_residual, w);
}

inline void to_json(nlohmann::json& j, const InitConfig& c) {
    j = {{"bn_conv_gain", c.bn_conv_gain}, {"head_prior", c.head_prior}};
}

inline void from_json(const nlohmann::json& j, InitConfig& c) {
    constexpr const char* w = "init";
    detail::reject_unknown_keys(j, w, {"bn_conv_gain", "head_prior"});
    detail::read_opt(j, "bn_conv_gain", c.bn_conv_gain, w);
    detail::read_opt(j, "head_prior", c.head_prior, w);
}

/// A "channels" key at model level sets both encoder and decoder widths.
inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"encoder", c.encoder}, {"decoder", c.decoder}, {"init", c.init}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    detail::reject_unknown_keys(j, "model", {"channels", "encoder", "decoder", "init"});
    if (j.contains("channels")) {
        std::array<std::size_t, 4> ch{};
        detail::read_opt(j, "channels", ch, "model");
        c.encoder.channels = ch;
        c.decoder.channels = ch;
    }
    if (j.contains("encoder")) from_json(j.at("encoder"), c.encoder);
    if (j.contains("decoder")) from_json(j.at("decoder"), c.decoder);
    if (j.contains("init")) from_json(j.at("init"), c.init);
}

inline void to_json(nlohmann::json& j, const AdamWConfig& c) {
    j = {{"lr", c.lr}, {"weight_decay", c.weight_decay}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}};
}

inline void from_json(const nlohmann::json& j, AdamWConfig& c) {
    constexpr const char* w = "optimizer";
    detail::reject_unknown_keys(j, w, {"lr", "weight_decay", "beta1", "beta2", "eps"});
    detail::read_opt(j, "lr", c.lr, w);
    detail::read_opt(j, "weight_decay", c.weight_decay, w);
    detail::read_opt(j, "beta1", c.beta1, w);
    detail::read_opt(j, "beta2", c.beta2, w);
    detail::read_opt(j, "eps", c.eps, w);
}

inline void to_json(nlohmann::json& j, const LossConfig& c) {
    j = {{"w_ce", c.w_ce}, {"w_dice", c.w_dice}, {"smooth", c.smooth}};
}

inline void from_json(const nlohmann::json& j, LossConfig& c) {
    constexpr const char* w = "loss";
    detail::reject_unknown_keys(j, w, {"w_ce", "w_dice", "smooth"});
    detail::read_opt(j, "w_ce", c.w_ce, w);
    detail::read_opt(j, "w_dice", c.w_dice, w);
    detail::read_opt(j, "smooth", c.smooth, w);
}

} // namespace emcad
