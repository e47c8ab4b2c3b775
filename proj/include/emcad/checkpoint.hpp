#pragma once

// Checkpoint file:
//   "EMCADCKP" | uint64 LE header length | JSON header | payload
// The header holds the model config, the element dtype, a tensor directory
// (name, kind, shape, byte offset into the payload), the payload size and an
// FNV-1a 64 hash of the payload, plus caller metadata. Payload values are raw
// little-endian in directory order.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "emcad/config.hpp"
#include "emcad/npy.hpp"
#include "json.hpp"

namespace emcad {

inline constexpr char kCheckpointMagic[8] = {'E', 'M', 'C', 'A', 'D', 'C', 'K', 'P'};
inline constexpr int kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(const std::uint8_t* p, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::uint64_t parse_hex64(const std::string& s) {
    if (s.size() != 16 || s.find_first_not_of("0123456789abcdef") != std::string::npos)
        throw FormatError("malformed 64-bit hex value '" + s + "'");
    return std::stoull(s, nullptr, 16);
}

/// Doubles go through JSON as their bit patterns so metadata round-trips exactly.
inline std::string double_bits(double v) { return hex64(std::bit_cast<std::uint64_t>(v)); }
inline double double_from_bits(const std::string& s) { return std::bit_cast<double>(parse_hex64(s)); }

struct CheckpointFile {
    nlohmann::json header;
    std::vector<std::uint8_t> payload;

    const nlohmann::json& meta() const { return header.at("meta"); }
    ModelConfig model_config() const { return header.at("config").get<ModelConfig>(); }

    const nlohmann::json* find(const std::string& name) const {
        for (const auto& t : header.at("tensors"))
            if (t.at("name") == name) return &t;
        return nullptr;
    }

    /// Sum of element counts of the tensors of one kind.
    std::size_t count(const std::string& kind) const {
        std::size_t n = 0;
        for (const auto& t : header.at("tensors"))
            if (t.at("kind") == kind) {
                std::size_t e = 1;
                for (std::size_t d : t.at("shape").get<std::vector<std::size_t>>()) e *= d;
                n += e;
            }
        return n;
    }

    template <class T>
    void copy_into(const std::string& name, Tensor4<T>& dst) const {
        const nlohmann::json* t = find(name);
        if (!t) throw FormatError("checkpoint lacks tensor '" + name + "'");
        const auto shape = t->at("shape").get<std::vector<std::size_t>>();
        if (shape != std::vector<std::size_t>{dst.shape().n, dst.shape().c, dst.shape().h, dst.shape().w})
            throw ValidationError("checkpoint tensor '" + name + "' does not match the model shape " + dst.shape().str());
        const std::size_t off = t->at("offset");
        std::memcpy(dst.ptr(), payload.data() + off, dst.numel() * sizeof(T));
    }
};

namespace detail {

template <class T>
struct PayloadWriter {
    nlohmann::json dir = nlohmann::json::array();
    std::vector<std::uint8_t> bytes;

    void add(const std::string& name, const std::string& kind, const Tensor4<T>& t) {
        const Shape& s = t.shape();
        dir.push_back({{"name", name}, {"kind", kind}, {"shape", {s.n, s.c, s.h, s.w}}, {"offset", bytes.size()}});
        const auto* p = reinterpret_cast<const std::uint8_t*>(t.ptr());
        bytes.insert(bytes.end(), p, p + t.numel() * sizeof(T));
    }
};

} // namespace detail

/// Serializes model state (parameters and BN running statistics) and, when
/// given, the AdamW moments. Written to a temporary file and renamed.
template <class T>
void save_checkpoint(const std::filesystem::path& path, SegmentationModel<T>& model, const AdamW<T>* optim,
                     const nlohmann::json& meta = nlohmann::json::object()) {
    static_assert(std::endian::native == std::endian::little);
    detail::PayloadWriter<T> w;
    for (auto& [name, p] : named_parameters<T>(model)) w.add(name, "parameter", p.value());
    struct Buffers : ModuleVisitor<T> {
        detail::PayloadWriter<T>* w;
        void buffer(const std::string& name, Tensor4<T>& b) override { w->add(name, "buffer", b); }
    } buffers;
    buffers.w = &w;
    model.visit("", buffers);
    nlohmann::json optim_json = nullptr;
    if (optim) {
        for (const auto& s : optim->slots()) {
            w.add("optim.m." + s.name, "optimizer", s.m);
            w.add("optim.v." + s.name, "optimizer", s.v);
        }
        optim_json = {{"config", optim->config()}, {"steps", optim->steps()}};
    }
    nlohmann::json header = {{"format", "emcad-checkpoint"},
                             {"version", kCheckpointVersion},
                             {"dtype", npy::descr(npy::dtype_of<T>())},
                             {"config", model.config()},
                             {"tensors", w.dir},
                             {"optimizer", optim_json},
                             {"payload_bytes", w.bytes.size()},
                             {"payload_fnv1a64", hex64(fnv1a64(w.bytes.data(), w.bytes.size()))},
                             {"meta", meta}};
    const std::string h = header.dump();
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw Error("cannot write checkpoint " + tmp.string());
        f.write(kCheckpointMagic, 8);
        std::uint64_t len = h.size();
        f.write(reinterpret_cast<const char*>(&len), 8);
        f.write(h.data(), static_cast<std::streamsize>(h.size()));
        f.write(reinterpret_cast<const char*>(w.bytes.data()), static_cast<std::streamsize>(w.bytes.size()));
        if (!f) throw Error("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

/// Parses and verifies a checkpoint; any inconsistency is a FormatError.
inline CheckpointFile read_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const std::string where = " in " + path.string();
    if (buf.size() < 16 || std::memcmp(buf.data(), kCheckpointMagic, 8) != 0)
        throw FormatError("bad checkpoint magic" + where);
    std::uint64_t len = 0;
    std::memcpy(&len, buf.data() + 8, 8);
    if (len > buf.size() - 16) throw FormatError("truncated checkpoint header" + where);
    CheckpointFile ck;
    try {
        ck.header = nlohmann::json::parse(buf.begin() + 16, buf.begin() + 16 + static_cast<std::ptrdiff_t>(len));
        if (ck.header.at("format") != "emcad-checkpoint") throw FormatError("not an emcad checkpoint" + where);
        if (ck.header.at("version") != kCheckpointVersion)
            throw FormatError("unsupported checkpoint version" + where);
        const std::size_t payload_bytes = ck.header.at("payload_bytes");
        if (buf.size() - 16 - len != payload_bytes) throw FormatError("checkpoint payload size mismatch" + where);
        ck.payload.assign(buf.begin() + 16 + static_cast<std::ptrdiff_t>(len), buf.end());
        const std::uint64_t want = parse_hex64(ck.header.at("payload_fnv1a64").get<std::string>());
        if (fnv1a64(ck.payload.data(), ck.payload.size()) != want)
            throw FormatError("checkpoint payload checksum mismatch" + where);
        const std::size_t item = npy::itemsize(npy::parse_descr(ck.header.at("dtype")));
        for (const auto& t : ck.header.at("tensors")) {
            std::size_t n = 1;
            for (std::size_t d : t.at("shape").get<std::vector<std::size_t>>()) n *= d;
            const std::size_t off = t.at("offset");
            if (off > payload_bytes || n * item > payload_bytes - off)
                throw FormatError("checkpoint tensor '" + t.at("name").get<std::string>() + "' exceeds the payload" + where);
        }
        (void)ck.model_config();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed checkpoint header" + where + ": " + e.what());
    } catch (const ValidationError& e) {
        throw FormatError("malformed checkpoint config" + where + ": " + e.what());
    }
    return ck;
}

template <class T>
void restore_model(const CheckpointFile& ck, SegmentationModel<T>& model) {
    if (ck.header.at("dtype") != npy::descr(npy::dtype_of<T>()))
        throw ValidationError("checkpoint dtype " + ck.header.at("dtype").get<std::string>() + " does not match");
    for (auto& [name, t] : named_state<T>(model)) ck.copy_into(name, *t);
}

template <class T>
void restore_optimizer(const CheckpointFile& ck, AdamW<T>& optim) {
    if (ck.header.at("optimizer").is_null()) throw ValidationError("checkpoint has no optimizer state");
    for (auto& s : optim.slots()) {
        ck.copy_into("optim.m." + s.name, s.m);
        ck.copy_into("optim.v." + s.name, s.v);
    }
    optim.set_steps(ck.header.at("optimizer").at("steps"));
}

/// Builds a model from the embedded config and loads its state.
template <class T>
SegmentationModel<T> load_model(const CheckpointFile& ck) {
    SegmentationModel<T> model(ck.model_config(), 0);
    restore_model(ck, model);
    return model;
}

} // namespace emcad
