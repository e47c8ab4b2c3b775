#pragma once

// NPY version 1.0 reader/writer (single array, little-endian, C order).
//
// Layout:
//   "\x93NUMPY" | 0x01 0x00 | uint16 LE header length | header | payload
// The header is a Python dict literal, e.g.
//   {'descr': '<f4', 'fortran_order': False, 'shape': (3, 64, 64), }
// padded with spaces and terminated by '\n' so that the payload starts at a
// multiple of 64 bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "emcad/errors.hpp"

namespace emcad::npy {

static_assert(std::endian::native == std::endian::little, "NPY I/O assumes a little-endian host");

enum class DType { f4, f8, u1, i1, u2, i2, i4, i8 };

inline std::size_t itemsize(DType d) {
    switch (d) {
    case DType::u1:
    case DType::i1: return 1;
    case DType::u2:
    case DType::i2: return 2;
    case DType::f4:
    case DType::i4: return 4;
    case DType::f8:
    case DType::i8: return 8;
    }
    return 0;
}

inline std::string descr(DType d) {
    switch (d) {
    case DType::f4: return "<f4";
    case DType::f8: return "<f8";
    case DType::u1: return "|u1";
    case DType::i1: return "|i1";
    case DType::u2: return "<u2";
    case DType::i2: return "<i2";
    case DType::i4: return "<i4";
    case DType::i8: return "<i8";
    }
    return "";
}

inline DType parse_descr(const std::string& s) {
    static const std::pair<const char*, DType> table[] = {
        {"<f4", DType::f4}, {"<f8", DType::f8}, {"|u1", DType::u1}, {"<u1", DType::u1}, {"|i1", DType::i1},
        {"<i1", DType::i1}, {"<u2", DType::u2}, {"<i2", DType::i2}, {"<i4", DType::i4}, {"<i8", DType::i8}};
    for (const auto& [name, d] : table)
        if (s == name) return d;
    throw FormatError("unsupported NPY dtype '" + s + "'");
}

template <class T>
constexpr DType dtype_of() {
    if constexpr (std::is_same_v<T, float>) return DType::f4;
    else if constexpr (std::is_same_v<T, double>) return DType::f8;
    else if constexpr (std::is_same_v<T, std::uint8_t>) return DType::u1;
    else if constexpr (std::is_same_v<T, std::int8_t>) return DType::i1;
    else if constexpr (std::is_same_v<T, std::uint16_t>) return DType::u2;
    else if constexpr (std::is_same_v<T, std::int16_t>) return DType::i2;
    else if constexpr (std::is_same_v<T, std::int32_t>) return DType::i4;
    else if constexpr (std::is_same_v<T, std::int64_t>) return DType::i8;
    else static_assert(sizeof(T) == 0, "unsupported NPY element type");
}

/// Untyped array: raw little-endian payload plus dtype and shape.
struct Array {
    DType dtype = DType::f4;
    std::vector<std::size_t> shape;
    std::vector<std::uint8_t> bytes;

    std::size_t numel() const {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return n;
    }

    /// Element-wise conversion to U.
    template <class U>
    std::vector<U> as() const {
        std::vector<U> out(numel());
        auto convert = [&](auto tag) {
            using S = decltype(tag);
            for (std::size_t i = 0; i < out.size(); ++i) {
                S v;
                std::memcpy(&v, bytes.data() + i * sizeof(S), sizeof(S));
                out[i] = static_cast<U>(v);
            }
        };
        switch (dtype) {
        case DType::f4: convert(float{}); break;
        case DType::f8: convert(double{}); break;
        case DType::u1: convert(std::uint8_t{}); break;
        case DType::i1: convert(std::int8_t{}); break;
        case DType::u2: convert(std::uint16_t{}); break;
        case DType::i2: convert(std::int16_t{}); break;
        case DType::i4: convert(std::int32_t{}); break;
        case DType::i8: convert(std::int64_t{}); break;
        }
        return out;
    }
};

inline constexpr std::size_t kMaxRank = 4;

inline std::string shape_literal(const std::vector<std::size_t>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    if (shape.size() == 1) s += ",";
    return s + ")";
}

/// Full preamble (magic through the terminating newline).
inline std::string make_header(DType dtype, const std::vector<std::size_t>& shape) {
    std::string dict = "{'descr': '" + descr(dtype) + "', 'fortran_order': False, 'shape': " + shape_literal(shape) + ", }";
    const std::size_t unpadded = 10 + dict.size() + 1;
    const std::size_t total = (unpadded + 63) / 64 * 64;
    if (total - 10 > 0xffff) throw FormatError("NPY header too long for version 1.0");
    dict.append(total - unpadded, ' ');
    dict += '\n';
    std::string out = "\x93NUMPY";
    out += static_cast<char>(1);
    out += static_cast<char>(0);
    const auto len = static_cast<std::uint16_t>(dict.size());
    out += static_cast<char>(len & 0xff);
    out += static_cast<char>(len >> 8);
    return out + dict;
}

inline void write(const std::filesystem::path& path, DType dtype, const std::vector<std::size_t>& shape,
                  const void* data, std::size_t numel) {
    if (shape.size() > kMaxRank) throw ValidationError("NPY arrays are limited to rank " + std::to_string(kMaxRank));
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    if (n != numel) throw ValidationError("NPY write: shape does not match element count");
    const std::string header = make_header(dtype, shape);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open " + path.string() + " for writing");
    f.write(header.data(), static_cast<std::streamsize>(header.size()));
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(numel * itemsize(dtype)));
    if (!f) throw Error("failed writing " + path.string());
}

template <class T>
void write(const std::filesystem::path& path, const std::vector<std::size_t>& shape, std::span<const T> data) {
    write(path, dtype_of<T>(), shape, data.data(), data.size());
}

inline void write(const std::filesystem::path& path, const Array& a) {
    write(path, a.dtype, a.shape, a.bytes.data(), a.numel());
}

namespace detail {

inline void skip_ws(const std::string& s, std::size_t& i) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
}

inline std::string value_after(const std::string& dict, const std::string& key) {
    const std::string pat = "'" + key + "'";
    std::size_t i = dict.find(pat);
    if (i == std::string::npos) throw FormatError("NPY header lacks '" + key + "'");
    i += pat.size();
    skip_ws(dict, i);
    if (i >= dict.size() || dict[i] != ':') throw FormatError("malformed NPY header near '" + key + "'");
    ++i;
    skip_ws(dict, i);
    return dict.substr(i);
}

inline std::vector<std::size_t> parse_shape(const std::string& rest) {
    if (rest.empty() || rest[0] != '(') throw FormatError("malformed NPY shape");
    const std::size_t close = rest.find(')');
    if (close == std::string::npos) throw FormatError("malformed NPY shape");
    std::vector<std::size_t> shape;
    std::size_t i = 1;
    while (i < close) {
        skip_ws(rest, i);
        if (i >= close) break;
        if (rest[i] < '0' || rest[i] > '9') throw FormatError("malformed NPY shape");
        std::size_t v = 0;
        while (i < close && rest[i] >= '0' && rest[i] <= '9') {
            v = v * 10 + static_cast<std::size_t>(rest[i] - '0');
            ++i;
        }
        shape.push_back(v);
        skip_ws(rest, i);
        if (i < close && rest[i] == ',') ++i;
        else if (i < close) throw FormatError("malformed NPY shape");
    }
    return shape;
}

} // namespace detail

/// Reads the whole file; throws FormatError on any malformation, including a
/// payload shorter than the header promises. Nothing is returned on failure.
inline Array read(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open " + path.string());
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const std::string where = " in " + path.string();
    if (buf.size() < 10 || std::memcmp(buf.data(), "\x93NUMPY", 6) != 0) throw FormatError("bad NPY magic" + where);
    const int major = buf[6];
    std::size_t header_len = 0, offset = 0;
    if (major == 1) {
        header_len = buf[8] | (static_cast<std::size_t>(buf[9]) << 8);
        offset = 10;
    } else if (major == 2 || major == 3) {
        if (buf.size() < 12) throw FormatError("truncated NPY preamble" + where);
        header_len = buf[8] | (static_cast<std::size_t>(buf[9]) << 8) | (static_cast<std::size_t>(buf[10]) << 16) |
                     (static_cast<std::size_t>(buf[11]) << 24);
        offset = 12;
    } else {
        throw FormatError("unsupported NPY version " + std::to_string(major) + where);
    }
    if (buf.size() < offset + header_len) throw FormatError("truncated NPY header" + where);
    const std::string dict(reinterpret_cast<const char*>(buf.data() + offset), header_len);
    if (dict.empty() || dict.find('{') == std::string::npos || dict.find('}') == std::string::npos)
        throw FormatError("malformed NPY header" + where);

    Array a;
    const std::string d = detail::value_after(dict, "descr");
    if (d.empty() || (d[0] != '\'' && d[0] != '"')) throw FormatError("malformed NPY descr" + where);
    const std::size_t q = d.find(d[0], 1);
    if (q == std::string::npos) throw FormatError("malformed NPY descr" + where);
    a.dtype = parse_descr(d.substr(1, q - 1));
    const std::string fo = detail::value_after(dict, "fortran_order");
    if (fo.rfind("True", 0) == 0) throw FormatError("Fortran-ordered NPY arrays are not supported" + where);
    if (fo.rfind("False", 0) != 0) throw FormatError("malformed NPY fortran_order" + where);
    a.shape = detail::parse_shape(detail::value_after(dict, "shape"));
    if (a.shape.size() > kMaxRank) throw FormatError("NPY rank " + std::to_string(a.shape.size()) + " exceeds 4" + where);

    const std::size_t payload = a.numel() * itemsize(a.dtype);
    const std::size_t start = offset + header_len;
    if (buf.size() - start < payload) throw FormatError("truncated NPY payload" + where);
    if (buf.size() - start > payload) throw FormatError("trailing bytes after NPY payload" + where);
    a.bytes.assign(buf.begin() + static_cast<std::ptrdiff_t>(start), buf.end());
    return a;
}

/// Typed read; the stored dtype must match T exactly.
template <class T>
std::vector<T> read_exact(const std::filesystem::path& path, std::vector<std::size_t>* shape = nullptr) {
    Array a = read(path);
    if (a.dtype != dtype_of<T>())
        throw FormatError("NPY dtype " + descr(a.dtype) + " does not match expected " + descr(dtype_of<T>()) + " in " +
                          path.string());
    std::vector<T> out(a.numel());
    if (!out.empty()) std::memcpy(out.data(), a.bytes.data(), a.bytes.size());
    if (shape) *shape = a.shape;
    return out;
}

} // namespace emcad::npy
