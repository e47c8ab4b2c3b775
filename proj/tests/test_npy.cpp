#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "emcad/npy.hpp"
#include "emcad/tensor.hpp"

using namespace emcad;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "emcad_test_npy";
    fs::create_directories(dir);
    return dir / name;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), {}};
}

void spit(const fs::path& p, const std::string& s) {
    std::ofstream f(p, std::ios::binary);
    f << s;
}

// Header bytes as produced by numpy.save for small arrays: 128 bytes, dict
// padded with spaces and terminated by a newline.
std::string numpy_header(const std::string& dict) {
    std::string h("\x93NUMPY\x01\x00v\x00", 10);
    h += dict;
    h.append(127 - h.size(), ' ');
    return h + '\n';
}

} // namespace

TEST(Npy, HeaderMatchesNumpyBytes) {
    EXPECT_EQ(npy::make_header(npy::DType::f4, {3, 64, 64}),
              numpy_header("{'descr': '<f4', 'fortran_order': False, 'shape': (3, 64, 64), }"));
    EXPECT_EQ(npy::make_header(npy::DType::u1, {64, 64}),
              numpy_header("{'descr': '|u1', 'fortran_order': False, 'shape': (64, 64), }"));
    EXPECT_EQ(npy::make_header(npy::DType::i4, {5}),
              numpy_header("{'descr': '<i4', 'fortran_order': False, 'shape': (5,), }"));
    EXPECT_EQ(npy::make_header(npy::DType::f8, {}),
              numpy_header("{'descr': '<f8', 'fortran_order': False, 'shape': (), }"));
}

TEST(Npy, RandomRoundTripsAreBitExact) {
    Prng p(11);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<std::size_t> shape(1 + p.below(4));
        std::size_t n = 1;
        for (auto& d : shape) n *= (d = 1 + p.below(6));
        const auto path = scratch("rt.npy");
        if (trial % 2 == 0) {
            std::vector<float> v(n);
            for (auto& x : v) x = static_cast<float>(p.normal() * 1e3);
            npy::write<float>(path, shape, v);
            std::vector<std::size_t> got;
            EXPECT_EQ(npy::read_exact<float>(path, &got), v);
            EXPECT_EQ(got, shape);
        } else {
            std::vector<std::uint8_t> v(n);
            for (auto& x : v) x = static_cast<std::uint8_t>(p.below(256));
            npy::write<std::uint8_t>(path, shape, v);
            EXPECT_EQ(npy::read_exact<std::uint8_t>(path), v);
        }
        EXPECT_EQ(fs::file_size(path) % 64, n * (trial % 2 == 0 ? 4 : 1) % 64);
    }
}

TEST(Npy, RejectsMalformedFiles) {
    const auto good = scratch("good.npy");
    const std::vector<float> v = {1, 2, 3, 4};
    npy::write<float>(good, {2, 2}, v);
    const std::string bytes = slurp(good);

    const auto bad = scratch("bad.npy");
    spit(bad, bytes.substr(0, bytes.size() - 3));
    EXPECT_THROW(npy::read(bad), FormatError);

    spit(bad, bytes + "x");
    EXPECT_THROW(npy::read(bad), FormatError);

    std::string magic = bytes;
    magic[1] = 'M';
    spit(bad, magic);
    EXPECT_THROW(npy::read(bad), FormatError);

    std::string fortran = bytes;
    fortran.replace(fortran.find("False"), 5, "True ");
    spit(bad, fortran);
    EXPECT_THROW(npy::read(bad), FormatError);

    std::string big = bytes;
    big.replace(big.find("<f4"), 3, ">f4");
    spit(bad, big);
    EXPECT_THROW(npy::read(bad), FormatError);

    spit(bad, bytes.substr(0, 40));
    EXPECT_THROW(npy::read(bad), FormatError);

    EXPECT_THROW(npy::read(scratch("missing.npy")), FormatError);
    EXPECT_THROW(npy::read_exact<double>(good), FormatError);
}

TEST(Npy, WriteValidatesShape) {
    const std::vector<float> v(5);
    EXPECT_THROW(npy::write<float>(scratch("x.npy"), {2, 2}, v), ValidationError);
    EXPECT_THROW(npy::write<float>(scratch("x.npy"), {1, 1, 1, 1, 5}, v), ValidationError);
}

TEST(Npy, ArrayConvertsElementTypes) {
    const auto path = scratch("conv.npy");
    const std::vector<std::int16_t> v = {-3, 0, 7};
    npy::write<std::int16_t>(path, {3}, v);
    const auto a = npy::read(path);
    EXPECT_EQ(a.dtype, npy::DType::i2);
    EXPECT_EQ(a.as<double>(), (std::vector<double>{-3, 0, 7}));
}
