#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "dkn/io.hpp"
#include "dkn/rng.hpp"

using namespace dkn;

namespace {
const auto tmp = std::filesystem::temp_directory_path();
}

TEST_CASE("dkt1 round trip in both precisions") {
    Rng rng(3);
    Tensor<float> tf({2, 3, 4}, 0.f);
    for (auto& v : tf.data) v = static_cast<float>(rng.uniform(-1, 1));
    const auto p1 = tmp / "dkn-io-f32.dkt1";
    save_dkt1(p1, tf);
    auto back = load_dkt1<float>(p1);
    CHECK(back.shape == tf.shape);
    CHECK(back.data == tf.data);

    Tensor<double> td({5}, 0.0);
    for (auto& v : td.data) v = rng.uniform(-1, 1);
    const auto p2 = tmp / "dkn-io-f64.dkt1";
    save_dkt1(p2, td);
    auto back64 = load_dkt1<double>(p2);
    CHECK(back64.data == td.data);

    // Cross-dtype load converts.
    auto as_double = load_dkt1<double>(p1);
    for (std::size_t i = 0; i < tf.size(); ++i)
        CHECK(as_double.data[i] == static_cast<double>(tf.data[i]));
    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
}

TEST_CASE("dkt1 header layout is stable") {
    Tensor<float> t({2, 2}, std::vector<float>{1, 2, 3, 4});
    const auto p = tmp / "dkn-io-hdr.dkt1";
    save_dkt1(p, t);
    const std::string bytes = read_text_file(p);
    REQUIRE(bytes.size() == 4 + 1 + 4 + 8 + 16);
    CHECK(bytes.substr(0, 4) == "DKT1");
    CHECK(bytes[4] == 0);  // f32 dtype code
    std::uint32_t rank;
    std::memcpy(&rank, bytes.data() + 5, 4);
    CHECK(rank == 2);
    std::filesystem::remove(p);
}

TEST_CASE("dkt1 rejects wrong magic and truncation") {
    const auto p = tmp / "dkn-io-bad.dkt1";
    write_text_file(p, "NOPE");
    CHECK_THROWS_AS(load_dkt1<float>(p), IoError);
    CHECK_THROWS_AS(load_dkt1<float>(tmp / "dkn-io-missing.dkt1"), IoError);
    std::filesystem::remove(p);
}

TEST_CASE("png writer emits a valid grayscale file with sidecar scale") {
    Tensor<float> img({8, 8}, 0.f);
    for (int i = 0; i < 64; ++i) img.data[i] = static_cast<float>(i);
    const auto p = tmp / "dkn-io-test.png";
    write_image_png(p, img);
    const std::string bytes = read_text_file(p);
    REQUIRE(bytes.size() > 8);
    const unsigned char sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    CHECK(std::memcmp(bytes.data(), sig, 8) == 0);
    CHECK(bytes.find("IHDR") != std::string::npos);
    CHECK(bytes.find("IDAT") != std::string::npos);
    CHECK(bytes.find("IEND") != std::string::npos);
    const std::string side = read_text_file(p.string() + ".scale.txt");
    CHECK(side.find("min 0") != std::string::npos);
    CHECK(side.find("max 63") != std::string::npos);
    std::filesystem::remove(p);
    std::filesystem::remove(p.string() + ".scale.txt");
}
