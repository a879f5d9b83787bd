#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "freqflow/data.hpp"
#include "freqflow/spectral.hpp"
#include "oracles.hpp"

using namespace freqflow;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("freqflow_data_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST(SynthDataset, DeterministicAndCounted) {
    const Dataset a = synth_dataset(8, 250, 16, 7);
    const Dataset b = synth_dataset(8, 250, 16, 7);
    ASSERT_EQ(a.size(), 2000u);
    EXPECT_EQ(a.images, b.images);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_NO_THROW(a.validate());
    std::vector<int> counts(8, 0);
    for (int l : a.labels) ++counts[l];
    for (int c : counts) EXPECT_EQ(c, 250);
    EXPECT_NE(synth_dataset(8, 2, 16, 8).images, synth_dataset(8, 2, 16, 7).images);
}

TEST(SynthDataset, PrefixIsIndependentOfDatasetSize) {
    const Dataset small = synth_dataset(4, 2, 8, 3), big = synth_dataset(4, 5, 8, 3);
    for (std::size_t i = 0; i < small.size(); ++i) EXPECT_EQ(small.images[i], big.images[i]);
}

TEST(SynthDataset, HighFrequencyClassHasMoreHighBandEnergy) {
    const Dataset d = synth_dataset(8, 100, 16, 21);
    const RealGrid high = make_masks(16, 16, 8.0, 2.0).high;
    double f1 = 0, f4 = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (d.labels[i] == 0) f1 += band_log_amplitude(d.images[i], high) / 100.0;
        if (d.labels[i] == 3) f4 += band_log_amplitude(d.images[i], high) / 100.0;
    }
    EXPECT_EQ(pattern_cycles(0, 16), 2);
    EXPECT_EQ(pattern_cycles(3, 16), 8);
    EXPECT_GT(f4, f1);
}

TEST(SynthDataset, ClassesDifferInBothBands) {
    const Dataset d = synth_dataset(8, 40, 16, 4);
    const FrequencyMaskPair m = make_masks(16, 16, 8.0, 2.0);
    std::vector<std::vector<ImageTensor>> by_class(8);
    for (std::size_t i = 0; i < d.size(); ++i) by_class[d.labels[i]].push_back(d.images[i]);
    // mean magnitude spectra of classes 0 and 1 differ by a clear relative margin in each band
    const RealGrid a = detail::mean_magnitude(by_class[0]), b = detail::mean_magnitude(by_class[1]);
    for (const RealGrid* band : {&m.low, &m.high}) {
        double diff = 0, ref = 0;
        for (std::size_t k = 0; k < a.values.size(); ++k) {
            diff += band->values[k] * std::abs(a.values[k] - b.values[k]);
            ref += band->values[k] * a.values[k];
        }
        EXPECT_GT(diff / ref, 0.1);
    }
}

TEST(SynthDataset, ColourAndInvalidArguments) {
    const Dataset c = synth_dataset(4, 2, 8, 1, 3);
    EXPECT_EQ(c.images[0].channels(), 3);
    EXPECT_NO_THROW(c.validate());
    EXPECT_THROW(synth_dataset(1, 2, 8, 1), InputError);
    EXPECT_THROW(synth_dataset(4, 2, 7, 1), DimensionError);
    EXPECT_THROW(synth_dataset(4, 2, 8, 1, 2), DimensionError);
}

TEST(Ppm, EndpointsAndRounding) {
    EXPECT_EQ(quantize_pixel(-1.0), 0);
    EXPECT_EQ(quantize_pixel(1.0), 255);
    EXPECT_EQ(quantize_pixel(5.0), 255);
    EXPECT_EQ(quantize_pixel(-5.0), 0);
    // (v + 1) / 2 * 255 = 127.5 exactly at v = 1/255: rounds away from zero
    EXPECT_EQ(quantize_pixel(1.0 / 255.0), 128);
    EXPECT_DOUBLE_EQ(dequantize_pixel(0), -1.0);
    EXPECT_DOUBLE_EQ(dequantize_pixel(255), 1.0);
}

TEST(Ppm, HeaderIsExact) {
    const std::string p6 = encode_ppm(ImageTensor(3, 16, 16));
    EXPECT_EQ(p6.substr(0, 13), "P6\n16 16\n255\n");
    EXPECT_EQ(p6.size(), 13u + 16 * 16 * 3);
    const std::string p5 = encode_ppm(ImageTensor(1, 4, 6));
    EXPECT_EQ(p5.substr(0, 11), "P5\n6 4\n255\n");
}

TEST(Ppm, RoundtripBoundAndIdempotence) {
    RngStream rng(5);
    const fs::path dir = scratch_dir("roundtrip");
    for (int c : {1, 3}) {
        const ImageTensor x = oracle::uniform_image(c, 6, 10, rng);
        write_ppm(x, dir / "a.ppm");
        const ImageTensor y = read_ppm(dir / "a.ppm");
        EXPECT_LE(max_abs_diff(x, y), 1.0 / 255.0);
        write_ppm(y, dir / "b.ppm");
        EXPECT_EQ(slurp(dir / "a.ppm"), slurp(dir / "b.ppm"));
        EXPECT_EQ(read_ppm(dir / "b.ppm"), y);
    }
}

TEST(Ppm, FormatErrors) {
    const std::string good = encode_ppm(ImageTensor(1, 2, 2));
    EXPECT_NO_THROW(decode_ppm(good));
    EXPECT_NO_THROW(decode_ppm("P5\n# comment\n2 2\n255\n" + good.substr(10)));
    EXPECT_THROW(decode_ppm("P3\n2 2\n255\n...."), FormatError);
    EXPECT_THROW(decode_ppm("P5\n2 2\n65535\n........"), FormatError);
    EXPECT_THROW(decode_ppm("P5\n2 x\n255\n...."), FormatError);
    EXPECT_THROW(decode_ppm(good.substr(0, good.size() - 1)), FormatError);
    EXPECT_THROW(encode_ppm(ImageTensor(2, 2, 2)), DimensionError);
    EXPECT_THROW(read_ppm("/nonexistent/file.ppm"), InputError);
}

TEST(Ppm, DirectoryLoader) {
    const fs::path dir = scratch_dir("dir");
    const Dataset d = synth_dataset(3, 2, 8, 9);
    for (std::size_t i = 0; i < d.size(); ++i) {
        write_ppm(d.images[i], dir / (std::to_string(d.labels[i]) + "_" + std::to_string(i) + ".pgm"));
    }
    std::ofstream(dir / "notes.txt") << "ignored";
    const Dataset loaded = load_ppm_directory(dir, 3);
    ASSERT_EQ(loaded.size(), 6u);
    std::vector<int> counts(3, 0);
    for (int l : loaded.labels) ++counts[l];
    EXPECT_EQ(counts, (std::vector<int>{2, 2, 2}));
    EXPECT_THROW(load_ppm_directory(dir, 2), InputError);
    std::ofstream(dir / "x_bad.pgm", std::ios::binary) << encode_ppm(ImageTensor(1, 8, 8));
    EXPECT_THROW(load_ppm_directory(dir, 3), InputError);
}
