#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "freqflow/analysis.hpp"
#include "freqflow/data.hpp"
#include "oracles.hpp"

using namespace freqflow;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// x_t = (1 - t) x + t n at t = 1, 1 - 1/k, ..., 0
Trajectory linear_trajectory(const ImageTensor& x, const ImageTensor& n, int k) {
    Trajectory tr;
    for (int j = 0; j <= k; ++j) {
        const double t = static_cast<double>(k - j) / k;
        tr.push_back({t, interpolate(x, n, t), 0.5});
    }
    return tr;
}

}  // namespace

TEST(RelativeLogAmplitude, StartsAtOneAndEndsAtZeroOnTheReferenceMean) {
    RngStream rng(1);
    const FrequencyMaskPair m = make_masks(8, 8, 2.0, 1.0);
    const ImageTensor noise = oracle::uniform_image(1, 8, 8, rng, -3, 3);
    const ImageTensor clean = oracle::uniform_image(1, 8, 8, rng, -0.2, 0.2);
    const std::vector<ImageTensor> ref = {clean};
    for (const RealGrid* band : {&m.low, &m.high}) {
        const Curve c = relative_log_amplitude_curve(linear_trajectory(clean, noise, 10), *band, ref);
        ASSERT_EQ(c.size(), 11u);
        EXPECT_EQ(c.front().value, 1.0);
        EXPECT_EQ(c.front().step1000, 1000);
        EXPECT_NEAR(c.back().value, 0.0, 1e-12);
        EXPECT_EQ(c.back().step1000, 0);
        EXPECT_EQ(c[5].step1000, 500);
    }
}

TEST(RelativeLogAmplitude, MatchesDefinitionAtInteriorPoints) {
    RngStream rng(2);
    const FrequencyMaskPair m = make_masks(8, 8, 2.0, 1.0);
    const ImageTensor noise = oracle::uniform_image(1, 8, 8, rng, -3, 3);
    std::vector<ImageTensor> ref;
    for (int i = 0; i < 3; ++i) ref.push_back(oracle::uniform_image(1, 8, 8, rng, -0.5, 0.5));
    const Trajectory tr = linear_trajectory(ref[0], noise, 4);
    const Curve c = relative_log_amplitude_curve(tr, m.high, ref);
    double clean = 0;
    for (const auto& r : ref) clean += band_log_amplitude(r, m.high) / 3.0;
    const double a1 = band_log_amplitude(noise, m.high);
    for (std::size_t i = 0; i < tr.size(); ++i) {
        EXPECT_NEAR(c[i].value, (band_log_amplitude(tr[i].x_t, m.high) - clean) / (a1 - clean), 1e-12);
    }
}

TEST(RelativeLogAmplitude, DegenerateNormalizationRaises) {
    const FrequencyMaskPair m = make_masks(8, 8, 2.0, 1.0);
    RngStream rng(3);
    const ImageTensor x = oracle::uniform_image(1, 8, 8, rng);
    const std::vector<ImageTensor> ref = {x};
    EXPECT_THROW(relative_log_amplitude_curve(linear_trajectory(x, x, 5), m.low, ref), AnalysisError);
    EXPECT_THROW(relative_log_amplitude_curve(Trajectory{}, m.low, ref), AnalysisError);
    EXPECT_THROW(relative_log_amplitude_curve(linear_trajectory(x, x * 2.0, 5), m.low, std::vector<ImageTensor>{}),
                 AnalysisError);
}

TEST(RelativeLogAmplitude, LowBandInterpolantDecreasesOnAverage) {
    const FrequencyMaskPair m = make_masks(16, 16, 8.0, 2.0);
    const Dataset data = synth_dataset(8, 2, 16, 11);
    std::vector<Curve> curves;
    for (std::uint64_t seed = 0; seed < 16; ++seed) {
        RngStream rng(seed, {streams::kNoise});
        const ImageTensor n = standard_normal_image(1, 16, 16, rng);
        const ImageTensor& x = data.images[seed];
        curves.push_back(relative_log_amplitude_curve(linear_trajectory(x, n, 20), m.low, data.images));
    }
    const Curve avg = average_curves(curves);
    for (std::size_t i = 1; i < avg.size(); ++i) EXPECT_LT(avg[i].value, avg[i - 1].value) << "index " << i;
}

TEST(AverageCurves, PointwiseMeanAndAxisChecks) {
    const std::vector<Curve> cs = {{{1000, 1.0}, {500, 0.2}}, {{1000, 1.0}, {500, 0.6}}};
    const Curve avg = average_curves(cs);
    EXPECT_DOUBLE_EQ(avg[1].value, 0.4);
    const std::vector<Curve> bad = {{{1000, 1.0}, {500, 0.2}}, {{1000, 1.0}, {400, 0.6}}};
    EXPECT_THROW(average_curves(bad), AnalysisError);
    EXPECT_THROW(average_curves(std::vector<Curve>{}), AnalysisError);
}

TEST(OmegaCurve, PassThroughAndComplement) {
    Trajectory tr;
    for (int j = 0; j <= 4; ++j) tr.push_back({1.0 - j * 0.25, ImageTensor(1, 2, 2), 0.1 * j + 0.3});
    const OmegaCurve c = omega_curve(tr);
    ASSERT_EQ(c.size(), 5u);
    for (int j = 0; j <= 4; ++j) {
        EXPECT_EQ(c[j].step1000, 1000 - 250 * j);
        EXPECT_DOUBLE_EQ(c[j].omega_low, 0.1 * j + 0.3);
        EXPECT_DOUBLE_EQ(c[j].omega_low + c[j].omega_high, 1.0);
    }
    Trajectory flat = tr;
    for (auto& p : flat) p.mean_omega = 0.5;
    for (const auto& p : omega_curve(flat)) {
        EXPECT_EQ(p.omega_low, 0.5);
        EXPECT_EQ(p.omega_high, 0.5);
    }
    const std::vector<OmegaCurve> both = {omega_curve(tr), omega_curve(flat)};
    const OmegaCurve avg = average_omega_curves(both);
    EXPECT_DOUBLE_EQ(avg[0].omega_low, 0.4);
    EXPECT_DOUBLE_EQ(avg[0].omega_high, 0.6);
}

TEST(OmegaCurve, ZeroGateModelGivesHalfEverywhere) {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.num_classes = 2;
    cfg.freq_depth = 1;
    cfg.freq_width = 8;
    cfg.freq_heads = 2;
    cfg.spatial_depth = 1;
    cfg.spatial_width = 4;
    cfg.time_embed_dim = 8;
    const auto model = Model<float>::zeros(cfg);
    SamplerConfig sc;
    sc.steps = 6;
    sc.capture_every = 2;
    const auto r = sample(model, ClassCondition::of(0), sc, model_masks(cfg));
    for (const auto& p : omega_curve(r.trajectory)) EXPECT_EQ(p.omega_low, 0.5);
}

TEST(FrequencyErrorReport, SelfAndHalfScaledSets) {
    const Dataset data = synth_dataset(4, 3, 16, 5);
    const FrequencyMaskPair m = make_masks(16, 16, 8.0, 2.0);
    const FrequencyErrorReport self = frequency_error_pair(data.images, data.images, m);
    EXPECT_EQ(self.low, 0.0);
    EXPECT_EQ(self.high, 0.0);
    std::vector<ImageTensor> half;
    for (const auto& x : data.images) half.push_back(x * 0.5);
    const FrequencyErrorReport h = frequency_error_pair(data.images, half, m);
    EXPECT_NEAR(h.low, 0.5, 1e-12);
    EXPECT_NEAR(h.high, 0.5, 1e-12);
}

TEST(FrequencyErrorReport, SamplesWithCycledLabels) {
    const auto labels = cycled_labels(7, 3);
    ASSERT_EQ(labels.size(), 7u);
    EXPECT_EQ(labels[0].label(), 0);
    EXPECT_EQ(labels[4].label(), 1);
    EXPECT_EQ(labels[6].label(), 0);

    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.num_classes = 3;
    cfg.freq_depth = 1;
    cfg.freq_width = 8;
    cfg.freq_heads = 2;
    cfg.spatial_depth = 1;
    cfg.spatial_width = 4;
    cfg.time_embed_dim = 8;
    const auto model = Model<float>::initialized(cfg, 2);
    const Dataset data = synth_dataset(3, 2, 8, 2);
    SamplerConfig sc;
    sc.steps = 3;
    std::vector<ImageTensor> gen;
    const auto masks = model_masks(cfg);
    const auto rep = frequency_error_report(data.images, model, 5, sc, masks, &gen);
    ASSERT_EQ(gen.size(), 5u);
    const auto again = frequency_error_pair(data.images, gen, masks);
    EXPECT_EQ(rep.low, again.low);
    EXPECT_EQ(rep.high, again.high);
    EXPECT_THROW(frequency_error_report(data.images, model, 0, sc, masks), AnalysisError);
}

TEST(AnalysisCsv, ExactFormats) {
    const auto dir = std::filesystem::temp_directory_path();
    write_curve_csv(dir / "ff_curve.csv", {{1000, 1.0}, {500, 0.25}});
    EXPECT_EQ(slurp(dir / "ff_curve.csv"), "step1000,relative_log_amplitude\n1000,1\n500,0.25\n");
    write_omega_csv(dir / "ff_omega.csv", {{1000, 0.5, 0.5}});
    EXPECT_EQ(slurp(dir / "ff_omega.csv"), "step1000,omega_low,omega_high\n1000,0.5,0.5\n");
    write_frequency_error_csv(dir / "ff_err.csv", {0.125, 0.5});
    EXPECT_EQ(slurp(dir / "ff_err.csv"), "band,error\nlow,0.125\nhigh,0.5\n");
}
