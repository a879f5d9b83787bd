#pragma once

// Band log-amplitude trajectories, gate-weight curves and band frequency errors
// for generated sets, plus their CSV writers.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "freqflow/core.hpp"
#include "freqflow/model.hpp"
#include "freqflow/sampling.hpp"
#include "freqflow/spectral.hpp"

namespace freqflow {

struct CurvePoint {
    int step1000 = 0;
    double value = 0.0;
};

using Curve = std::vector<CurvePoint>;

inline constexpr double kDegenerateNormalization = 1e-12;

inline double mean_band_log_amplitude(std::span<const ImageTensor> images, const RealGrid& band) {
    if (images.empty()) throw AnalysisError("reference clean set is empty");
    double s = 0.0;
    for (const auto& img : images) s += band_log_amplitude(img, band);
    return s / static_cast<double>(images.size());
}

/// R(t) = (A(t) - A_clean) / (A(1) - A_clean), where A is band_log_amplitude,
/// A(1) is taken at the first (t = 1) entry and A_clean is the reference mean.
inline Curve relative_log_amplitude_curve(const Trajectory& traj, const RealGrid& band,
                                          std::span<const ImageTensor> reference_clean) {
    if (traj.empty()) throw AnalysisError("relative_log_amplitude_curve: empty trajectory");
    const double clean = mean_band_log_amplitude(reference_clean, band);
    const double a1 = band_log_amplitude(traj.front().x_t, band);
    const double denom = a1 - clean;
    if (!(std::abs(denom) >= kDegenerateNormalization)) {
        throw AnalysisError("relative_log_amplitude_curve: degenerate normalization, |A(1) - A_clean| < 1e-12");
    }
    Curve out;
    out.reserve(traj.size());
    out.push_back({step1000(traj.front().t), 1.0});
    for (std::size_t i = 1; i < traj.size(); ++i) {
        out.push_back({step1000(traj[i].t), (band_log_amplitude(traj[i].x_t, band) - clean) / denom});
    }
    return out;
}

/// Pointwise mean of curves sharing the same step axis.
inline Curve average_curves(std::span<const Curve> curves) {
    if (curves.empty()) throw AnalysisError("average_curves: no curves");
    Curve out = curves.front();
    for (std::size_t c = 1; c < curves.size(); ++c) {
        if (curves[c].size() != out.size()) throw AnalysisError("average_curves: curves differ in length");
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (curves[c][i].step1000 != out[i].step1000) throw AnalysisError("average_curves: step axes differ");
            out[i].value += curves[c][i].value;
        }
    }
    for (auto& p : out) p.value /= static_cast<double>(curves.size());
    return out;
}

struct OmegaPoint {
    int step1000 = 0;
    double omega_low = 0.0;
    double omega_high = 0.0;  // 1 - omega_low
};

using OmegaCurve = std::vector<OmegaPoint>;

inline OmegaCurve omega_curve(const Trajectory& traj) {
    OmegaCurve out;
    out.reserve(traj.size());
    for (const auto& p : traj) out.push_back({step1000(p.t), p.mean_omega, 1.0 - p.mean_omega});
    return out;
}

inline OmegaCurve average_omega_curves(std::span<const OmegaCurve> curves) {
    if (curves.empty()) throw AnalysisError("average_omega_curves: no curves");
    OmegaCurve out = curves.front();
    for (std::size_t c = 1; c < curves.size(); ++c) {
        if (curves[c].size() != out.size()) throw AnalysisError("average_omega_curves: curves differ in length");
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (curves[c][i].step1000 != out[i].step1000) throw AnalysisError("average_omega_curves: step axes differ");
            out[i].omega_low += curves[c][i].omega_low;
        }
    }
    for (auto& p : out) {
        p.omega_low /= static_cast<double>(curves.size());
        p.omega_high = 1.0 - p.omega_low;
    }
    return out;
}

struct FrequencyErrorReport {
    double low = 0.0;
    double high = 0.0;
};

inline FrequencyErrorReport frequency_error_pair(std::span<const ImageTensor> real_images,
                                                 std::span<const ImageTensor> gen_images,
                                                 const FrequencyMaskPair& masks) {
    return {frequency_error(real_images, gen_images, masks.low), frequency_error(real_images, gen_images, masks.high)};
}

/// Balanced label list 0, 1, ..., K-1, 0, 1, ... of length n.
inline std::vector<ClassCondition> cycled_labels(int n, int num_classes) {
    std::vector<ClassCondition> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(ClassCondition::of(i % num_classes));
    return out;
}

/// Generates num_samples images with cycled labels and scores both bands against real_images.
template <typename T>
FrequencyErrorReport frequency_error_report(std::span<const ImageTensor> real_images, const Model<T>& model,
                                            int num_samples, const SamplerConfig& sampler,
                                            const FrequencyMaskPair& masks,
                                            std::vector<ImageTensor>* generated_out = nullptr) {
    if (num_samples < 1) throw AnalysisError("frequency_error_report: num_samples must be >= 1");
    const auto labels = cycled_labels(num_samples, model.config.num_classes);
    auto results = sample_many(model_velocity(model, masks), labels, sampler, model.config.image_channels,
                               model.config.image_size);
    std::vector<ImageTensor> gen;
    gen.reserve(results.size());
    for (auto& r : results) gen.push_back(std::move(r.image));
    FrequencyErrorReport rep = frequency_error_pair(real_images, gen, masks);
    if (generated_out) *generated_out = std::move(gen);
    return rep;
}

// ---------------------------------------------------------------------------
// CSV writers.

namespace detail {

inline std::ofstream open_csv(const std::filesystem::path& path, const char* header) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw InputError("cannot open " + path.string());
    f << header << "\n";
    return f;
}

}  // namespace detail

inline void write_curve_csv(const std::filesystem::path& path, const Curve& curve) {
    auto f = detail::open_csv(path, "step1000,relative_log_amplitude");
    char buf[64];
    for (const auto& p : curve) {
        std::snprintf(buf, sizeof buf, "%d,%.9g\n", p.step1000, p.value);
        f << buf;
    }
}

inline void write_omega_csv(const std::filesystem::path& path, const OmegaCurve& curve) {
    auto f = detail::open_csv(path, "step1000,omega_low,omega_high");
    char buf[80];
    for (const auto& p : curve) {
        std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g\n", p.step1000, p.omega_low, p.omega_high);
        f << buf;
    }
}

inline void write_frequency_error_csv(const std::filesystem::path& path, const FrequencyErrorReport& rep) {
    auto f = detail::open_csv(path, "band,error");
    char buf[64];
    std::snprintf(buf, sizeof buf, "low,%.9g\nhigh,%.9g\n", rep.low, rep.high);
    f << buf;
}

}  // namespace freqflow
