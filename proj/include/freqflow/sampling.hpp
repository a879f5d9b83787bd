#pragma once

// Euler ODE sampler from t = 1 (noise) to t = 0 (data) with classifier-free
// guidance and optional trajectory capture.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "freqflow/core.hpp"
#include "freqflow/flowpath.hpp"
#include "freqflow/model.hpp"
#include "freqflow/spectral.hpp"

namespace freqflow {

struct SamplerConfig {
    int steps = 50;
    double cfg_scale = 1.0;  // 1 disables guidance
    std::uint64_t seed = 0;
    int capture_every = 0;   // 0 disables capture

    void validate() const {
        if (steps < 1) throw ConfigError("sampler steps must be >= 1");
        if (!(cfg_scale >= 1.0)) throw ConfigError("sampler cfg_scale must be >= 1");
        if (capture_every < 0) throw ConfigError("sampler capture_every must be >= 0");
    }
};

struct TrajectoryPoint {
    double t = 1.0;
    ImageTensor x_t;
    double mean_omega = 0.0;
};

using Trajectory = std::vector<TrajectoryPoint>;

/// Position on the 1000-step axis used by every log and CSV.
inline int step1000(double t) { return static_cast<int>(std::lround(1000.0 * t)); }

inline ImageTensor cfg_velocity(const ImageTensor& v_cond, const ImageTensor& v_uncond, double scale) {
    v_cond.require_same_shape(v_uncond, "cfg_velocity");
    if (!(scale >= 1.0)) throw ParameterError("cfg_velocity: scale must be >= 1");
    if (scale == 1.0) return v_cond;
    ImageTensor out(v_cond.channels(), v_cond.height(), v_cond.width());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double c = v_cond.data()[i], u = v_uncond.data()[i];
        out.data()[i] = u + scale * (c - u);
    }
    return out;
}

/// Batched velocity evaluation: one velocity and one scalar mean gate value per input.
struct VelocityEval {
    std::vector<ImageTensor> v;
    std::vector<double> mean_omega;
};

using VelocityField =
    std::function<VelocityEval(std::span<const ImageTensor> x, double t, std::span<const ClassCondition> labels)>;

/// Wraps a model as a velocity field (band decomposition happens inside).
template <typename T>
VelocityField model_velocity(const Model<T>& model, const FrequencyMaskPair& masks) {
    return [&model, masks](std::span<const ImageTensor> x, double t, std::span<const ClassCondition> labels) {
        const std::vector<double> ts(x.size(), t);
        ForwardBatch batch = make_forward_batch(x, ts, labels, masks);
        ad::Graph<T> g(false);
        ParamBinding<T> p(g, model.params, false);
        ForwardNodes n = forward_nodes(g, model.config, p, batch);
        const ModelConfig& cfg = model.config;
        VelocityEval out;
        out.v = from_nhwc(g.value(n.v_hat), cfg.image_channels, cfg.image_size, cfg.image_size);
        const Matrix<T>& om = g.value(n.omega);
        const long per = om.rows() / static_cast<long>(x.size());
        for (std::size_t b = 0; b < x.size(); ++b) {
            out.mean_omega.push_back(
                static_cast<double>(om.middleRows(static_cast<long>(b) * per, per).template cast<double>().mean()));
        }
        return out;
    };
}

struct SampleResult {
    ImageTensor image;
    Trajectory trajectory;
};

/// Initial noise for sample `index` of a sampler seed.
inline ImageTensor sampler_noise(std::uint64_t seed, std::uint64_t index, int channels, int size) {
    RngStream rng(seed, {streams::kNoise, index});
    return standard_normal_image(channels, size, size, rng);
}

/// Samples labels.size() images in one batch; sample i uses noise stream first_index + i.
///
/// Uniform Euler steps x <- x - v/steps are accumulated as x_k = x_1 - (sum of v)/steps
/// with the velocity sum kept in long double. The two forms agree algebraically, and
/// this one makes a constant field land exactly on x_1 - v.
inline std::vector<SampleResult> sample_batch(const VelocityField& field, std::span<const ClassCondition> labels,
                                              const SamplerConfig& cfg, int channels, int size,
                                              std::uint64_t first_index = 0) {
    cfg.validate();
    const std::size_t n = labels.size();
    if (n == 0) throw InputError("sample: empty label set");
    const bool guided = cfg.cfg_scale > 1.0;

    std::vector<ImageTensor> x0, x;
    for (std::size_t i = 0; i < n; ++i) x0.push_back(sampler_noise(cfg.seed, first_index + i, channels, size));
    x = x0;
    std::vector<std::vector<long double>> vsum(n, std::vector<long double>(x0.front().size(), 0.0L));

    std::vector<ClassCondition> eval_labels(labels.begin(), labels.end());
    if (guided) eval_labels.insert(eval_labels.end(), n, ClassCondition::null());

    auto evaluate = [&](double t) {
        std::vector<ImageTensor> xs = x;
        if (guided) xs.insert(xs.end(), x.begin(), x.end());
        VelocityEval e = field(xs, t, eval_labels);
        if (e.v.size() != xs.size() || e.mean_omega.size() != xs.size()) {
            throw DimensionError("velocity field returned the wrong batch size");
        }
        VelocityEval out;
        for (std::size_t i = 0; i < n; ++i) {
            out.v.push_back(guided ? cfg_velocity(e.v[i], e.v[n + i], cfg.cfg_scale) : std::move(e.v[i]));
            out.mean_omega.push_back(e.mean_omega[i]);
        }
        return out;
    };

    std::vector<SampleResult> results(n);
    const bool capture = cfg.capture_every > 0;
    for (int j = 0; j < cfg.steps; ++j) {
        const double t = static_cast<double>(cfg.steps - j) / cfg.steps;
        VelocityEval e = evaluate(t);
        for (std::size_t i = 0; i < n; ++i) {
            if (!e.v[i].same_shape(x[i])) throw DimensionError("velocity field returned the wrong image shape");
            if (capture && j % cfg.capture_every == 0) results[i].trajectory.push_back({t, x[i], e.mean_omega[i]});
            auto xi = x[i].data();
            auto x1 = x0[i].data();
            auto vi = e.v[i].data();
            auto& acc = vsum[i];
            for (std::size_t k = 0; k < xi.size(); ++k) {
                acc[k] += vi[k];
                xi[k] = static_cast<double>(static_cast<long double>(x1[k]) - acc[k] / cfg.steps);
            }
            if (!x[i].all_finite()) {
                throw NumericError("sampler state became non-finite at step " + std::to_string(j + 1) + " of " +
                                   std::to_string(cfg.steps));
            }
        }
    }
    if (capture && cfg.steps % cfg.capture_every == 0) {
        VelocityEval e = evaluate(0.0);
        for (std::size_t i = 0; i < n; ++i) results[i].trajectory.push_back({0.0, x[i], e.mean_omega[i]});
    }
    for (std::size_t i = 0; i < n; ++i) results[i].image = std::move(x[i]);
    return results;
}

template <typename T>
SampleResult sample(const Model<T>& model, ClassCondition label, const SamplerConfig& cfg,
                    const FrequencyMaskPair& masks) {
    const ClassCondition ls[] = {label};
    return std::move(
        sample_batch(model_velocity(model, masks), ls, cfg, model.config.image_channels, model.config.image_size)
            .front());
}

/// Runs in batches of at most `chunk`; sample i always draws noise stream i.
inline std::vector<SampleResult> sample_many(const VelocityField& field, std::span<const ClassCondition> labels,
                                             const SamplerConfig& cfg, int channels, int size, std::size_t chunk = 32) {
    std::vector<SampleResult> out;
    for (std::size_t start = 0; start < labels.size(); start += chunk) {
        const std::size_t len = std::min(chunk, labels.size() - start);
        auto part = sample_batch(field, labels.subspan(start, len), cfg, channels, size, start);
        for (auto& r : part) out.push_back(std::move(r));
    }
    return out;
}

inline void write_trajectory_csv(const std::filesystem::path& path, const Trajectory& traj) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw InputError("cannot open " + path.string());
    f << "t,step1000,mean_omega\n";
    char buf[96];
    for (const auto& p : traj) {
        std::snprintf(buf, sizeof buf, "%.9g,%d,%.9g\n", p.t, step1000(p.t), p.mean_omega);
        f << buf;
    }
}

}  // namespace freqflow
