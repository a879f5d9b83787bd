#pragma once

// Built-in oracle suite run by `freqflow check`.

#include <chrono>
#include <cmath>
#include <complex>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "freqflow/core.hpp"
#include "freqflow/flowpath.hpp"
#include "freqflow/model.hpp"
#include "freqflow/spectral.hpp"
#include "freqflow/training.hpp"

namespace freqflow {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

struct SelfCheckOptions {
    bool inject_dft_sign_fault = false;
    std::uint64_t seed = 20240601;
    int gradient_probes = 12;
};

namespace detail {

inline std::string sci(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3e", v);
    return buf;
}

/// Direct double summation sum_{x,y} X(x,y) e^{-j 2 pi (u x / H + v y / W)}, centered output.
inline Complex direct_dft_bin(const ImageTensor& img, int c, int u_centered, int v_centered) {
    const int h = img.height(), w = img.width();
    const int u = (u_centered - h / 2 + h) % h, v = (v_centered - w / 2 + w) % w;
    Complex acc{};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double angle = -2.0 * std::numbers::pi * (static_cast<double>(u) * y / h + static_cast<double>(v) * x / w);
            acc += img(c, y, x) * Complex(std::cos(angle), std::sin(angle));
        }
    return acc;
}

inline ImageTensor random_image(int c, int h, int w, RngStream& rng) {
    ImageTensor img(c, h, w);
    for (double& v : img.data()) v = rng.uniform(-1.0, 1.0);
    return img;
}

inline ModelConfig tiny_model_config() {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.num_classes = 3;
    cfg.freq_depth = 1;
    cfg.freq_width = 8;
    cfg.freq_heads = 2;
    cfg.spatial_depth = 1;
    cfg.spatial_width = 4;
    cfg.time_embed_dim = 8;
    cfg.sigma_low = 2.0;
    cfg.sigma_high = 1.0;
    return cfg;
}

/// Adds N(0, stddev^2) to every tensor so zero-initialised heads carry gradient.
inline void jitter_params(ModelParams<double>& params, RngStream& rng, double stddev) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& m = params.value(i);
        for (long k = 0; k < m.size(); ++k) m.data()[k] += stddev * rng.normal();
    }
}

}  // namespace detail

inline std::vector<CheckResult> run_self_check(const SelfCheckOptions& opt = {}) {
    std::vector<CheckResult> out;
    auto timed = [&](const std::string& name, auto&& body) {
        const auto t0 = std::chrono::steady_clock::now();
        CheckResult r{name, false, "", 0.0};
        try {
            body(r);
        } catch (const std::exception& e) {
            r.passed = false;
            r.detail = std::string("exception: ") + e.what();
        }
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out.push_back(std::move(r));
    };

    timed("dft_oracle", [&](CheckResult& r) {
        RngStream rng(opt.seed, {1});
        double worst = 0.0;
        for (int trial = 0; trial < 40; ++trial) {
            const int n = 2 * (1 + static_cast<int>(rng.index(4)));
            const int c = rng.bernoulli(0.5) ? 1 : 3;
            const ImageTensor img = detail::random_image(c, n, n, rng);
            const Spectrum s = detail::dft2_signed(img, opt.inject_dft_sign_fault ? +1 : -1);
            for (int ch = 0; ch < c; ++ch)
                for (int u = 0; u < n; ++u)
                    for (int v = 0; v < n; ++v) worst = std::max(worst, std::abs(s(ch, u, v) - detail::direct_dft_bin(img, ch, u, v)));
        }
        r.passed = worst < 1e-6;
        r.detail = "max |dft2 - direct sum| = " + detail::sci(worst);
    });

    timed("idft_roundtrip", [&](CheckResult& r) {
        RngStream rng(opt.seed, {2});
        double worst = 0.0;
        for (int trial = 0; trial < 40; ++trial) {
            const int n = 2 * (1 + static_cast<int>(rng.index(4)));
            const ImageTensor img = detail::random_image(rng.bernoulli(0.5) ? 1 : 3, n, n, rng);
            worst = std::max(worst, max_abs_diff(idft2(dft2(img)), img));
        }
        r.passed = worst < 1e-9;
        r.detail = "max roundtrip error = " + detail::sci(worst);
    });

    timed("parseval", [&](CheckResult& r) {
        RngStream rng(opt.seed, {3});
        double worst = 0.0;
        for (int trial = 0; trial < 20; ++trial) {
            const ImageTensor a = detail::random_image(1, 16, 16, rng);
            const ImageTensor b = detail::random_image(1, 16, 16, rng);
            const double ls = spatial_loss(a, b), lf = frequency_loss(a, b);
            worst = std::max(worst, std::abs(lf - 256.0 * ls) / (256.0 * ls));
        }
        r.passed = worst < 1e-9;
        r.detail = "max relative error of loss_f vs H*W*loss_s = " + detail::sci(worst);
    });

    timed("mask_complementarity", [&](CheckResult& r) {
        double worst = 0.0;
        for (double sigma : {0.5, 2.0, 8.0}) {
            const FrequencyMaskPair m = make_masks(16, 16, sigma, sigma);
            for (std::size_t i = 0; i < m.low.values.size(); ++i)
                worst = std::max(worst, std::abs(m.low.values[i] + m.high.values[i] - 1.0));
        }
        r.passed = worst <= 1e-12;
        r.detail = "max |low + high - 1| = " + detail::sci(worst);
    });

    timed("gradient_check", [&](CheckResult& r) {
        const ModelConfig cfg = detail::tiny_model_config();
        Model<double> model = Model<double>::initialized(cfg, opt.seed);
        RngStream jitter(opt.seed, {4});
        detail::jitter_params(model.params, jitter, 0.05);
        const FrequencyMaskPair masks = model_masks(cfg);
        RngStream draw(opt.seed, {5});
        std::vector<FlowSample> batch;
        std::vector<ClassCondition> labels;
        for (int b = 0; b < 2; ++b) {
            const ImageTensor x = detail::random_image(cfg.image_channels, cfg.image_size, cfg.image_size, draw);
            batch.push_back(draw_sample(x, ClassCondition::of(b % cfg.num_classes), draw, masks));
            labels.push_back(batch.back().label);
        }
        TrainConfig tcfg;
        RngStream probes(opt.seed, {streams::kProbe});
        const GradientCheckReport rep =
            gradient_check(model.params, training_loss_fn(cfg, batch, labels, tcfg), opt.gradient_probes, probes);
        r.passed = rep.ok() && rep.max_rel_error < 1e-4;
        r.detail = "max relative error = " + detail::sci(rep.max_rel_error) + " over " +
                   std::to_string(rep.probes.size()) + " probes";
        for (const auto& f : rep.failures) r.detail += "; failed " + f;
    });

    return out;
}

}  // namespace freqflow
