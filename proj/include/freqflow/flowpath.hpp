#pragma once

// Linear flow-matching path X_t = (1 - t) X + t N, its velocity N - X, and the
// band-filtered velocity targets used to supervise the frequency branch.

#include <string>
#include <utility>

#include "freqflow/core.hpp"
#include "freqflow/spectral.hpp"

namespace freqflow {

/// A class label or the distinguished NULL token used for classifier-free guidance.
class ClassCondition {
public:
    constexpr ClassCondition() = default;

    static constexpr ClassCondition null() noexcept { return ClassCondition(); }

    static ClassCondition of(int label) {
        if (label < 0) throw InputError("class label must be non-negative, got " + std::to_string(label));
        return ClassCondition(label);
    }

    constexpr bool is_null() const noexcept { return label_ < 0; }
    constexpr int label() const noexcept { return label_; }

    /// Row of a (num_classes + 1)-row embedding table; NULL maps to the last row.
    int table_row(int num_classes) const {
        if (is_null()) return num_classes;
        if (label_ >= num_classes) {
            throw InputError("class label " + std::to_string(label_) + " out of range for " +
                             std::to_string(num_classes) + " classes");
        }
        return label_;
    }

    friend constexpr bool operator==(ClassCondition, ClassCondition) = default;

private:
    constexpr explicit ClassCondition(int label) : label_(label) {}
    int label_ = -1;
};

struct FlowSample {
    ImageTensor x;
    ImageTensor n;
    double t = 0.0;
    ImageTensor x_t;
    ImageTensor v;
    ImageTensor v_low;
    ImageTensor v_high;
    ImageTensor x_t_low;
    ImageTensor x_t_high;
    ClassCondition label;
};

inline ImageTensor interpolate(const ImageTensor& x, const ImageTensor& n, double t) {
    x.require_same_shape(n, "interpolate");
    if (!(t >= 0.0 && t <= 1.0)) throw ParameterError("interpolate: t must lie in [0, 1], got " + std::to_string(t));
    if (t == 0.0) return x;
    if (t == 1.0) return n;
    ImageTensor out(x.channels(), x.height(), x.width());
    auto o = out.data();
    auto xs = x.data();
    auto ns = n.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = (1.0 - t) * xs[i] + t * ns[i];
    return out;
}

inline ImageTensor velocity_target(const ImageTensor& x, const ImageTensor& n) {
    x.require_same_shape(n, "velocity_target");
    return n - x;
}

/// Low- and high-band parts of a velocity field (filters are linear, so these equal
/// N^L - X^L and N^H - X^H).
inline std::pair<ImageTensor, ImageTensor> band_velocity_targets(const ImageTensor& v,
                                                                  const FrequencyMaskPair& masks) {
    BandDecomposition d = decompose(v, masks);
    return {std::move(d.low), std::move(d.high)};
}

inline ImageTensor standard_normal_image(int channels, int height, int width, RngStream& rng) {
    ImageTensor out(channels, height, width);
    for (double& v : out.data()) v = rng.normal();
    return out;
}

/// Draws t ~ U[0, 1] and N ~ N(0, I), then fills every supervision target.
inline FlowSample draw_sample(const ImageTensor& x, ClassCondition label, RngStream& rng,
                              const FrequencyMaskPair& masks) {
    FlowSample s;
    s.t = rng.uniform();
    s.n = standard_normal_image(x.channels(), x.height(), x.width(), rng);
    s.x = x;
    s.x_t = interpolate(s.x, s.n, s.t);
    s.v = velocity_target(s.x, s.n);
    std::tie(s.v_low, s.v_high) = band_velocity_targets(s.v, masks);
    BandDecomposition xt_bands = decompose(s.x_t, masks);
    s.x_t_low = std::move(xt_bands.low);
    s.x_t_high = std::move(xt_bands.high);
    s.label = label;
    return s;
}

}  // namespace freqflow
