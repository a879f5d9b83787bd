#pragma once

// Shared value types: error hierarchy, ImageTensor, seeded RNG streams.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace freqflow {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class ParameterError : public Error {
public:
    using Error::Error;
};

class InputError : public Error {
public:
    using Error::Error;
};

class SymmetryError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class AnalysisError : public Error {
public:
    using Error::Error;
};

/// Real-valued C x H x W image, channel-major. Pixel data nominally lives in [-1, 1].
class ImageTensor {
public:
    ImageTensor() = default;

    ImageTensor(int channels, int height, int width, double fill = 0.0)
        : channels_(channels), height_(height), width_(width) {
        if (channels <= 0 || height <= 0 || width <= 0) {
            throw DimensionError("ImageTensor dimensions must be positive, got " + std::to_string(channels) +
                                 "x" + std::to_string(height) + "x" + std::to_string(width));
        }
        data_.assign(static_cast<std::size_t>(channels) * height * width, fill);
    }

    /// Single-channel image from row literals, e.g. {{1, 2}, {3, 4}}.
    static ImageTensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        const int h = static_cast<int>(rows.size());
        const int w = h > 0 ? static_cast<int>(rows.begin()->size()) : 0;
        ImageTensor out(1, h, w);
        int y = 0;
        for (const auto& row : rows) {
            if (static_cast<int>(row.size()) != w) throw DimensionError("ragged rows in ImageTensor::from_rows");
            int x = 0;
            for (double v : row) out(0, y, x++) = v;
            ++y;
        }
        return out;
    }

    int channels() const noexcept { return channels_; }
    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t plane_size() const noexcept { return static_cast<std::size_t>(height_) * width_; }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(int c, int y, int x) noexcept { return data_[index(c, y, x)]; }
    double operator()(int c, int y, int x) const noexcept { return data_[index(c, y, x)]; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    bool same_shape(const ImageTensor& o) const noexcept {
        return channels_ == o.channels_ && height_ == o.height_ && width_ == o.width_;
    }

    std::string shape_string() const {
        return std::to_string(channels_) + "x" + std::to_string(height_) + "x" + std::to_string(width_);
    }

    bool all_finite() const noexcept {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    ImageTensor& operator+=(const ImageTensor& o) {
        require_same_shape(o, "operator+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    ImageTensor& operator-=(const ImageTensor& o) {
        require_same_shape(o, "operator-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    ImageTensor& operator*=(double s) noexcept {
        for (double& v : data_) v *= s;
        return *this;
    }
    friend ImageTensor operator+(ImageTensor a, const ImageTensor& b) { return a += b; }
    friend ImageTensor operator-(ImageTensor a, const ImageTensor& b) { return a -= b; }
    friend ImageTensor operator*(ImageTensor a, double s) { return a *= s; }
    friend ImageTensor operator*(double s, ImageTensor a) { return a *= s; }

    void require_same_shape(const ImageTensor& o, const char* what) const {
        if (!same_shape(o)) {
            throw DimensionError(std::string(what) + ": shape mismatch " + shape_string() + " vs " + o.shape_string());
        }
    }

    friend bool operator==(const ImageTensor&, const ImageTensor&) = default;

private:
    std::size_t index(int c, int y, int x) const noexcept {
        return (static_cast<std::size_t>(c) * height_ + y) * width_ + x;
    }

    int channels_ = 0;
    int height_ = 0;
    int width_ = 0;
    std::vector<double> data_;
};

inline double max_abs_diff(const ImageTensor& a, const ImageTensor& b) {
    a.require_same_shape(b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

/// Root seed plus a path of stream indices selects an independent, reproducible stream.
/// The engine is mt19937_64 and the distributions are written out here, since the
/// standard library's distributions are not bit-stable across implementations.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed, std::initializer_list<std::uint64_t> path = {}) {
        std::vector<std::uint32_t> words;
        words.reserve(2 + 2 * path.size());
        auto push = [&](std::uint64_t v) {
            words.push_back(static_cast<std::uint32_t>(v & 0xffffffffu));
            words.push_back(static_cast<std::uint32_t>(v >> 32));
        };
        push(seed);
        for (std::uint64_t p : path) push(p);
        std::seed_seq seq(words.begin(), words.end());
        engine_.seed(seq);
    }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n) {
        if (n == 0) throw ParameterError("RngStream::index requires n > 0");
        // Rejection keeps the draw unbiased.
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t r = engine_();
        while (r >= limit) r = engine_();
        return static_cast<std::size_t>(r % n);
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller; the second variate of each pair is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    /// Normal with the given stddev, resampled until |z| <= bound standard deviations.
    double truncated_normal(double stddev, double bound = 2.0) {
        double z = normal();
        while (std::abs(z) > bound) z = normal();
        return z * stddev;
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Well-known stream tags so that independent consumers never share a stream.
namespace streams {
inline constexpr std::uint64_t kInit = 0x494e4954;      // parameter initialisation
inline constexpr std::uint64_t kStep = 0x53544550;      // per-step batch selection and label dropout
inline constexpr std::uint64_t kSample = 0x534d504c;    // per-(step, example) flow draws
inline constexpr std::uint64_t kNoise = 0x4e4f4953;     // sampler initial noise
inline constexpr std::uint64_t kData = 0x44415441;      // dataset synthesis
inline constexpr std::uint64_t kProbe = 0x50524f42;     // gradient-check probe selection
}  // namespace streams

}  // namespace freqflow
