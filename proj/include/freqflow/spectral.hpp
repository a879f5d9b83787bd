#pragma once

// 2D discrete Fourier analysis on centered spectra, Gaussian band masks,
// band decomposition and spectral error metrics. All image-level math is double.

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "freqflow/core.hpp"

namespace freqflow {

using Complex = std::complex<double>;

namespace detail {

inline void require_even_dims(int h, int w, const char* what) {
    if (h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0) {
        throw DimensionError(std::string(what) + ": height and width must be even and >= 2, got " +
                             std::to_string(h) + "x" + std::to_string(w));
    }
}

/// Twiddle table e^{sign * j * 2 pi k / n}, k in [0, n). Indexing with (u * x) mod n
/// keeps every kernel value exact to one rounding.
template <typename T>
std::vector<std::complex<T>> twiddles(int n, int sign) {
    std::vector<std::complex<T>> tw(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
        const double angle = sign * 2.0 * std::numbers::pi * k / n;
        tw[static_cast<std::size_t>(k)] = {static_cast<T>(std::cos(angle)), static_cast<T>(std::sin(angle))};
    }
    return tw;
}

/// Unnormalised separable DFT of one h x w plane in place (row-major), kernel
/// e^{sign * j 2 pi (u x / h + v y / w)}. sign = -1 is the forward transform.
template <typename T>
void dft2_plane(std::complex<T>* plane, int h, int w, int sign) {
    const auto tw_w = twiddles<T>(w, sign);
    const auto tw_h = twiddles<T>(h, sign);
    std::vector<std::complex<T>> line(static_cast<std::size_t>(std::max(h, w)));

    for (int y = 0; y < h; ++y) {
        std::complex<T>* row = plane + static_cast<std::size_t>(y) * w;
        for (int v = 0; v < w; ++v) {
            std::complex<T> acc{};
            for (int x = 0; x < w; ++x) acc += row[x] * tw_w[static_cast<std::size_t>((v * x) % w)];
            line[static_cast<std::size_t>(v)] = acc;
        }
        std::copy_n(line.begin(), w, row);
    }
    for (int x = 0; x < w; ++x) {
        for (int u = 0; u < h; ++u) {
            std::complex<T> acc{};
            for (int y = 0; y < h; ++y)
                acc += plane[static_cast<std::size_t>(y) * w + x] * tw_h[static_cast<std::size_t>((u * y) % h)];
            line[static_cast<std::size_t>(u)] = acc;
        }
        for (int u = 0; u < h; ++u) plane[static_cast<std::size_t>(u) * w + x] = line[static_cast<std::size_t>(u)];
    }
}

/// For even sizes fftshift and ifftshift coincide: index i maps to (i + n/2) mod n.
inline int shift_index(int i, int n) noexcept { return (i + n / 2) % n; }

}  // namespace detail

/// Complex C x H x W spectrum, stored centered (DC at (H/2, W/2)).
class Spectrum {
public:
    Spectrum() = default;
    Spectrum(int channels, int height, int width) : channels_(channels), height_(height), width_(width) {
        if (channels <= 0) throw DimensionError("Spectrum needs at least one channel");
        detail::require_even_dims(height, width, "Spectrum");
        data_.assign(static_cast<std::size_t>(channels) * height * width, Complex{});
    }

    int channels() const noexcept { return channels_; }
    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }

    /// Centered bin access: (c, H/2, W/2) is DC.
    Complex& operator()(int c, int u, int v) noexcept { return data_[index(c, u, v)]; }
    const Complex& operator()(int c, int u, int v) const noexcept { return data_[index(c, u, v)]; }

    /// Access by unshifted frequency index (DC at (0, 0)).
    const Complex& unshifted(int c, int u, int v) const noexcept {
        return data_[index(c, detail::shift_index(u, height_), detail::shift_index(v, width_))];
    }

    std::span<Complex> data() noexcept { return data_; }
    std::span<const Complex> data() const noexcept { return data_; }

private:
    std::size_t index(int c, int u, int v) const noexcept {
        return (static_cast<std::size_t>(c) * height_ + u) * width_ + v;
    }

    int channels_ = 0;
    int height_ = 0;
    int width_ = 0;
    std::vector<Complex> data_;
};

/// Real H x W grid on the centered frequency layout (masks, mean magnitudes).
struct RealGrid {
    int height = 0;
    int width = 0;
    std::vector<double> values;

    RealGrid() = default;
    RealGrid(int h, int w, double fill = 0.0) : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

    double& operator()(int u, int v) noexcept { return values[static_cast<std::size_t>(u) * width + v]; }
    double operator()(int u, int v) const noexcept { return values[static_cast<std::size_t>(u) * width + v]; }

    double sum() const noexcept {
        double s = 0.0;
        for (double v : values) s += v;
        return s;
    }
};

inline RealGrid full_band(int h, int w) { return RealGrid(h, w, 1.0); }

struct FrequencyMaskPair {
    RealGrid low;
    RealGrid high;
    double sigma_low = 0.0;
    double sigma_high = 0.0;

    int height() const noexcept { return low.height; }
    int width() const noexcept { return low.width; }
};

struct BandDecomposition {
    ImageTensor low;
    ImageTensor high;
    FrequencyMaskPair masks;
    double max_imag_residual = 0.0;
};

struct RealInverse {
    ImageTensor image;
    double max_imag_residual = 0.0;
};

inline constexpr double kSymmetryTolerance = 1e-4;
inline constexpr double kLogAmplitudeFloor = 1e-8;

namespace detail {

// Forward transform with an explicit exponent sign. The public entry point always
// uses -1; the self-check harness drives the other sign for fault injection.
inline Spectrum dft2_signed(const ImageTensor& image, int sign) {
    const int c = image.channels(), h = image.height(), w = image.width();
    require_even_dims(h, w, "dft2");
    if (!image.all_finite()) throw NumericError("dft2: non-finite input value");

    Spectrum out(c, h, w);
    std::vector<Complex> plane(static_cast<std::size_t>(h) * w);
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) plane[static_cast<std::size_t>(y) * w + x] = {image(ch, y, x), 0.0};
        dft2_plane(plane.data(), h, w, sign);
        for (int u = 0; u < h; ++u)
            for (int v = 0; v < w; ++v)
                out(ch, shift_index(u, h), shift_index(v, w)) = plane[static_cast<std::size_t>(u) * w + v];
    }
    return out;
}

}  // namespace detail

/// Per-channel unnormalised forward DFT, shifted so DC sits at (H/2, W/2).
inline Spectrum dft2(const ImageTensor& image) { return detail::dft2_signed(image, -1); }

/// Inverse of dft2 (unshift, 1/(HW) kernel), keeping the real part and reporting the
/// largest imaginary component that was discarded.
inline RealInverse idft2_with_residual(const Spectrum& spectrum) {
    const int c = spectrum.channels(), h = spectrum.height(), w = spectrum.width();
    detail::require_even_dims(h, w, "idft2");

    RealInverse result{ImageTensor(c, h, w), 0.0};
    std::vector<Complex> plane(static_cast<std::size_t>(h) * w);
    const double norm = 1.0 / (static_cast<double>(h) * w);
    for (int ch = 0; ch < c; ++ch) {
        for (int u = 0; u < h; ++u)
            for (int v = 0; v < w; ++v)
                plane[static_cast<std::size_t>(u) * w + v] = spectrum.unshifted(ch, u, v);
        detail::dft2_plane(plane.data(), h, w, +1);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const Complex z = plane[static_cast<std::size_t>(y) * w + x] * norm;
                result.image(ch, y, x) = z.real();
                result.max_imag_residual = std::max(result.max_imag_residual, std::abs(z.imag()));
            }
        }
    }
    if (!(result.max_imag_residual <= kSymmetryTolerance)) {
        throw SymmetryError("idft2: imaginary residual " + std::to_string(result.max_imag_residual) +
                            " exceeds tolerance; spectrum is not conjugate-symmetric");
    }
    return result;
}

inline ImageTensor idft2(const Spectrum& spectrum) { return idft2_with_residual(spectrum).image; }

inline double gaussian_low(int u, int v, int h, int w, double sigma) {
    const double du = u - h / 2.0;
    const double dv = v - w / 2.0;
    return std::exp(-(du * du + dv * dv) / (2.0 * sigma * sigma));
}

/// Centered Gaussian low-pass and complementary-form high-pass masks.
inline FrequencyMaskPair make_masks(int h, int w, double sigma_low, double sigma_high) {
    detail::require_even_dims(h, w, "make_masks");
    if (!(sigma_low > 0.0) || !(sigma_high > 0.0) || !std::isfinite(sigma_low) || !std::isfinite(sigma_high)) {
        throw ParameterError("make_masks: sigmas must be positive and finite");
    }
    FrequencyMaskPair masks{RealGrid(h, w), RealGrid(h, w), sigma_low, sigma_high};
    for (int u = 0; u < h; ++u) {
        for (int v = 0; v < w; ++v) {
            masks.low(u, v) = gaussian_low(u, v, h, w, sigma_low);
            masks.high(u, v) = 1.0 - gaussian_low(u, v, h, w, sigma_high);
        }
    }
    return masks;
}

inline Spectrum apply_mask(const Spectrum& spectrum, const RealGrid& mask) {
    if (mask.height != spectrum.height() || mask.width != spectrum.width()) {
        throw DimensionError("apply_mask: mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                             " does not match spectrum " + std::to_string(spectrum.height()) + "x" +
                             std::to_string(spectrum.width()));
    }
    Spectrum out = spectrum;
    for (int c = 0; c < spectrum.channels(); ++c)
        for (int u = 0; u < spectrum.height(); ++u)
            for (int v = 0; v < spectrum.width(); ++v) out(c, u, v) *= mask(u, v);
    return out;
}

/// X^L = idft2(low * dft2(X)), X^H = idft2(high * dft2(X)); masks broadcast across channels.
inline BandDecomposition decompose(const ImageTensor& image, const FrequencyMaskPair& masks) {
    if (masks.height() != image.height() || masks.width() != image.width() || masks.high.height != masks.height() ||
        masks.high.width != masks.width()) {
        throw DimensionError("decompose: masks " + std::to_string(masks.height()) + "x" +
                             std::to_string(masks.width()) + " do not match image " + image.shape_string());
    }
    const Spectrum spectrum = dft2(image);
    RealInverse low = idft2_with_residual(apply_mask(spectrum, masks.low));
    RealInverse high = idft2_with_residual(apply_mask(spectrum, masks.high));
    return {std::move(low.image), std::move(high.image), masks,
            std::max(low.max_imag_residual, high.max_imag_residual)};
}

namespace detail {

inline void require_mask_matches(const RealGrid& mask, int h, int w, const char* what) {
    if (mask.height != h || mask.width != w) {
        throw DimensionError(std::string(what) + ": band mask " + std::to_string(mask.height) + "x" +
                             std::to_string(mask.width) + " does not match images " + std::to_string(h) + "x" +
                             std::to_string(w));
    }
}

/// Per-bin mean of |F| over every image and channel. Each bin's samples are sorted
/// before summation so the result depends only on the multiset of images.
inline RealGrid mean_magnitude(std::span<const ImageTensor> images) {
    const ImageTensor& first = images.front();
    const int h = first.height(), w = first.width();
    const std::size_t bins = static_cast<std::size_t>(h) * w;
    std::vector<std::vector<double>> per_bin(bins);
    for (const auto& img : images) {
        if (!img.same_shape(first)) {
            throw DimensionError("frequency statistics: image " + img.shape_string() + " vs " + first.shape_string());
        }
        const Spectrum s = dft2(img);
        for (int c = 0; c < s.channels(); ++c)
            for (int u = 0; u < h; ++u)
                for (int v = 0; v < w; ++v)
                    per_bin[static_cast<std::size_t>(u) * w + v].push_back(std::abs(s(c, u, v)));
    }
    RealGrid mean(h, w);
    for (std::size_t b = 0; b < bins; ++b) {
        auto& samples = per_bin[b];
        std::sort(samples.begin(), samples.end());
        double acc = 0.0;
        for (double m : samples) acc += m;
        mean.values[b] = acc / static_cast<double>(samples.size());
    }
    return mean;
}

}  // namespace detail

/// Signed, in-band normalised gap between mean spectral magnitudes of two image sets:
///   sum m (E|F_real| - E|F_gen|) / sum m E|F_real|.
inline double frequency_error(std::span<const ImageTensor> real_images, std::span<const ImageTensor> gen_images,
                              const RealGrid& band_mask) {
    if (real_images.empty() || gen_images.empty()) throw InputError("frequency_error: image sets must be non-empty");
    if (!real_images.front().same_shape(gen_images.front())) {
        throw DimensionError("frequency_error: real " + real_images.front().shape_string() + " vs generated " +
                             gen_images.front().shape_string());
    }
    detail::require_mask_matches(band_mask, real_images.front().height(), real_images.front().width(),
                                 "frequency_error");
    const RealGrid real_mean = detail::mean_magnitude(real_images);
    const RealGrid gen_mean = detail::mean_magnitude(gen_images);
    double numerator = 0.0, denominator = 0.0;
    for (std::size_t b = 0; b < band_mask.values.size(); ++b) {
        numerator += band_mask.values[b] * (real_mean.values[b] - gen_mean.values[b]);
        denominator += band_mask.values[b] * real_mean.values[b];
    }
    if (numerator == 0.0) return 0.0;
    if (denominator == 0.0) throw InputError("frequency_error: real set has no in-band spectral energy");
    return numerator / denominator;
}

/// log(eps + band-weighted mean of |dft2(image)|), averaged over channels.
inline double band_log_amplitude(const ImageTensor& image, const RealGrid& band_mask) {
    detail::require_mask_matches(band_mask, image.height(), image.width(), "band_log_amplitude");
    const Spectrum s = dft2(image);
    double weighted = 0.0;
    for (int c = 0; c < s.channels(); ++c)
        for (int u = 0; u < s.height(); ++u)
            for (int v = 0; v < s.width(); ++v) weighted += band_mask(u, v) * std::abs(s(c, u, v));
    const double weight = band_mask.sum() * s.channels();
    if (weight <= 0.0) throw InputError("band_log_amplitude: band mask has zero total weight");
    return std::log(kLogAmplitudeFloor + weighted / weight);
}

}  // namespace freqflow
