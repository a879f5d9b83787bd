#pragma once

// Synthetic class-conditional images and binary PGM/PPM I/O.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "freqflow/core.hpp"

namespace freqflow {

struct GeneratorSpec {
    int num_classes = 8;
    int per_class = 250;
    int size = 16;
    int channels = 1;
    std::uint64_t seed = 0;
    double blob_amplitude = 1.2;
    double pattern_amplitude = 0.35;

    friend bool operator==(const GeneratorSpec&, const GeneratorSpec&) = default;
};

struct Dataset {
    std::vector<ImageTensor> images;
    std::vector<int> labels;
    int num_classes = 0;
    GeneratorSpec generator_spec;

    std::size_t size() const noexcept { return images.size(); }

    void validate() const {
        if (images.size() != labels.size()) throw InputError("dataset: image and label counts differ");
        for (std::size_t i = 0; i < images.size(); ++i) {
            if (labels[i] < 0 || labels[i] >= num_classes) throw InputError("dataset: label out of range at " + std::to_string(i));
            if (!images[i].same_shape(images.front())) throw DimensionError("dataset: ragged image shapes");
            for (double v : images[i].data())
                if (!(v >= -1.0 && v <= 1.0)) throw InputError("dataset: pixel outside [-1, 1] at " + std::to_string(i));
        }
    }
};

/// Stripe (classes 0-3 of every 8) or checkerboard pattern frequency in cycles per image.
inline int pattern_cycles(int label, int size) { return std::max(1, (label % 4 + 1) * size / 8); }

/// One image of class `label`: a smooth blob at a class-dependent position and
/// scale plus a class-dependent high-frequency pattern with random phase.
inline ImageTensor synth_image(const GeneratorSpec& spec, int label, RngStream& rng) {
    const int s = spec.size;
    const double k = label;
    const double angle = 2.0 * 3.14159265358979323846 * k / spec.num_classes;
    const double cy = 0.5 * s + 0.25 * s * std::sin(angle) + 0.04 * s * rng.normal();
    const double cx = 0.5 * s + 0.25 * s * std::cos(angle) + 0.04 * s * rng.normal();
    const double scale = s * (0.12 + 0.04 * (label % 3)) * std::exp(0.1 * rng.normal());
    const double amp = spec.blob_amplitude * (1.0 + 0.1 * rng.normal());

    const double cycles = pattern_cycles(label, s);
    const double two_pi = 2.0 * 3.14159265358979323846;
    const double phase_x = two_pi * rng.uniform();
    const double phase_y = two_pi * rng.uniform();
    const bool checker = (label / 4) % 2 == 1;

    ImageTensor img(spec.channels, s, s);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
            const double blob = -0.6 + amp * std::exp(-(dx * dx + dy * dy) / (2.0 * scale * scale));
            double pattern = std::cos(two_pi * cycles * (x + 0.5) / s + phase_x);
            if (checker) pattern *= std::cos(two_pi * cycles * (y + 0.5) / s + phase_y);
            for (int c = 0; c < spec.channels; ++c) {
                const double tint =
                    spec.channels == 3 ? 1.0 + 0.3 * std::cos(angle + two_pi * c / 3.0) : 1.0;
                img(c, y, x) = std::clamp(tint * blob + spec.pattern_amplitude * pattern, -1.0, 1.0);
            }
        }
    return img;
}

/// Images are interleaved by class: index i has label i mod num_classes. Each
/// image draws from its own stream, so generation is order-independent.
inline Dataset synth_dataset(const GeneratorSpec& spec) {
    if (spec.num_classes < 2) throw InputError("synth_dataset: num_classes must be >= 2");
    if (spec.per_class < 1) throw InputError("synth_dataset: per_class must be >= 1");
    if (spec.size < 2 || spec.size % 2 != 0) throw DimensionError("synth_dataset: size must be even and >= 2");
    if (spec.channels != 1 && spec.channels != 3) throw DimensionError("synth_dataset: channels must be 1 or 3");
    Dataset d;
    d.num_classes = spec.num_classes;
    d.generator_spec = spec;
    const int total = spec.num_classes * spec.per_class;
    d.images.reserve(static_cast<std::size_t>(total));
    for (int i = 0; i < total; ++i) {
        const int label = i % spec.num_classes;
        RngStream rng(spec.seed, {streams::kData, static_cast<std::uint64_t>(i)});
        d.images.push_back(synth_image(spec, label, rng));
        d.labels.push_back(label);
    }
    return d;
}

inline Dataset synth_dataset(int num_classes, int per_class, int size, std::uint64_t seed, int channels = 1) {
    GeneratorSpec spec;
    spec.num_classes = num_classes;
    spec.per_class = per_class;
    spec.size = size;
    spec.channels = channels;
    spec.seed = seed;
    return synth_dataset(spec);
}

// ---------------------------------------------------------------------------
// PGM (P5, one channel) / PPM (P6, three channels), maxval 255.

inline std::uint8_t quantize_pixel(double v) {
    const double scaled = (std::clamp(v, -1.0, 1.0) + 1.0) * 0.5 * 255.0;
    return static_cast<std::uint8_t>(std::round(scaled));  // std::round is half-away-from-zero
}

inline double dequantize_pixel(std::uint8_t b) { return b / 255.0 * 2.0 - 1.0; }

inline std::string encode_ppm(const ImageTensor& image) {
    const int c = image.channels();
    if (c != 1 && c != 3) throw DimensionError("encode_ppm: expected 1 or 3 channels, got " + std::to_string(c));
    if (!image.all_finite()) throw NumericError("encode_ppm: non-finite pixel");
    std::string out = (c == 3 ? "P6\n" : "P5\n") + std::to_string(image.width()) + " " +
                      std::to_string(image.height()) + "\n255\n";
    out.reserve(out.size() + image.size());
    for (int y = 0; y < image.height(); ++y)
        for (int x = 0; x < image.width(); ++x)
            for (int ch = 0; ch < c; ++ch) out.push_back(static_cast<char>(quantize_pixel(image(ch, y, x))));
    return out;
}

inline ImageTensor decode_ppm(const std::string& bytes) {
    std::size_t pos = 0;
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&](const char* what) {
        skip_space();
        const std::size_t start = pos;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (pos == start) throw FormatError(std::string("ppm: malformed header (") + what + ")");
        if (pos - start > 9) throw FormatError(std::string("ppm: header value too large (") + what + ")");
        return std::stoi(bytes.substr(start, pos - start));
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
        throw FormatError("ppm: bad magic, expected P5 or P6");
    }
    const int channels = bytes[1] == '6' ? 3 : 1;
    pos = 2;
    const int width = read_int("width");
    const int height = read_int("height");
    const int maxval = read_int("maxval");
    if (width <= 0 || height <= 0) throw FormatError("ppm: non-positive dimensions");
    if (maxval != 255) throw FormatError("ppm: unsupported maxval " + std::to_string(maxval) + ", expected 255");
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        throw FormatError("ppm: missing separator after header");
    }
    ++pos;
    const std::size_t need = static_cast<std::size_t>(width) * height * channels;
    if (bytes.size() - pos < need) {
        throw FormatError("ppm: short payload, expected " + std::to_string(need) + " bytes, got " +
                          std::to_string(bytes.size() - pos));
    }
    ImageTensor img(channels, height, width);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < channels; ++c) img(c, y, x) = dequantize_pixel(static_cast<std::uint8_t>(bytes[pos++]));
    return img;
}

inline void write_ppm(const ImageTensor& image, const std::filesystem::path& path) {
    const std::string bytes = encode_ppm(image);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot open " + path.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw InputError("write failed for " + path.string());
}

inline ImageTensor read_ppm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    try {
        return decode_ppm(ss.str());
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

/// Loads every `<label>_<anything>.ppm|.pgm` file in `dir`, sorted by file name.
inline Dataset load_ppm_directory(const std::filesystem::path& dir, int num_classes) {
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        const auto ext = entry.path().extension().string();
        if (entry.is_regular_file() && (ext == ".ppm" || ext == ".pgm")) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw InputError("no .ppm/.pgm files in " + dir.string());
    Dataset d;
    d.num_classes = num_classes;
    for (const auto& p : files) {
        const std::string stem = p.stem().string();
        const auto us = stem.find('_');
        int label = -1;
        try {
            label = std::stoi(stem.substr(0, us));
        } catch (const std::exception&) {
            throw InputError(p.string() + ": file name must start with '<label>_'");
        }
        d.images.push_back(read_ppm(p));
        d.labels.push_back(label);
    }
    d.generator_spec.num_classes = num_classes;
    d.generator_spec.size = d.images.front().height();
    d.generator_spec.channels = d.images.front().channels();
    d.validate();
    return d;
}

}  // namespace freqflow
