#pragma once

// Two-branch velocity network.
//
//   frequency branch: [X^L | X^H] -> patch tokens -> pre-norm transformer trunk
//                      -> (h^L, h^H) projections -> heads V^L, V^H
//   integration gate: omega = sigmoid(MLP(h^L, h^H, t_emb)), h = omega h^L + (1 - omega) h^H
//   spatial branch:   conv3x3(X_t) + upsample(proj(h)) -> residual depthwise-conv blocks -> conv3x3 -> V
//
// Activations are NHWC row matrices; see autodiff.hpp.

#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "freqflow/autodiff.hpp"
#include "freqflow/core.hpp"
#include "freqflow/flowpath.hpp"
#include "freqflow/spectral.hpp"

namespace freqflow {

struct ModelConfig {
    int image_channels = 1;
    int image_size = 16;
    int num_classes = 8;
    int patch_size = 4;
    int freq_depth = 4;
    int freq_width = 64;
    int freq_heads = 4;
    int spatial_depth = 3;
    int spatial_width = 32;
    int time_embed_dim = 64;
    double sigma_low = 8.0;
    double sigma_high = 2.0;
    double label_dropout = 0.1;

    int grid() const noexcept { return image_size / patch_size; }
    int tokens() const noexcept { return grid() * grid(); }
    int pixels() const noexcept { return image_size * image_size; }
    int patch_features() const noexcept { return image_channels * patch_size * patch_size; }

    void validate() const {
        auto positive = [](int v, const char* name) {
            if (v < 1) throw ConfigError(std::string("model.") + name + " must be >= 1");
        };
        positive(image_channels, "image_channels");
        positive(image_size, "image_size");
        positive(num_classes, "num_classes");
        positive(patch_size, "patch_size");
        positive(freq_depth, "freq_depth");
        positive(freq_width, "freq_width");
        positive(freq_heads, "freq_heads");
        positive(spatial_depth, "spatial_depth");
        positive(spatial_width, "spatial_width");
        positive(time_embed_dim, "time_embed_dim");
        if (image_size % 2 != 0) throw ConfigError("model.image_size must be even");
        if (image_size % patch_size != 0) throw ConfigError("model.image_size must be divisible by model.patch_size");
        if (freq_width % freq_heads != 0) throw ConfigError("model.freq_width must be divisible by model.freq_heads");
        if (time_embed_dim % 2 != 0) throw ConfigError("model.time_embed_dim must be even");
        if (!(sigma_low > 0.0) || !(sigma_high > 0.0)) throw ConfigError("model sigmas must be positive");
        if (!(label_dropout >= 0.0 && label_dropout < 1.0)) throw ConfigError("label_dropout must lie in [0, 1)");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class ParamInit { TruncatedNormal, Zeros, Ones };

struct ParamSpec {
    std::string name;
    std::vector<int> shape;  // rank 1 or 2
    ParamInit init = ParamInit::TruncatedNormal;
    bool decay = false;      // decoupled weight decay applies

    long rows() const noexcept { return shape.size() == 1 ? 1 : shape[0]; }
    long cols() const noexcept { return shape.size() == 1 ? shape[0] : shape[1]; }
    long count() const noexcept { return rows() * cols(); }
};

inline constexpr double kInitStddev = 0.02;

/// Every named tensor of the network, in a fixed order.
inline std::vector<ParamSpec> param_schema(const ModelConfig& cfg) {
    cfg.validate();
    const int K = cfg.time_embed_dim, D = cfg.freq_width, E = cfg.spatial_width;
    const int C = cfg.image_channels, PF = cfg.patch_features();
    std::vector<ParamSpec> s;
    auto weight = [&](std::string name, int in, int out) {
        s.push_back({std::move(name), {in, out}, ParamInit::TruncatedNormal, true});
    };
    auto bias = [&](std::string name, int n) { s.push_back({std::move(name), {n}, ParamInit::Zeros, false}); };
    auto norm = [&](const std::string& prefix, int n) {
        s.push_back({prefix + ".gain", {n}, ParamInit::Ones, false});
        s.push_back({prefix + ".bias", {n}, ParamInit::Zeros, false});
    };

    weight("time.fc1.weight", K, K);
    bias("time.fc1.bias", K);
    weight("time.fc2.weight", K, K);
    bias("time.fc2.bias", K);
    s.push_back({"class.table", {cfg.num_classes + 1, K}, ParamInit::TruncatedNormal, false});

    weight("freq.patch.weight", 2 * PF, D);
    bias("freq.patch.bias", D);
    s.push_back({"freq.pos", {cfg.tokens(), D}, ParamInit::TruncatedNormal, false});
    weight("freq.cond.weight", K, D);
    bias("freq.cond.bias", D);
    for (int i = 0; i < cfg.freq_depth; ++i) {
        const std::string p = "freq.block" + std::to_string(i);
        norm(p + ".norm1", D);
        weight(p + ".attn.qkv.weight", D, 3 * D);
        bias(p + ".attn.qkv.bias", 3 * D);
        weight(p + ".attn.out.weight", D, D);
        bias(p + ".attn.out.bias", D);
        norm(p + ".norm2", D);
        weight(p + ".mlp.fc1.weight", D, 2 * D);
        bias(p + ".mlp.fc1.bias", 2 * D);
        weight(p + ".mlp.fc2.weight", 2 * D, D);
        bias(p + ".mlp.fc2.bias", D);
    }
    norm("freq.norm", D);
    weight("freq.split_low.weight", D, D);
    bias("freq.split_low.bias", D);
    weight("freq.split_high.weight", D, D);
    bias("freq.split_high.bias", D);

    weight("gate.fc1.weight", 2 * D + K, D);
    bias("gate.fc1.bias", D);
    weight("gate.fc2.weight", D, D);
    bias("gate.fc2.bias", D);

    s.push_back({"freq.head_low.weight", {D, PF}, ParamInit::Zeros, true});
    bias("freq.head_low.bias", PF);
    s.push_back({"freq.head_high.weight", {D, PF}, ParamInit::Zeros, true});
    bias("freq.head_high.bias", PF);

    weight("spatial.stem.weight", 9 * C, E);
    bias("spatial.stem.bias", E);
    weight("spatial.h_proj.weight", D, E);
    weight("spatial.cond.weight", K, E);
    bias("spatial.cond.bias", E);
    for (int j = 0; j < cfg.spatial_depth; ++j) {
        const std::string p = "spatial.block" + std::to_string(j);
        norm(p + ".norm", E);
        s.push_back({p + ".dw.weight", {9, E}, ParamInit::TruncatedNormal, true});
        bias(p + ".dw.bias", E);
        weight(p + ".pw1.weight", E, 2 * E);
        bias(p + ".pw1.bias", 2 * E);
        weight(p + ".pw2.weight", 2 * E, E);
        bias(p + ".pw2.bias", E);
    }
    norm("spatial.norm", E);
    weight("spatial.out.weight", 9 * E, C);
    bias("spatial.out.bias", C);
    return s;
}

/// Closed-form scalar parameter count (kept independent of param_schema).
inline long parameter_count(const ModelConfig& cfg) {
    const long K = cfg.time_embed_dim, D = cfg.freq_width, E = cfg.spatial_width;
    const long C = cfg.image_channels, PF = cfg.patch_features(), N = cfg.num_classes, T = cfg.tokens();
    const long time = 2 * (K * K + K);
    const long klass = (N + 1) * K;
    const long freq_in = 2 * PF * D + D + T * D + K * D + D;
    const long freq_blocks = cfg.freq_depth * (8 * D * D + 11 * D);
    const long freq_out = 2 * D + 2 * (D * D + D) + 2 * (D * PF + PF);
    const long gate = (2 * D + K) * D + D + D * D + D;
    const long spatial_in = 9 * C * E + E + D * E + K * E + E;
    const long spatial_blocks = cfg.spatial_depth * (4 * E * E + 15 * E);
    const long spatial_out = 2 * E + 9 * E * C + C;
    return time + klass + freq_in + freq_blocks + freq_out + gate + spatial_in + spatial_blocks + spatial_out;
}

/// Named, shape-tagged parameter tensors.
template <typename T>
class ModelParams {
public:
    ModelParams() = default;

    static ModelParams zeros(std::vector<ParamSpec> specs) {
        ModelParams p;
        p.specs_ = std::move(specs);
        for (std::size_t i = 0; i < p.specs_.size(); ++i) {
            const auto& s = p.specs_[i];
            if (!p.index_.emplace(s.name, i).second) throw ConfigError("duplicate parameter name " + s.name);
            p.values_.push_back(Matrix<T>::Zero(s.rows(), s.cols()));
        }
        return p;
    }

    /// Truncated-normal (std 0.02, +-2 sigma) weights, zero biases, unit norm gains.
    static ModelParams initialized(std::vector<ParamSpec> specs, RngStream& rng) {
        ModelParams p = zeros(std::move(specs));
        for (std::size_t i = 0; i < p.specs_.size(); ++i) {
            auto& m = p.values_[i];
            switch (p.specs_[i].init) {
                case ParamInit::TruncatedNormal:
                    for (long k = 0; k < m.size(); ++k) m.data()[k] = static_cast<T>(rng.truncated_normal(kInitStddev));
                    break;
                case ParamInit::Ones: m.setOnes(); break;
                case ParamInit::Zeros: break;
            }
        }
        return p;
    }

    std::size_t size() const noexcept { return specs_.size(); }
    const ParamSpec& spec(std::size_t i) const { return specs_.at(i); }
    const std::vector<ParamSpec>& specs() const noexcept { return specs_; }
    Matrix<T>& value(std::size_t i) { return values_.at(i); }
    const Matrix<T>& value(std::size_t i) const { return values_.at(i); }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t index_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw InputError("unknown parameter " + name);
        return it->second;
    }
    Matrix<T>& at(const std::string& name) { return values_[index_of(name)]; }
    const Matrix<T>& at(const std::string& name) const { return values_[index_of(name)]; }

    long scalar_count() const noexcept {
        long n = 0;
        for (const auto& v : values_) n += v.size();
        return n;
    }

    bool all_finite() const noexcept {
        for (const auto& v : values_)
            if (!v.allFinite()) return false;
        return true;
    }

    template <typename U>
    ModelParams<U> cast() const {
        ModelParams<U> out = ModelParams<U>::zeros(specs_);
        for (std::size_t i = 0; i < values_.size(); ++i) out.value(i) = values_[i].template cast<U>();
        return out;
    }

    /// Throws unless every schema tensor is present with the schema shape and finite.
    void validate(const std::vector<ParamSpec>& schema) const {
        for (const auto& s : schema) {
            if (!contains(s.name)) throw InputError("missing parameter " + s.name);
            const auto& m = at(s.name);
            if (m.rows() != s.rows() || m.cols() != s.cols()) throw DimensionError("parameter " + s.name + " has wrong shape");
            if (!m.allFinite()) throw NumericError("parameter " + s.name + " has non-finite values");
        }
        if (schema.size() != specs_.size()) throw InputError("parameter set does not match schema");
    }

private:
    std::vector<ParamSpec> specs_;
    std::vector<Matrix<T>> values_;
    std::map<std::string, std::size_t> index_;
};

template <typename T>
struct Model {
    ModelConfig config;
    ModelParams<T> params;

    static Model initialized(const ModelConfig& cfg, std::uint64_t seed) {
        RngStream rng(seed, {streams::kInit});
        return {cfg, ModelParams<T>::initialized(param_schema(cfg), rng)};
    }
    static Model zeros(const ModelConfig& cfg) { return {cfg, ModelParams<T>::zeros(param_schema(cfg))}; }
};

/// Parameters bound as graph leaves, looked up by name during the forward pass.
template <typename T>
class ParamBinding {
public:
    ParamBinding(ad::Graph<T>& g, const ModelParams<T>& params, bool trainable = true) {
        vars_.reserve(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            vars_.push_back(trainable ? g.parameter(params.value(i)) : g.constant(params.value(i)));
            index_.emplace(params.spec(i).name, i);
        }
    }
    ad::Var operator[](const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw InputError("unbound parameter " + name);
        return vars_[it->second];
    }
    ad::Var at(std::size_t i) const { return vars_.at(i); }
    std::size_t size() const noexcept { return vars_.size(); }

private:
    std::vector<ad::Var> vars_;
    std::map<std::string, std::size_t> index_;
};

/// d x H' x W' feature tensor (token features on the patch grid).
struct FeatureMap {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> data;

    double operator()(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
};

struct FrequencyBranchOutput {
    ImageTensor v_low_hat;
    ImageTensor v_high_hat;
    FeatureMap h;
    FeatureMap omega;
    FeatureMap h_low;
    FeatureMap h_high;
};

/// Batched network inputs. x_low/x_high are the band decompositions of x_t.
struct ForwardBatch {
    std::vector<ImageTensor> x_t;
    std::vector<ImageTensor> x_low;
    std::vector<ImageTensor> x_high;
    std::vector<double> t;
    std::vector<ClassCondition> labels;

    std::size_t size() const noexcept { return x_t.size(); }
};

/// Graph handles of one forward pass. Image-shaped nodes are NHWC [B*H*W, C];
/// token nodes are [B*T, D].
struct ForwardNodes {
    ad::Var v_hat;
    ad::Var v_low_hat;
    ad::Var v_high_hat;
    ad::Var h;
    ad::Var omega;
    ad::Var h_low;
    ad::Var h_high;
    ad::Var t_emb;
};

// ---------------------------------------------------------------------------
// Layout helpers

template <typename T>
Matrix<T> to_nhwc(std::span<const ImageTensor> images) {
    if (images.empty()) throw InputError("to_nhwc: empty batch");
    const ImageTensor& f = images.front();
    const long hw = static_cast<long>(f.plane_size());
    Matrix<T> m(static_cast<long>(images.size()) * hw, f.channels());
    for (std::size_t b = 0; b < images.size(); ++b) {
        if (!images[b].same_shape(f)) throw DimensionError("to_nhwc: ragged batch");
        for (int c = 0; c < f.channels(); ++c)
            for (int y = 0; y < f.height(); ++y)
                for (int x = 0; x < f.width(); ++x)
                    m(static_cast<long>(b) * hw + y * f.width() + x, c) = static_cast<T>(images[b](c, y, x));
    }
    return m;
}

template <typename T>
std::vector<ImageTensor> from_nhwc(const Matrix<T>& m, int channels, int height, int width) {
    const long hw = static_cast<long>(height) * width;
    if (m.cols() != channels || m.rows() % hw != 0) throw DimensionError("from_nhwc: shape mismatch");
    std::vector<ImageTensor> out;
    for (long b = 0; b < m.rows() / hw; ++b) {
        ImageTensor img(channels, height, width);
        for (int c = 0; c < channels; ++c)
            for (int y = 0; y < height; ++y)
                for (int x = 0; x < width; ++x) img(c, y, x) = static_cast<double>(m(b * hw + y * width + x, c));
        out.push_back(std::move(img));
    }
    return out;
}

template <typename T>
FeatureMap token_features(const Matrix<T>& tokens, long sample, int grid) {
    const long t = static_cast<long>(grid) * grid;
    FeatureMap f{static_cast<int>(tokens.cols()), grid, grid, {}};
    f.data.resize(static_cast<std::size_t>(f.channels) * t);
    for (int c = 0; c < f.channels; ++c)
        for (long k = 0; k < t; ++k) f.data[static_cast<std::size_t>(c) * t + k] = static_cast<double>(tokens(sample * t + k, c));
    return f;
}

template <typename T>
Matrix<T> feature_tokens(std::span<const FeatureMap> maps) {
    const FeatureMap& f = maps.front();
    const long t = static_cast<long>(f.height) * f.width;
    Matrix<T> m(static_cast<long>(maps.size()) * t, f.channels);
    for (std::size_t b = 0; b < maps.size(); ++b)
        for (int c = 0; c < f.channels; ++c)
            for (long k = 0; k < t; ++k)
                m(static_cast<long>(b) * t + k, c) = static_cast<T>(maps[b].data[static_cast<std::size_t>(c) * t + k]);
    return m;
}

namespace detail {

/// Flat gather index mapping NHWC pixel rows [B*S*S, C] to patch tokens
/// [B*T, P*P*C] (patch feature order: py, px, channel).
inline std::vector<long> patchify_index(int batch, int size, int patch, int channels) {
    const int grid = size / patch;
    const long pf = static_cast<long>(patch) * patch * channels;
    std::vector<long> idx(static_cast<std::size_t>(batch) * grid * grid * pf);
    for (int b = 0; b < batch; ++b)
        for (int gy = 0; gy < grid; ++gy)
            for (int gx = 0; gx < grid; ++gx)
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px)
                        for (int c = 0; c < channels; ++c) {
                            const long token = (static_cast<long>(b) * grid + gy) * grid + gx;
                            const long feat = (static_cast<long>(py) * patch + px) * channels + c;
                            const long pixel = (static_cast<long>(b) * size + gy * patch + py) * size + gx * patch + px;
                            idx[static_cast<std::size_t>(token * pf + feat)] = pixel * channels + c;
                        }
    return idx;
}

/// Inverse permutation of patchify_index.
inline std::vector<long> unpatchify_index(int batch, int size, int patch, int channels) {
    const std::vector<long> fwd = patchify_index(batch, size, patch, channels);
    std::vector<long> inv(fwd.size());
    for (std::size_t i = 0; i < fwd.size(); ++i) inv[static_cast<std::size_t>(fwd[i])] = static_cast<long>(i);
    return inv;
}

template <typename T>
Matrix<T> patchify(const Matrix<T>& nhwc, int batch, int size, int patch) {
    const int channels = static_cast<int>(nhwc.cols());
    const auto idx = patchify_index(batch, size, patch, channels);
    const int grid = size / patch;
    Matrix<T> out(static_cast<long>(batch) * grid * grid, static_cast<long>(patch) * patch * channels);
    for (std::size_t i = 0; i < idx.size(); ++i) out.data()[i] = nhwc.data()[idx[i]];
    return out;
}

/// Bilinear (half-pixel centres, edge clamp) upsampling matrix [out*out, in*in].
template <typename T>
Matrix<T> bilinear_matrix(int in, int out) {
    Matrix<T> m = Matrix<T>::Zero(static_cast<long>(out) * out, static_cast<long>(in) * in);
    auto taps = [&](int o, int& i0, int& i1, double& frac) {
        double src = (o + 0.5) * static_cast<double>(in) / out - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        i0 = static_cast<int>(std::floor(src));
        i1 = std::min(i0 + 1, in - 1);
        frac = src - i0;
    };
    for (int y = 0; y < out; ++y) {
        int y0, y1;
        double fy;
        taps(y, y0, y1, fy);
        for (int x = 0; x < out; ++x) {
            int x0, x1;
            double fx;
            taps(x, x0, x1, fx);
            const long row = static_cast<long>(y) * out + x;
            m(row, y0 * in + x0) += static_cast<T>((1 - fy) * (1 - fx));
            m(row, y0 * in + x1) += static_cast<T>((1 - fy) * fx);
            m(row, y1 * in + x0) += static_cast<T>(fy * (1 - fx));
            m(row, y1 * in + x1) += static_cast<T>(fy * fx);
        }
    }
    return m;
}

inline void require_batch(const ForwardBatch& batch, const ModelConfig& cfg) {
    const std::size_t n = batch.x_t.size();
    if (n == 0) throw InputError("forward: empty batch");
    if (batch.x_low.size() != n || batch.x_high.size() != n || batch.t.size() != n || batch.labels.size() != n) {
        throw DimensionError("forward: batch fields disagree in length");
    }
    auto check = [&](const ImageTensor& img, const char* what) {
        if (img.channels() != cfg.image_channels || img.height() != cfg.image_size || img.width() != cfg.image_size) {
            throw DimensionError(std::string("forward: ") + what + " has shape " + img.shape_string() +
                                 ", model expects " + std::to_string(cfg.image_channels) + "x" +
                                 std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
        }
    };
    for (std::size_t i = 0; i < n; ++i) {
        check(batch.x_t[i], "x_t");
        check(batch.x_low[i], "x_low");
        check(batch.x_high[i], "x_high");
    }
}

template <typename T>
void require_finite(const ad::Graph<T>& g, ad::Var v, const char* where) {
    if (!g.value(v).allFinite()) throw NumericError(std::string("non-finite activations in ") + where);
}

}  // namespace detail

/// Raw sinusoidal features of t * 1000: [sin(f_i s)..., cos(f_i s)...] with f_i
/// geometric from 1 down to 1e-4.
inline std::vector<double> time_embedding_features(double t, int dim) {
    if (dim <= 0 || dim % 2 != 0) throw ConfigError("time embedding dimension must be positive and even");
    if (!(t >= 0.0 && t <= 1.0)) throw ParameterError("time embedding: t must lie in [0, 1]");
    const int half = dim / 2;
    std::vector<double> out(static_cast<std::size_t>(dim));
    const double s = t * 1000.0;
    for (int i = 0; i < half; ++i) {
        const double freq = half > 1 ? std::exp(-std::log(10000.0) * i / (half - 1)) : 1.0;
        out[static_cast<std::size_t>(i)] = std::sin(s * freq);
        out[static_cast<std::size_t>(half + i)] = std::cos(s * freq);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Graph-level components

/// Sinusoidal features of each t, one row per example.
template <typename T>
ad::Var time_feature_nodes(ad::Graph<T>& g, const ModelConfig& cfg, std::span<const double> t) {
    const int k = cfg.time_embed_dim;
    Matrix<T> raw(static_cast<long>(t.size()), k);
    for (std::size_t b = 0; b < t.size(); ++b) {
        const auto f = time_embedding_features(t[b], k);
        for (int i = 0; i < k; ++i) raw(static_cast<long>(b), i) = static_cast<T>(f[static_cast<std::size_t>(i)]);
    }
    return g.constant(std::move(raw));
}

template <typename T>
ad::Var time_embedding_nodes(ad::Graph<T>& g, const ModelConfig& cfg, const ParamBinding<T>& p,
                             std::span<const double> t) {
    ad::Var x = time_feature_nodes(g, cfg, t);
    x = ad::silu(g, ad::linear(g, x, p["time.fc1.weight"], p["time.fc1.bias"]));
    return ad::linear(g, x, p["time.fc2.weight"], p["time.fc2.bias"]);
}

template <typename T>
ad::Var class_embedding_nodes(ad::Graph<T>& g, const ModelConfig& cfg, const ParamBinding<T>& p,
                              std::span<const ClassCondition> labels) {
    std::vector<int> rows;
    rows.reserve(labels.size());
    for (ClassCondition c : labels) rows.push_back(c.table_row(cfg.num_classes));
    return ad::embedding(g, p["class.table"], std::move(rows));
}

struct GateNodes {
    ad::Var omega;
    ad::Var h;
};

/// omega = sigmoid(fc2(silu(fc1([h_low | h_high | t_emb])))), h = omega h_low + (1 - omega) h_high.
template <typename T>
GateNodes adaptive_integration_nodes(ad::Graph<T>& g, const ParamBinding<T>& p, ad::Var h_low, ad::Var h_high,
                                     ad::Var t_emb, long tokens) {
    ad::Var t_tok = ad::repeat_rows(g, t_emb, tokens);
    ad::Var z = ad::concat_cols(g, {h_low, h_high, t_tok});
    z = ad::silu(g, ad::linear(g, z, p["gate.fc1.weight"], p["gate.fc1.bias"]));
    ad::Var omega = ad::sigmoid(g, ad::linear(g, z, p["gate.fc2.weight"], p["gate.fc2.bias"]));
    return {omega, ad::gate_mix(g, omega, h_low, h_high)};
}

struct FrequencyNodes {
    ad::Var v_low_hat;
    ad::Var v_high_hat;
    ad::Var h_low;
    ad::Var h_high;
    GateNodes gate;
};

template <typename T>
FrequencyNodes frequency_branch_nodes(ad::Graph<T>& g, const ModelConfig& cfg, const ParamBinding<T>& p,
                                      const Matrix<T>& x_low_nhwc, const Matrix<T>& x_high_nhwc, ad::Var t_emb,
                                      ad::Var c_emb, int batch) {
    const int T_ = cfg.tokens();
    Matrix<T> both(x_low_nhwc.rows(), x_low_nhwc.cols() + x_high_nhwc.cols());
    both << x_low_nhwc, x_high_nhwc;
    ad::Var tokens = g.constant(detail::patchify<T>(both, batch, cfg.image_size, cfg.patch_size));

    ad::Var x = ad::linear(g, tokens, p["freq.patch.weight"], p["freq.patch.bias"]);
    x = ad::add_tiled(g, x, p["freq.pos"]);
    ad::Var cond = ad::linear(g, ad::add(g, t_emb, c_emb), p["freq.cond.weight"], p["freq.cond.bias"]);
    x = ad::add_grouped(g, x, cond);

    for (int i = 0; i < cfg.freq_depth; ++i) {
        const std::string b = "freq.block" + std::to_string(i);
        ad::Var y = ad::layer_norm(g, x, p[b + ".norm1.gain"], p[b + ".norm1.bias"]);
        y = ad::linear(g, y, p[b + ".attn.qkv.weight"], p[b + ".attn.qkv.bias"]);
        y = ad::attention(g, y, batch, T_, cfg.freq_heads);
        y = ad::linear(g, y, p[b + ".attn.out.weight"], p[b + ".attn.out.bias"]);
        x = ad::add(g, x, y);
        y = ad::layer_norm(g, x, p[b + ".norm2.gain"], p[b + ".norm2.bias"]);
        y = ad::gelu(g, ad::linear(g, y, p[b + ".mlp.fc1.weight"], p[b + ".mlp.fc1.bias"]));
        y = ad::linear(g, y, p[b + ".mlp.fc2.weight"], p[b + ".mlp.fc2.bias"]);
        x = ad::add(g, x, y);
    }
    x = ad::layer_norm(g, x, p["freq.norm.gain"], p["freq.norm.bias"]);
    ad::Var h_low = ad::linear(g, x, p["freq.split_low.weight"], p["freq.split_low.bias"]);
    ad::Var h_high = ad::linear(g, x, p["freq.split_high.weight"], p["freq.split_high.bias"]);
    GateNodes gate = adaptive_integration_nodes(g, p, h_low, h_high, t_emb, T_);

    auto unpatch = std::make_shared<const std::vector<long>>(
        detail::unpatchify_index(batch, cfg.image_size, cfg.patch_size, cfg.image_channels));
    const long pixels = static_cast<long>(batch) * cfg.pixels();
    ad::Var vl = ad::linear(g, h_low, p["freq.head_low.weight"], p["freq.head_low.bias"]);
    ad::Var vh = ad::linear(g, h_high, p["freq.head_high.weight"], p["freq.head_high.bias"]);
    vl = ad::gather(g, vl, pixels, cfg.image_channels, unpatch);
    vh = ad::gather(g, vh, pixels, cfg.image_channels, unpatch);
    detail::require_finite(g, vl, "frequency branch (low head)");
    detail::require_finite(g, vh, "frequency branch (high head)");
    detail::require_finite(g, gate.h, "frequency branch (integration)");
    return {vl, vh, h_low, h_high, gate};
}

/// Spatial branch. `h` may be absent, in which case the merge is skipped.
template <typename T>
ad::Var spatial_branch_nodes(ad::Graph<T>& g, const ModelConfig& cfg, const ParamBinding<T>& p,
                             const Matrix<T>& x_t_nhwc, std::optional<ad::Var> h, ad::Var t_emb, ad::Var c_emb,
                             int batch) {
    const long S = cfg.image_size;
    ad::Var x = ad::conv3x3(g, g.constant(x_t_nhwc), p["spatial.stem.weight"], p["spatial.stem.bias"], batch, S, S);
    if (h) {
        ad::Var hp = ad::linear(g, *h, p["spatial.h_proj.weight"]);
        auto up = std::make_shared<const Matrix<T>>(detail::bilinear_matrix<T>(cfg.grid(), cfg.image_size));
        x = ad::add(g, x, ad::mix_rows(g, hp, up, batch));
    }
    ad::Var cond = ad::linear(g, ad::add(g, t_emb, c_emb), p["spatial.cond.weight"], p["spatial.cond.bias"]);
    x = ad::add_grouped(g, x, cond);
    for (int j = 0; j < cfg.spatial_depth; ++j) {
        const std::string b = "spatial.block" + std::to_string(j);
        ad::Var y = ad::layer_norm(g, x, p[b + ".norm.gain"], p[b + ".norm.bias"]);
        y = ad::depthwise3x3(g, y, p[b + ".dw.weight"], p[b + ".dw.bias"], batch, S, S);
        y = ad::gelu(g, ad::linear(g, y, p[b + ".pw1.weight"], p[b + ".pw1.bias"]));
        y = ad::linear(g, y, p[b + ".pw2.weight"], p[b + ".pw2.bias"]);
        x = ad::add(g, x, y);
    }
    x = ad::layer_norm(g, x, p["spatial.norm.gain"], p["spatial.norm.bias"]);
    ad::Var v = ad::conv3x3(g, x, p["spatial.out.weight"], p["spatial.out.bias"], batch, S, S);
    detail::require_finite(g, v, "spatial branch");
    return v;
}

/// Full batched forward; x_low/x_high must already hold the band decomposition of x_t.
template <typename T>
ForwardNodes forward_nodes(ad::Graph<T>& g, const ModelConfig& cfg, const ParamBinding<T>& p,
                           const ForwardBatch& batch) {
    detail::require_batch(batch, cfg);
    const int b = static_cast<int>(batch.size());
    ad::Var t_emb = time_embedding_nodes(g, cfg, p, batch.t);
    ad::Var c_emb = class_embedding_nodes(g, cfg, p, batch.labels);
    FrequencyNodes fb = frequency_branch_nodes(g, cfg, p, to_nhwc<T>(batch.x_low), to_nhwc<T>(batch.x_high), t_emb,
                                               c_emb, b);
    ad::Var v = spatial_branch_nodes(g, cfg, p, to_nhwc<T>(batch.x_t), fb.gate.h, t_emb, c_emb, b);
    return {v, fb.v_low_hat, fb.v_high_hat, fb.gate.h, fb.gate.omega, fb.h_low, fb.h_high, t_emb};
}

/// Builds a ForwardBatch by decomposing each x_t with the given masks.
inline ForwardBatch make_forward_batch(std::span<const ImageTensor> x_t, std::span<const double> t,
                                       std::span<const ClassCondition> labels, const FrequencyMaskPair& masks) {
    ForwardBatch batch;
    for (std::size_t i = 0; i < x_t.size(); ++i) {
        BandDecomposition d = decompose(x_t[i], masks);
        batch.x_t.push_back(x_t[i]);
        batch.x_low.push_back(std::move(d.low));
        batch.x_high.push_back(std::move(d.high));
    }
    batch.t.assign(t.begin(), t.end());
    batch.labels.assign(labels.begin(), labels.end());
    return batch;
}

inline FrequencyMaskPair model_masks(const ModelConfig& cfg) {
    return make_masks(cfg.image_size, cfg.image_size, cfg.sigma_low, cfg.sigma_high);
}

// ---------------------------------------------------------------------------
// Single-example entry points (inference graphs, outputs in double).

namespace detail {

template <typename T>
std::vector<double> row_vector(const Matrix<T>& m, long row) {
    std::vector<double> v(static_cast<std::size_t>(m.cols()));
    for (long c = 0; c < m.cols(); ++c) v[static_cast<std::size_t>(c)] = static_cast<double>(m(row, c));
    return v;
}

}  // namespace detail

template <typename T>
std::vector<double> time_embedding(double t, const Model<T>& model) {
    ad::Graph<T> g(false);
    ParamBinding<T> p(g, model.params, false);
    const double ts[] = {t};
    return detail::row_vector(g.value(time_embedding_nodes(g, model.config, p, ts)), 0);
}

template <typename T>
std::vector<double> class_embedding(ClassCondition c, const Model<T>& model) {
    const int row = c.table_row(model.config.num_classes);
    return detail::row_vector(model.params.at("class.table"), row);
}

template <typename T>
FrequencyBranchOutput frequency_branch(const ImageTensor& x_low, const ImageTensor& x_high, double t,
                                       ClassCondition c, const Model<T>& model) {
    const ModelConfig& cfg = model.config;
    ForwardBatch shape_check{{x_low}, {x_low}, {x_high}, {t}, {c}};
    detail::require_batch(shape_check, cfg);
    ad::Graph<T> g(false);
    ParamBinding<T> p(g, model.params, false);
    const double ts[] = {t};
    const ClassCondition cs[] = {c};
    ad::Var te = time_embedding_nodes(g, cfg, p, ts);
    ad::Var ce = class_embedding_nodes(g, cfg, p, cs);
    const ImageTensor lo[] = {x_low};
    const ImageTensor hi[] = {x_high};
    FrequencyNodes fb = frequency_branch_nodes(g, cfg, p, to_nhwc<T>(lo), to_nhwc<T>(hi), te, ce, 1);
    const int side = cfg.image_size;
    return {from_nhwc(g.value(fb.v_low_hat), cfg.image_channels, side, side).front(),
            from_nhwc(g.value(fb.v_high_hat), cfg.image_channels, side, side).front(),
            token_features(g.value(fb.gate.h), 0, cfg.grid()),
            token_features(g.value(fb.gate.omega), 0, cfg.grid()),
            token_features(g.value(fb.h_low), 0, cfg.grid()),
            token_features(g.value(fb.h_high), 0, cfg.grid())};
}

/// Returns (omega, h) for one example's token features.
template <typename T>
std::pair<FeatureMap, FeatureMap> adaptive_integration(const FeatureMap& h_low, const FeatureMap& h_high,
                                                       std::span<const double> t_emb, const Model<T>& model) {
    if (h_low.channels != h_high.channels || h_low.height != h_high.height || h_low.width != h_high.width) {
        throw DimensionError("adaptive_integration: h_low and h_high shapes differ");
    }
    if (static_cast<int>(t_emb.size()) != model.config.time_embed_dim) {
        throw DimensionError("adaptive_integration: time embedding has wrong length");
    }
    ad::Graph<T> g(false);
    ParamBinding<T> p(g, model.params, false);
    const FeatureMap lo[] = {h_low};
    const FeatureMap hi[] = {h_high};
    Matrix<T> te(1, static_cast<long>(t_emb.size()));
    for (std::size_t i = 0; i < t_emb.size(); ++i) te(0, static_cast<long>(i)) = static_cast<T>(t_emb[i]);
    GateNodes gate = adaptive_integration_nodes(g, p, g.constant(feature_tokens<T>(lo)), g.constant(feature_tokens<T>(hi)),
                                                g.constant(std::move(te)), static_cast<long>(h_low.height) * h_low.width);
    return {token_features(g.value(gate.omega), 0, h_low.height), token_features(g.value(gate.h), 0, h_low.height)};
}

template <typename T>
ImageTensor spatial_branch(const ImageTensor& x_t, const std::optional<FeatureMap>& h, double t, ClassCondition c,
                           const Model<T>& model) {
    const ModelConfig& cfg = model.config;
    ForwardBatch shape_check{{x_t}, {x_t}, {x_t}, {t}, {c}};
    detail::require_batch(shape_check, cfg);
    ad::Graph<T> g(false);
    ParamBinding<T> p(g, model.params, false);
    const double ts[] = {t};
    const ClassCondition cs[] = {c};
    ad::Var te = time_embedding_nodes(g, cfg, p, ts);
    ad::Var ce = class_embedding_nodes(g, cfg, p, cs);
    std::optional<ad::Var> hv;
    if (h) {
        if (h->channels != cfg.freq_width || h->height != cfg.grid() || h->width != cfg.grid()) {
            throw DimensionError("spatial_branch: h has the wrong shape");
        }
        const FeatureMap hs[] = {*h};
        hv = g.constant(feature_tokens<T>(hs));
    }
    const ImageTensor xs[] = {x_t};
    ad::Var v = spatial_branch_nodes(g, cfg, p, to_nhwc<T>(xs), hv, te, ce, 1);
    return from_nhwc(g.value(v), cfg.image_channels, cfg.image_size, cfg.image_size).front();
}

/// Decomposes x_t, runs both branches, and returns (V_hat, frequency-branch outputs).
template <typename T>
std::pair<ImageTensor, FrequencyBranchOutput> forward(const ImageTensor& x_t, double t, ClassCondition c,
                                                      const Model<T>& model, const FrequencyMaskPair& masks) {
    const ImageTensor xs[] = {x_t};
    const double ts[] = {t};
    const ClassCondition cs[] = {c};
    ForwardBatch batch = make_forward_batch(xs, ts, cs, masks);
    ad::Graph<T> g(false);
    ParamBinding<T> p(g, model.params, false);
    ForwardNodes n = forward_nodes(g, model.config, p, batch);
    const ModelConfig& cfg = model.config;
    const int side = cfg.image_size;
    FrequencyBranchOutput fb{from_nhwc(g.value(n.v_low_hat), cfg.image_channels, side, side).front(),
                             from_nhwc(g.value(n.v_high_hat), cfg.image_channels, side, side).front(),
                             token_features(g.value(n.h), 0, cfg.grid()),
                             token_features(g.value(n.omega), 0, cfg.grid()),
                             token_features(g.value(n.h_low), 0, cfg.grid()),
                             token_features(g.value(n.h_high), 0, cfg.grid())};
    return {from_nhwc(g.value(n.v_hat), cfg.image_channels, side, side).front(), std::move(fb)};
}

}  // namespace freqflow
