#pragma once

// Dual-domain losses, the weighted total objective, AdamW with linear warmup,
// finite-difference gradient checks and the binary checkpoint format.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "freqflow/autodiff.hpp"
#include "freqflow/core.hpp"
#include "freqflow/data.hpp"
#include "freqflow/flowpath.hpp"
#include "freqflow/model.hpp"
#include "freqflow/spectral.hpp"

namespace freqflow {

struct LossToggles {
    bool use_low_supervision = true;
    bool use_high_supervision = true;
    bool use_freq_domain_loss = true;

    friend bool operator==(const LossToggles&, const LossToggles&) = default;
};

struct TrainConfig {
    double alpha = 0.5;
    double learning_rate = 2e-4;
    double beta1 = 0.99;
    double beta2 = 0.99;
    double adam_eps = 1e-8;
    double weight_decay = 0.03;
    int batch_size = 64;
    int warmup_steps = 50;
    int total_steps = 2000;
    double label_dropout = 0.1;
    std::uint64_t seed = 0;
    LossToggles loss;
    int checkpoint_every = 500;  // 0 disables periodic checkpoints

    void validate() const {
        if (!(alpha >= 0.0)) throw ConfigError("train.alpha must be >= 0");
        if (!(learning_rate >= 0.0)) throw ConfigError("train.learning_rate must be >= 0");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
            throw ConfigError("train.adam betas must lie in [0, 1)");
        }
        if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be > 0");
        if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
        if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
        if (warmup_steps < 0) throw ConfigError("train.warmup_steps must be >= 0");
        if (total_steps < 0) throw ConfigError("train.total_steps must be >= 0");
        if (!(label_dropout >= 0.0 && label_dropout < 1.0)) throw ConfigError("train.label_dropout must lie in [0, 1)");
        if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
    }
};

// ---------------------------------------------------------------------------
// Losses on single images (double precision).

inline double spatial_loss(const ImageTensor& pred, const ImageTensor& target) {
    pred.require_same_shape(target, "spatial_loss");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred.data()[i] - target.data()[i];
        s += d * d;
    }
    return s / static_cast<double>(pred.size());
}

inline double frequency_loss(const ImageTensor& pred, const ImageTensor& target) {
    pred.require_same_shape(target, "frequency_loss");
    const Spectrum f = dft2(pred - target);
    double s = 0.0;
    for (const auto& z : f.data()) s += std::norm(z);
    return s / static_cast<double>(pred.size());
}

enum LossTerm : int { kLossS = 0, kLossF, kLossSLow, kLossSHigh, kLossFLow, kLossFHigh, kLossTermCount };

inline constexpr std::array<const char*, kLossTermCount> kLossTermNames = {"loss_s",  "loss_f",  "loss_sL",
                                                                            "loss_sH", "loss_fL", "loss_fH"};

/// Per-term weights; a zero weight marks a disabled term.
inline std::array<double, kLossTermCount> loss_weights(const TrainConfig& cfg) {
    std::array<double, kLossTermCount> w{};
    w[kLossS] = 1.0;
    w[kLossF] = 1.0;
    if (cfg.loss.use_low_supervision) {
        w[kLossSLow] = cfg.alpha;
        if (cfg.loss.use_freq_domain_loss) w[kLossFLow] = cfg.alpha;
    }
    if (cfg.loss.use_high_supervision) {
        w[kLossSHigh] = cfg.alpha;
        if (cfg.loss.use_freq_domain_loss) w[kLossFHigh] = cfg.alpha;
    }
    return w;
}

inline bool term_enabled(const TrainConfig& cfg, int term) {
    if (term == kLossS || term == kLossF) return true;
    const bool low = term == kLossSLow || term == kLossFLow;
    const bool freq = term == kLossFLow || term == kLossFHigh;
    return (low ? cfg.loss.use_low_supervision : cfg.loss.use_high_supervision) && (!freq || cfg.loss.use_freq_domain_loss);
}

struct LossBreakdown {
    double total = 0.0;
    std::array<double, kLossTermCount> terms{};  // disabled terms are 0
};

inline LossBreakdown total_loss(const ImageTensor& v_hat, const FrequencyBranchOutput& fb, const FlowSample& sample,
                                const TrainConfig& cfg) {
    const auto w = loss_weights(cfg);
    LossBreakdown out;
    auto set = [&](int term, auto&& fn) {
        if (term_enabled(cfg, term)) out.terms[static_cast<std::size_t>(term)] = fn();
    };
    set(kLossS, [&] { return spatial_loss(v_hat, sample.v); });
    set(kLossF, [&] { return frequency_loss(v_hat, sample.v); });
    set(kLossSLow, [&] { return spatial_loss(fb.v_low_hat, sample.v_low); });
    set(kLossSHigh, [&] { return spatial_loss(fb.v_high_hat, sample.v_high); });
    set(kLossFLow, [&] { return frequency_loss(fb.v_low_hat, sample.v_low); });
    set(kLossFHigh, [&] { return frequency_loss(fb.v_high_hat, sample.v_high); });
    for (int i = 0; i < kLossTermCount; ++i) out.total += w[static_cast<std::size_t>(i)] * out.terms[static_cast<std::size_t>(i)];
    return out;
}

// ---------------------------------------------------------------------------
// Batched loss graph.

template <typename T>
struct LossNodes {
    ad::Var total;
    std::array<ad::Var, kLossTermCount> terms{};  // invalid when disabled
    ForwardNodes forward;
};

/// Mean total loss over `samples`, conditioned on `labels` (already dropout-applied).
template <typename T>
LossNodes<T> loss_nodes(ad::Graph<T>& g, const ModelConfig& mcfg, const ParamBinding<T>& p,
                        std::span<const FlowSample> samples, std::span<const ClassCondition> labels,
                        const TrainConfig& cfg) {
    if (samples.empty()) throw InputError("loss: empty batch");
    if (labels.size() != samples.size()) throw DimensionError("loss: label count differs from batch size");
    ForwardBatch batch;
    std::vector<ImageTensor> v, vl, vh;
    for (const FlowSample& s : samples) {
        batch.x_t.push_back(s.x_t);
        batch.x_low.push_back(s.x_t_low);
        batch.x_high.push_back(s.x_t_high);
        batch.t.push_back(s.t);
        v.push_back(s.v);
        vl.push_back(s.v_low);
        vh.push_back(s.v_high);
    }
    batch.labels.assign(labels.begin(), labels.end());
    LossNodes<T> out;
    out.forward = forward_nodes(g, mcfg, p, batch);

    const long b = static_cast<long>(samples.size()), side = mcfg.image_size;
    ad::Var tv = g.constant(to_nhwc<T>(v));
    out.terms[kLossS] = ad::mse(g, out.forward.v_hat, tv);
    out.terms[kLossF] = ad::spectral_mse(g, out.forward.v_hat, tv, b, side, side);
    if (term_enabled(cfg, kLossSLow) || term_enabled(cfg, kLossFLow)) {
        ad::Var tl = g.constant(to_nhwc<T>(vl));
        if (term_enabled(cfg, kLossSLow)) out.terms[kLossSLow] = ad::mse(g, out.forward.v_low_hat, tl);
        if (term_enabled(cfg, kLossFLow)) out.terms[kLossFLow] = ad::spectral_mse(g, out.forward.v_low_hat, tl, b, side, side);
    }
    if (term_enabled(cfg, kLossSHigh) || term_enabled(cfg, kLossFHigh)) {
        ad::Var th = g.constant(to_nhwc<T>(vh));
        if (term_enabled(cfg, kLossSHigh)) out.terms[kLossSHigh] = ad::mse(g, out.forward.v_high_hat, th);
        if (term_enabled(cfg, kLossFHigh)) out.terms[kLossFHigh] = ad::spectral_mse(g, out.forward.v_high_hat, th, b, side, side);
    }
    const auto w = loss_weights(cfg);
    std::vector<ad::Var> active;
    std::vector<T> weights;
    for (int i = 0; i < kLossTermCount; ++i) {
        const auto k = static_cast<std::size_t>(i);
        if (out.terms[k].valid()) {
            active.push_back(out.terms[k]);
            weights.push_back(static_cast<T>(w[k]));
        }
    }
    out.total = ad::weighted_sum(g, std::move(active), std::move(weights));
    return out;
}

// ---------------------------------------------------------------------------
// AdamW.

template <typename T>
struct AdamState {
    ModelParams<T> m;
    ModelParams<T> v;
    std::uint64_t step = 0;  // completed updates

    static AdamState zeros(const std::vector<ParamSpec>& schema) {
        return {ModelParams<T>::zeros(schema), ModelParams<T>::zeros(schema), 0};
    }
};

struct AdamHyper {
    double lr = 2e-4;
    double beta1 = 0.99;
    double beta2 = 0.99;
    double eps = 1e-8;
    double weight_decay = 0.03;
};

/// Linear warmup from lr/warmup to lr over the first `warmup_steps` updates, then constant.
inline double learning_rate_at(const TrainConfig& cfg, std::uint64_t step) {
    if (cfg.warmup_steps <= 0) return cfg.learning_rate;
    const double frac = std::min(1.0, static_cast<double>(step + 1) / cfg.warmup_steps);
    return cfg.learning_rate * frac;
}

/// One decoupled-weight-decay Adam update applied elementwise; `t` is the 1-based update count.
template <typename T, typename Derived>
void adamw_update(Eigen::MatrixBase<Derived>& p, Matrix<T>& m, Matrix<T>& v, const Matrix<T>& g, std::uint64_t t,
                  const AdamHyper& h, bool decay) {
    const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2), lr = static_cast<T>(h.lr);
    const T bc1 = static_cast<T>(1.0 - std::pow(h.beta1, static_cast<double>(t)));
    const T bc2 = static_cast<T>(1.0 - std::pow(h.beta2, static_cast<double>(t)));
    m.array() = b1 * m.array() + (T(1) - b1) * g.array();
    v.array() = b2 * v.array() + (T(1) - b2) * g.array().square();
    if (decay && h.weight_decay != 0.0) p.derived().array() *= T(1) - lr * static_cast<T>(h.weight_decay);
    p.derived().array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + static_cast<T>(h.eps));
}

// ---------------------------------------------------------------------------
// Training step.

struct StepMetrics {
    std::uint64_t step = 0;  // 1-based index of the update that produced these values
    LossBreakdown loss;
    double grad_norm = 0.0;
    double mean_omega = 0.0;
    double lr = 0.0;
};

inline constexpr double kParsevalTolerance = 1e-3;

/// Draws the step's batch: indices (with replacement) from the step stream, then
/// an independent flow draw per batch slot.
inline std::vector<FlowSample> assemble_batch(const Dataset& data, const TrainConfig& cfg,
                                              const FrequencyMaskPair& masks, std::uint64_t step) {
    if (data.size() == 0) throw InputError("training: empty dataset");
    RngStream pick(cfg.seed, {streams::kStep, step});
    std::vector<FlowSample> batch;
    batch.reserve(static_cast<std::size_t>(cfg.batch_size));
    for (int b = 0; b < cfg.batch_size; ++b) {
        const std::size_t i = pick.index(data.size());
        RngStream draw(cfg.seed, {streams::kSample, step, static_cast<std::uint64_t>(b)});
        batch.push_back(draw_sample(data.images[i], ClassCondition::of(data.labels[i]), draw, masks));
    }
    return batch;
}

/// Replaces each label by NULL with probability p, from the step's dropout stream.
inline std::vector<ClassCondition> drop_labels(std::span<const FlowSample> batch, double p, std::uint64_t seed,
                                               std::uint64_t step) {
    RngStream rng(seed, {streams::kStep, step, 1});
    std::vector<ClassCondition> out;
    out.reserve(batch.size());
    for (const FlowSample& s : batch) out.push_back(rng.bernoulli(p) ? ClassCondition::null() : s.label);
    return out;
}

template <typename T>
StepMetrics train_step(Model<T>& model, AdamState<T>& opt, std::span<const FlowSample> batch, const TrainConfig& cfg,
                       std::uint64_t step) {
    const std::vector<ClassCondition> labels = drop_labels(batch, cfg.label_dropout, cfg.seed, step);
    ad::Graph<T> g(true);
    ParamBinding<T> p(g, model.params, true);
    LossNodes<T> ln = loss_nodes(g, model.config, p, batch, labels, cfg);

    StepMetrics out;
    out.step = step + 1;
    for (int i = 0; i < kLossTermCount; ++i) {
        const auto k = static_cast<std::size_t>(i);
        if (!ln.terms[k].valid()) continue;
        const double v = static_cast<double>(g.scalar(ln.terms[k]));
        if (!std::isfinite(v)) {
            throw NumericError(std::string("non-finite loss term ") + kLossTermNames[k] + " at step " +
                               std::to_string(step + 1));
        }
        out.loss.terms[k] = v;
    }
    out.loss.total = static_cast<double>(g.scalar(ln.total));
    if (!std::isfinite(out.loss.total)) throw NumericError("non-finite total loss at step " + std::to_string(step + 1));

    const double hw = static_cast<double>(model.config.pixels());
    const double lf = out.loss.terms[kLossF], ls = out.loss.terms[kLossS];
    if (std::abs(lf - hw * ls) > kParsevalTolerance * std::max(lf, 1e-12)) {
        throw NumericError("Parseval self-check failed at step " + std::to_string(step + 1) + ": loss_f=" +
                           std::to_string(lf) + " vs H*W*loss_s=" + std::to_string(hw * ls));
    }

    out.mean_omega = static_cast<double>(g.value(ln.forward.omega).template cast<double>().mean());
    g.backward(ln.total);

    double sq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (g.has_grad(p.at(i))) sq += g.grad(p.at(i)).template cast<double>().squaredNorm();
    out.grad_norm = std::sqrt(sq);

    out.lr = learning_rate_at(cfg, step);
    const AdamHyper h{out.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay};
    opt.step += 1;
    for (std::size_t i = 0; i < p.size(); ++i) {
        Matrix<T>& value = model.params.value(i);
        const Matrix<T> grad = g.has_grad(p.at(i)) ? g.grad(p.at(i)) : Matrix<T>::Zero(value.rows(), value.cols());
        adamw_update<T>(value, opt.m.value(i), opt.v.value(i), grad, opt.step, h, model.params.spec(i).decay);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check (64-bit).

struct ProbeResult {
    std::string name;
    long index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradientCheckReport {
    std::vector<ProbeResult> probes;
    double max_rel_error = 0.0;
    std::vector<std::string> failures;  // "name[index]" of probes above the failure threshold

    bool ok() const noexcept { return failures.empty(); }
};

using GradLossFn = std::function<ad::Var(ad::Graph<double>&, const ParamBinding<double>&)>;

inline constexpr double kFiniteDifferenceStep = 1e-5;
inline constexpr double kGradientFailureThreshold = 1e-3;
// Finite differences carry ~1e-10 absolute noise; below this magnitude the
// relative error is measured against the floor instead.
inline constexpr double kGradientRelFloor = 1e-6;

inline double gradient_rel_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kGradientRelFloor});
}

/// Picks `probes` (tensor, element) pairs uniformly, tensor first, and compares
/// the analytic gradient with a central difference of step `h`.
inline GradientCheckReport gradient_check(const ModelParams<double>& params, const GradLossFn& loss_fn, int probes,
                                          RngStream& rng, double h = kFiniteDifferenceStep) {
    ad::Graph<double> g(true);
    ParamBinding<double> bound(g, params, true);
    ad::Var root = loss_fn(g, bound);
    g.backward(root);

    auto evaluate = [&](const ModelParams<double>& ps) {
        ad::Graph<double> ge(false);
        ParamBinding<double> b(ge, ps, false);
        return ge.scalar(loss_fn(ge, b));
    };

    GradientCheckReport report;
    ModelParams<double> work = params;
    for (int k = 0; k < probes; ++k) {
        const std::size_t ti = rng.index(params.size());
        const long ei = static_cast<long>(rng.index(static_cast<std::size_t>(params.value(ti).size())));
        ProbeResult r;
        r.name = params.spec(ti).name;
        r.index = ei;
        r.analytic = g.has_grad(bound.at(ti)) ? g.grad(bound.at(ti)).data()[ei] : 0.0;
        double& slot = work.value(ti).data()[ei];
        const double orig = slot;
        slot = orig + h;
        const double up = evaluate(work);
        slot = orig - h;
        const double down = evaluate(work);
        slot = orig;
        r.numeric = (up - down) / (2.0 * h);
        r.rel_error = gradient_rel_error(r.analytic, r.numeric);
        report.max_rel_error = std::max(report.max_rel_error, r.rel_error);
        if (!(r.rel_error <= kGradientFailureThreshold)) report.failures.push_back(r.name + "[" + std::to_string(ei) + "]");
        report.probes.push_back(std::move(r));
    }
    return report;
}

/// Full training objective on a fixed batch as a gradient-check loss.
inline GradLossFn training_loss_fn(const ModelConfig& mcfg, std::vector<FlowSample> samples,
                                   std::vector<ClassCondition> labels, const TrainConfig& cfg) {
    return [mcfg, samples = std::move(samples), labels = std::move(labels), cfg](ad::Graph<double>& g,
                                                                                const ParamBinding<double>& p) {
        return loss_nodes(g, mcfg, p, std::span<const FlowSample>(samples), std::span<const ClassCondition>(labels), cfg)
            .total;
    };
}

// ---------------------------------------------------------------------------
// Checkpoints.
//
//   "FQFLCKPT" | u32 version | u32 len, model config "key=value\n"... | u64 step
//   then records until EOF: u32 name_len, name, u32 rank, u32 dims[rank], f32 LE payload
//
// Record names are "param/<name>", "adam_m/<name>", "adam_v/<name>".

inline constexpr char kCheckpointMagic[8] = {'F', 'Q', 'F', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f32(std::string& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
}

class ByteReader {
public:
    explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}

    bool at_end() const noexcept { return pos_ == bytes_.size(); }

    std::uint32_t u32(const std::string& what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64(const std::string& what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }
    float f32(const std::string& what) {
        const std::uint32_t bits = u32(what);
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }
    std::string bytes(std::size_t n, const std::string& what) {
        need(n, what);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

private:
    void need(std::size_t n, const std::string& what) const {
        if (bytes_.size() - pos_ < n) throw FormatError("checkpoint truncated in " + what);
    }
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_model_config(const ModelConfig& c) {
    std::ostringstream s;
    s << "image_channels=" << c.image_channels << "\n"
      << "image_size=" << c.image_size << "\n"
      << "num_classes=" << c.num_classes << "\n"
      << "patch_size=" << c.patch_size << "\n"
      << "freq_depth=" << c.freq_depth << "\n"
      << "freq_width=" << c.freq_width << "\n"
      << "freq_heads=" << c.freq_heads << "\n"
      << "spatial_depth=" << c.spatial_depth << "\n"
      << "spatial_width=" << c.spatial_width << "\n"
      << "time_embed_dim=" << c.time_embed_dim << "\n"
      << "sigma_low=" << detail::format_double(c.sigma_low) << "\n"
      << "sigma_high=" << detail::format_double(c.sigma_high) << "\n"
      << "label_dropout=" << detail::format_double(c.label_dropout) << "\n";
    return s.str();
}

inline ModelConfig parse_model_config(const std::string& text) {
    ModelConfig c;
    std::istringstream in(text);
    std::string line;
    std::vector<std::string> seen;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("checkpoint config: malformed line '" + line + "'");
        const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        seen.push_back(key);
        try {
            if (key == "image_channels") c.image_channels = std::stoi(val);
            else if (key == "image_size") c.image_size = std::stoi(val);
            else if (key == "num_classes") c.num_classes = std::stoi(val);
            else if (key == "patch_size") c.patch_size = std::stoi(val);
            else if (key == "freq_depth") c.freq_depth = std::stoi(val);
            else if (key == "freq_width") c.freq_width = std::stoi(val);
            else if (key == "freq_heads") c.freq_heads = std::stoi(val);
            else if (key == "spatial_depth") c.spatial_depth = std::stoi(val);
            else if (key == "spatial_width") c.spatial_width = std::stoi(val);
            else if (key == "time_embed_dim") c.time_embed_dim = std::stoi(val);
            else if (key == "sigma_low") c.sigma_low = std::stod(val);
            else if (key == "sigma_high") c.sigma_high = std::stod(val);
            else if (key == "label_dropout") c.label_dropout = std::stod(val);
            else throw FormatError("checkpoint config: unknown key '" + key + "'");
        } catch (const std::logic_error&) {
            throw FormatError("checkpoint config: bad value for '" + key + "'");
        }
    }
    if (seen.size() != 13) throw FormatError("checkpoint config: expected 13 keys, found " + std::to_string(seen.size()));
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint config invalid: ") + e.what());
    }
    return c;
}

struct Checkpoint {
    Model<float> model;
    AdamState<float> opt;
    std::uint64_t step = 0;
};

inline std::string encode_checkpoint(const Model<float>& model, const AdamState<float>& opt, std::uint64_t step) {
    std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::put_u32(out, kCheckpointVersion);
    const std::string cfg = serialize_model_config(model.config);
    detail::put_u32(out, static_cast<std::uint32_t>(cfg.size()));
    out += cfg;
    detail::put_u64(out, step);
    auto record = [&](const std::string& name, const ParamSpec& spec, const Matrix<float>& m) {
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put_u32(out, static_cast<std::uint32_t>(spec.shape.size()));
        for (int d : spec.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
        for (long i = 0; i < m.size(); ++i) detail::put_f32(out, m.data()[i]);
    };
    for (std::size_t i = 0; i < model.params.size(); ++i) record("param/" + model.params.spec(i).name, model.params.spec(i), model.params.value(i));
    for (std::size_t i = 0; i < opt.m.size(); ++i) record("adam_m/" + opt.m.spec(i).name, opt.m.spec(i), opt.m.value(i));
    for (std::size_t i = 0; i < opt.v.size(); ++i) record("adam_v/" + opt.v.spec(i).name, opt.v.spec(i), opt.v.value(i));
    return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
    detail::ByteReader r(bytes);
    if (r.bytes(8, "magic") != std::string(kCheckpointMagic, 8)) throw FormatError("checkpoint: bad magic");
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    }
    const std::uint32_t cfg_len = r.u32("config length");
    const ModelConfig cfg = parse_model_config(r.bytes(cfg_len, "config block"));
    Checkpoint ck{Model<float>::zeros(cfg), AdamState<float>::zeros(param_schema(cfg)), 0};
    ck.step = r.u64("step");
    ck.opt.step = ck.step;

    std::map<std::string, bool> filled;
    auto target = [&](const std::string& name) -> std::pair<Matrix<float>*, const ParamSpec*> {
        const auto slash = name.find('/');
        if (slash == std::string::npos) throw FormatError("checkpoint: unknown record '" + name + "'");
        const std::string kind = name.substr(0, slash), pname = name.substr(slash + 1);
        ModelParams<float>* set = kind == "param" ? &ck.model.params : kind == "adam_m" ? &ck.opt.m : kind == "adam_v" ? &ck.opt.v : nullptr;
        if (!set || !set->contains(pname)) throw FormatError("checkpoint: unknown record '" + name + "'");
        const std::size_t i = set->index_of(pname);
        return {&set->value(i), &set->spec(i)};
    };
    while (!r.at_end()) {
        const std::uint32_t name_len = r.u32("record header");
        const std::string name = r.bytes(name_len, "record name");
        auto [m, spec] = target(name);
        if (filled[name]) throw FormatError("checkpoint: duplicate record '" + name + "'");
        const std::uint32_t rank = r.u32("record " + name);
        if (rank != spec->shape.size()) throw FormatError("checkpoint: record '" + name + "' has rank " + std::to_string(rank) + ", model expects " + std::to_string(spec->shape.size()));
        for (std::uint32_t k = 0; k < rank; ++k) {
            const std::uint32_t d = r.u32("record " + name);
            if (d != static_cast<std::uint32_t>(spec->shape[k])) {
                throw FormatError("checkpoint: record '" + name + "' shape disagrees with model config");
            }
        }
        for (long i = 0; i < m->size(); ++i) m->data()[i] = r.f32("record " + name);
        filled[name] = true;
    }
    auto require_all = [&](const char* kind, const ModelParams<float>& set) {
        for (const auto& s : set.specs()) {
            const std::string name = std::string(kind) + "/" + s.name;
            if (!filled[name]) throw FormatError("checkpoint: missing record '" + name + "'");
        }
    };
    require_all("param", ck.model.params);
    require_all("adam_m", ck.opt.m);
    require_all("adam_v", ck.opt.v);
    if (!ck.model.params.all_finite()) throw FormatError("checkpoint: non-finite parameter values");
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Model<float>& model, const AdamState<float>& opt,
                            std::uint64_t step) {
    const std::string bytes = encode_checkpoint(model, opt, step);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot open " + path.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw InputError("write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    try {
        return decode_checkpoint(ss.str());
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Training loop.

inline constexpr const char* kMetricsHeader =
    "step,loss,loss_s,loss_f,loss_sL,loss_sH,loss_fL,loss_fH,grad_norm,mean_omega,lr";

inline std::string format_metrics_row(const StepMetrics& m) {
    std::string row = std::to_string(m.step);
    char buf[32];
    auto add = [&](double v) {
        std::snprintf(buf, sizeof buf, ",%.9g", v);
        row += buf;
    };
    add(m.loss.total);
    for (double t : m.loss.terms) add(t);
    add(m.grad_norm);
    add(m.mean_omega);
    add(m.lr);
    return row;
}

struct RunOptions {
    std::filesystem::path out_dir;            // empty: no files written
    std::optional<std::filesystem::path> resume;
    std::function<void(const StepMetrics&)> on_step;
};

struct TrainingRun {
    Model<float> model;
    AdamState<float> opt;
    std::vector<StepMetrics> metrics;
};

inline std::string checkpoint_name(std::uint64_t step) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "checkpoint_%06llu.ckpt", static_cast<unsigned long long>(step));
    return buf;
}

/// Trains from a fresh seeded init (or a resumed checkpoint) up to total_steps.
/// Writes metrics.csv, periodic checkpoints and final.ckpt into out_dir.
inline TrainingRun run_training(const ModelConfig& mcfg, const TrainConfig& cfg, const Dataset& data,
                                const RunOptions& opts = {}) {
    mcfg.validate();
    cfg.validate();
    data.validate();
    if (data.num_classes != mcfg.num_classes) throw ConfigError("dataset and model disagree on num_classes");
    if (data.size() > 0 && (data.images.front().height() != mcfg.image_size ||
                            data.images.front().channels() != mcfg.image_channels)) {
        throw ConfigError("dataset image shape " + data.images.front().shape_string() + " does not match the model");
    }

    TrainingRun run{Model<float>::initialized(mcfg, cfg.seed), AdamState<float>::zeros(param_schema(mcfg)), {}};
    std::uint64_t start = 0;
    if (opts.resume) {
        Checkpoint ck = load_checkpoint(*opts.resume);
        if (!(ck.model.config == mcfg)) throw ConfigError("checkpoint model config is incompatible with the run config");
        run.model = std::move(ck.model);
        run.opt = std::move(ck.opt);
        start = ck.step;
    }

    std::ofstream csv;
    if (!opts.out_dir.empty()) {
        std::filesystem::create_directories(opts.out_dir);
        const auto path = opts.out_dir / "metrics.csv";
        const bool append = opts.resume && std::filesystem::exists(path);
        csv.open(path, append ? std::ios::app : std::ios::trunc);
        if (!csv) throw InputError("cannot open " + path.string());
        if (!append) csv << kMetricsHeader << "\n";
    }

    const FrequencyMaskPair masks = model_masks(mcfg);
    for (std::uint64_t s = start; s < static_cast<std::uint64_t>(cfg.total_steps); ++s) {
        const std::vector<FlowSample> batch = assemble_batch(data, cfg, masks, s);
        StepMetrics m = train_step(run.model, run.opt, std::span<const FlowSample>(batch), cfg, s);
        if (csv.is_open()) csv << format_metrics_row(m) << "\n" << std::flush;
        if (opts.on_step) opts.on_step(m);
        run.metrics.push_back(m);
        if (!opts.out_dir.empty() && cfg.checkpoint_every > 0 && m.step % static_cast<std::uint64_t>(cfg.checkpoint_every) == 0) {
            save_checkpoint(opts.out_dir / checkpoint_name(m.step), run.model, run.opt, m.step);
        }
    }
    if (!opts.out_dir.empty()) {
        save_checkpoint(opts.out_dir / "final.ckpt", run.model, run.opt, std::max<std::uint64_t>(start, cfg.total_steps));
    }
    return run;
}

}  // namespace freqflow
