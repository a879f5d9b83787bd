#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "freqflow/data.hpp"
#include "freqflow/training.hpp"
#include "oracles.hpp"

using namespace freqflow;
namespace fs = std::filesystem;

namespace {

ModelConfig toy_config() {
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

TrainConfig toy_train(int steps = 3) {
    TrainConfig t;
    t.batch_size = 4;
    t.total_steps = steps;
    t.warmup_steps = 2;
    t.learning_rate = 1e-3;
    t.seed = 42;
    t.checkpoint_every = 0;
    return t;
}

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("freqflow_training_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

FrequencyBranchOutput heads(const ImageTensor& low, const ImageTensor& high) {
    FrequencyBranchOutput fb;
    fb.v_low_hat = low;
    fb.v_high_hat = high;
    return fb;
}

}  // namespace

TEST(Losses, SpatialAndFrequencyExamples) {
    const ImageTensor p = ImageTensor::from_rows({{1, 2}, {3, 4}});
    const ImageTensor z(1, 2, 2);
    EXPECT_DOUBLE_EQ(spatial_loss(p, z), 7.5);
    EXPECT_NEAR(frequency_loss(p, z), 30.0, 1e-12);
    EXPECT_EQ(spatial_loss(p, p), 0.0);
    EXPECT_EQ(frequency_loss(p, p), 0.0);
    EXPECT_NEAR(spatial_loss(p + ImageTensor(1, 2, 2, 0.3), p), 0.09, 1e-12);
    EXPECT_THROW(spatial_loss(p, ImageTensor(1, 4, 4)), DimensionError);
    EXPECT_THROW(frequency_loss(p, ImageTensor(1, 4, 4)), DimensionError);
}

TEST(Losses, FrequencyLossMatchesDirectDftAndParseval) {
    RngStream rng(1);
    for (int trial = 0; trial < 10; ++trial) {
        const ImageTensor a = oracle::uniform_image(3, 8, 6, rng), b = oracle::uniform_image(3, 8, 6, rng);
        const double lf = frequency_loss(a, b);
        EXPECT_NEAR(lf, static_cast<double>(oracle::frequency_loss(a, b)), 1e-9 * lf);
        EXPECT_LT(std::abs(lf - 48.0 * spatial_loss(a, b)) / lf, 1e-9);
    }
}

TEST(Losses, TotalLossWeightsAndToggles) {
    // every head off by a constant 1 from its target: each spatial term is 1, each frequency term H*W = 4
    FlowSample s;
    s.v = ImageTensor(1, 2, 2);
    s.v_low = ImageTensor(1, 2, 2);
    s.v_high = ImageTensor(1, 2, 2);
    const ImageTensor one(1, 2, 2, 1.0);
    const auto fb = heads(one, one);
    TrainConfig cfg;
    const LossBreakdown all = total_loss(one, fb, s, cfg);
    EXPECT_NEAR(all.total, 1 + 4 + 0.5 * (1 + 1 + 4 + 4), 1e-12);

    cfg.alpha = 0.0;
    EXPECT_NEAR(total_loss(one, fb, s, cfg).total, 5.0, 1e-12);

    cfg = TrainConfig{};
    cfg.loss = {false, false, false};
    const LossBreakdown plain = total_loss(one, fb, s, cfg);
    EXPECT_NEAR(plain.total, 5.0, 1e-12);
    EXPECT_EQ(plain.terms[kLossSLow], 0.0);
    EXPECT_EQ(plain.terms[kLossFHigh], 0.0);

    cfg.loss = {true, false, true};
    EXPECT_NEAR(total_loss(one, fb, s, cfg).total, 5 + 0.5 * (1 + 4), 1e-12);
    cfg.loss = {true, true, false};
    EXPECT_NEAR(total_loss(one, fb, s, cfg).total, 5 + 0.5 * (1 + 1), 1e-12);

    // perfect predictions on every head
    cfg = TrainConfig{};
    EXPECT_EQ(total_loss(s.v, heads(s.v_low, s.v_high), s, cfg).total, 0.0);
}

TEST(Losses, AllTermsEqualGivesFourTimes) {
    const auto w = loss_weights(TrainConfig{});
    double total = 0;
    const double v = 1.7;
    for (double wi : w) total += wi * v;
    EXPECT_DOUBLE_EQ(total, 4 * v);
}

TEST(Losses, GraphMatchesPerImageLossesAndParseval) {
    const ModelConfig mc = toy_config();
    Model<double> model = Model<double>::initialized(mc, 3);
    RngStream jitter(9);
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        auto& m = model.params.value(i);
        for (long k = 0; k < m.size(); ++k) m.data()[k] += 0.05 * jitter.normal();
    }
    const auto masks = model_masks(mc);
    RngStream rng(4);
    std::vector<FlowSample> batch;
    for (int b = 0; b < 3; ++b)
        batch.push_back(draw_sample(oracle::uniform_image(1, 8, 8, rng), ClassCondition::of(b), rng, masks));
    std::vector<ClassCondition> labels;
    for (const auto& s : batch) labels.push_back(s.label);

    const TrainConfig cfg;
    ad::Graph<double> g(false);
    ParamBinding<double> p(g, model.params, false);
    const LossNodes<double> ln = loss_nodes(g, mc, p, std::span<const FlowSample>(batch), labels, cfg);
    double expect = 0;
    for (const auto& s : batch) {
        const auto [v, fb] = forward(s.x_t, s.t, s.label, model, masks);
        expect += total_loss(v, fb, s, cfg).total / batch.size();
    }
    EXPECT_NEAR(g.scalar(ln.total), expect, 1e-10 * expect);
    EXPECT_NEAR(g.scalar(ln.terms[kLossF]), 64.0 * g.scalar(ln.terms[kLossS]), 1e-9 * g.scalar(ln.terms[kLossF]));
    for (auto t : ln.terms) EXPECT_GE(g.scalar(t), 0.0);
}

TEST(AdamW, MatchesReferenceOnQuadraticForHundredSteps) {
    // loss(p) = 0.5 * a * (p - c)^2, gradient a * (p - c)
    const double a = 3.0, c = 0.7;
    for (bool decay : {false, true}) {
        AdamHyper h{1e-2, 0.9, 0.999, 1e-8, decay ? 0.03 : 0.0};
        oracle::ScalarAdamW ref{h.lr, h.beta1, h.beta2, h.eps, h.weight_decay};
        Matrix<double> p = Matrix<double>::Constant(1, 1, -1.3), m = Matrix<double>::Zero(1, 1), v = Matrix<double>::Zero(1, 1);
        double q = -1.3;
        for (std::uint64_t t = 1; t <= 100; ++t) {
            const Matrix<double> grad = Matrix<double>::Constant(1, 1, a * (p(0, 0) - c));
            adamw_update<double>(p, m, v, grad, t, h, decay);
            q = ref.step(q, a * (q - c));
            ASSERT_NEAR(p(0, 0), q, 1e-10) << "step " << t;
        }
    }
}

TEST(AdamW, WarmupSchedule) {
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.warmup_steps = 4;
    EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 0), 2.5e-4);
    EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 3), 1e-3);
    EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 100), 1e-3);
    cfg.warmup_steps = 0;
    EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 0), 1e-3);
}

TEST(TrainStep, ZeroLearningRateLeavesParametersUnchanged) {
    const ModelConfig mc = toy_config();
    const Dataset data = synth_dataset(3, 4, 8, 1);
    TrainConfig cfg = toy_train();
    cfg.learning_rate = 0.0;
    Model<float> model = Model<float>::initialized(mc, 1);
    const Model<float> before = model;
    AdamState<float> opt = AdamState<float>::zeros(param_schema(mc));
    const auto batch = assemble_batch(data, cfg, model_masks(mc), 0);
    const StepMetrics m = train_step(model, opt, std::span<const FlowSample>(batch), cfg, 0);
    for (std::size_t i = 0; i < model.params.size(); ++i) EXPECT_EQ(model.params.value(i), before.params.value(i));
    EXPECT_EQ(m.step, 1u);
    EXPECT_GT(m.grad_norm, 0.0);
    EXPECT_GT(m.loss.total, 0.0);
}

TEST(TrainStep, LabelDropoutRates) {
    std::vector<FlowSample> batch(4000);
    for (auto& s : batch) s.label = ClassCondition::of(1);
    const auto none = drop_labels(batch, 0.0, 5, 0);
    for (auto c : none) EXPECT_FALSE(c.is_null());
    const auto some = drop_labels(batch, 0.1, 5, 0);
    int dropped = 0;
    for (auto c : some) dropped += c.is_null();
    EXPECT_NEAR(dropped / 4000.0, 0.1, 0.02);
    EXPECT_EQ(some, drop_labels(batch, 0.1, 5, 0));
}

TEST(TrainStep, RejectsNonFiniteLossNamingTheTerm) {
    const ModelConfig mc = toy_config();
    Model<double> model = Model<double>::initialized(mc, 1);
    AdamState<double> opt = AdamState<double>::zeros(param_schema(mc));
    const auto masks = model_masks(mc);
    RngStream rng(2);
    std::vector<FlowSample> batch = {draw_sample(ImageTensor(1, 8, 8), ClassCondition::of(0), rng, masks)};
    batch[0].v(0, 0, 0) = std::numeric_limits<double>::infinity();
    try {
        train_step(model, opt, std::span<const FlowSample>(batch), toy_train(), 0);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("loss_s"), std::string::npos) << e.what();
    }
}

TEST(GradientCheck, LinearModelIsExact) {
    const std::vector<ParamSpec> specs = {{"w", {3, 2}, ParamInit::TruncatedNormal, true}, {"b", {2}, ParamInit::Zeros, false}};
    RngStream rng(3);
    ModelParams<double> params = ModelParams<double>::initialized(specs, rng);
    for (long k = 0; k < 2; ++k) params.at("b").data()[k] = rng.normal();
    Matrix<double> x(5, 3), y(5, 2);
    for (long k = 0; k < x.size(); ++k) x.data()[k] = rng.normal();
    for (long k = 0; k < y.size(); ++k) y.data()[k] = rng.normal();
    const GradLossFn fn = [x, y](ad::Graph<double>& g, const ParamBinding<double>& p) {
        return ad::mse(g, ad::linear(g, g.constant(x), p["w"], p["b"]), g.constant(y));
    };
    RngStream probes(4);
    const auto rep = gradient_check(params, fn, 8, probes);
    EXPECT_TRUE(rep.ok());
    EXPECT_LT(rep.max_rel_error, 1e-8);
}

TEST(GradientCheck, ZeroLossPointHasZeroPredictionGradient) {
    ad::Graph<double> g;
    const Matrix<double> target = Matrix<double>::Constant(4, 2, 0.3);
    const ad::Var pred = g.parameter(target);
    g.backward(ad::mse(g, pred, g.constant(target)));
    EXPECT_EQ(g.grad(pred).cwiseAbs().maxCoeff(), 0.0);
}

TEST(GradientCheck, FullToyModelFiftyProbes) {
    const ModelConfig mc = toy_config();
    Model<double> model = Model<double>::initialized(mc, 5);
    RngStream jitter(6);
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        auto& m = model.params.value(i);
        for (long k = 0; k < m.size(); ++k) m.data()[k] += 0.05 * jitter.normal();
    }
    const auto masks = model_masks(mc);
    RngStream rng(7);
    std::vector<FlowSample> batch;
    std::vector<ClassCondition> labels;
    for (int b = 0; b < 2; ++b) {
        batch.push_back(draw_sample(oracle::uniform_image(1, 8, 8, rng), ClassCondition::of(b), rng, masks));
        labels.push_back(b == 0 ? batch.back().label : ClassCondition::null());
    }
    RngStream probes(8);
    const auto rep = gradient_check(model.params, training_loss_fn(mc, batch, labels, TrainConfig{}), 50, probes);
    EXPECT_TRUE(rep.ok());
    EXPECT_LT(rep.max_rel_error, 1e-4);
    EXPECT_EQ(rep.probes.size(), 50u);
}

TEST(GradientCheck, ReportsWrongGradients) {
    const std::vector<ParamSpec> specs = {{"w", {1, 1}, ParamInit::Ones, true}};
    const ModelParams<double> params = ModelParams<double>::zeros(specs);
    // forward is w^2 but the recorded backward claims 3*w^2 + 1
    const GradLossFn fn = [](ad::Graph<double>& g, const ParamBinding<double>& p) {
        const ad::Var w = p["w"];
        const double v = g.value(w)(0, 0);
        return g.record(Matrix<double>::Constant(1, 1, v * v), {w}, [w](ad::Graph<double>& gr, const Matrix<double>& dy) {
            const double x = gr.value(w)(0, 0);
            gr.accumulate(w, Matrix<double>::Constant(1, 1, dy(0, 0) * (3 * x * x + 1)));
        });
    };
    RngStream probes(9);
    const auto rep = gradient_check(params, fn, 1, probes);
    EXPECT_FALSE(rep.ok());
    ASSERT_EQ(rep.failures.size(), 1u);
    EXPECT_EQ(rep.failures[0], "w[0]");
}

TEST(Checkpoint, RoundtripIsBitExact) {
    const ModelConfig mc = toy_config();
    const Dataset data = synth_dataset(3, 4, 8, 1);
    const TrainingRun run = run_training(mc, toy_train(2), data);
    const fs::path dir = scratch_dir("roundtrip");
    save_checkpoint(dir / "a.ckpt", run.model, run.opt, 2);
    const Checkpoint ck = load_checkpoint(dir / "a.ckpt");
    EXPECT_EQ(ck.step, 2u);
    EXPECT_EQ(ck.opt.step, 2u);
    EXPECT_TRUE(ck.model.config == mc);
    for (std::size_t i = 0; i < run.model.params.size(); ++i) {
        EXPECT_EQ(std::memcmp(ck.model.params.value(i).data(), run.model.params.value(i).data(),
                              sizeof(float) * run.model.params.value(i).size()), 0);
        EXPECT_EQ(ck.opt.m.value(i), run.opt.m.value(i));
        EXPECT_EQ(ck.opt.v.value(i), run.opt.v.value(i));
    }
    EXPECT_EQ(encode_checkpoint(ck.model, ck.opt, ck.step), slurp(dir / "a.ckpt"));
}

TEST(Checkpoint, CorruptFilesAreRejectedWithTheRecordName) {
    const ModelConfig mc = toy_config();
    const auto model = Model<float>::initialized(mc, 1);
    const auto opt = AdamState<float>::zeros(param_schema(mc));
    const std::string bytes = encode_checkpoint(model, opt, 7);

    const std::string name = "param/freq.patch.weight";
    const std::size_t at = bytes.find(name);
    ASSERT_NE(at, std::string::npos);
    try {
        decode_checkpoint(bytes.substr(0, at + name.size() + 20));
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find(name), std::string::npos) << e.what();
    }

    std::string bumped = bytes;
    bumped[8] = static_cast<char>(bumped[8] + 1);
    try {
        decode_checkpoint(bumped);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("version"), std::string::npos) << e.what();
    }

    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(decode_checkpoint(bad_magic), FormatError);

    // a record missing entirely
    const std::string last = "adam_v/spatial.out.bias";
    const std::size_t tail = bytes.rfind(last);
    ASSERT_NE(tail, std::string::npos);
    try {
        decode_checkpoint(bytes.substr(0, tail - 4));
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find(last), std::string::npos) << e.what();
    }

    // config block claiming a different width makes the first record's shape disagree
    std::string cfg_text = serialize_model_config(mc);
    const std::size_t w = cfg_text.find("freq_width=8");
    ASSERT_NE(w, std::string::npos);
    std::string other = bytes;
    other.replace(other.find("freq_width=8"), 12, "freq_width=4");
    EXPECT_THROW(decode_checkpoint(other), FormatError);
}

TEST(Checkpoint, ModelConfigTextRoundtrip) {
    ModelConfig mc = toy_config();
    mc.sigma_low = 0.1 + 0.2;
    mc.label_dropout = 0.123456789;
    EXPECT_TRUE(parse_model_config(serialize_model_config(mc)) == mc);
}

TEST(RunTraining, MetricsAreDeterministic) {
    const ModelConfig mc = toy_config();
    const Dataset data = synth_dataset(3, 4, 8, 1);
    TrainConfig cfg = toy_train(4);
    cfg.checkpoint_every = 2;
    const fs::path a = scratch_dir("det_a"), b = scratch_dir("det_b");
    run_training(mc, cfg, data, {a, std::nullopt, nullptr});
    run_training(mc, cfg, data, {b, std::nullopt, nullptr});
    const std::string ma = slurp(a / "metrics.csv");
    EXPECT_EQ(ma, slurp(b / "metrics.csv"));
    EXPECT_EQ(slurp(a / "final.ckpt"), slurp(b / "final.ckpt"));
    EXPECT_TRUE(fs::exists(a / checkpoint_name(2)));
    EXPECT_TRUE(fs::exists(a / checkpoint_name(4)));
    EXPECT_EQ(ma.substr(0, ma.find('\n')), kMetricsHeader);
    EXPECT_EQ(std::count(ma.begin(), ma.end(), '\n'), 5);
}

TEST(RunTraining, ResumeContinuesTheSameStream) {
    const ModelConfig mc = toy_config();
    const Dataset data = synth_dataset(3, 4, 8, 1);
    TrainConfig cfg = toy_train(4);
    cfg.checkpoint_every = 2;
    const fs::path full = scratch_dir("resume_full"), part = scratch_dir("resume_part");
    run_training(mc, cfg, data, {full, std::nullopt, nullptr});
    TrainConfig half = cfg;
    half.total_steps = 2;
    run_training(mc, half, data, {part, std::nullopt, nullptr});
    run_training(mc, cfg, data, {part, part / "final.ckpt", nullptr});
    EXPECT_EQ(slurp(full / "metrics.csv"), slurp(part / "metrics.csv"));
    EXPECT_EQ(slurp(full / "final.ckpt"), slurp(part / "final.ckpt"));
}

TEST(RunTraining, LossDecreasesOnTinyProblem) {
    const ModelConfig mc = toy_config();
    const Dataset data = synth_dataset(3, 8, 8, 2);
    TrainConfig cfg = toy_train(60);
    cfg.batch_size = 8;
    cfg.learning_rate = 3e-3;
    const TrainingRun run = run_training(mc, cfg, data);
    double first = 0, last = 0;
    for (int i = 0; i < 10; ++i) {
        first += run.metrics[i].loss.total;
        last += run.metrics[run.metrics.size() - 1 - i].loss.total;
    }
    EXPECT_LT(last, first);
    for (const auto& m : run.metrics) {
        EXPECT_GE(m.loss.total, 0.0);
        EXPECT_GT(m.mean_omega, 0.0);
        EXPECT_LT(m.mean_omega, 1.0);
    }
}

TEST(RunTraining, RejectsMismatchedData) {
    const ModelConfig mc = toy_config();
    EXPECT_THROW(run_training(mc, toy_train(1), synth_dataset(4, 2, 8, 1)), ConfigError);
    EXPECT_THROW(run_training(mc, toy_train(1), synth_dataset(3, 2, 16, 1)), ConfigError);
    TrainConfig bad = toy_train(1);
    bad.batch_size = 0;
    EXPECT_THROW(run_training(mc, bad, synth_dataset(3, 2, 8, 1)), ConfigError);
}
