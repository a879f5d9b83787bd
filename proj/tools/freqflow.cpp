// freqflow: train / sample / analyze / check.
//
// Exit codes: 0 success, 1 validation or runtime failure, 2 usage or config errors.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "freqflow/freqflow.hpp"

namespace fs = std::filesystem;
using namespace freqflow;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw InputError("cannot open " + path.string());
    f << text;
}

std::string index_name(const char* prefix, std::size_t i, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%zu%s", prefix, i, ext);
    return buf;
}

struct TrainArgs {
    std::string config;
    std::vector<std::string> overrides;
    std::string resume;
    std::string out_dir = "freqflow_run";
};

int cmd_train(const TrainArgs& a) {
    const RunConfig cfg = load_run_config(a.config, a.overrides);
    fs::create_directories(a.out_dir);
    write_text(fs::path(a.out_dir) / "resolved.toml", to_toml(cfg));
    const Dataset data = build_dataset(cfg);

    RunOptions opts;
    opts.out_dir = a.out_dir;
    if (!a.resume.empty()) opts.resume = fs::path(a.resume);
    const int total = cfg.train.total_steps;
    opts.on_step = [total](const StepMetrics& m) {
        if (m.step % 100 == 0 || m.step == static_cast<std::uint64_t>(total)) {
            std::fprintf(stderr, "step %llu/%d loss %.6g mean_omega %.4f\n", static_cast<unsigned long long>(m.step),
                         total, m.loss.total, m.mean_omega);
        }
    };
    run_training(cfg.model, cfg.train, data, opts);
    return 0;
}

struct SampleArgs {
    std::string checkpoint;
    int label = 0;
    int count = 1;
    int steps = 50;
    double cfg_scale = 1.0;
    std::uint64_t seed = 0;
    std::string out_dir = "freqflow_samples";
    int capture = 0;
};

int cmd_sample(const SampleArgs& a) {
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    SamplerConfig sc;
    sc.steps = a.steps;
    sc.cfg_scale = a.cfg_scale;
    sc.seed = a.seed;
    sc.capture_every = a.capture;
    sc.validate();
    if (a.count < 1) throw ConfigError("--count must be >= 1");
    const ClassCondition label = a.label < 0 ? ClassCondition::null() : ClassCondition::of(a.label);
    label.table_row(ck.model.config.num_classes);

    fs::create_directories(a.out_dir);
    const std::vector<ClassCondition> labels(static_cast<std::size_t>(a.count), label);
    const auto results = sample_many(model_velocity(ck.model, model_masks(ck.model.config)), labels, sc,
                                     ck.model.config.image_channels, ck.model.config.image_size);
    for (std::size_t i = 0; i < results.size(); ++i) {
        write_ppm(results[i].image, fs::path(a.out_dir) / index_name("sample", i, ".ppm"));
        if (sc.capture_every > 0) {
            write_trajectory_csv(fs::path(a.out_dir) / index_name("trajectory", i, ".csv"), results[i].trajectory);
        }
    }
    return 0;
}

struct AnalyzeArgs {
    std::string checkpoint;
    std::string config;
    std::vector<std::string> overrides;
    bool fig2 = false;
    bool fig4 = false;
    bool freq_error = false;
    int samples = 0;  // 0: analysis.samples from the config
    std::string out_dir = "freqflow_analysis";
    bool gen_is_real = false;
};

int cmd_analyze(const AnalyzeArgs& a) {
    if (!a.fig2 && !a.fig4 && !a.freq_error) throw CLI::ValidationError("analyze", "select at least one of --fig2, --fig4, --freq-error");
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    RunConfig cfg = load_run_config(a.config, a.overrides);
    const ModelConfig& mc = ck.model.config;
    if (cfg.model.num_classes != mc.num_classes || cfg.model.image_size != mc.image_size ||
        cfg.model.image_channels != mc.image_channels) {
        throw ConfigError("dataset config does not match the checkpoint's model (classes/size/channels)");
    }
    if (a.samples > 0) cfg.analysis.samples = a.samples;
    fs::create_directories(a.out_dir);
    write_text(fs::path(a.out_dir) / "resolved.toml", to_toml(cfg));

    const Dataset data = build_dataset(cfg);
    std::vector<ImageTensor> reference = data.images;
    if (cfg.analysis.reference_images > 0 && static_cast<std::size_t>(cfg.analysis.reference_images) < reference.size()) {
        reference.resize(static_cast<std::size_t>(cfg.analysis.reference_images));
    }
    const FrequencyMaskPair masks = model_masks(mc);

    SamplerConfig sc = cfg.sampler;
    const bool need_traj = a.fig2 || a.fig4;
    if (need_traj && sc.capture_every == 0) sc.capture_every = std::max(1, sc.steps / 10);
    const bool need_samples = need_traj || (a.freq_error && !a.gen_is_real);

    std::vector<SampleResult> results;
    if (need_samples) {
        const auto labels = cycled_labels(cfg.analysis.samples, mc.num_classes);
        results = sample_many(model_velocity(ck.model, masks), labels, sc, mc.image_channels, mc.image_size);
    }
    if (a.fig2) {
        std::vector<Curve> low, high;
        for (const auto& r : results) {
            low.push_back(relative_log_amplitude_curve(r.trajectory, masks.low, reference));
            high.push_back(relative_log_amplitude_curve(r.trajectory, masks.high, reference));
        }
        write_curve_csv(fs::path(a.out_dir) / "fig2_low.csv", average_curves(low));
        write_curve_csv(fs::path(a.out_dir) / "fig2_high.csv", average_curves(high));
    }
    if (a.fig4) {
        std::vector<OmegaCurve> curves;
        for (const auto& r : results) curves.push_back(omega_curve(r.trajectory));
        write_omega_csv(fs::path(a.out_dir) / "fig4_omega.csv", average_omega_curves(curves));
    }
    if (a.freq_error) {
        std::vector<ImageTensor> gen;
        if (a.gen_is_real) {
            gen = reference;
        } else {
            for (const auto& r : results) gen.push_back(r.image);
        }
        const FrequencyErrorReport rep = frequency_error_pair(reference, gen, masks);
        write_frequency_error_csv(fs::path(a.out_dir) / "freq_error.csv", rep);
        std::printf("frequency error: low %.6g high %.6g\n", rep.low, rep.high);
    }
    return 0;
}

int cmd_check(const std::string& fault) {
    SelfCheckOptions opt;
    if (fault == "dft_sign") opt.inject_dft_sign_fault = true;
    else if (!fault.empty()) throw CLI::ValidationError("--inject-fault", "unknown fault '" + fault + "'");
    const auto results = run_self_check(opt);
    bool ok = true;
    std::printf("%-22s %-6s %9s  %s\n", "check", "result", "seconds", "detail");
    for (const auto& r : results) {
        std::printf("%-22s %-6s %9.3f  %s\n", r.name.c_str(), r.passed ? "PASS" : "FAIL", r.seconds, r.detail.c_str());
        ok = ok && r.passed;
    }
    if (!ok) {
        std::printf("FAILED:");
        for (const auto& r : results)
            if (!r.passed) std::printf(" %s", r.name.c_str());
        std::printf("\n");
    }
    return ok ? 0 : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Frequency-aware flow matching: train, sample, analyze, check"};
    app.require_subcommand(1);

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Train a model from a config file");
    t->add_option("config", train.config, "Config file (TOML subset)")->required();
    t->add_option("--set", train.overrides, "Override key=value (repeatable)");
    t->add_option("--resume", train.resume, "Checkpoint to resume from");
    t->add_option("--out-dir", train.out_dir, "Output directory")->capture_default_str();

    SampleArgs sample;
    auto* s = app.add_subcommand("sample", "Generate images from a checkpoint");
    s->add_option("checkpoint", sample.checkpoint, "Checkpoint file")->required();
    s->add_option("--class", sample.label, "Class label (-1 for the unconditional token)")->capture_default_str();
    s->add_option("--count", sample.count, "Number of images")->capture_default_str();
    s->add_option("--steps", sample.steps, "Euler steps")->capture_default_str();
    s->add_option("--cfg-scale", sample.cfg_scale, "Guidance scale (1 disables)")->capture_default_str();
    s->add_option("--seed", sample.seed, "Sampler seed")->required();
    s->add_option("--out-dir", sample.out_dir, "Output directory")->capture_default_str();
    s->add_option("--capture", sample.capture, "Capture every N steps into trajectory CSVs (0: off)")
        ->capture_default_str();

    AnalyzeArgs analyze;
    auto* an = app.add_subcommand("analyze", "Emit band-amplitude, gate and frequency-error CSVs");
    an->add_option("checkpoint", analyze.checkpoint, "Checkpoint file")->required();
    an->add_option("config", analyze.config, "Dataset/sampler config file")->required();
    an->add_option("--set", analyze.overrides, "Override key=value (repeatable)");
    an->add_flag("--fig2", analyze.fig2, "Relative band log-amplitude curves");
    an->add_flag("--fig4", analyze.fig4, "Mean gate weight curves");
    an->add_flag("--freq-error", analyze.freq_error, "Low/high band frequency error");
    an->add_option("--samples", analyze.samples, "Generated samples (default: analysis.samples)");
    an->add_option("--out-dir", analyze.out_dir, "Output directory")->capture_default_str();
    an->add_flag("--gen-is-real", analyze.gen_is_real, "Test hook: score the reference set against itself");

    std::string fault;
    auto* c = app.add_subcommand("check", "Run the built-in oracle suite");
    c->add_option("--inject-fault", fault, "Test hook: inject a known fault (dft_sign)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kExitUsage;
    }

    try {
        if (*t) return cmd_train(train);
        if (*s) return cmd_sample(sample);
        if (*an) return cmd_analyze(analyze);
        if (*c) return cmd_check(fault);
    } catch (const CLI::ValidationError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ConfigParseError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}
