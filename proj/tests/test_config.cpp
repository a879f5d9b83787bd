#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "freqflow/config.hpp"

using namespace freqflow;

namespace {

const char* kSample = R"(# comment line
seed = 17

[model]
image_size = 8   # trailing comment
num_classes = 3
freq_width = 16
sigma_low = 2.5

[train]
learning_rate = 1e-3
total_steps = 12

[loss]
use_high_supervision = false

[data]
ppm_dir = "a # not a comment"
)";

int line_of(const std::string& text, const char* needle) {
    try {
        resolve_config(parse_config_text(text, "cfg.toml"));
    } catch (const ConfigParseError& e) {
        EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
        return e.line();
    }
    ADD_FAILURE() << "expected ConfigParseError";
    return -1;
}

}  // namespace

TEST(ConfigGrammar, ParsesSectionsTypesAndComments) {
    const ConfigTable t = parse_config_text(kSample);
    EXPECT_EQ(std::get<std::int64_t>(t.at("seed").value), 17);
    EXPECT_EQ(t.at("model.image_size").line, 5);
    EXPECT_EQ(std::get<double>(t.at("model.sigma_low").value), 2.5);
    EXPECT_EQ(std::get<bool>(t.at("loss.use_high_supervision").value), false);
    EXPECT_EQ(std::get<std::string>(t.at("data.ppm_dir").value), "a # not a comment");
}

TEST(ConfigGrammar, SyntaxErrorsCarryLineNumbers) {
    try {
        parse_config_text("seed = 1\n\n[model\n", "x.toml");
        FAIL();
    } catch (const ConfigParseError& e) {
        EXPECT_EQ(e.line(), 3);
        EXPECT_NE(std::string(e.what()).find("x.toml:3"), std::string::npos);
    }
    EXPECT_THROW(parse_config_text("seed 1\n"), ConfigParseError);
    EXPECT_THROW(parse_config_text("seed = \n"), ConfigParseError);
    EXPECT_THROW(parse_config_text("seed = 1\nseed = 2\n"), ConfigParseError);
    EXPECT_THROW(parse_config_text("name = \"open\n"), ConfigParseError);
    EXPECT_THROW(parse_config_text("x = 1.2.3\n"), ConfigParseError);
}

TEST(ConfigResolve, AppliesValuesAndPropagatesSeed) {
    const RunConfig c = resolve_config(parse_config_text(kSample));
    EXPECT_EQ(c.seed, 17u);
    EXPECT_EQ(c.train.seed, 17u);
    EXPECT_EQ(c.sampler.seed, 17u);
    EXPECT_EQ(c.model.image_size, 8);
    EXPECT_EQ(c.model.freq_width, 16);
    EXPECT_DOUBLE_EQ(c.train.learning_rate, 1e-3);
    EXPECT_EQ(c.train.total_steps, 12);
    EXPECT_FALSE(c.train.loss.use_high_supervision);
    EXPECT_TRUE(c.train.loss.use_low_supervision);
    EXPECT_EQ(c.model.patch_size, ModelConfig{}.patch_size);
    EXPECT_DOUBLE_EQ(c.train.alpha, 0.5);
}

TEST(ConfigResolve, UnknownKeyMissingSeedAndTypeErrors) {
    EXPECT_EQ(line_of("seed = 1\n[model]\nimage_sise = 8\n", "image_sise"), 3);
    EXPECT_EQ(line_of("seed = 1\n[train]\nbatch_size = \"big\"\n", "batch_size"), 3);
    EXPECT_EQ(line_of("[model]\nimage_size = 8\n", "seed"), 0);
    EXPECT_EQ(line_of("seed = -4\n", "seed"), 1);
    EXPECT_THROW(resolve_config(parse_config_text("seed = 1\n[model]\npatch_size = 5\n")), ConfigError);
}

TEST(ConfigOverrides, WinOverFileValuesAndAliases) {
    ConfigTable t = parse_config_text(kSample);
    apply_override(t, "train.total_steps=3");
    apply_override(t, "model.sigma_high = 0.75");
    apply_override(t, "loss.use_freq_domain_loss=false");
    apply_override(t, "data.ppm_dir=/tmp/imgs");
    const RunConfig c = resolve_config(t);
    EXPECT_EQ(c.train.total_steps, 3);
    EXPECT_DOUBLE_EQ(c.model.sigma_high, 0.75);
    EXPECT_FALSE(c.train.loss.use_freq_domain_loss);
    EXPECT_EQ(c.data.ppm_dir, "/tmp/imgs");

    ConfigTable a = parse_config_text(kSample);
    apply_override(a, "total_steps=10");
    EXPECT_EQ(resolve_config(a).train.total_steps, 10);

    ConfigTable b = parse_config_text("seed = 1\ntotal_steps = 9\n");
    EXPECT_EQ(resolve_config(b).train.total_steps, 9);

    EXPECT_THROW(apply_override(a, "no_equals_sign"), ConfigParseError);
    apply_override(a, "train.batch_size=abc");
    EXPECT_THROW(resolve_config(a), ConfigParseError);
}

TEST(ConfigToml, RoundtripsTheResolvedConfig) {
    RunConfig c = resolve_config(parse_config_text(kSample));
    c.model.sigma_low = 0.1 + 0.2;
    const std::string text = to_toml(c);
    const RunConfig back = resolve_config(parse_config_text(text));
    EXPECT_TRUE(back.model == c.model);
    EXPECT_EQ(back.train.loss, c.train.loss);
    EXPECT_EQ(back.train.total_steps, c.train.total_steps);
    EXPECT_DOUBLE_EQ(back.train.learning_rate, c.train.learning_rate);
    EXPECT_EQ(back.data.ppm_dir, c.data.ppm_dir);
    EXPECT_EQ(to_toml(back), text);
}

TEST(ConfigFiles, LoadWithOverridesAndBuildDataset) {
    const auto path = std::filesystem::temp_directory_path() / "freqflow_cfg.toml";
    std::ofstream(path) << "seed = 3\n[model]\nimage_size = 8\nnum_classes = 2\n[data]\nper_class = 3\n";
    const RunConfig c = load_run_config(path, {"data.per_class=4"});
    const Dataset d = build_dataset(c);
    EXPECT_EQ(d.size(), 8u);
    EXPECT_EQ(d.images[0].height(), 8);
    EXPECT_EQ(d.images, synth_dataset(2, 4, 8, 3).images);
    EXPECT_THROW(load_run_config("/nonexistent.toml"), ConfigParseError);
}
