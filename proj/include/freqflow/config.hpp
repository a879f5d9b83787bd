#pragma once

// TOML-subset run configuration: sections, dotted keys, strings, integers,
// floats, booleans and '#' comments. Grammar and keys are listed in README.md.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "freqflow/core.hpp"
#include "freqflow/model.hpp"
#include "freqflow/sampling.hpp"
#include "freqflow/training.hpp"

namespace freqflow {

/// Syntax errors, unknown keys and type mismatches. Carries the 1-based line
/// number (0 for command-line overrides).
class ConfigParseError : public ConfigError {
public:
    ConfigParseError(const std::string& source, int line, const std::string& what)
        : ConfigError(source + (line > 0 ? ":" + std::to_string(line) : std::string()) + ": " + what), line_(line) {}
    int line() const noexcept { return line_; }

private:
    int line_;
};

using ConfigScalar = std::variant<bool, std::int64_t, double, std::string>;

struct ConfigValue {
    ConfigScalar value;
    std::string source;
    int line = 0;
};

using ConfigTable = std::map<std::string, ConfigValue>;

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline bool valid_key(const std::string& key) {
    if (key.empty() || key.front() == '.' || key.back() == '.') return false;
    char prev = 0;
    for (char c : key) {
        const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
        if (!ok || (c == '.' && prev == '.')) return false;
        prev = c;
    }
    return true;
}

/// Strips a trailing comment that is not inside a string literal.
inline std::string strip_comment(const std::string& line) {
    bool in_str = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (in_str && c == '\\') {
            ++i;
        } else if (c == '"') {
            in_str = !in_str;
        } else if (c == '#' && !in_str) {
            return line.substr(0, i);
        }
    }
    return line;
}

/// Parses a scalar literal; returns false on anything that is not one.
inline bool parse_scalar(const std::string& text, ConfigScalar& out, std::string& error) {
    if (text.empty()) {
        error = "missing value";
        return false;
    }
    if (text.front() == '"') {
        std::string s;
        std::size_t i = 1;
        for (; i < text.size() && text[i] != '"'; ++i) {
            if (text[i] == '\\') {
                if (++i >= text.size()) break;
                switch (text[i]) {
                    case 'n': s.push_back('\n'); break;
                    case 't': s.push_back('\t'); break;
                    case '"': s.push_back('"'); break;
                    case '\\': s.push_back('\\'); break;
                    default: error = "unknown escape in string"; return false;
                }
            } else {
                s.push_back(text[i]);
            }
        }
        if (i >= text.size() || i + 1 != text.size()) {
            error = "unterminated or trailing characters after string";
            return false;
        }
        out = s;
        return true;
    }
    if (text == "true" || text == "false") {
        out = text == "true";
        return true;
    }
    const char* b = text.data();
    const char* e = b + text.size();
    const char* digits = (*b == '+') ? b + 1 : b;
    const bool floaty = text.find_first_of(".eE") != std::string::npos || text == "inf" || text == "nan";
    if (!floaty) {
        std::int64_t v = 0;
        auto [p, ec] = std::from_chars(digits, e, v);
        if (ec == std::errc() && p == e) {
            out = v;
            return true;
        }
    } else {
        double v = 0.0;
        auto [p, ec] = std::from_chars(digits, e, v);
        if (ec == std::errc() && p == e && std::isfinite(v)) {
            out = v;
            return true;
        }
    }
    error = "cannot parse value '" + text + "'";
    return false;
}

inline std::string format_scalar(const ConfigScalar& v) {
    struct Visitor {
        std::string operator()(bool b) const { return b ? "true" : "false"; }
        std::string operator()(std::int64_t i) const { return std::to_string(i); }
        std::string operator()(double d) const {
            char buf[64];
            auto [p, ec] = std::to_chars(buf, buf + sizeof buf, d);
            std::string s(buf, p);
            if (s.find_first_of(".eE") == std::string::npos) s += ".0";
            return s;
        }
        std::string operator()(const std::string& s) const {
            std::string out = "\"";
            for (char c : s) {
                if (c == '"' || c == '\\') out.push_back('\\');
                if (c == '\n') {
                    out += "\\n";
                    continue;
                }
                out.push_back(c);
            }
            return out + "\"";
        }
    };
    return std::visit(Visitor{}, v);
}

}  // namespace detail

inline ConfigTable parse_config_text(const std::string& text, const std::string& source = "<config>") {
    ConfigTable table;
    std::istringstream in(text);
    std::string raw;
    std::string section;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::string line = detail::trim(detail::strip_comment(raw));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigParseError(source, line_no, "unterminated section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            if (!detail::valid_key(section)) throw ConfigParseError(source, line_no, "invalid section name '" + section + "'");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigParseError(source, line_no, "expected 'key = value'");
        const std::string key = detail::trim(line.substr(0, eq));
        if (!detail::valid_key(key)) throw ConfigParseError(source, line_no, "invalid key '" + key + "'");
        ConfigScalar v;
        std::string err;
        if (!detail::parse_scalar(detail::trim(line.substr(eq + 1)), v, err)) throw ConfigParseError(source, line_no, err);
        const std::string full = section.empty() ? key : section + "." + key;
        if (table.count(full)) throw ConfigParseError(source, line_no, "duplicate key '" + full + "'");
        table[full] = {std::move(v), source, line_no};
    }
    return table;
}

inline ConfigTable parse_config_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigParseError(path.string(), 0, "cannot open config file");
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str(), path.string());
}

/// Applies a `key=value` override. Values that do not parse as a literal are taken
/// as bare strings.
inline void apply_override(ConfigTable& table, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigParseError("--set", 0, "expected key=value, got '" + assignment + "'");
    const std::string key = detail::trim(assignment.substr(0, eq));
    const std::string text = detail::trim(assignment.substr(eq + 1));
    if (!detail::valid_key(key)) throw ConfigParseError("--set", 0, "invalid key '" + key + "'");
    ConfigScalar v;
    std::string err;
    if (!detail::parse_scalar(text, v, err)) {
        if (!text.empty() && text.front() == '"') throw ConfigParseError("--set", 0, err);
        v = text;
    }
    table[key] = {std::move(v), "--set", 0};
}

struct DataConfig {
    int per_class = 250;
    std::string ppm_dir;  // empty: synthetic data
};

struct AnalysisConfig {
    int samples = 128;
    int reference_images = 0;  // 0: the whole dataset
};

struct RunConfig {
    std::uint64_t seed = 0;
    ModelConfig model;
    TrainConfig train;
    DataConfig data;
    SamplerConfig sampler;
    AnalysisConfig analysis;
};

namespace detail {

class Binder {
public:
    explicit Binder(const ConfigTable& table) : table_(table) {}

    template <typename Field>
    void bind(const std::string& key, Field& field) {
        known_.push_back(key);
        auto it = table_.find(key);
        if (it == table_.end()) return;
        const ConfigValue& cv = it->second;
        auto fail = [&](const char* expected) {
            throw ConfigParseError(cv.source, cv.line, "key '" + key + "' expects " + expected);
        };
        if constexpr (std::is_same_v<Field, bool>) {
            if (auto* b = std::get_if<bool>(&cv.value)) field = *b;
            else if (auto* s = std::get_if<std::string>(&cv.value); s && (*s == "true" || *s == "false")) field = *s == "true";
            else fail("a boolean");
        } else if constexpr (std::is_same_v<Field, std::string>) {
            if (auto* s = std::get_if<std::string>(&cv.value)) field = *s;
            else fail("a string");
        } else if constexpr (std::is_same_v<Field, double>) {
            if (auto* d = std::get_if<double>(&cv.value)) field = *d;
            else if (auto* i = std::get_if<std::int64_t>(&cv.value)) field = static_cast<double>(*i);
            else fail("a number");
        } else if constexpr (std::is_same_v<Field, std::uint64_t>) {
            auto* i = std::get_if<std::int64_t>(&cv.value);
            if (!i || *i < 0) fail("a non-negative integer");
            field = static_cast<std::uint64_t>(*i);
        } else {
            auto* i = std::get_if<std::int64_t>(&cv.value);
            if (!i || *i < std::numeric_limits<int>::min() || *i > std::numeric_limits<int>::max()) fail("an integer");
            field = static_cast<int>(*i);
        }
    }

    void reject_unknown() const {
        for (const auto& [key, cv] : table_) {
            if (std::find(known_.begin(), known_.end(), key) == known_.end()) {
                throw ConfigParseError(cv.source, cv.line, "unknown key '" + key + "'");
            }
        }
    }

private:
    const ConfigTable& table_;
    std::vector<std::string> known_;
};

template <typename Visit>
void visit_run_config(RunConfig& c, Visit&& v) {
    v("seed", c.seed);
    v("model.image_channels", c.model.image_channels);
    v("model.image_size", c.model.image_size);
    v("model.num_classes", c.model.num_classes);
    v("model.patch_size", c.model.patch_size);
    v("model.freq_depth", c.model.freq_depth);
    v("model.freq_width", c.model.freq_width);
    v("model.freq_heads", c.model.freq_heads);
    v("model.spatial_depth", c.model.spatial_depth);
    v("model.spatial_width", c.model.spatial_width);
    v("model.time_embed_dim", c.model.time_embed_dim);
    v("model.sigma_low", c.model.sigma_low);
    v("model.sigma_high", c.model.sigma_high);
    v("train.alpha", c.train.alpha);
    v("train.learning_rate", c.train.learning_rate);
    v("train.beta1", c.train.beta1);
    v("train.beta2", c.train.beta2);
    v("train.adam_eps", c.train.adam_eps);
    v("train.weight_decay", c.train.weight_decay);
    v("train.batch_size", c.train.batch_size);
    v("train.warmup_steps", c.train.warmup_steps);
    v("train.total_steps", c.train.total_steps);
    v("train.label_dropout", c.train.label_dropout);
    v("train.checkpoint_every", c.train.checkpoint_every);
    v("loss.use_low_supervision", c.train.loss.use_low_supervision);
    v("loss.use_high_supervision", c.train.loss.use_high_supervision);
    v("loss.use_freq_domain_loss", c.train.loss.use_freq_domain_loss);
    v("data.per_class", c.data.per_class);
    v("data.ppm_dir", c.data.ppm_dir);
    v("sampler.steps", c.sampler.steps);
    v("sampler.cfg_scale", c.sampler.cfg_scale);
    v("sampler.capture_every", c.sampler.capture_every);
    v("analysis.samples", c.analysis.samples);
    v("analysis.reference_images", c.analysis.reference_images);
}

}  // namespace detail

/// Also accepts flat top-level aliases for train.* keys (e.g. `total_steps`).
inline ConfigTable normalize_aliases(ConfigTable table) {
    static const char* train_keys[] = {"alpha", "learning_rate", "beta1", "beta2", "adam_eps", "weight_decay",
                                       "batch_size", "warmup_steps", "total_steps", "label_dropout", "checkpoint_every"};
    for (const char* k : train_keys) {
        auto it = table.find(k);
        if (it == table.end()) continue;
        const std::string full = std::string("train.") + k;
        auto existing = table.find(full);
        // An override on either spelling wins over the file value.
        if (existing == table.end() || it->second.line == 0 || existing->second.line != 0) table[full] = it->second;
        table.erase(k);
    }
    return table;
}

/// Builds a validated RunConfig. `seed` is mandatory.
inline RunConfig resolve_config(const ConfigTable& raw) {
    const ConfigTable table = normalize_aliases(raw);
    if (!table.count("seed")) throw ConfigParseError("<config>", 0, "missing mandatory key 'seed'");
    RunConfig c;
    detail::Binder binder(table);
    detail::visit_run_config(c, [&](const std::string& key, auto& field) { binder.bind(key, field); });
    binder.reject_unknown();

    c.train.seed = c.seed;
    c.sampler.seed = c.seed;
    c.model.label_dropout = c.train.label_dropout;
    c.model.validate();
    c.train.validate();
    c.sampler.validate();
    if (c.data.per_class < 1) throw ConfigError("data.per_class must be >= 1");
    if (c.analysis.samples < 1) throw ConfigError("analysis.samples must be >= 1");
    if (c.analysis.reference_images < 0) throw ConfigError("analysis.reference_images must be >= 0");
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
    ConfigTable table = parse_config_file(path);
    for (const auto& o : overrides) apply_override(table, o);
    return resolve_config(table);
}

/// Fully resolved config in the same grammar, grouped by section.
inline std::string to_toml(RunConfig c) {
    std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections;
    std::string top;
    detail::visit_run_config(c, [&](const std::string& key, auto& field) {
        using F = std::decay_t<decltype(field)>;
        ConfigScalar v;
        if constexpr (std::is_same_v<F, std::uint64_t>) v = static_cast<std::int64_t>(field);
        else if constexpr (std::is_same_v<F, int>) v = static_cast<std::int64_t>(field);
        else v = field;
        const auto dot = key.find('.');
        if (dot == std::string::npos) {
            top += key + " = " + detail::format_scalar(v) + "\n";
        } else {
            sections[key.substr(0, dot)].emplace_back(key.substr(dot + 1), detail::format_scalar(v));
        }
    });
    std::string out = top;
    for (const char* name : {"model", "train", "loss", "data", "sampler", "analysis"}) {
        out += "\n[" + std::string(name) + "]\n";
        for (const auto& [k, v] : sections[name]) out += k + " = " + v + "\n";
    }
    return out;
}

inline Dataset build_dataset(const RunConfig& c) {
    if (!c.data.ppm_dir.empty()) return load_ppm_directory(c.data.ppm_dir, c.model.num_classes);
    GeneratorSpec spec;
    spec.num_classes = c.model.num_classes;
    spec.per_class = c.data.per_class;
    spec.size = c.model.image_size;
    spec.channels = c.model.image_channels;
    spec.seed = c.seed;
    return synth_dataset(spec);
}

}  // namespace freqflow
