#include "attndb/run_config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <vector>

#include "attndb/common.hpp"

namespace attndb {
namespace {

// Minimal TOML subset: [table] headers, key = value with strings, integers,
// floats and booleans, full-line or trailing comments. Covers exactly what
// run configs need; anything else is rejected loudly.
struct TomlValue {
    enum class Kind { kString, kInt, kFloat, kBool } kind = Kind::kString;
    std::string str;
    long long integer = 0;
    double real = 0.0;
    bool boolean = false;
    int line = 0;
};

using TomlTable = std::map<std::string, TomlValue>;

std::string strip(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void parse_fail(const std::string& origin, int line, const std::string& msg) {
    fail(ErrorCode::InvalidConfig, origin + ":" + std::to_string(line) + ": " + msg);
}

TomlValue parse_value(std::string raw, const std::string& origin, int line) {
    TomlValue v;
    v.line = line;
    raw = strip(raw);
    if (raw.empty()) parse_fail(origin, line, "missing value");
    if (raw.front() == '"') {
        if (raw.size() < 2 || raw.back() != '"')
            parse_fail(origin, line, "unterminated string");
        v.kind = TomlValue::Kind::kString;
        std::string out;
        for (std::size_t i = 1; i + 1 < raw.size(); ++i) {
            if (raw[i] == '\\' && i + 2 < raw.size()) {
                ++i;
                switch (raw[i]) {
                    case 'n': out += '\n'; break;
                    case 't': out += '\t'; break;
                    case '"': out += '"'; break;
                    case '\\': out += '\\'; break;
                    default: parse_fail(origin, line, "unsupported escape");
                }
            } else {
                out += raw[i];
            }
        }
        v.str = out;
        return v;
    }
    if (raw == "true" || raw == "false") {
        v.kind = TomlValue::Kind::kBool;
        v.boolean = raw == "true";
        return v;
    }
    // integer?
    {
        const char* b = raw.data();
        const char* e = raw.data() + raw.size();
        long long iv = 0;
        auto [p, ec] = std::from_chars(b, e, iv);
        if (ec == std::errc() && p == e) {
            v.kind = TomlValue::Kind::kInt;
            v.integer = iv;
            return v;
        }
    }
    // float (accepts scientific notation)
    try {
        std::size_t used = 0;
        const double d = std::stod(raw, &used);
        if (used == raw.size()) {
            v.kind = TomlValue::Kind::kFloat;
            v.real = d;
            return v;
        }
    } catch (const std::exception&) {
    }
    parse_fail(origin, line, "unsupported value: " + raw);
}

std::string strip_comment(const std::string& line) {
    bool in_string = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_string = !in_string;
        if (line[i] == '#' && !in_string) return line.substr(0, i);
    }
    return line;
}

std::map<std::string, TomlTable> parse_toml(const std::string& text, const std::string& origin) {
    std::map<std::string, TomlTable> tables;
    std::string current;  // "" = root
    std::istringstream in(text);
    std::string raw;
    int lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const std::string line = strip(strip_comment(raw));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') parse_fail(origin, lineno, "malformed table header");
            current = strip(line.substr(1, line.size() - 2));
            if (current.empty()) parse_fail(origin, lineno, "empty table name");
            tables[current];
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) parse_fail(origin, lineno, "expected key = value");
        const std::string key = strip(line.substr(0, eq));
        if (key.empty()) parse_fail(origin, lineno, "empty key");
        if (tables[current].count(key)) parse_fail(origin, lineno, "duplicate key: " + key);
        tables[current][key] = parse_value(line.substr(eq + 1), origin, lineno);
    }
    return tables;
}

// --- schema binding -------------------------------------------------------

class Binder {
public:
    Binder(TomlTable& table, std::string origin, std::string scope)
        : table_(table), origin_(std::move(origin)), scope_(std::move(scope)) {}

    ~Binder() = default;

    void finish() {
        for (const auto& [key, value] : table_)
            if (!used_.count(key))
                fail(ErrorCode::InvalidConfig,
                     origin_ + ": unknown key " + qualified(key));
    }

    bool has(const std::string& key) {
        return table_.count(key) > 0;
    }

    void get_string(const std::string& key, std::string& out) {
        if (const TomlValue* v = take(key)) {
            if (v->kind != TomlValue::Kind::kString) type_fail(key, *v, "string");
            out = v->str;
        }
    }
    void get_path(const std::string& key, std::filesystem::path& out) {
        std::string s = out.string();
        get_string(key, s);
        out = s;
    }
    void get_bool(const std::string& key, bool& out) {
        if (const TomlValue* v = take(key)) {
            if (v->kind != TomlValue::Kind::kBool) type_fail(key, *v, "boolean");
            out = v->boolean;
        }
    }
    void get_int(const std::string& key, int& out) {
        if (const TomlValue* v = take(key)) {
            if (v->kind != TomlValue::Kind::kInt) type_fail(key, *v, "integer");
            out = static_cast<int>(v->integer);
        }
    }
    void get_u64(const std::string& key, std::uint64_t& out) {
        if (const TomlValue* v = take(key)) {
            if (v->kind != TomlValue::Kind::kInt || v->integer < 0)
                type_fail(key, *v, "non-negative integer");
            out = static_cast<std::uint64_t>(v->integer);
        }
    }
    void get_double(const std::string& key, double& out) {
        if (const TomlValue* v = take(key)) {
            if (v->kind == TomlValue::Kind::kFloat)
                out = v->real;
            else if (v->kind == TomlValue::Kind::kInt)
                out = static_cast<double>(v->integer);
            else
                type_fail(key, *v, "number");
        }
    }

private:
    const TomlValue* take(const std::string& key) {
        auto it = table_.find(key);
        if (it == table_.end()) return nullptr;
        used_.insert(key);
        return &it->second;
    }
    std::string qualified(const std::string& key) const {
        return scope_.empty() ? key : scope_ + "." + key;
    }
    [[noreturn]] void type_fail(const std::string& key, const TomlValue& v,
                                const std::string& want) {
        fail(ErrorCode::InvalidConfig, origin_ + ":" + std::to_string(v.line) + ": " +
                                           qualified(key) + " must be a " + want);
    }

    TomlTable& table_;
    std::string origin_;
    std::string scope_;
    std::set<std::string> used_;
};

void bind_stage(TomlTable& table, const std::string& origin, StagePlan& plan,
                const std::string& scope) {
    Binder b(table, origin, scope);
    b.get_double("learning_rate", plan.learning_rate);
    b.get_int("steps", plan.steps);
    b.get_double("lambda_mu", plan.reg_weights.lambda_mu);
    b.get_double("lambda_sigma", plan.reg_weights.lambda_sigma);
    b.get_int("batch_size", plan.batch_size);
    b.finish();
}

std::string toml_string(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"' || c == '\\') out += '\\';
        out += c;
    }
    out += '"';
    return out;
}

std::string toml_float(double v) {
    std::ostringstream out;
    out << std::setprecision(17) << v;
    std::string s = out.str();
    // ensure the value re-parses as a float, not an integer
    if (s.find('.') == std::string::npos && s.find('e') == std::string::npos &&
        s.find("inf") == std::string::npos && s.find("nan") == std::string::npos)
        s += ".0";
    return s;
}

}  // namespace

RunConfig parse_run_config_string(const std::string& text, const std::string& origin) {
    auto tables = parse_toml(text, origin);
    RunConfig cfg;

    const std::set<std::string> known_tables = {"",       "concept", "backend_options",
                                                "stage1", "stage2",  "stage3"};
    for (const auto& [name, _] : tables)
        if (!known_tables.count(name))
            fail(ErrorCode::InvalidConfig, origin + ": unknown table [" + name + "]");

    {
        Binder b(tables[""], origin, "");
        b.get_u64("seed", cfg.seed);
        b.get_path("output_dir", cfg.output_dir);
        b.get_string("backend", cfg.backend);
        b.get_bool("hflip", cfg.hflip);
        b.finish();
    }
    {
        Binder b(tables["concept"], origin, "concept");
        b.get_string("id", cfg.concept_spec.concept_id);
        b.get_path("image_dir", cfg.concept_spec.image_dir);
        b.get_string("placeholder", cfg.concept_spec.placeholder);
        b.get_string("super_category", cfg.concept_spec.super_category);
        b.get_string("training_prompt", cfg.concept_spec.training_prompt);
        b.finish();
    }
    {
        Binder b(tables["backend_options"], origin, "backend_options");
        b.get_int("resolution", cfg.toy.resolution);
        b.get_int("latent_channels", cfg.toy.latent_channels);
        b.get_int("model_dim", cfg.toy.model_dim);
        b.get_int("token_dim", cfg.toy.token_dim);
        b.get_int("vocab_size", cfg.toy.vocab_size);
        b.get_int("heads", cfg.toy.heads);
        b.get_int("blocks", cfg.toy.blocks);
        b.get_int("timesteps", cfg.toy.timesteps);
        b.get_double("beta_start", cfg.toy.beta_start);
        b.get_double("beta_end", cfg.toy.beta_end);
        b.get_int("max_prompt_len", cfg.toy.max_prompt_len);
        b.get_string("weights_path", cfg.weights_path);
        b.finish();
    }
    bind_stage(tables["stage1"], origin, cfg.schedule[0], "stage1");
    bind_stage(tables["stage2"], origin, cfg.schedule[1], "stage2");
    bind_stage(tables["stage3"], origin, cfg.schedule[2], "stage3");

    validate_run_config(cfg);
    return cfg;
}

RunConfig parse_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::InvalidConfig, "cannot read config " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config_string(buf.str(), path.string());
}

void validate_run_config(const RunConfig& config) {
    if (config.backend != "toy" && config.backend != "pretrained")
        fail(ErrorCode::InvalidConfig, "backend must be \"toy\" or \"pretrained\"");
    if (config.backend == "pretrained" && config.weights_path.empty())
        fail(ErrorCode::InvalidConfig, "pretrained backend requires backend_options.weights_path");
    if (config.concept_spec.concept_id.empty())
        fail(ErrorCode::InvalidConfig, "concept.id must be set");
    if (config.concept_spec.placeholder.empty())
        fail(ErrorCode::InvalidConfig, "concept.placeholder must be set");
    if (config.concept_spec.super_category.empty())
        fail(ErrorCode::InvalidConfig, "concept.super_category must be set");
    if (config.output_dir.empty()) fail(ErrorCode::InvalidConfig, "output_dir must be set");
    const char* names[3] = {"stage1", "stage2", "stage3"};
    for (int i = 0; i < 3; ++i) {
        const StagePlan& p = config.schedule[i];
        if (p.learning_rate <= 0.0)
            fail(ErrorCode::InvalidConfig, std::string(names[i]) + ".learning_rate must be > 0");
        if (p.steps < 1) fail(ErrorCode::InvalidConfig, std::string(names[i]) + ".steps must be >= 1");
        if (p.batch_size < 1)
            fail(ErrorCode::InvalidConfig, std::string(names[i]) + ".batch_size must be >= 1");
        if (p.reg_weights.lambda_mu < 0.0 || p.reg_weights.lambda_sigma < 0.0)
            fail(ErrorCode::InvalidConfig, std::string(names[i]) + ": lambda weights must be >= 0");
    }
}

std::string emit_run_config(const RunConfig& config) {
    std::ostringstream out;
    out << "seed = " << config.seed << "\n";
    out << "output_dir = " << toml_string(config.output_dir.string()) << "\n";
    out << "backend = " << toml_string(config.backend) << "\n";
    out << "hflip = " << (config.hflip ? "true" : "false") << "\n";
    out << "\n[concept]\n";
    out << "id = " << toml_string(config.concept_spec.concept_id) << "\n";
    out << "image_dir = " << toml_string(config.concept_spec.image_dir.string()) << "\n";
    out << "placeholder = " << toml_string(config.concept_spec.placeholder) << "\n";
    out << "super_category = " << toml_string(config.concept_spec.super_category) << "\n";
    out << "training_prompt = " << toml_string(config.concept_spec.training_prompt) << "\n";
    out << "\n[backend_options]\n";
    out << "resolution = " << config.toy.resolution << "\n";
    out << "latent_channels = " << config.toy.latent_channels << "\n";
    out << "model_dim = " << config.toy.model_dim << "\n";
    out << "token_dim = " << config.toy.token_dim << "\n";
    out << "vocab_size = " << config.toy.vocab_size << "\n";
    out << "heads = " << config.toy.heads << "\n";
    out << "blocks = " << config.toy.blocks << "\n";
    out << "timesteps = " << config.toy.timesteps << "\n";
    out << "beta_start = " << toml_float(config.toy.beta_start) << "\n";
    out << "beta_end = " << toml_float(config.toy.beta_end) << "\n";
    out << "max_prompt_len = " << config.toy.max_prompt_len << "\n";
    if (!config.weights_path.empty())
        out << "weights_path = " << toml_string(config.weights_path) << "\n";
    const char* names[3] = {"stage1", "stage2", "stage3"};
    for (int i = 0; i < 3; ++i) {
        const StagePlan& p = config.schedule[i];
        out << "\n[" << names[i] << "]\n";
        out << "learning_rate = " << toml_float(p.learning_rate) << "\n";
        out << "steps = " << p.steps << "\n";
        out << "lambda_mu = " << toml_float(p.reg_weights.lambda_mu) << "\n";
        out << "lambda_sigma = " << toml_float(p.reg_weights.lambda_sigma) << "\n";
        out << "batch_size = " << p.batch_size << "\n";
    }
    return out.str();
}

void write_run_config(const RunConfig& config, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) fail(ErrorCode::IoFailure, "cannot write " + path.string());
    out << emit_run_config(config);
}

bool run_config_equal(const RunConfig& a, const RunConfig& b) {
    auto stage_eq = [](const StagePlan& x, const StagePlan& y) {
        return x.stage_id == y.stage_id && x.scope == y.scope &&
               x.learning_rate == y.learning_rate && x.steps == y.steps &&
               x.reg_weights.lambda_mu == y.reg_weights.lambda_mu &&
               x.reg_weights.lambda_sigma == y.reg_weights.lambda_sigma &&
               x.batch_size == y.batch_size;
    };
    return a.seed == b.seed && a.output_dir == b.output_dir && a.backend == b.backend &&
           a.hflip == b.hflip && a.concept_spec.concept_id == b.concept_spec.concept_id &&
           a.concept_spec.image_dir == b.concept_spec.image_dir &&
           a.concept_spec.placeholder == b.concept_spec.placeholder &&
           a.concept_spec.super_category == b.concept_spec.super_category &&
           a.concept_spec.training_prompt == b.concept_spec.training_prompt &&
           a.weights_path == b.weights_path && a.toy.resolution == b.toy.resolution &&
           a.toy.latent_channels == b.toy.latent_channels &&
           a.toy.model_dim == b.toy.model_dim && a.toy.token_dim == b.toy.token_dim &&
           a.toy.vocab_size == b.toy.vocab_size && a.toy.heads == b.toy.heads &&
           a.toy.blocks == b.toy.blocks && a.toy.timesteps == b.toy.timesteps &&
           a.toy.beta_start == b.toy.beta_start && a.toy.beta_end == b.toy.beta_end &&
           a.toy.max_prompt_len == b.toy.max_prompt_len && stage_eq(a.schedule[0], b.schedule[0]) &&
           stage_eq(a.schedule[1], b.schedule[1]) && stage_eq(a.schedule[2], b.schedule[2]);
}

}  // namespace attndb
