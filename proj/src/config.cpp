#include "facm/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace facm::config {
namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& where, const std::string& key, const std::string& value,
                            const std::string& expected) {
    throw ConfigError(where + ": bad value '" + value + "' for key '" + key + "' (expected " + expected + ")");
}

double to_double(const std::string& where, const std::string& key, const std::string& value) {
    double v = 0.0;
    const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || p != value.data() + value.size()) bad_value(where, key, value, "a number");
    return v;
}

std::uint64_t to_u64(const std::string& where, const std::string& key, const std::string& value) {
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || p != value.data() + value.size()) bad_value(where, key, value, "a non-negative integer");
    return v;
}

int to_int(const std::string& where, const std::string& key, const std::string& value) {
    int v = 0;
    const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || p != value.data() + value.size()) bad_value(where, key, value, "an integer");
    return v;
}

bool to_bool(const std::string& where, const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    bad_value(where, key, value, "true or false");
}

std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(trim(item));
    return out;
}

template <class F>
auto parse_enum(const std::string& where, const std::string& key, const std::string& value, F parse) {
    try {
        return parse(value);
    } catch (const ContractViolation& e) {
        throw ConfigError(where + ": key '" + key + "': " + e.what());
    }
}

struct Field {
    const char* key;
    void (*set)(train::TrainConfig&, const std::string& where, const std::string& key, const std::string& value);
    std::string (*get)(const train::TrainConfig&);
};

#define FACM_NUM(name, member)                                                                          \
    Field {                                                                                             \
        name, [](train::TrainConfig& c, const std::string& w, const std::string& k, const std::string& v) { \
            c.member = to_double(w, k, v);                                                              \
        },                                                                                              \
            [](const train::TrainConfig& c) { return format_double(c.member); }                         \
    }
#define FACM_SIZE(name, member)                                                                         \
    Field {                                                                                             \
        name, [](train::TrainConfig& c, const std::string& w, const std::string& k, const std::string& v) { \
            c.member = static_cast<decltype(c.member)>(to_u64(w, k, v));                                \
        },                                                                                              \
            [](const train::TrainConfig& c) { return std::to_string(c.member); }                        \
    }
#define FACM_TEXT(name, member)                                                                         \
    Field {                                                                                             \
        name, [](train::TrainConfig& c, const std::string&, const std::string&, const std::string& v) { \
            c.member = v;                                                                               \
        },                                                                                              \
            [](const train::TrainConfig& c) { return c.member; }                                        \
    }
#define FACM_BOOL(name, member)                                                                         \
    Field {                                                                                             \
        name, [](train::TrainConfig& c, const std::string& w, const std::string& k, const std::string& v) { \
            c.member = to_bool(w, k, v);                                                                \
        },                                                                                              \
            [](const train::TrainConfig& c) { return std::string(c.member ? "true" : "false"); }        \
    }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        {"paradigm",
         [](train::TrainConfig& c, const std::string& w, const std::string& k, const std::string& v) {
             c.paradigm = parse_enum(w, k, v, train::parse_paradigm);
         },
         [](const train::TrainConfig& c) { return std::string(train::to_string(c.paradigm)); }},
        FACM_SIZE("steps", steps),
        FACM_SIZE("batch_size", batch_size),
        FACM_NUM("lr", lr),
        {"adam_betas",
         [](train::TrainConfig& c, const std::string& w, const std::string& k, const std::string& v) {
             const auto parts = split_list(v);
             if (parts.size() != 2) bad_value(w, k, v, "two numbers separated by a comma");
             c.adam_betas = {to_double(w, k, parts[0]), to_double(w, k, parts[1])};
         },
         [](const train::TrainConfig& c) {
             return format_double(c.adam_betas[0]) + ", " + format_double(c.adam_betas[1]);
         }},
        FACM_NUM("adam_eps", adam_eps),
        FACM_NUM("weight_decay", weight_decay),
        FACM_NUM("ema_rel_length", ema_rel_length),
        FACM_NUM("p_mean", schedule.p_mean),
        FACM_NUM("p_std", schedule.p_std),
        FACM_NUM("w", guidance.w),
        FACM_NUM("t_low", guidance.t_low),
        {"alpha_kind",
         [](train::TrainConfig& c, const std::string& w, const std::string& k, const std::string& v) {
             c.weighting.alpha.kind = parse_enum(w, k, v, obj::parse_weight_kind);
         },
         [](const train::TrainConfig& c) { return std::string(obj::to_string(c.weighting.alpha.kind)); }},
        FACM_NUM("alpha_p", weighting.alpha.p),
        {"beta_kind",
         [](train::TrainConfig& c, const std::string& w, const std::string& k, const std::string& v) {
             c.weighting.beta.kind = parse_enum(w, k, v, obj::parse_weight_kind);
         },
         [](const train::TrainConfig& c) { return std::string(obj::to_string(c.weighting.beta.kind)); }},
        FACM_NUM("beta_p", weighting.beta.p),
        {"scheme",
         [](train::TrainConfig& c, const std::string& w, const std::string& k, const std::string& v) {
             c.scheme = parse_enum(w, k, v, flow::parse_scheme);
         },
         [](const train::TrainConfig& c) { return std::string(flow::to_string(c.scheme)); }},
        FACM_TEXT("dataset", dataset),
        FACM_SIZE("dataset_size", dataset_size),
        FACM_SIZE("seed", seed),
        FACM_NUM("mixed_condition_ratio", mixed_condition_ratio),
        FACM_NUM("label_dropout", label_dropout),
        FACM_SIZE("hidden_width", hidden_width),
        FACM_SIZE("depth", depth),
        FACM_SIZE("time_embed_dim", time_embed_dim),
        FACM_BOOL("class_conditional", class_conditional),
        FACM_NUM("dropout", dropout),
        {"objective",
         [](train::TrainConfig& c, const std::string& w, const std::string& k, const std::string& v) {
             c.objective = parse_enum(w, k, v, obj::parse_objective);
         },
         [](const train::TrainConfig& c) { return std::string(obj::to_string(c.objective)); }},
        FACM_NUM("fm_weight", fm_weight),
        FACM_BOOL("clamp", clamp.enabled),
        FACM_NUM("clamp_lo", clamp.lo),
        FACM_NUM("clamp_hi", clamp.hi),
        FACM_NUM("norm_c", norm_c),
        FACM_NUM("meanflow_ratio", meanflow_ratio),
        FACM_NUM("grad_clip", grad_clip),
        FACM_SIZE("nonfinite_abort", nonfinite_abort),
        FACM_TEXT("teacher", teacher),
        FACM_TEXT("checkpoint", checkpoint),
        {"eval_nfe",
         [](train::TrainConfig& c, const std::string& w, const std::string& k, const std::string& v) {
             c.eval_nfe.clear();
             for (const auto& part : split_list(v)) c.eval_nfe.push_back(to_u64(w, k, part));
         },
         [](const train::TrainConfig& c) {
             std::string s;
             for (std::size_t i = 0; i < c.eval_nfe.size(); ++i) s += (i ? ", " : "") + std::to_string(c.eval_nfe[i]);
             return s;
         }},
        FACM_SIZE("eval_samples", eval_samples),
        FACM_SIZE("eval_projections", eval_projections),
        FACM_SIZE("reference_steps", reference_steps),
        FACM_TEXT("reference_method", reference_method),
        {"label",
         [](train::TrainConfig& c, const std::string& w, const std::string& k, const std::string& v) {
             c.label = to_int(w, k, v);
         },
         [](const train::TrainConfig& c) { return std::to_string(c.label); }},
    };
    return table;
}

#undef FACM_NUM
#undef FACM_SIZE
#undef FACM_TEXT
#undef FACM_BOOL

void validate(const train::TrainConfig& c, const std::string& source) {
    try {
        c.validate();
    } catch (const ContractViolation& e) {
        throw ConfigError(source + ": " + e.what());
    }
}

}  // namespace

std::string format_double(double v) {
    char buf[64];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

const std::vector<std::string>& known_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> k;
        for (const auto& f : fields()) k.emplace_back(f.key);
        return k;
    }();
    return keys;
}

void apply(train::TrainConfig& config, const std::string& key, const std::string& value, const std::string& where) {
    for (const auto& f : fields())
        if (key == f.key) {
            f.set(config, where, key, value);
            return;
        }
    throw ConfigError(where + ": unknown key '" + key + "'");
}

namespace {

void apply_text(train::TrainConfig& c, const std::string& text, const std::string& source) {
    std::istringstream is(text);
    std::string line;
    for (std::size_t lineno = 1; std::getline(is, line); ++lineno) {
        const auto hash = line.find('#');
        const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
        if (body.empty()) continue;
        const std::string where = source + ":" + std::to_string(lineno);
        const auto eq = body.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value', got '" + body + "'");
        const std::string key = trim(body.substr(0, eq));
        if (key.empty()) throw ConfigError(where + ": missing key before '='");
        apply(c, key, trim(body.substr(eq + 1)), where);
    }
}

}  // namespace

train::TrainConfig parse_text(const std::string& text, const std::string& source) {
    train::TrainConfig c;
    apply_text(c, text, source);
    validate(c, source);
    return c;
}

train::TrainConfig parse_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
    train::TrainConfig c;
    if (!path.empty()) {
        std::ifstream is(path);
        if (!is) throw ConfigError("cannot read config file " + path.string());
        std::ostringstream ss;
        ss << is.rdbuf();
        apply_text(c, ss.str(), path.string());
    }
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw ConfigError("--set " + o + ": expected key=value");
        const std::string key = trim(o.substr(0, eq));
        apply(c, key, trim(o.substr(eq + 1)), "--set " + key);
    }
    validate(c, path.empty() ? "config" : path.string());
    return c;
}

std::string to_text(const train::TrainConfig& config) {
    std::string out;
    for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(config) + "\n";
    return out;
}

}  // namespace facm::config
