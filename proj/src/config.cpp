#include "lrgt/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace lrgt {

double TrainConfig::lr_at_epoch(int epoch) const {
    double rate = lr;
    if (epoch >= lr_decay_epoch1) rate *= lr_decay;
    if (epoch >= lr_decay_epoch2) rate *= lr_decay;
    return rate;
}

DecoderConfig ModelConfig::decoder() const {
    return DecoderConfig::standard_schedule(encoder.d_decoder, decoder_widths, decoder_heads,
                                            decoder_mlp_ratio, token_budget);
}

void ModelConfig::validate() const {
    encoder.validate();
    decoder().validate();
    if (encoder.merged_tokens != 64) {
        throw ConfigError("the decoder seed grid is 4^3, so merged_tokens must be 64");
    }
    if (train.views_per_sample < 1 || train.views_per_sample > 20) {
        throw ConfigError("views_per_sample must be in [1, 20]");
    }
    if (train.batch_size < 1 || train.epochs < 0) {
        throw ConfigError("batch_size must be >= 1 and epochs >= 0");
    }
    if (!(train.threshold > 0.0 && train.threshold < 1.0)) {
        throw ConfigError("threshold must lie in (0, 1)");
    }
    if (train.lr <= 0.0 || train.lr_decay <= 0.0) {
        throw ConfigError("lr and lr_decay must be positive");
    }
}

ModelConfig ModelConfig::desk() {
    ModelConfig cfg;  // the defaults are the desk preset
    return cfg;
}

ModelConfig ModelConfig::reference() {
    ModelConfig cfg;
    cfg.encoder.image_size = 224;
    cfg.encoder.patch_size = 16;
    cfg.encoder.in_channels = 3;
    cfg.encoder.d_model = 768;
    cfg.encoder.heads = 12;
    cfg.encoder.n1 = 6;
    cfg.encoder.n2 = 3;
    cfg.encoder.groups = 49;
    cfg.encoder.mlp_ratio = 4;
    cfg.encoder.merged_tokens = 64;
    cfg.encoder.d_decoder = 384;
    cfg.decoder_widths = {384, 192, 96, 48};
    cfg.decoder_heads = 4;
    cfg.decoder_mlp_ratio = 4;
    cfg.train.lr = 1e-4;
    cfg.train.epochs = 110;
    cfg.train.lr_decay_epoch1 = 60;
    cfg.train.lr_decay_epoch2 = 90;
    cfg.train.batch_size = 32;
    cfg.train.threshold = 0.5;
    return cfg;
}

// ---- schema -------------------------------------------------------------------

namespace {

struct Field {
    std::function<std::string(const ModelConfig&)> get;
    std::function<void(ModelConfig&, const std::string&)> set;
    bool architectural = false;
};

int parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const int out = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("key '" + key + "': expected true/false, got '" + v + "'");
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const std::uint64_t out = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected an unsigned integer, got '" + v + "'");
    }
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string part;
    while (std::getline(ss, part, ',')) out.push_back(parse_int(key, part));
    if (out.empty()) throw ConfigError("key '" + key + "': expected a comma-separated list");
    return out;
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::string fmt(const std::vector<int>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) os << ',';
        os << v[i];
    }
    return os.str();
}

const std::map<std::string, Field>& schema() {
    static const std::map<std::string, Field> s = [] {
        std::map<std::string, Field> m;
        auto arch_int = [&m](const std::string& key, int EncoderConfig::*member) {
            m[key] = {[member](const ModelConfig& c) { return std::to_string(c.encoder.*member); },
                      [key, member](ModelConfig& c, const std::string& v) {
                          c.encoder.*member = parse_int(key, v);
                      },
                      true};
        };
        arch_int("image_size", &EncoderConfig::image_size);
        arch_int("patch_size", &EncoderConfig::patch_size);
        arch_int("in_channels", &EncoderConfig::in_channels);
        arch_int("d_model", &EncoderConfig::d_model);
        arch_int("heads", &EncoderConfig::heads);
        arch_int("n1", &EncoderConfig::n1);
        arch_int("n2", &EncoderConfig::n2);
        arch_int("groups", &EncoderConfig::groups);
        arch_int("group_rows", &EncoderConfig::group_rows);
        arch_int("group_cols", &EncoderConfig::group_cols);
        arch_int("mlp_ratio", &EncoderConfig::mlp_ratio);
        arch_int("merged_tokens", &EncoderConfig::merged_tokens);
        arch_int("d_decoder", &EncoderConfig::d_decoder);
        m["strategy"] = {[](const ModelConfig& c) { return strategy_name(c.encoder.strategy); },
                         [](ModelConfig& c, const std::string& v) {
                             c.encoder.strategy = strategy_from_name(v);
                         },
                         true};
        m["use_ifs"] = {[](const ModelConfig& c) { return c.encoder.use_ifs ? "true" : "false"; },
                        [](ModelConfig& c, const std::string& v) {
                            c.encoder.use_ifs = parse_bool("use_ifs", v);
                        },
                        true};
        m["decoder_widths"] = {[](const ModelConfig& c) { return fmt(c.decoder_widths); },
                               [](ModelConfig& c, const std::string& v) {
                                   c.decoder_widths = parse_int_list("decoder_widths", v);
                               },
                               true};
        m["decoder_heads"] = {[](const ModelConfig& c) { return std::to_string(c.decoder_heads); },
                              [](ModelConfig& c, const std::string& v) {
                                  c.decoder_heads = parse_int("decoder_heads", v);
                              },
                              true};
        m["decoder_mlp_ratio"] = {
            [](const ModelConfig& c) { return std::to_string(c.decoder_mlp_ratio); },
            [](ModelConfig& c, const std::string& v) {
                c.decoder_mlp_ratio = parse_int("decoder_mlp_ratio", v);
            },
            true};
        m["token_budget"] = {[](const ModelConfig& c) { return std::to_string(c.token_budget); },
                             [](ModelConfig& c, const std::string& v) {
                                 c.token_budget = parse_int("token_budget", v);
                             },
                             true};

        auto train_field = [&m](const std::string& key, auto getter, auto setter) {
            m[key] = {getter, setter, false};
        };
        train_field(
            "seed", [](const ModelConfig& c) { return std::to_string(c.train.seed); },
            [](ModelConfig& c, const std::string& v) { c.train.seed = parse_u64("seed", v); });
        train_field(
            "views_per_sample",
            [](const ModelConfig& c) { return std::to_string(c.train.views_per_sample); },
            [](ModelConfig& c, const std::string& v) {
                c.train.views_per_sample = parse_int("views_per_sample", v);
            });
        train_field(
            "batch_size", [](const ModelConfig& c) { return std::to_string(c.train.batch_size); },
            [](ModelConfig& c, const std::string& v) {
                c.train.batch_size = parse_int("batch_size", v);
            });
        train_field(
            "epochs", [](const ModelConfig& c) { return std::to_string(c.train.epochs); },
            [](ModelConfig& c, const std::string& v) { c.train.epochs = parse_int("epochs", v); });
        train_field(
            "lr", [](const ModelConfig& c) { return fmt(c.train.lr); },
            [](ModelConfig& c, const std::string& v) { c.train.lr = parse_double("lr", v); });
        train_field(
            "lr_decay_epoch1",
            [](const ModelConfig& c) { return std::to_string(c.train.lr_decay_epoch1); },
            [](ModelConfig& c, const std::string& v) {
                c.train.lr_decay_epoch1 = parse_int("lr_decay_epoch1", v);
            });
        train_field(
            "lr_decay_epoch2",
            [](const ModelConfig& c) { return std::to_string(c.train.lr_decay_epoch2); },
            [](ModelConfig& c, const std::string& v) {
                c.train.lr_decay_epoch2 = parse_int("lr_decay_epoch2", v);
            });
        train_field(
            "lr_decay", [](const ModelConfig& c) { return fmt(c.train.lr_decay); },
            [](ModelConfig& c, const std::string& v) {
                c.train.lr_decay = parse_double("lr_decay", v);
            });
        train_field(
            "weight_decay", [](const ModelConfig& c) { return fmt(c.train.weight_decay); },
            [](ModelConfig& c, const std::string& v) {
                c.train.weight_decay = parse_double("weight_decay", v);
            });
        train_field(
            "beta1", [](const ModelConfig& c) { return fmt(c.train.beta1); },
            [](ModelConfig& c, const std::string& v) { c.train.beta1 = parse_double("beta1", v); });
        train_field(
            "beta2", [](const ModelConfig& c) { return fmt(c.train.beta2); },
            [](ModelConfig& c, const std::string& v) { c.train.beta2 = parse_double("beta2", v); });
        train_field(
            "adam_eps", [](const ModelConfig& c) { return fmt(c.train.adam_eps); },
            [](ModelConfig& c, const std::string& v) {
                c.train.adam_eps = parse_double("adam_eps", v);
            });
        train_field(
            "threshold", [](const ModelConfig& c) { return fmt(c.train.threshold); },
            [](ModelConfig& c, const std::string& v) {
                c.train.threshold = parse_double("threshold", v);
            });
        train_field(
            "checkpoint_every",
            [](const ModelConfig& c) { return std::to_string(c.train.checkpoint_every); },
            [](ModelConfig& c, const std::string& v) {
                c.train.checkpoint_every = parse_int("checkpoint_every", v);
            });
        return m;
    }();
    return s;
}

}  // namespace

void ModelConfig::apply_override(const std::string& key, const std::string& value) {
    const auto& s = schema();
    auto it = s.find(key);
    if (it == s.end()) throw ConfigError("unknown configuration key '" + key + "'");
    it->second.set(*this, value);
}

ModelConfig ModelConfig::from_text(const std::string& text) {
    ModelConfig cfg = desk();
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        const auto last = line.find_last_not_of(" \t\r");
        line = line.substr(first, last - first + 1);
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(lineno) + ": expected key=value, got '" +
                              line + "'");
        }
        auto strip = [](std::string s) {
            const auto a = s.find_first_not_of(" \t");
            const auto b = s.find_last_not_of(" \t");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        cfg.apply_override(strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
    }
    return cfg;
}

ModelConfig ModelConfig::from_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file " + path.string());
    std::stringstream buf;
    buf << is.rdbuf();
    return from_text(buf.str());
}

std::string ModelConfig::to_text() const {
    std::ostringstream os;
    for (const auto& [key, field] : schema()) {
        os << key << " = " << field.get(*this) << '\n';
    }
    return os.str();
}

std::uint64_t ModelConfig::architecture_digest() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a 64
    auto feed = [&h](const std::string& s) {
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& [key, field] : schema()) {
        if (!field.architectural) continue;
        feed(key);
        feed("=");
        feed(field.get(*this));
        feed("\n");
    }
    return h;
}

}  // namespace lrgt
