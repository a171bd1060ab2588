#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gbnet/model.hpp"

namespace gbnet {

struct ConfigError : std::invalid_argument {
    explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

// Everything a run needs, resolvable from defaults, a key=value file, and
// command-line overrides, in that order.
struct RunSettings {
    ModelConfig model;
    TrainConfig train;
    std::string dataset = "synthetic6";  // builtin generator, or "pack" with the paths below
    std::string train_pack;
    std::string eval_pack;
    std::int64_t train_per_class = 100;
    std::int64_t test_per_class = 25;
    double jitter = 0.02;
    std::string out_dir = "runs";
};

namespace detail {

inline std::int64_t config_int(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    std::int64_t v = 0;
    try {
        v = std::stoll(value, &used);
    } catch (const std::exception&) {
        used = std::string::npos;
    }
    if (used != value.size())
        throw ConfigError("config key '" + key + "': expected an integer, got '" + value + "'");
    return v;
}

inline double config_float(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    double v = 0;
    try {
        v = std::stod(value, &used);
    } catch (const std::exception&) {
        used = std::string::npos;
    }
    if (used != value.size())
        throw ConfigError("config key '" + key + "': expected a number, got '" + value + "'");
    return v;
}

inline bool config_bool(const std::string& key, const std::string& value) {
    if (value == "1" || value == "true" || value == "yes" || value == "on") return true;
    if (value == "0" || value == "false" || value == "no" || value == "off") return false;
    throw ConfigError("config key '" + key + "': expected a boolean, got '" + value + "'");
}

inline std::vector<std::int64_t> config_ints(const std::string& key, const std::string& value) {
    std::vector<std::int64_t> out;
    std::string item;
    std::istringstream in(value);
    while (std::getline(in, item, ',')) out.push_back(config_int(key, item));
    if (out.empty()) throw ConfigError("config key '" + key + "': expected a list of integers");
    return out;
}

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace detail

inline void config_set(RunSettings& s, const std::string& key, const std::string& value) {
    using detail::config_bool;
    using detail::config_float;
    using detail::config_int;
    using detail::config_ints;
    if (key == "dataset") s.dataset = value;
    else if (key == "train_pack") s.train_pack = value;
    else if (key == "eval_pack") s.eval_pack = value;
    else if (key == "train_per_class") s.train_per_class = config_int(key, value);
    else if (key == "test_per_class") s.test_per_class = config_int(key, value);
    else if (key == "jitter") s.jitter = config_float(key, value);
    else if (key == "out_dir") s.out_dir = value;
    else if (key == "classes") s.model.classes = config_int(key, value);
    else if (key == "points") s.model.points = config_int(key, value);
    else if (key == "k") s.model.k = config_int(key, value);
    else if (key == "ratio") s.model.ratio = config_int(key, value);
    else if (key == "descriptor_form") s.model.descriptor_form = static_cast<int>(config_int(key, value));
    else if (key == "scales") s.model.scales = config_ints(key, value);
    else if (key == "dropout") s.model.dropout = config_float(key, value);
    else if (key == "use_prominent") s.model.use_prominent = config_bool(key, value);
    else if (key == "use_fine_grained") s.model.use_fine_grained = config_bool(key, value);
    else if (key == "epochs") s.train.epochs = config_int(key, value);
    else if (key == "batch_size") s.train.batch_size = config_int(key, value);
    else if (key == "lr_max") s.train.lr_max = config_float(key, value);
    else if (key == "lr_min") s.train.lr_min = config_float(key, value);
    else if (key == "momentum") s.train.momentum = config_float(key, value);
    else if (key == "seed") s.train.seed = config_int(key, value);
    else if (key == "augment") s.train.augment = config_bool(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
}

inline void config_load_file(RunSettings& s, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) +
                              ": expected key=value, got '" + line + "'");
        try {
            config_set(s, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

inline void config_apply_override(RunSettings& s, const std::string& pair) {
    const auto eq = pair.find('=');
    if (eq == std::string::npos)
        throw ConfigError("--set expects key=value, got '" + pair + "'");
    config_set(s, detail::trim(pair.substr(0, eq)), detail::trim(pair.substr(eq + 1)));
}

// The fully resolved configuration, in a stable order, for echoing.
inline std::vector<std::pair<std::string, std::string>> config_items(const RunSettings& s) {
    auto fmt_f = [](double v) {
        std::ostringstream out;
        out << v;
        return out.str();
    };
    std::string scales;
    for (std::size_t i = 0; i < s.model.scales.size(); ++i)
        scales += (i ? "," : "") + std::to_string(s.model.scales[i]);
    return {
        {"dataset", s.dataset},
        {"train_pack", s.train_pack},
        {"eval_pack", s.eval_pack},
        {"train_per_class", std::to_string(s.train_per_class)},
        {"test_per_class", std::to_string(s.test_per_class)},
        {"jitter", fmt_f(s.jitter)},
        {"out_dir", s.out_dir},
        {"classes", std::to_string(s.model.classes)},
        {"points", std::to_string(s.model.points)},
        {"k", std::to_string(s.model.k)},
        {"ratio", std::to_string(s.model.ratio)},
        {"descriptor_form", std::to_string(s.model.descriptor_form)},
        {"scales", scales},
        {"dropout", fmt_f(s.model.dropout)},
        {"use_prominent", s.model.use_prominent ? "1" : "0"},
        {"use_fine_grained", s.model.use_fine_grained ? "1" : "0"},
        {"epochs", std::to_string(s.train.epochs)},
        {"batch_size", std::to_string(s.train.batch_size)},
        {"lr_max", fmt_f(s.train.lr_max)},
        {"lr_min", fmt_f(s.train.lr_min)},
        {"momentum", fmt_f(s.train.momentum)},
        {"seed", std::to_string(s.train.seed)},
        {"augment", s.train.augment ? "1" : "0"},
    };
}

}  // namespace gbnet
