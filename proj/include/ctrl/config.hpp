#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctrl {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Every experiment knob. Defaults are the reference hyperparameters; a
/// golden test pins them.
struct ExperimentConfig {
    std::string env = "gridworld";  // gridworld | ising
    std::uint64_t seed = 0;
    std::uint64_t total_env_steps = 500000;
    std::string output_dir = "out";

    double gamma = 0.999;
    double lambda = 0.95;
    std::size_t n_timesteps = 256;
    std::size_t n_epochs = 1;
    std::size_t n_samples = 8192;
    double entropy_coef = 0.01;
    double clip_range = 0.2;
    double learning_rate = 5e-4;
    std::size_t num_envs = 32;
    std::size_t num_clusters = 200;
    std::size_t knn = 3;
    std::size_t view_timesteps = 2;
    double cluster_temperature = 0.3;

    int sinkhorn_iters = 3;
    std::size_t n_anchors = 0;  // 0: use B/4 per batch
    std::size_t minibatches = 8;

    bool consecutive_t = false;
    bool no_action = false;
    bool no_cluster = false;
    bool no_pred = false;
    bool serial = false;

    std::uint64_t train_seed_lo = 0;
    std::uint64_t train_seed_hi = 199;
    std::uint64_t eval_seed_lo = 200;
    std::uint64_t eval_seed_hi = 399;

    std::size_t episode_length = 100;  // ising horizon
    std::size_t max_steps = 256;       // gridworld horizon
    std::size_t checkpoint_every = 0;  // epochs; 0 = final only
    std::size_t silhouette_every = 1;  // epochs; 0 = never
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key '" + key + "': expected bool, got '" + v + "'");
}

template <typename T>
T parse_num(const std::string& v, const std::string& key) {
    std::istringstream is(v);
    T out;
    is >> out;
    if (is.fail() || !is.eof())
        throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
    return out;
}

inline std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace detail

/// Assigns one key. Unknown keys raise ConfigError naming the key.
inline void apply_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    using detail::parse_bool;
    using detail::parse_num;
    if (key == "env") cfg.env = value;
    else if (key == "seed") cfg.seed = parse_num<std::uint64_t>(value, key);
    else if (key == "total_env_steps") cfg.total_env_steps = parse_num<std::uint64_t>(value, key);
    else if (key == "output_dir") cfg.output_dir = value;
    else if (key == "gamma") cfg.gamma = parse_num<double>(value, key);
    else if (key == "lambda") cfg.lambda = parse_num<double>(value, key);
    else if (key == "n_timesteps") cfg.n_timesteps = parse_num<std::size_t>(value, key);
    else if (key == "n_epochs") cfg.n_epochs = parse_num<std::size_t>(value, key);
    else if (key == "n_samples") cfg.n_samples = parse_num<std::size_t>(value, key);
    else if (key == "entropy_coef") cfg.entropy_coef = parse_num<double>(value, key);
    else if (key == "clip_range") cfg.clip_range = parse_num<double>(value, key);
    else if (key == "learning_rate") cfg.learning_rate = parse_num<double>(value, key);
    else if (key == "num_envs") cfg.num_envs = parse_num<std::size_t>(value, key);
    else if (key == "num_clusters") cfg.num_clusters = parse_num<std::size_t>(value, key);
    else if (key == "knn") cfg.knn = parse_num<std::size_t>(value, key);
    else if (key == "view_timesteps") cfg.view_timesteps = parse_num<std::size_t>(value, key);
    else if (key == "cluster_temperature") cfg.cluster_temperature = parse_num<double>(value, key);
    else if (key == "sinkhorn_iters") cfg.sinkhorn_iters = parse_num<int>(value, key);
    else if (key == "n_anchors") cfg.n_anchors = parse_num<std::size_t>(value, key);
    else if (key == "minibatches") cfg.minibatches = parse_num<std::size_t>(value, key);
    else if (key == "consecutive_t") cfg.consecutive_t = parse_bool(value, key);
    else if (key == "no_action") cfg.no_action = parse_bool(value, key);
    else if (key == "no_cluster") cfg.no_cluster = parse_bool(value, key);
    else if (key == "no_pred") cfg.no_pred = parse_bool(value, key);
    else if (key == "serial") cfg.serial = parse_bool(value, key);
    else if (key == "train_seed_lo") cfg.train_seed_lo = parse_num<std::uint64_t>(value, key);
    else if (key == "train_seed_hi") cfg.train_seed_hi = parse_num<std::uint64_t>(value, key);
    else if (key == "eval_seed_lo") cfg.eval_seed_lo = parse_num<std::uint64_t>(value, key);
    else if (key == "eval_seed_hi") cfg.eval_seed_hi = parse_num<std::uint64_t>(value, key);
    else if (key == "episode_length") cfg.episode_length = parse_num<std::size_t>(value, key);
    else if (key == "max_steps") cfg.max_steps = parse_num<std::size_t>(value, key);
    else if (key == "checkpoint_every") cfg.checkpoint_every = parse_num<std::size_t>(value, key);
    else if (key == "silhouette_every") cfg.silhouette_every = parse_num<std::size_t>(value, key);
    else throw ConfigError("unknown config key '" + key + "'");
}

inline void validate_config(const ExperimentConfig& cfg) {
    if (cfg.env != "gridworld" && cfg.env != "ising")
        throw ConfigError("config key 'env': must be gridworld or ising, got '" + cfg.env + "'");
    if (cfg.n_samples != cfg.n_timesteps * cfg.num_envs)
        throw ConfigError("config key 'n_samples': must equal n_timesteps * num_envs");
    if (cfg.num_clusters < 2) throw ConfigError("config key 'num_clusters': need at least 2");
    if (cfg.knn < 1 || cfg.knn >= cfg.num_clusters)
        throw ConfigError("config key 'knn': need 1 <= knn < num_clusters");
    if (cfg.view_timesteps < 1) throw ConfigError("config key 'view_timesteps': need at least 1");
    if (cfg.cluster_temperature <= 0.0)
        throw ConfigError("config key 'cluster_temperature': must be positive");
    if (cfg.sinkhorn_iters < 0) throw ConfigError("config key 'sinkhorn_iters': must be >= 0");
    if (cfg.train_seed_hi < cfg.train_seed_lo)
        throw ConfigError("config key 'train_seed_hi': empty train seed range");
    if (cfg.eval_seed_hi < cfg.eval_seed_lo)
        throw ConfigError("config key 'eval_seed_hi': empty eval seed range");
    if (cfg.eval_seed_lo <= cfg.train_seed_hi && cfg.train_seed_lo <= cfg.eval_seed_hi)
        throw ConfigError("config key 'eval_seed_lo': train and eval seed ranges overlap");
}

/// Flat key=value format. '#' starts a comment; [section] headers group keys
/// visually and carry no meaning; keys are globally unique.
inline void load_config_file(ExperimentConfig& cfg, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file '" + path + "'");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        lineno += 1;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[' && line.back() == ']') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
        apply_config_value(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
}

/// Canonical serialization; the run snapshot and any reload of it are
/// byte-identical.
inline std::string canonical_config_text(const ExperimentConfig& cfg) {
    using detail::format_double;
    std::ostringstream os;
    os << "[run]\n";
    os << "env = " << cfg.env << "\n";
    os << "seed = " << cfg.seed << "\n";
    os << "total_env_steps = " << cfg.total_env_steps << "\n";
    os << "output_dir = " << cfg.output_dir << "\n";
    os << "[rl]\n";
    os << "gamma = " << format_double(cfg.gamma) << "\n";
    os << "lambda = " << format_double(cfg.lambda) << "\n";
    os << "n_timesteps = " << cfg.n_timesteps << "\n";
    os << "n_epochs = " << cfg.n_epochs << "\n";
    os << "n_samples = " << cfg.n_samples << "\n";
    os << "entropy_coef = " << format_double(cfg.entropy_coef) << "\n";
    os << "clip_range = " << format_double(cfg.clip_range) << "\n";
    os << "learning_rate = " << format_double(cfg.learning_rate) << "\n";
    os << "num_envs = " << cfg.num_envs << "\n";
    os << "minibatches = " << cfg.minibatches << "\n";
    os << "[repr]\n";
    os << "num_clusters = " << cfg.num_clusters << "\n";
    os << "knn = " << cfg.knn << "\n";
    os << "view_timesteps = " << cfg.view_timesteps << "\n";
    os << "cluster_temperature = " << format_double(cfg.cluster_temperature) << "\n";
    os << "sinkhorn_iters = " << cfg.sinkhorn_iters << "\n";
    os << "n_anchors = " << cfg.n_anchors << "\n";
    os << "[ablations]\n";
    os << "consecutive_t = " << (cfg.consecutive_t ? "true" : "false") << "\n";
    os << "no_action = " << (cfg.no_action ? "true" : "false") << "\n";
    os << "no_cluster = " << (cfg.no_cluster ? "true" : "false") << "\n";
    os << "no_pred = " << (cfg.no_pred ? "true" : "false") << "\n";
    os << "[protocol]\n";
    os << "serial = " << (cfg.serial ? "true" : "false") << "\n";
    os << "train_seed_lo = " << cfg.train_seed_lo << "\n";
    os << "train_seed_hi = " << cfg.train_seed_hi << "\n";
    os << "eval_seed_lo = " << cfg.eval_seed_lo << "\n";
    os << "eval_seed_hi = " << cfg.eval_seed_hi << "\n";
    os << "episode_length = " << cfg.episode_length << "\n";
    os << "max_steps = " << cfg.max_steps << "\n";
    os << "checkpoint_every = " << cfg.checkpoint_every << "\n";
    os << "silhouette_every = " << cfg.silhouette_every << "\n";
    return os.str();
}

}  // namespace ctrl
