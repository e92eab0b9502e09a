#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "cht/episodes.hpp"
#include "cht/eval.hpp"
#include "cht/generator.hpp"
#include "cht/learner.hpp"
#include "cht/serialize.hpp"

namespace cht {

/// Flat dotted-key configuration. Every key has a typed default; unknown
/// keys are rejected and the resolved snapshot reproduces a run exactly.
struct RunConfig {
    // data
    std::string data_format = "synthetic";  // synthetic | png | npy
    std::string data_root;                  // comma-separated pool roots (png/npy)
    std::string data_image_size = "12x12x1";
    std::string data_normalize = "default";  // default | none | meanstd
    int syn_classes = 20;
    int syn_samples = 20;
    int syn_domains = 1;
    uint64_t syn_seed = 0;
    double syn_noise = 0.25;
    int syn_shift = 2;
    // target cnn
    int arch_blocks = 4;
    int arch_channels = 8;
    int arch_embed = 20;
    bool arch_dense_bias = true;
    // generator
    std::string gen_feat_channels = "16,16,16,16";
    std::string gen_act_channels = "8,8";
    int gen_layers = 3;
    int gen_heads = 2;
    int gen_model_dim = 64;
    int gen_ff_dim = 128;
    int gen_label_embed_dim = 16;
    int gen_label_vocab = 32;
    // training
    int train_tasks = 3;
    int train_way = 5;
    int train_shots = 1;
    int train_query_shots = 5;
    double train_lr = 1e-4;
    long train_lr_decay_steps = 100000;
    double train_lr_decay_rate = 0.97;
    long train_total_steps = 2000;
    std::string train_objective = "class_incremental";
    std::string train_prototype_mode = "frozen";
    std::string train_regime = "single_domain";
    int train_episodes_per_step = 1;
    long train_checkpoint_every = 0;
    long train_eval_every = 0;
    uint64_t train_seed = 0;
    // evaluation
    int eval_episodes = 1024;
    int eval_runs_per_episode = 16;
    int eval_t_test = 0;  // 0: use train.tasks
    double eval_holdout_ratio = 0.2;
    uint64_t eval_split_seed = 1234;
    uint64_t eval_seed = 0;
    // constpn baseline
    int constpn_way_multiplier = 5;
    double constpn_lr = 0;     // 0: use train.lr
    long constpn_total_steps = 0;  // 0: use train.total_steps
};

namespace cfgdetail {

using FieldPtr = std::variant<int RunConfig::*, long RunConfig::*, double RunConfig::*, bool RunConfig::*,
                              uint64_t RunConfig::*, std::string RunConfig::*>;

struct Entry {
    const char* key;
    FieldPtr field;
};

inline const std::vector<Entry>& schema() {
    static const std::vector<Entry> entries = {
        {"data.format", &RunConfig::data_format},
        {"data.root", &RunConfig::data_root},
        {"data.image_size", &RunConfig::data_image_size},
        {"data.normalize", &RunConfig::data_normalize},
        {"data.synthetic.num_classes", &RunConfig::syn_classes},
        {"data.synthetic.samples_per_class", &RunConfig::syn_samples},
        {"data.synthetic.num_domains", &RunConfig::syn_domains},
        {"data.synthetic.seed", &RunConfig::syn_seed},
        {"data.synthetic.noise", &RunConfig::syn_noise},
        {"data.synthetic.max_shift", &RunConfig::syn_shift},
        {"arch.num_blocks", &RunConfig::arch_blocks},
        {"arch.channels", &RunConfig::arch_channels},
        {"arch.embed_dim", &RunConfig::arch_embed},
        {"arch.dense_bias", &RunConfig::arch_dense_bias},
        {"gen.feat_channels", &RunConfig::gen_feat_channels},
        {"gen.act_channels", &RunConfig::gen_act_channels},
        {"gen.layers", &RunConfig::gen_layers},
        {"gen.heads", &RunConfig::gen_heads},
        {"gen.model_dim", &RunConfig::gen_model_dim},
        {"gen.ff_dim", &RunConfig::gen_ff_dim},
        {"gen.label_embed_dim", &RunConfig::gen_label_embed_dim},
        {"gen.label_vocab", &RunConfig::gen_label_vocab},
        {"train.tasks", &RunConfig::train_tasks},
        {"train.way", &RunConfig::train_way},
        {"train.shots", &RunConfig::train_shots},
        {"train.query_shots", &RunConfig::train_query_shots},
        {"train.lr", &RunConfig::train_lr},
        {"train.lr_decay_steps", &RunConfig::train_lr_decay_steps},
        {"train.lr_decay_rate", &RunConfig::train_lr_decay_rate},
        {"train.total_steps", &RunConfig::train_total_steps},
        {"train.objective", &RunConfig::train_objective},
        {"train.prototype_mode", &RunConfig::train_prototype_mode},
        {"train.regime", &RunConfig::train_regime},
        {"train.episodes_per_step", &RunConfig::train_episodes_per_step},
        {"train.checkpoint_every", &RunConfig::train_checkpoint_every},
        {"train.eval_every", &RunConfig::train_eval_every},
        {"train.seed", &RunConfig::train_seed},
        {"eval.episodes", &RunConfig::eval_episodes},
        {"eval.runs_per_episode", &RunConfig::eval_runs_per_episode},
        {"eval.t_test", &RunConfig::eval_t_test},
        {"eval.holdout_ratio", &RunConfig::eval_holdout_ratio},
        {"eval.split_seed", &RunConfig::eval_split_seed},
        {"eval.seed", &RunConfig::eval_seed},
        {"constpn.way_multiplier", &RunConfig::constpn_way_multiplier},
        {"constpn.lr", &RunConfig::constpn_lr},
        {"constpn.total_steps", &RunConfig::constpn_total_steps},
    };
    return entries;
}

inline void set_value(RunConfig& cfg, const Entry& e, const std::string& raw, const std::string& key) {
    try {
        std::visit(
            [&](auto member) {
                using T = std::remove_cvref_t<decltype(cfg.*member)>;
                if constexpr (std::is_same_v<T, std::string>) {
                    cfg.*member = raw;
                } else if constexpr (std::is_same_v<T, bool>) {
                    if (raw == "true") {
                        cfg.*member = true;
                    } else if (raw == "false") {
                        cfg.*member = false;
                    } else {
                        fail("expected true/false");
                    }
                } else if constexpr (std::is_same_v<T, double>) {
                    size_t pos = 0;
                    cfg.*member = std::stod(raw, &pos);
                    require(pos == raw.size(), "trailing characters");
                } else if constexpr (std::is_same_v<T, uint64_t>) {
                    size_t pos = 0;
                    cfg.*member = std::stoull(raw, &pos);
                    require(pos == raw.size(), "trailing characters");
                } else {
                    size_t pos = 0;
                    const long long v = std::stoll(raw, &pos);
                    require(pos == raw.size(), "trailing characters");
                    cfg.*member = static_cast<T>(v);
                }
            },
            e.field);
    } catch (const std::exception&) {
        fail("config: bad value for " + key + ": '" + raw + "'");
    }
}

inline std::string get_value(const RunConfig& cfg, const Entry& e) {
    return std::visit(
        [&](auto member) -> std::string {
            using T = std::remove_cvref_t<decltype(cfg.*member)>;
            if constexpr (std::is_same_v<T, std::string>) {
                return cfg.*member;
            } else if constexpr (std::is_same_v<T, bool>) {
                return (cfg.*member) ? "true" : "false";
            } else if constexpr (std::is_same_v<T, double>) {
                return format_g(cfg.*member);
            } else {
                return std::to_string(cfg.*member);
            }
        },
        e.field);
}

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

}  // namespace cfgdetail

inline void apply_config_line(RunConfig& cfg, const std::string& line_in, const std::string& where) {
    const std::string line = cfgdetail::trim(line_in.substr(0, line_in.find('#')));
    if (line.empty()) return;
    const size_t eq = line.find('=');
    require(eq != std::string::npos, "config: missing '=' in " + where + ": " + line);
    const std::string key = cfgdetail::trim(line.substr(0, eq));
    const std::string value = cfgdetail::trim(line.substr(eq + 1));
    for (const auto& e : cfgdetail::schema()) {
        if (key == e.key) {
            cfgdetail::set_value(cfg, e, value, key);
            return;
        }
    }
    fail("config: unknown key '" + key + "' in " + where);
}

inline RunConfig parse_config_text(const std::string& text, const std::string& where = "config") {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) apply_config_line(cfg, line, where);
    return cfg;
}

inline RunConfig parse_config_file(const std::string& path) {
    std::ifstream f(path);
    require(f.good(), "config: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str(), path);
}

/// `--set key=value` override.
inline void apply_override(RunConfig& cfg, const std::string& kv) {
    apply_config_line(cfg, kv, "--set override");
}

/// Canonical snapshot: every key in schema order.
inline std::string resolved_config_text(const RunConfig& cfg) {
    std::string out;
    for (const auto& e : cfgdetail::schema()) out += std::string(e.key) + " = " + cfgdetail::get_value(cfg, e) + "\n";
    return out;
}

inline std::vector<int> parse_int_list(const std::string& s, const std::string& what) {
    std::vector<int> out;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        tok = cfgdetail::trim(tok);
        if (tok.empty()) continue;
        try {
            out.push_back(std::stoi(tok));
        } catch (const std::exception&) {
            fail("config: bad list entry '" + tok + "' in " + what);
        }
    }
    require(!out.empty(), "config: empty list in " + what);
    return out;
}

inline Shape parse_image_size(const std::string& s) {
    Shape shape;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, 'x')) shape.push_back(std::stoi(tok));
    require(shape.size() == 3, "config: data.image_size must be HxWxC");
    return shape;
}

/// Loads (or synthesizes) all pools named by the config. Paths are checked
/// up front; per-pool mean/std normalization applies to image pools by
/// default and never to synthetic ones unless forced.
inline std::vector<ClassPool> build_pools(const RunConfig& cfg) {
    std::vector<ClassPool> pools;
    if (cfg.data_format == "synthetic") {
        require(cfg.syn_domains >= 1, "config: data.synthetic.num_domains must be >= 1");
        const Shape img = parse_image_size(cfg.data_image_size);
        for (int d = 0; d < cfg.syn_domains; ++d)
            pools.push_back(make_synthetic_pool(cfg.syn_classes, cfg.syn_samples, img,
                                                cfg.syn_seed + static_cast<uint64_t>(d) * 7919, cfg.syn_noise,
                                                cfg.syn_shift));
        if (cfg.data_normalize == "meanstd")
            for (auto& p : pools) normalize_pool_meanstd(p);
    } else {
        require(cfg.data_format == "png" || cfg.data_format == "npy", "config: data.format must be synthetic|png|npy");
        require(!cfg.data_root.empty(), "config: data.root required for format " + cfg.data_format);
        std::istringstream is(cfg.data_root);
        std::string root;
        while (std::getline(is, root, ',')) {
            root = cfgdetail::trim(root);
            if (root.empty()) continue;
            pools.push_back(load_pool(root, cfg.data_format == "png" ? PoolFormat::png : PoolFormat::npy));
        }
        require(!pools.empty(), "config: data.root lists no pools");
        if (cfg.data_normalize != "none")
            for (auto& p : pools) normalize_pool_meanstd(p);
    }
    return pools;
}

inline Arch build_arch(const RunConfig& cfg, const ClassPool& pool) {
    Arch arch;
    arch.num_blocks = cfg.arch_blocks;
    arch.channels = cfg.arch_channels;
    arch.embed_dim = cfg.arch_embed;
    arch.dense_bias = cfg.arch_dense_bias;
    arch.in_height = pool.height;
    arch.in_width = pool.width;
    arch.in_channels = pool.channels;
    validate_arch(arch);
    return arch;
}

inline GeneratorConfig build_generator_config(const RunConfig& cfg) {
    GeneratorConfig g;
    g.feat_channels = parse_int_list(cfg.gen_feat_channels, "gen.feat_channels");
    g.act_channels = parse_int_list(cfg.gen_act_channels, "gen.act_channels");
    g.trans_layers = cfg.gen_layers;
    g.trans_heads = cfg.gen_heads;
    g.model_dim = cfg.gen_model_dim;
    g.ff_dim = cfg.gen_ff_dim;
    g.label_embed_dim = cfg.gen_label_embed_dim;
    g.label_vocab = cfg.gen_label_vocab;
    validate_config(g);
    return g;
}

inline TrainConfig build_train_config(const RunConfig& cfg) {
    TrainConfig t;
    t.num_tasks = cfg.train_tasks;
    t.way = cfg.train_way;
    t.shots = cfg.train_shots;
    t.query_shots = cfg.train_query_shots;
    t.learning_rate = cfg.train_lr;
    t.lr_decay_steps = cfg.train_lr_decay_steps;
    t.lr_decay_rate = cfg.train_lr_decay_rate;
    t.total_steps = cfg.train_total_steps;
    t.objective = objective_from_name(cfg.train_objective);
    t.prototype_mode = cfg.train_prototype_mode == "frozen" ? PrototypeMode::frozen : PrototypeMode::recomputed;
    require(cfg.train_prototype_mode == "frozen" || cfg.train_prototype_mode == "recomputed",
            "config: train.prototype_mode must be frozen|recomputed");
    t.regime = regime_from_name(cfg.train_regime);
    t.episodes_per_step = cfg.train_episodes_per_step;
    t.checkpoint_every = cfg.train_checkpoint_every;
    t.eval_every = cfg.train_eval_every;
    t.seed = cfg.train_seed;
    validate_train_config(t);
    return t;
}

inline EvalConfig build_eval_config(const RunConfig& cfg) {
    EvalConfig e;
    e.t_test = cfg.eval_t_test > 0 ? cfg.eval_t_test : cfg.train_tasks;
    e.way = cfg.train_way;
    e.shots = cfg.train_shots;
    e.query_shots = cfg.train_query_shots;
    e.regime = regime_from_name(cfg.train_regime);
    e.episodes = cfg.eval_episodes;
    e.runs_per_episode = cfg.eval_runs_per_episode;
    e.seed = cfg.eval_seed;
    return e;
}

/// Class-level train/test split of every pool with the configured ratio.
inline std::pair<std::vector<ClassPool>, std::vector<ClassPool>> split_pools(const std::vector<ClassPool>& pools,
                                                                             const RunConfig& cfg) {
    std::vector<ClassPool> train, test;
    for (size_t i = 0; i < pools.size(); ++i) {
        auto [tr, te] = split_pool_by_class(pools[i], cfg.eval_holdout_ratio, cfg.eval_split_seed + i);
        train.push_back(std::move(tr));
        test.push_back(std::move(te));
    }
    return {train, test};
}

/// Fingerprint over everything that determines the parameter layout; stored
/// in checkpoints and re-derived before loading.
inline uint64_t model_fingerprint(const RunConfig& cfg, const Arch& arch) {
    std::string s = "arch:" + std::to_string(arch.num_blocks) + "," + std::to_string(arch.channels) + "," +
                    std::to_string(arch.embed_dim) + "," + std::to_string(arch.in_height) + "," +
                    std::to_string(arch.in_width) + "," + std::to_string(arch.in_channels) + "," +
                    (arch.dense_bias ? "bias" : "nobias");
    s += "|gen:" + cfg.gen_feat_channels + ";" + cfg.gen_act_channels + ";" + std::to_string(cfg.gen_layers) + ";" +
         std::to_string(cfg.gen_heads) + ";" + std::to_string(cfg.gen_model_dim) + ";" + std::to_string(cfg.gen_ff_dim) +
         ";" + std::to_string(cfg.gen_label_embed_dim) + ";" + std::to_string(cfg.gen_label_vocab);
    return fnv1a64(s);
}

}  // namespace cht
