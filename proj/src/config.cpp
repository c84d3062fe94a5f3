#include "editlab/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

#include "editlab/edit_engine.hpp"
#include "editlab/rng.hpp"

namespace editlab {

namespace {

// Wraps one JSON object so every access must name its key; unknown keys and
// type mismatches are reported with the full dotted path.
class StrictObject {
  public:
    StrictObject(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object())
            throw std::runtime_error("config key '" + path_ + "' must be an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end()) return;  // keep the default
        try {
            out = it->get<T>();
        } catch (const nlohmann::json::exception&) {
            throw std::runtime_error("config key '" + full(key) + "' has the wrong type");
        }
    }

    // Accepts a number or the string "auto" (stored as a negative value).
    void get_alpha(const char* key, double& out) {
        seen_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end()) return;
        if (it->is_string()) {
            if (it->get<std::string>() != "auto")
                throw std::runtime_error("config key '" + full(key) +
                                         "' must be a number or \"auto\"");
            out = -1.0;
            return;
        }
        if (!it->is_number())
            throw std::runtime_error("config key '" + full(key) + "' must be a number or \"auto\"");
        out = it->get<double>();
    }

    StrictObject child(const char* key) {
        seen_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end()) return StrictObject(empty_, full(key));
        return StrictObject(*it, full(key));
    }

    bool has(const char* key) const { return j_.contains(key); }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            (void)value;
            if (!seen_.count(key))
                throw std::runtime_error("config key '" + full(key.c_str()) + "' is not recognized");
        }
    }

  private:
    std::string full(const char* key) const {
        return path_.empty() ? std::string(key) : path_ + "." + key;
    }

    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
    inline static const nlohmann::json empty_ = nlohmann::json::object();
};

}  // namespace

ExperimentConfig default_config() {
    ExperimentConfig cfg;
    cfg.model.seed = 7;
    cfg.world.seed = 11;
    cfg.train.seed = 7;
    cfg.edit.counterfact_seed = 424242;
    return cfg;
}

ExperimentConfig experiment_from_json(const nlohmann::json& j) {
    ExperimentConfig cfg = default_config();
    StrictObject root(j, "");

    {
        StrictObject m = root.child("model");
        m.get("n_layers", cfg.model.n_layers);
        m.get("d_model", cfg.model.d_model);
        m.get("n_heads", cfg.model.n_heads);
        m.get("d_mlp", cfg.model.d_mlp);
        m.get("vocab_size", cfg.model.vocab_size);
        m.get("max_seq_len", cfg.model.max_seq_len);
        m.get("seed", cfg.model.seed);
        m.finish();
    }
    {
        StrictObject w = root.child("world");
        w.get("n_subjects", cfg.world.n_subjects);
        w.get("n_relations", cfg.world.n_relations);
        w.get("n_objects", cfg.world.n_objects);
        w.get("n_facts", cfg.world.n_facts);
        w.get("vocab_size", cfg.world.vocab_size);
        w.get("seed", cfg.world.seed);
        w.finish();
    }
    {
        StrictObject t = root.child("train");
        t.get("steps", cfg.train.steps);
        t.get("batch_size", cfg.train.batch_size);
        t.get("lr", cfg.train.lr);
        t.get("cosine_decay", cfg.train.cosine_decay);
        t.get("eval_every", cfg.train.eval_every);
        t.get("seed", cfg.train.seed);
        t.finish();
    }
    {
        StrictObject t = root.child("trace");
        t.get("n_probes", cfg.trace.n_probes);
        t.get("noise_samples", cfg.trace.noise_samples);
        t.get("noise", cfg.trace.noise);
        t.get("seed", cfg.trace.seed);
        t.get("mlp_window", cfg.trace.mlp_window);
        t.get("attn_window", cfg.trace.attn_window);
        t.get("s_mlp", cfg.trace.s_mlp);
        t.get("s_attn", cfg.trace.s_attn);
        t.finish();
    }
    {
        StrictObject e = root.child("edit");
        e.get("mode", cfg.edit.mode);
        e.get_alpha("alpha", cfg.edit.alpha);
        e.get("t", cfg.edit.t);
        e.get("cov_samples", cfg.edit.cov_samples);
        e.get("cov_seed", cfg.edit.cov_seed);
        e.get("cov_shrink", cfg.edit.cov_shrink);
        e.get("counterfact_seed", cfg.edit.counterfact_seed);
        e.get("key_prefixes", cfg.edit.key_prefixes);
        e.get("key_seed", cfg.edit.key_seed);
        e.get("value_lr", cfg.edit.value_opt.lr);
        e.get("value_steps", cfg.edit.value_opt.max_steps);
        e.get("value_beta", cfg.edit.value_opt.beta);
        e.get("value_target_p", cfg.edit.value_opt.target_p);
        e.finish();
    }
    {
        StrictObject e = root.child("eval");
        e.get("gen_len", cfg.eval.gen_len);
        e.finish();
    }
    root.get("out_dir", cfg.out_dir);
    root.finish();

    validate_config(cfg);
    return cfg;
}

nlohmann::json experiment_to_json(const ExperimentConfig& cfg) {
    nlohmann::json j;
    j["model"] = {{"n_layers", cfg.model.n_layers},   {"d_model", cfg.model.d_model},
                  {"n_heads", cfg.model.n_heads},     {"d_mlp", cfg.model.d_mlp},
                  {"vocab_size", cfg.model.vocab_size}, {"max_seq_len", cfg.model.max_seq_len},
                  {"seed", cfg.model.seed}};
    j["world"] = {{"n_subjects", cfg.world.n_subjects}, {"n_relations", cfg.world.n_relations},
                  {"n_objects", cfg.world.n_objects},   {"n_facts", cfg.world.n_facts},
                  {"vocab_size", cfg.world.vocab_size}, {"seed", cfg.world.seed}};
    j["train"] = {{"steps", cfg.train.steps},   {"batch_size", cfg.train.batch_size},
                  {"lr", cfg.train.lr},         {"cosine_decay", cfg.train.cosine_decay},
                  {"eval_every", cfg.train.eval_every}, {"seed", cfg.train.seed}};
    j["trace"] = {{"n_probes", cfg.trace.n_probes}, {"noise_samples", cfg.trace.noise_samples},
                  {"noise", cfg.trace.noise},       {"seed", cfg.trace.seed},
                  {"mlp_window", cfg.trace.mlp_window}, {"attn_window", cfg.trace.attn_window},
                  {"s_mlp", cfg.trace.s_mlp},       {"s_attn", cfg.trace.s_attn}};
    j["edit"] = {{"mode", cfg.edit.mode},
                 {"t", cfg.edit.t},
                 {"cov_samples", cfg.edit.cov_samples},
                 {"cov_seed", cfg.edit.cov_seed},
                 {"cov_shrink", cfg.edit.cov_shrink},
                 {"counterfact_seed", cfg.edit.counterfact_seed},
                 {"key_prefixes", cfg.edit.key_prefixes},
                 {"key_seed", cfg.edit.key_seed},
                 {"value_lr", cfg.edit.value_opt.lr},
                 {"value_steps", cfg.edit.value_opt.max_steps},
                 {"value_beta", cfg.edit.value_opt.beta},
                 {"value_target_p", cfg.edit.value_opt.target_p}};
    if (cfg.edit.alpha < 0.0)
        j["edit"]["alpha"] = "auto";
    else
        j["edit"]["alpha"] = cfg.edit.alpha;
    j["eval"] = {{"gen_len", cfg.eval.gen_len}};
    j["out_dir"] = cfg.out_dir;
    return j;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("config file '" + path + "': " + e.what());
    }
    return experiment_from_json(j);
}

void save_config(const std::string& path, const ExperimentConfig& cfg) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << experiment_to_json(cfg).dump(2) << "\n";
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

void validate_config(const ExperimentConfig& cfg) {
    cfg.model.validate();
    if (cfg.world.n_subjects < 1 || cfg.world.n_relations < 1 || cfg.world.n_objects < 1)
        throw std::invalid_argument("config: world counts must be positive");
    if (cfg.train.steps < 0) throw std::invalid_argument("config: train.steps must be >= 0");
    if (cfg.train.batch_size < 1)
        throw std::invalid_argument("config: train.batch_size must be >= 1");
    if (!(cfg.train.lr > 0.0)) throw std::invalid_argument("config: train.lr must be positive");
    if (cfg.trace.n_probes < 1) throw std::invalid_argument("config: trace.n_probes must be >= 1");
    if (cfg.trace.noise_samples < 1)
        throw std::invalid_argument("config: trace.noise_samples must be >= 1");
    if (cfg.trace.mlp_window < 1 || cfg.trace.attn_window < 1)
        throw std::invalid_argument("config: trace window sizes must be >= 1");
    edit_mode_from_name(cfg.edit.mode);  // throws on unknown mode
    if (cfg.edit.alpha > 1.0)
        throw std::invalid_argument("config: edit.alpha must be in [0,1] or \"auto\"");
    if (cfg.edit.t < 1) throw std::invalid_argument("config: edit.t must be >= 1");
    if (cfg.edit.cov_samples < 1)
        throw std::invalid_argument("config: edit.cov_samples must be >= 1");
    if (cfg.edit.cov_shrink < 0.0)
        throw std::invalid_argument("config: edit.cov_shrink must be >= 0");
    if (cfg.edit.key_prefixes < 0)
        throw std::invalid_argument("config: edit.key_prefixes must be >= 0");
    if (cfg.edit.value_opt.max_steps < 0 || !(cfg.edit.value_opt.lr > 0.0) ||
        cfg.edit.value_opt.beta < 0.0)
        throw std::invalid_argument("config: edit value optimizer settings out of range");
    if (cfg.eval.gen_len < 3) throw std::invalid_argument("config: eval.gen_len must be >= 3");
    if (cfg.out_dir.empty()) throw std::invalid_argument("config: out_dir must not be empty");
}

uint64_t config_hash(const ExperimentConfig& cfg) {
    const std::string dump = experiment_to_json(cfg).dump();
    Fnv1a h;
    h.update(dump.data(), dump.size());
    return h.digest();
}

}  // namespace editlab
