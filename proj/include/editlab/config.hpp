#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "editlab/fact_world.hpp"
#include "editlab/kv_memory.hpp"
#include "editlab/model.hpp"
#include "editlab/train.hpp"

namespace editlab {

// One experiment configuration file drives every pipeline stage. JSON on
// disk; unknown or ill-typed keys are rejected with the offending key named.

struct TraceStageConfig {
    int n_probes = 20;     // train facts traced (first n by index)
    int noise_samples = 3; // corruption draws averaged per probe
    double noise = -1.0;   // embedding noise scale; negative = derive from data
    uint64_t seed = 0;
    int mlp_window = 1;    // contiguous window sizes for layer selection
    int attn_window = 1;
    std::vector<int> s_mlp;   // explicit layer windows; override selection
    std::vector<int> s_attn;  // when nonempty
};

struct EditStageConfig {
    std::string mode = "dual";
    double alpha = -1.0;  // negative = auto (trace balance factor)
    int t = 20;
    int cov_samples = 1000;
    uint64_t cov_seed = 0;
    double cov_shrink = 0.0;  // isotropic covariance floor, fraction of mean diagonal
    uint64_t counterfact_seed = 0;
    int key_prefixes = 8;
    uint64_t key_seed = 0;
    ValueOptConfig value_opt;
};

struct EvalStageConfig {
    int gen_len = 8;
};

struct ExperimentConfig {
    ModelConfig model;
    WorldSpec world;
    TrainConfig train;
    TraceStageConfig trace;
    EditStageConfig edit;
    EvalStageConfig eval;
    std::string out_dir = "artifacts";
};

// Defaults matching the committed default config file.
ExperimentConfig default_config();

// Strict conversion: every key checked for type, unknown keys rejected,
// errors name the full key path (for example "edit.alpha").
ExperimentConfig experiment_from_json(const nlohmann::json& j);
nlohmann::json experiment_to_json(const ExperimentConfig& cfg);

ExperimentConfig load_config(const std::string& path);
void save_config(const std::string& path, const ExperimentConfig& cfg);

// Structural validation beyond parsing (ranges, mode names). Throws
// std::invalid_argument naming the offending field.
void validate_config(const ExperimentConfig& cfg);

// FNV-1a over the canonical JSON dump; embedded in artifacts so any output
// can be traced back to the exact configuration that produced it.
uint64_t config_hash(const ExperimentConfig& cfg);

}  // namespace editlab
