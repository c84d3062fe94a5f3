#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "editlab/edit_engine.hpp"
#include "editlab/fact_world.hpp"
#include "editlab/model.hpp"

namespace editlab {

// One probe prompt with the prediction it produced before and after editing.
// For edit/paraphrase records `target` is the requested new object; for
// locality records it is the pre-edit prediction.
struct ProbeRecord {
    std::vector<int> prompt;
    int target = -1;
    int pre_prediction = -1;
    int post_prediction = -1;
};

struct MetricsReport {
    double edit_success = 0.0;  // percent of edited prompts now answering o*
    double portability = -1.0;  // same over paraphrase prompts; -1 when absent
    double locality = 0.0;      // percent of holdout prompts left unchanged
    double fluency = 0.0;       // weighted n-gram entropy of generations, bits

    std::vector<ProbeRecord> edit_records;
    std::vector<ProbeRecord> paraphrase_records;
    std::vector<ProbeRecord> locality_records;

    // Enough metadata to re-run the cell: the full request shape plus seeds
    // and the fingerprints of the weights before and after the edit.
    int t = 0;
    EditMode mode = EditMode::Dual;
    double alpha = 0.0;
    std::vector<int> mlp_layers;
    std::vector<int> attn_layers;
    int cov_samples = 0;
    uint64_t cov_seed = 0;
    double cov_shrink = 0.0;
    uint64_t counterfact_seed = 0;
    uint64_t pre_fingerprint = 0;
    uint64_t post_fingerprint = 0;
    bool failed = false;        // cell aborted; error holds the reason
    std::string error;
};

// Fraction of prompts whose greedy post-edit prediction equals the paired
// target, times 100. Prompt and target counts must match.
double edit_success(const ModelConfig& c, const ModelParams& post,
                    const std::vector<std::vector<int>>& prompts, const std::vector<int>& targets);

// Fraction of prompts whose greedy prediction is unchanged between the two
// models, times 100.
double locality(const ModelConfig& c, const ModelParams& pre, const ModelParams& post,
                const std::vector<std::vector<int>>& prompts);

// Greedy continuation of each prompt, gen_len tokens (clipped to the model's
// context length).
std::vector<std::vector<int>> greedy_generate(const ModelConfig& c, const ModelParams& p,
                                              const std::vector<std::vector<int>>& prompts,
                                              int gen_len);

// Entropy in bits of the n-gram frequency distribution pooled over the
// corpus. Sequences shorter than n contribute nothing.
double ngram_entropy_bits(const std::vector<std::vector<int>>& corpus, int n);

// Weighted n-gram entropy (2/3) H2 + (4/3) H3 of greedy continuations of the
// prompts. gen_len must be at least 3 so trigrams exist.
double fluency(const ModelConfig& c, const ModelParams& p,
               const std::vector<std::vector<int>>& prompts, int gen_len);

// One grid cell of the batch-editing experiment: T counterfacts are sampled,
// planned, applied to a fresh copy of the checkpoint, and scored.
struct ExperimentCell {
    EditMode mode = EditMode::Dual;
    double alpha = 0.5;
    int t = 20;
};

struct ExperimentConfigEval {
    std::vector<int> mlp_layers;
    std::vector<int> attn_layers;
    KeyContext key_context;
    ValueOptConfig value_opt;
    int cov_samples = 1000;
    uint64_t cov_seed = 0;
    double cov_shrink = 0.0;
    uint64_t counterfact_seed = 0;
    int gen_len = 8;
};

// Runs every cell against a fresh copy of the checkpoint; a failing cell is
// reported with failed=true and the grid continues.
std::vector<MetricsReport> run_experiment(const ModelConfig& c, const ModelParams& params,
                                          const FactWorld& world,
                                          const std::vector<ExperimentCell>& grid,
                                          const ExperimentConfigEval& cfg);

// Scores one already-applied edit (exposed so the CLI can evaluate a stored
// plan without re-planning).
MetricsReport evaluate_edit(const ModelConfig& c, const ModelParams& pre, const ModelParams& post,
                            const FactWorld& world, const std::vector<CounterfactEdit>& edits,
                            int gen_len);

// Report persistence: one JSON file per cell plus an aggregate CSV with one
// row per report (mode, alpha, t, the four metrics, failure flag).
void save_metrics_report(const std::string& path, const MetricsReport& r);
MetricsReport load_metrics_report(const std::string& path);
void write_reports_csv(const std::string& path, const std::vector<MetricsReport>& reports);

}  // namespace editlab
