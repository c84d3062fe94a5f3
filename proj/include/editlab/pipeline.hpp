#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "editlab/config.hpp"
#include "editlab/edit_engine.hpp"
#include "editlab/eval.hpp"
#include "editlab/trace.hpp"

namespace editlab {

// Pipeline stages shared by the CLI and the test harness. Each stage reads
// its upstream artifacts from cfg.out_dir, writes its own artifacts there,
// and prints a one-line summary to stdout. Artifacts embed the config hash
// and library version (binary artifacts via a ".meta.json" sidecar), never
// timestamps, so reruns with identical inputs are byte-identical.

struct StageContext {
    ExperimentConfig cfg;
    nlohmann::json overrides = nlohmann::json::object();  // flag overrides, recorded in metadata
};

// Artifact locations under cfg.out_dir.
std::string world_path(const ExperimentConfig& cfg);
std::string checkpoint_path(const ExperimentConfig& cfg);
std::string train_log_path(const ExperimentConfig& cfg);
std::string trace_dir(const ExperimentConfig& cfg);
std::string trace_summary_path(const ExperimentConfig& cfg);
std::string edited_checkpoint_path(const ExperimentConfig& cfg);
std::string edit_plan_path(const ExperimentConfig& cfg);
std::string edit_summary_path(const ExperimentConfig& cfg);
std::string reports_dir(const ExperimentConfig& cfg);
std::string eval_report_path(const ExperimentConfig& cfg);

void stage_world(const StageContext& ctx);

struct TrainOutcome {
    double final_recall = 0.0;
    double final_loss = 0.0;
};
TrainOutcome stage_train(const StageContext& ctx);

// Per-probe heatmaps averaged over noise draws, plus the digest the edit
// stage consumes: selected windows, the auto balance factor, and how sharply
// the MLP effect concentrates (max over layers vs layer mean).
struct TraceSummary {
    double nu = 0.0;
    double p_clean_mean = 0.0;
    double p_corrupt_mean = 0.0;
    LayerWindows windows;
    double alpha_auto = 0.0;
    double mlp_localization_ratio = 0.0;
    std::vector<double> mlp_ld;   // per-layer last-subject-token means
    std::vector<double> attn_ld;
    std::vector<double> hidden_ld;
};
TraceSummary stage_trace(const StageContext& ctx);
TraceSummary load_trace_summary(const std::string& path);

struct EditOutcome {
    double alpha = 0.0;           // effective value after mode rules
    std::string alpha_source;     // "config", "flag", or "auto"
    LayerWindows windows;
    int n_deltas = 0;
    double max_rel_residual = 0.0;
};
EditOutcome stage_edit(const StageContext& ctx);

MetricsReport stage_eval(const StageContext& ctx);

// Grid sweep: every (mode, alpha, t) cell edits a fresh copy of the
// checkpoint and writes one report plus an aggregate CSV.
std::vector<MetricsReport> stage_sweep(const StageContext& ctx,
                                       const std::vector<std::string>& modes,
                                       const std::vector<double>& alphas,
                                       const std::vector<int>& ts);

}  // namespace editlab
