#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "editlab/matrix.hpp"
#include "editlab/model.hpp"

namespace editlab {

// Three-run causal tracing: a clean run caching activations, a corrupted
// run with Gaussian noise on the subject embeddings, and one patched run
// per (layer, position, site) restoring the clean activation there. Two
// effect readings per cell: probability restoration and normalized
// logit-difference restoration.

struct TraceQuery {
    std::vector<int> prompt;
    std::vector<int> subject_positions;  // the span to corrupt
    int answer = 0;     // correct object token r
    int contrast = -1;  // r'; -1 means use the corrupted run's top prediction
    uint32_t sites = site_bit(Site::Hidden) | site_bit(Site::MlpOut) | site_bit(Site::AttnOut);
    double noise = 0.0;  // corruption scale, must be > 0
    uint64_t seed = 0;   // passed straight to make_embedding_noise, so runs can be replayed
};

struct TraceGrid {
    MatD prob;  // n_layers x seq_len, P_patched - P_corrupted
    MatD ld;    // (LD_patched - LD_corrupted) / (LD_clean - LD_corrupted)
};

// When the clean and corrupted logit gaps are closer than this, the
// normalized LD effect is undefined; cells are zeroed and flagged.
inline constexpr double kLdDenomGuard = 1e-9;

struct TraceReport {
    TraceQuery query;  // contrast resolved to a concrete token
    int n_layers = 0;
    int seq_len = 0;
    double p_clean = 0.0, p_corrupt = 0.0;
    double ld_clean = 0.0, ld_corrupt = 0.0;
    bool degenerate_gap = false;
    std::array<TraceGrid, kNumSites> grids;  // filled for sites in query.sites

    bool has(Site s) const { return (query.sites & site_bit(s)) != 0; }
    const TraceGrid& grid(Site s) const;
    int last_subject_pos() const;
};

// nu = 3 x population standard deviation over every entry of the given
// embedding rows. Throws when the entries are degenerate (zero spread).
double noise_scale(const MatD& embedding_rows);

// Rows of the token embedding table for the given token ids.
MatD gather_embedding_rows(const ModelConfig& c, const ModelParams& p,
                           const std::vector<int>& tokens);

TraceReport trace(const ModelConfig& c, const ModelParams& p, const TraceQuery& query);

// Contiguous layer windows with the strongest mean last-subject-token LD
// effect, per pathway. Ties pick the lower-indexed window.
struct LayerWindows {
    std::vector<int> s_mlp;
    std::vector<int> s_attn;
};
LayerWindows select_windows(const std::vector<TraceReport>& reports, int mlp_window,
                            int attn_window);

// Share of summed last-subject-token LD effect carried by the Attn pathway
// over the given windows. Per-layer means are clamped at zero before
// summation; the result is clamped to [0, 1].
double balance_factor(const std::vector<TraceReport>& reports, const std::vector<int>& s_mlp,
                      const std::vector<int>& s_attn);

// CSV of (site, layer, position, prob_effect, ld_effect) plus a JSON
// sidecar (path + ".meta.json") holding the query and reference values.
void export_heatmap(const TraceReport& report, const std::string& path);
TraceReport load_heatmap(const std::string& path);

}  // namespace editlab
