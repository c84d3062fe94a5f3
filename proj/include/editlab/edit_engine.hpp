#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "editlab/fact_world.hpp"
#include "editlab/kv_memory.hpp"
#include "editlab/matrix.hpp"
#include "editlab/model.hpp"

namespace editlab {

// Batched closed-form weight edits. Each requested fact becomes key/value
// columns at the chosen layers; every layer's projection then moves by the
// least-squares delta that writes the new values while staying anchored to
// the preserved-key second moment. A balance factor alpha splits the update
// between the attention and MLP pathways.

enum class EditMode {
    Dual = 0,         // both pathways; attention scaled by alpha, MLP by 1 - alpha
    MlpOnly = 1,      // MLP pathway at full scale, attention untouched
    AttnOnly = 2,     // attention pathway at full scale, MLP untouched
    SingleLayer = 3,  // one MLP layer at full scale
};

const char* edit_mode_name(EditMode m);
EditMode edit_mode_from_name(const std::string& name);

struct EditRequest {
    std::vector<CounterfactEdit> edits;
    EditMode mode = EditMode::Dual;
    double alpha = 0.5;            // share of the update routed through attention
    std::vector<int> mlp_layers;   // strictly ascending
    std::vector<int> attn_layers;  // strictly ascending; ignored in single_layer mode
    // Prefix scheme for the averaged keys. An empty candidate list defaults
    // to every non-BOS token the world uses.
    KeyContext key_context;
    ValueOptConfig value_opt;
    int cov_samples = 1000;  // keys sampled per preserved-knowledge covariance
    uint64_t cov_seed = 0;
    double cov_shrink = 0.0;  // isotropic floor passed to estimate_covariance
};

// One solved weight update. The stored k1/c0/residual let the normal
// equation delta (c0 + k1 k1^T) = residual k1^T be re-checked offline.
struct PlannedDelta {
    Pathway pathway = Pathway::Mlp;
    int layer = 0;
    double scale = 1.0;  // multiplier used at application time
    MatD k1;             // averaged edit keys, d_k x n_edits
    MatD c0;             // preserved-key second moment behind the solve
    MatD residual;       // value gap this layer absorbs, d_model x n_edits
    MatD delta;          // solved weight update, d_model x d_k
    double rel_residual = 0.0;  // relative Frobenius error of the normal equation
};

struct EditPlan {
    EditMode mode = EditMode::Dual;
    double alpha = 0.0;  // effective balance after mode overrides
    int n_edits = 0;
    uint64_t params_fp = 0;  // fingerprint of the weights the plan was built against
    // Application order: attention layers ascending, then MLP layers ascending.
    std::vector<PlannedDelta> deltas;
};

// How many layers still share the remaining value gap: max(layers) - layer + 1.
int spread_divisor(const std::vector<int>& layers, int layer);

// Layer's share of the gap between the target values and what the top
// edited layer currently produces: (v1 - w_top k1_top) / spread_divisor.
MatD spread_residual(const MatD& v1, const MatD& w_top, const MatD& k1_top,
                     const std::vector<int>& layers, int layer);

struct DeltaSolution {
    MatD delta;     // d_v x d_k
    MatD residual;  // v1 - w0 k1, exactly as the solve saw it
    double rel_residual = 0.0;
};

// Solves delta (c0 + k1 k1^T) = (v1 - w0 k1) k1^T via Cholesky, falling
// back to an eigendecomposition solve when the Gram matrix is singular.
// Throws when even that leaves the normal equation unsatisfied.
DeltaSolution solve_delta(const MatD& w0, const MatD& k1, const MatD& v1, const MatD& c0);

// Walks each pathway's layers in ascending order, re-extracting keys and
// covariances against the partially edited weights, and solves one delta
// per layer. Attention is planned (and applied) before MLP. Scale-zero
// deltas are recorded but never applied, so dual mode at alpha 0 or 1
// reproduces the single-pathway modes bit for bit. Any failure aborts the
// whole plan.
EditPlan plan_edit(const ModelConfig& c, const ModelParams& p, const FactWorld& world,
                   const EditRequest& req);

// Returns a copy of the params with scale * delta added at every planned
// site, after checking the plan was built for exactly these weights.
// Prints the plan summary to stderr.
ModelParams apply_edit(const ModelParams& p, const EditPlan& plan);

// Human-readable per-delta norms and scales.
std::string plan_summary(const EditPlan& plan);

void save_plan(const std::string& path, const EditPlan& plan);
EditPlan load_plan(const std::string& path);

}  // namespace editlab
