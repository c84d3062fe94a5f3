#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "editlab/fact_world.hpp"
#include "editlab/matrix.hpp"
#include "editlab/model.hpp"

namespace editlab {

// Treating a projection weight as an associative memory W k ~ v. The MLP
// pathway edits w_out: keys are the post-GELU hidden (d_mlp), values its
// output (d_model). The Attn pathway edits wo: keys are the concatenated
// head outputs (d_model), values the projected block output (d_model).
enum class Pathway { Mlp = 0, Attn = 1 };

const char* pathway_name(Pathway pw);
Pathway pathway_from_name(const std::string& name);
Site key_site(Pathway pw);    // MlpKey or AttnKey
Site value_site(Pathway pw);  // MlpOut or AttnOut
int key_dim(Pathway pw, const ModelConfig& c);

// Random short prefixes inserted after BOS so keys average over varied
// context instead of memorizing one position's quirks.
struct KeyContext {
    int n_prefixes = 8;  // prefixed variants in addition to the plain prompt
    int min_len = 1;
    int max_len = 2;
    std::vector<int> candidates;  // tokens prefixes are drawn from
    uint64_t seed = 0;
};

struct PromptVariant {
    std::vector<int> tokens;
    int subject_pos = 0;
};

// The plain prompt first, then n_prefixes randomized variants. Deterministic
// given the seed. Prefixes never grow a prompt past max_len tokens each.
std::vector<PromptVariant> key_contexts(const std::vector<int>& prompt, int subject_pos,
                                        const KeyContext& kc);

// Key at the subject token of the given layer, averaged over the contexts.
std::vector<double> extract_key(const ModelConfig& c, const ModelParams& p, Pathway pw, int layer,
                                const std::vector<int>& prompt, int subject_pos,
                                const KeyContext& kc);

// What the unedited weight currently stores for this key: W k.
std::vector<double> current_value(const ModelConfig& c, const ModelParams& p, Pathway pw,
                                  int layer, const std::vector<double>& key);

// Second moment sum(k k^T) of keys from prompts the edit must preserve.
struct CovEstimate {
    MatD c0;  // d_k x d_k
    int sample_count = 0;
};

// Samples (with replacement) from the world's prompts and accumulates
// plain-context keys, one per draw: first a prompt, then one of its eligible
// positions. Every position of every prompt is eligible except the subject
// slot of subjects with an edit-candidate fact: editing rewrites that slot,
// and because the slot only sees [BOS, s] its key is shared by all of the
// subject's prompts, so preserving it cannot protect them (they read the
// rewritten slot either way) and would only fight the edit. A shrink factor
// adds shrink * mean-diagonal * I as an isotropic floor, stabilizing the
// downstream solve when samples are scarce. Warns on stderr when the sample
// count is below the key dimension.
CovEstimate estimate_covariance(const ModelConfig& c, const ModelParams& p, const FactWorld& w,
                                Pathway pw, int layer, int n_samples, uint64_t seed,
                                double shrink = 0.0);

void save_covariance(const std::string& path, const CovEstimate& cov, Pathway pw, int layer,
                     uint64_t params_fp);
CovEstimate load_covariance(const std::string& path, Pathway pw, int layer, uint64_t params_fp);

// Gradient ascent on log P(target) through an activation patch at the
// pathway's value site, pulled toward the starting value by an L2 penalty.
// Steps use a normalized direction with a backtracking line search, so lr is
// the starting step length; it grows on accepted steps (capped at 4 * lr)
// and shrinks on rejected ones.
struct ValueOptConfig {
    int max_steps = 25;
    double lr = 0.5;
    double beta = 0.0625;    // penalty weight on (beta / d_model) * ||v - v0||^2
    double target_p = 0.95;  // early stop once the patched probability reaches this
};

struct ValueTarget {
    std::vector<float> v;  // optimized replacement value
    double p_start = 0.0;  // patched P(target) at the current value
    double p_final = 0.0;  // patched P(target) at v
    int steps = 0;
};

// Returns the early-stopped iterate, or the best penalized objective seen
// (including the start, so p_final never falls below p_start). The first
// form starts from v_start; the second from the model's own value-site
// activation at the subject token.
ValueTarget optimize_target_value(const ModelConfig& c, const ModelParams& p,
                                  const std::vector<int>& prompt, int subject_pos, int target,
                                  Pathway pw, int layer, const std::vector<float>& v_start,
                                  const ValueOptConfig& cfg);
ValueTarget optimize_target_value(const ModelConfig& c, const ModelParams& p,
                                  const std::vector<int>& prompt, int subject_pos, int target,
                                  Pathway pw, int layer, const ValueOptConfig& cfg);

}  // namespace editlab
