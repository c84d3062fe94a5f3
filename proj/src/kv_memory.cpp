#include "editlab/kv_memory.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <stdexcept>

#include "editlab/archive.hpp"
#include "editlab/rng.hpp"
#include "editlab/train.hpp"

namespace editlab {

const char* pathway_name(Pathway pw) {
    return pw == Pathway::Mlp ? "mlp" : "attn";
}

Pathway pathway_from_name(const std::string& name) {
    if (name == "mlp") return Pathway::Mlp;
    if (name == "attn") return Pathway::Attn;
    throw std::invalid_argument("unknown pathway '" + name + "'");
}

Site key_site(Pathway pw) {
    return pw == Pathway::Mlp ? Site::MlpKey : Site::AttnKey;
}

Site value_site(Pathway pw) {
    return pw == Pathway::Mlp ? Site::MlpOut : Site::AttnOut;
}

int key_dim(Pathway pw, const ModelConfig& c) {
    return pw == Pathway::Mlp ? c.d_mlp : c.d_model;
}

std::vector<PromptVariant> key_contexts(const std::vector<int>& prompt, int subject_pos,
                                        const KeyContext& kc) {
    if (prompt.empty()) throw std::invalid_argument("key_contexts: empty prompt");
    if (subject_pos < 0 || subject_pos >= static_cast<int>(prompt.size()))
        throw std::invalid_argument("key_contexts: subject position outside the prompt");
    if (kc.n_prefixes < 0) throw std::invalid_argument("key_contexts: negative prefix count");
    if (kc.n_prefixes > 0) {
        if (kc.candidates.empty())
            throw std::invalid_argument("key_contexts: no prefix candidate tokens");
        if (kc.min_len < 1 || kc.max_len < kc.min_len)
            throw std::invalid_argument("key_contexts: bad prefix length range");
    }

    std::vector<PromptVariant> out;
    out.push_back({prompt, subject_pos});
    Rng rng(kc.seed);
    for (int i = 0; i < kc.n_prefixes; ++i) {
        const int len =
            kc.min_len + static_cast<int>(rng.index(static_cast<size_t>(kc.max_len - kc.min_len + 1)));
        PromptVariant v;
        v.tokens.reserve(prompt.size() + len);
        v.tokens.push_back(prompt[0]);
        for (int j = 0; j < len; ++j)
            v.tokens.push_back(kc.candidates[rng.index(kc.candidates.size())]);
        v.tokens.insert(v.tokens.end(), prompt.begin() + 1, prompt.end());
        v.subject_pos = subject_pos + len;
        out.push_back(std::move(v));
    }
    return out;
}

std::vector<double> extract_key(const ModelConfig& c, const ModelParams& p, Pathway pw, int layer,
                                const std::vector<int>& prompt, int subject_pos,
                                const KeyContext& kc) {
    if (layer < 0 || layer >= c.n_layers)
        throw std::invalid_argument("extract_key: layer out of range");
    const Site site = key_site(pw);
    const std::vector<PromptVariant> contexts = key_contexts(prompt, subject_pos, kc);

    std::vector<double> mean(static_cast<size_t>(key_dim(pw, c)), 0.0);
    for (const PromptVariant& ctx : contexts) {
        const ForwardResult run = forward(c, p, ctx.tokens, site_bit(site));
        const std::vector<float> k = run.trace.vec(site, layer, ctx.subject_pos);
        for (size_t i = 0; i < mean.size(); ++i) mean[i] += k[i];
    }
    for (double& v : mean) v /= static_cast<double>(contexts.size());
    return mean;
}

std::vector<double> current_value(const ModelConfig& c, const ModelParams& p, Pathway pw,
                                  int layer, const std::vector<double>& key) {
    if (layer < 0 || layer >= c.n_layers)
        throw std::invalid_argument("current_value: layer out of range");
    if (static_cast<int>(key.size()) != key_dim(pw, c))
        throw std::invalid_argument("current_value: key has wrong dimension");
    const MatF& w = pw == Pathway::Mlp ? p.layers[layer].w_out : p.layers[layer].wo;
    std::vector<double> v(static_cast<size_t>(c.d_model), 0.0);
    for (int i = 0; i < w.rows; ++i) {
        double acc = 0.0;
        for (int j = 0; j < w.cols; ++j) acc += static_cast<double>(w.at(i, j)) * key[j];
        v[i] = acc;
    }
    return v;
}

CovEstimate estimate_covariance(const ModelConfig& c, const ModelParams& p, const FactWorld& w,
                                Pathway pw, int layer, int n_samples, uint64_t seed,
                                double shrink) {
    if (n_samples < 1) throw std::invalid_argument("estimate_covariance: no samples requested");
    if (layer < 0 || layer >= c.n_layers)
        throw std::invalid_argument("estimate_covariance: layer out of range");
    if (shrink < 0.0) throw std::invalid_argument("estimate_covariance: negative shrink");

    // Prompts whose predictions the edit must not disturb, with the positions
    // eligible for sampling. The subject slot of any edit-candidate subject
    // is skipped everywhere: an edit rewrites that slot, and since the slot
    // sees only [BOS, s] its key is identical across all of the subject's
    // prompts, so keeping it in the preserved set cannot shield those prompts
    // (they read the rewritten slot regardless) and only dampens the edit.
    std::set<int> edit_subjects;
    for (int fi : w.edit_split) edit_subjects.insert(w.facts[fi].subject);

    struct PoolEntry {
        std::vector<int> prompt;
        std::vector<int> positions;
    };
    std::vector<PoolEntry> pool;
    auto add_prompts = [&pool, &edit_subjects](const FactTriple& f) {
        const bool skip_subject = edit_subjects.count(f.subject) > 0;
        for (auto&& prompt : {fact_prompt(f), paraphrase_prompt(f)}) {
            PoolEntry pe;
            pe.prompt = prompt;
            for (int pos = 0; pos < static_cast<int>(pe.prompt.size()); ++pos)
                if (!skip_subject || pos != kSubjectPos) pe.positions.push_back(pos);
            pool.push_back(std::move(pe));
        }
    };
    for (const auto* split : {&w.train_split, &w.locality_split, &w.edit_split})
        for (int fi : *split) add_prompts(w.facts[fi]);
    if (pool.empty()) throw std::invalid_argument("estimate_covariance: empty prompt pool");

    const int d_k = key_dim(pw, c);
    if (n_samples < d_k)
        std::fprintf(stderr,
                     "estimate_covariance: %d samples for a %d-dim key; the second moment "
                     "will be rank deficient\n",
                     n_samples, d_k);

    const Site site = key_site(pw);
    CovEstimate est;
    est.c0 = MatD(d_k, d_k);
    est.sample_count = n_samples;
    Rng rng(seed);
    for (int s = 0; s < n_samples; ++s) {
        // One key per sample: draw a prompt, then one of its eligible
        // positions, so the second moment spans everything inference touches
        // (not just subject tokens).
        const PoolEntry& pe = pool[rng.index(pool.size())];
        const std::vector<int>& prompt = pe.prompt;
        const int pos = pe.positions[rng.index(pe.positions.size())];
        const ForwardResult run = forward(c, p, prompt, site_bit(site));
        const std::vector<float> k = run.trace.vec(site, layer, pos);
        for (int i = 0; i < d_k; ++i) {
            const double ki = k[i];
            for (int j = 0; j < d_k; ++j) est.c0.at(i, j) += ki * static_cast<double>(k[j]);
        }
    }
    if (shrink > 0.0) {
        // Isotropic floor proportional to the mean diagonal. Scales linearly
        // with the accumulated mass, so summing estimates still sums floors.
        double tr = 0.0;
        for (int i = 0; i < d_k; ++i) tr += est.c0.at(i, i);
        const double floor = shrink * tr / d_k;
        for (int i = 0; i < d_k; ++i) est.c0.at(i, i) += floor;
    }
    return est;
}

void save_covariance(const std::string& path, const CovEstimate& cov, Pathway pw, int layer,
                     uint64_t params_fp) {
    Archive ar;
    ar.kind = "covariance";
    ar.meta = {{"format", 1},
               {"pathway", pathway_name(pw)},
               {"layer", layer},
               {"sample_count", cov.sample_count},
               {"params_fingerprint", hex_u64(params_fp)}};
    ar.add_f64("c0", {cov.c0.rows, cov.c0.cols}, cov.c0.data.data());
    write_archive(path, ar);
}

CovEstimate load_covariance(const std::string& path, Pathway pw, int layer, uint64_t params_fp) {
    const Archive ar = read_archive(path, "covariance");
    if (ar.meta.at("format").get<int>() != 1)
        throw std::runtime_error("covariance '" + path + "': unsupported format");
    if (ar.meta.at("pathway").get<std::string>() != pathway_name(pw) ||
        ar.meta.at("layer").get<int>() != layer)
        throw std::runtime_error("covariance '" + path + "' was computed for a different site");
    if (ar.meta.at("params_fingerprint").get<std::string>() != hex_u64(params_fp))
        throw std::runtime_error("covariance '" + path + "' was computed for different weights");

    const ArchiveTensor& t = ar.require("c0");
    if (t.shape.size() != 2 || t.shape[0] != t.shape[1])
        throw std::runtime_error("covariance '" + path + "': c0 is not square");
    CovEstimate est;
    est.c0 = MatD(static_cast<int>(t.shape[0]), static_cast<int>(t.shape[1]));
    const double* src = t.as_f64();
    std::copy(src, src + t.element_count(), est.c0.data.begin());
    est.sample_count = ar.meta.at("sample_count").get<int>();
    return est;
}

ValueTarget optimize_target_value(const ModelConfig& c, const ModelParams& p,
                                  const std::vector<int>& prompt, int subject_pos, int target,
                                  Pathway pw, int layer, const std::vector<float>& v_start,
                                  const ValueOptConfig& cfg) {
    if (subject_pos < 0 || subject_pos >= static_cast<int>(prompt.size()))
        throw std::invalid_argument("optimize_target_value: subject position outside the prompt");
    if (layer < 0 || layer >= c.n_layers)
        throw std::invalid_argument("optimize_target_value: layer out of range");
    if (target < 0 || target >= c.vocab_size)
        throw std::invalid_argument("optimize_target_value: target token outside vocab");
    if (static_cast<int>(v_start.size()) != c.d_model)
        throw std::invalid_argument("optimize_target_value: start value has wrong dimension");
    if (cfg.max_steps < 0 || !(cfg.lr > 0.0) || cfg.beta < 0.0)
        throw std::invalid_argument("optimize_target_value: bad optimizer settings");

    const Site site = value_site(pw);
    const std::vector<float>& v0 = v_start;
    const size_t d = v0.size();
    const double pen_scale = cfg.beta / c.d_model;

    auto objective = [&](double log_p, const std::vector<float>& v) {
        double dist2 = 0.0;
        for (size_t i = 0; i < d; ++i) {
            const double dv = static_cast<double>(v[i]) - v0[i];
            dist2 += dv * dv;
        }
        return log_p - pen_scale * dist2;
    };

    // Steepest ascent with a normalized direction and a backtracking line
    // search on the penalized objective. Each of the max_steps iterations
    // takes one gradient and at most four trial evaluations; the step size
    // grows on success and shrinks on rejection, capped at 4x the configured
    // starting size, so the total movement is bounded by max_steps * 4 * lr.
    std::vector<float> v = v0;
    double eta = cfg.lr;
    const double eta_cap = 4.0 * cfg.lr;

    ValueTarget out;
    out.v = v0;
    double best_obj = 0.0;
    for (int step = 0;; ++step) {
        const ValuePatchGrad g =
            value_patch_gradient(c, p, prompt, target, layer, subject_pos, site, v);
        if (step == 0) out.p_start = g.p_target;
        const double obj = objective(g.log_p_target, v);
        if (step == 0 || obj > best_obj) {
            best_obj = obj;
            out.v = v;
            out.p_final = g.p_target;
            out.steps = step;
        }
        if (g.p_target >= cfg.target_p) {
            // Good enough: keep this iterate even if an earlier one scored
            // a higher penalized objective.
            out.v = v;
            out.p_final = g.p_target;
            out.steps = step;
            break;
        }
        if (step == cfg.max_steps) break;

        std::vector<double> dir(d);
        double norm2 = 0.0;
        for (size_t i = 0; i < d; ++i) {
            // Ascent on log P minus the penalty.
            dir[i] =
                static_cast<double>(g.grad[i]) - 2.0 * pen_scale * (static_cast<double>(v[i]) - v0[i]);
            norm2 += dir[i] * dir[i];
        }
        const double norm = std::sqrt(norm2);
        if (!(norm > 0.0)) break;
        for (double& x : dir) x /= norm;

        for (int trial = 0; trial < 4; ++trial) {
            std::vector<float> cand(d);
            for (size_t i = 0; i < d; ++i)
                cand[i] = static_cast<float>(static_cast<double>(v[i]) + eta * dir[i]);
            const ValuePatchGrad gc =
                value_patch_gradient(c, p, prompt, target, layer, subject_pos, site, cand);
            if (objective(gc.log_p_target, cand) > obj) {
                v = std::move(cand);
                eta = std::min(eta * 1.5, eta_cap);
                break;
            }
            eta *= 0.5;
        }
    }
    return out;
}

ValueTarget optimize_target_value(const ModelConfig& c, const ModelParams& p,
                                  const std::vector<int>& prompt, int subject_pos, int target,
                                  Pathway pw, int layer, const ValueOptConfig& cfg) {
    if (subject_pos < 0 || subject_pos >= static_cast<int>(prompt.size()))
        throw std::invalid_argument("optimize_target_value: subject position outside the prompt");
    if (layer < 0 || layer >= c.n_layers)
        throw std::invalid_argument("optimize_target_value: layer out of range");
    const Site site = value_site(pw);
    const ForwardResult run = forward(c, p, prompt, site_bit(site));
    return optimize_target_value(c, p, prompt, subject_pos, target, pw, layer,
                                 run.trace.vec(site, layer, subject_pos), cfg);
}

}  // namespace editlab
