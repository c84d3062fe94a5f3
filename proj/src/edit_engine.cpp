#include "editlab/edit_engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <utility>

#include "editlab/archive.hpp"
#include "editlab/rng.hpp"

namespace editlab {

const char* edit_mode_name(EditMode m) {
    switch (m) {
        case EditMode::Dual: return "dual";
        case EditMode::MlpOnly: return "mlp_only";
        case EditMode::AttnOnly: return "attn_only";
        case EditMode::SingleLayer: return "single_layer";
    }
    throw std::invalid_argument("edit_mode_name: bad mode value");
}

EditMode edit_mode_from_name(const std::string& name) {
    if (name == "dual") return EditMode::Dual;
    if (name == "mlp_only") return EditMode::MlpOnly;
    if (name == "attn_only") return EditMode::AttnOnly;
    if (name == "single_layer") return EditMode::SingleLayer;
    throw std::invalid_argument("unknown edit mode '" + name + "'");
}

int spread_divisor(const std::vector<int>& layers, int layer) {
    if (layers.empty()) throw std::invalid_argument("spread_divisor: empty layer window");
    if (std::find(layers.begin(), layers.end(), layer) == layers.end())
        throw std::invalid_argument("spread_divisor: layer not in the window");
    return *std::max_element(layers.begin(), layers.end()) - layer + 1;
}

MatD spread_residual(const MatD& v1, const MatD& w_top, const MatD& k1_top,
                     const std::vector<int>& layers, int layer) {
    if (w_top.cols != k1_top.rows || v1.rows != w_top.rows || v1.cols != k1_top.cols)
        throw std::invalid_argument("spread_residual: inconsistent shapes");
    const int div = spread_divisor(layers, layer);
    return scale(sub(v1, matmul(w_top, k1_top)), 1.0 / div);
}

namespace {

// Solves g x = b for symmetric PSD g through its eigendecomposition,
// dropping directions whose eigenvalue is below 1e-10 of the largest.
MatD eigen_solve_psd(const MatD& g, const MatD& b) {
    const SymEigen e = sym_eigen(g);
    const double lmax = e.values.empty() ? 0.0 : std::max(e.values[0], 0.0);
    const double cutoff = 1e-10 * lmax;
    MatD y = matmul(transpose(e.vectors), b);
    for (int j = 0; j < y.rows; ++j) {
        const double lambda = e.values[j];
        const double inv = lambda > cutoff && lambda > 0.0 ? 1.0 / lambda : 0.0;
        for (int c = 0; c < y.cols; ++c) y.at(j, c) *= inv;
    }
    return matmul(e.vectors, y);
}

MatF& pathway_weight(ModelParams& p, Pathway pw, int layer) {
    return pw == Pathway::Mlp ? p.layers[layer].w_out : p.layers[layer].wo;
}

// Adds scale * delta to the targeted weight. Scale zero is skipped outright
// so untouched pathways stay bit-identical across modes.
void apply_delta_inplace(ModelParams& p, const PlannedDelta& d) {
    if (d.layer < 0 || d.layer >= static_cast<int>(p.layers.size()))
        throw std::runtime_error("edit plan: delta layer outside the model");
    if (d.scale == 0.0) return;
    MatF& w = pathway_weight(p, d.pathway, d.layer);
    if (d.delta.rows != w.rows || d.delta.cols != w.cols)
        throw std::runtime_error("edit plan: delta shape does not match the weight");
    for (size_t i = 0; i < w.data.size(); ++i)
        w.data[i] =
            static_cast<float>(static_cast<double>(w.data[i]) + d.scale * d.delta.data[i]);
}

void validate_window(const std::vector<int>& layers, int n_layers, const char* which) {
    if (layers.empty())
        throw std::invalid_argument(std::string("plan_edit: empty ") + which + " layer window");
    for (size_t i = 0; i < layers.size(); ++i) {
        if (layers[i] < 0 || layers[i] >= n_layers)
            throw std::invalid_argument(std::string("plan_edit: ") + which +
                                        " layer window leaves the model");
        if (i > 0 && layers[i] <= layers[i - 1])
            throw std::invalid_argument(std::string("plan_edit: ") + which +
                                        " layer window must be strictly ascending");
    }
}

}  // namespace

DeltaSolution solve_delta(const MatD& w0, const MatD& k1, const MatD& v1, const MatD& c0) {
    if (k1.rows == 0 || k1.cols == 0) throw std::invalid_argument("solve_delta: empty key matrix");
    if (w0.cols != k1.rows || v1.rows != w0.rows || v1.cols != k1.cols ||
        c0.rows != k1.rows || c0.cols != k1.rows)
        throw std::invalid_argument("solve_delta: inconsistent shapes");
    require_finite(w0, "solve_delta w0");
    require_finite(k1, "solve_delta k1");
    require_finite(v1, "solve_delta v1");
    require_finite(c0, "solve_delta c0");

    DeltaSolution out;
    out.residual = sub(v1, matmul(w0, k1));
    const MatD g = add(c0, matmul(k1, transpose(k1)));
    const MatD b = matmul(k1, transpose(out.residual));  // d_k x d_v

    MatD xt;  // delta^T
    bool cholesky_ok = false;
    try {
        const SpdSolveResult s = solve_spd(g, b);
        if (!s.regularized) {
            xt = s.x;
            cholesky_ok = true;
        }
    } catch (const std::exception&) {
        // fall through to the eigendecomposition path
    }
    if (!cholesky_ok) xt = eigen_solve_psd(g, b);
    out.delta = transpose(xt);

    const MatD rhs = transpose(b);
    const double num = frobenius_norm(sub(matmul(out.delta, g), rhs));
    const double den = frobenius_norm(rhs);
    out.rel_residual = den > 0.0 ? num / den : (num > 0.0 ? INFINITY : 0.0);
    if (!all_finite(out.delta) || !(out.rel_residual <= 1e-6))
        throw std::runtime_error("solve_delta: gram matrix irreparably singular");
    return out;
}

EditPlan plan_edit(const ModelConfig& c, const ModelParams& p, const FactWorld& world,
                   const EditRequest& req) {
    if (req.edits.empty()) throw std::invalid_argument("plan_edit: no edits requested");
    std::vector<std::pair<int, int>> seen;
    for (const CounterfactEdit& e : req.edits) {
        if (e.fact_index < 0 || e.fact_index >= static_cast<int>(world.facts.size()))
            throw std::invalid_argument("plan_edit: edit fact index outside the world");
        if (!world.vocab.is_object(e.new_object))
            throw std::invalid_argument("plan_edit: edit target is not an object token");
        const FactTriple& f = world.facts[e.fact_index];
        seen.push_back({f.subject, f.relation});
    }
    std::sort(seen.begin(), seen.end());
    if (std::adjacent_find(seen.begin(), seen.end()) != seen.end())
        throw std::invalid_argument("plan_edit: duplicate (subject, relation) in the edit batch");
    if (req.cov_samples < 1) throw std::invalid_argument("plan_edit: no covariance samples");
    if (req.cov_shrink < 0.0) throw std::invalid_argument("plan_edit: negative covariance shrink");

    // Effective balance and pathway schedule. Attention always runs first
    // so MLP targets are computed against the attention-edited weights.
    struct PathwayJob {
        Pathway pw;
        const std::vector<int>* layers;
        double scale;
    };
    double alpha = 0.0;
    std::vector<PathwayJob> jobs;
    switch (req.mode) {
        case EditMode::Dual:
            if (!(req.alpha >= 0.0 && req.alpha <= 1.0))
                throw std::invalid_argument("plan_edit: alpha outside [0, 1]");
            alpha = req.alpha;
            validate_window(req.attn_layers, c.n_layers, "attn");
            validate_window(req.mlp_layers, c.n_layers, "mlp");
            jobs.push_back({Pathway::Attn, &req.attn_layers, alpha});
            jobs.push_back({Pathway::Mlp, &req.mlp_layers, 1.0 - alpha});
            break;
        case EditMode::MlpOnly:
            validate_window(req.mlp_layers, c.n_layers, "mlp");
            jobs.push_back({Pathway::Mlp, &req.mlp_layers, 1.0});
            break;
        case EditMode::AttnOnly:
            alpha = 1.0;
            validate_window(req.attn_layers, c.n_layers, "attn");
            jobs.push_back({Pathway::Attn, &req.attn_layers, 1.0});
            break;
        case EditMode::SingleLayer:
            validate_window(req.mlp_layers, c.n_layers, "mlp");
            if (req.mlp_layers.size() != 1)
                throw std::invalid_argument("plan_edit: single_layer mode takes exactly one mlp layer");
            jobs.push_back({Pathway::Mlp, &req.mlp_layers, 1.0});
            break;
    }

    KeyContext kc = req.key_context;
    if (kc.candidates.empty())
        for (int t = 1; t < world.vocab.used_tokens(); ++t) kc.candidates.push_back(t);

    const int n_edits = static_cast<int>(req.edits.size());
    std::vector<std::vector<int>> prompts;
    std::vector<int> targets;
    for (const CounterfactEdit& e : req.edits) {
        prompts.push_back(fact_prompt(world.facts[e.fact_index]));
        targets.push_back(e.new_object);
    }

    EditPlan plan;
    plan.mode = req.mode;
    plan.alpha = alpha;
    plan.n_edits = n_edits;
    plan.params_fp = params_fingerprint(p);

    ModelParams work = p;
    for (const PathwayJob& job : jobs) {
        const int top = job.layers->back();
        const int d_k = key_dim(job.pw, c);

        // Target values at the top edited layer, one column per edit,
        // optimized from what the current weights store for the averaged key.
        MatD v1(c.d_model, n_edits);
        double p_before = 0.0, p_after = 0.0;
        for (int e = 0; e < n_edits; ++e) {
            const std::vector<double> k_top =
                extract_key(c, work, job.pw, top, prompts[e], kSubjectPos, kc);
            const std::vector<double> v_now = current_value(c, work, job.pw, top, k_top);
            const std::vector<float> v_start(v_now.begin(), v_now.end());
            const ValueTarget t = optimize_target_value(c, work, prompts[e], kSubjectPos,
                                                        targets[e], job.pw, top, v_start,
                                                        req.value_opt);
            for (int i = 0; i < c.d_model; ++i) v1.at(i, e) = t.v[i];
            p_before += t.p_start;
            p_after += t.p_final;
        }
        std::fprintf(stderr, "plan_edit: %s targets: mean patched p %.3f -> %.3f over %d edits\n",
                     pathway_name(job.pw), p_before / n_edits, p_after / n_edits, n_edits);

        for (const int layer : *job.layers) {
            MatD k1(d_k, n_edits);
            for (int e = 0; e < n_edits; ++e) {
                const std::vector<double> k =
                    extract_key(c, work, job.pw, layer, prompts[e], kSubjectPos, kc);
                for (int i = 0; i < d_k; ++i) k1.at(i, e) = k[i];
            }
            MatD k1_top = k1;
            if (layer != top) {
                k1_top = MatD(d_k, n_edits);
                for (int e = 0; e < n_edits; ++e) {
                    const std::vector<double> k =
                        extract_key(c, work, job.pw, top, prompts[e], kSubjectPos, kc);
                    for (int i = 0; i < d_k; ++i) k1_top.at(i, e) = k[i];
                }
            }

            const MatD w_l = to_double(pathway_weight(work, job.pw, layer));
            const MatD w_top = to_double(pathway_weight(work, job.pw, top));
            const MatD r = spread_residual(v1, w_top, k1_top, *job.layers, layer);
            const MatD v1_l = add(matmul(w_l, k1), r);

            const uint64_t salt =
                static_cast<uint64_t>(job.pw == Pathway::Mlp ? 0 : 1) * 1024 +
                static_cast<uint64_t>(layer);
            const CovEstimate cov = estimate_covariance(c, work, world, job.pw, layer,
                                                        req.cov_samples,
                                                        derive_seed(req.cov_seed, salt),
                                                        req.cov_shrink);

            DeltaSolution sol = solve_delta(w_l, k1, v1_l, cov.c0);
            PlannedDelta pd;
            pd.pathway = job.pw;
            pd.layer = layer;
            pd.scale = job.scale;
            pd.k1 = std::move(k1);
            pd.c0 = cov.c0;
            pd.residual = std::move(sol.residual);
            pd.delta = std::move(sol.delta);
            pd.rel_residual = sol.rel_residual;
            apply_delta_inplace(work, pd);
            plan.deltas.push_back(std::move(pd));
        }
    }
    return plan;
}

ModelParams apply_edit(const ModelParams& p, const EditPlan& plan) {
    if (params_fingerprint(p) != plan.params_fp)
        throw std::runtime_error("apply_edit: plan was built for different weights");
    ModelParams out = p;
    for (const PlannedDelta& d : plan.deltas) apply_delta_inplace(out, d);
    std::fputs(plan_summary(plan).c_str(), stderr);
    return out;
}

std::string plan_summary(const EditPlan& plan) {
    char line[192];
    std::snprintf(line, sizeof line, "edit plan: mode=%s alpha=%g edits=%d weights=%s\n",
                  edit_mode_name(plan.mode), plan.alpha, plan.n_edits,
                  hex_u64(plan.params_fp).c_str());
    std::string out = line;
    for (const PlannedDelta& d : plan.deltas) {
        const double norm = frobenius_norm(d.delta);
        std::snprintf(line, sizeof line,
                      "  %s layer %d: |delta|_F %.6g, scale %g, applied %.6g, "
                      "normal-eq residual %.3g\n",
                      pathway_name(d.pathway), d.layer, norm, d.scale,
                      std::fabs(d.scale) * norm, d.rel_residual);
        out += line;
    }
    if (plan.deltas.empty()) out += "  (no deltas)\n";
    return out;
}

void save_plan(const std::string& path, const EditPlan& plan) {
    Archive ar;
    ar.kind = "edit_plan";
    nlohmann::json deltas = nlohmann::json::array();
    for (const PlannedDelta& d : plan.deltas)
        deltas.push_back({{"pathway", pathway_name(d.pathway)},
                          {"layer", d.layer},
                          {"scale", d.scale},
                          {"rel_residual", d.rel_residual}});
    ar.meta = {{"format", 1},
               {"mode", edit_mode_name(plan.mode)},
               {"alpha", plan.alpha},
               {"n_edits", plan.n_edits},
               {"params_fingerprint", hex_u64(plan.params_fp)},
               {"deltas", deltas}};
    for (size_t i = 0; i < plan.deltas.size(); ++i) {
        const PlannedDelta& d = plan.deltas[i];
        const std::string sfx = "." + std::to_string(i);
        ar.add_f64("delta" + sfx, {d.delta.rows, d.delta.cols}, d.delta.data.data());
        ar.add_f64("residual" + sfx, {d.residual.rows, d.residual.cols}, d.residual.data.data());
        ar.add_f64("k1" + sfx, {d.k1.rows, d.k1.cols}, d.k1.data.data());
        ar.add_f64("c0" + sfx, {d.c0.rows, d.c0.cols}, d.c0.data.data());
    }
    write_archive(path, ar);
}

namespace {

MatD tensor_as_matd(const ArchiveTensor& t, const std::string& path) {
    if (t.shape.size() != 2)
        throw std::runtime_error("edit plan '" + path + "': tensor " + t.name + " is not 2-d");
    MatD m(static_cast<int>(t.shape[0]), static_cast<int>(t.shape[1]));
    const double* src = t.as_f64();
    std::copy(src, src + t.element_count(), m.data.begin());
    return m;
}

}  // namespace

EditPlan load_plan(const std::string& path) {
    const Archive ar = read_archive(path, "edit_plan");
    if (ar.meta.at("format").get<int>() != 1)
        throw std::runtime_error("edit plan '" + path + "': unsupported format");

    EditPlan plan;
    plan.mode = edit_mode_from_name(ar.meta.at("mode").get<std::string>());
    plan.alpha = ar.meta.at("alpha").get<double>();
    plan.n_edits = ar.meta.at("n_edits").get<int>();
    plan.params_fp = std::stoull(ar.meta.at("params_fingerprint").get<std::string>(), nullptr, 16);
    if (plan.n_edits < 1) throw std::runtime_error("edit plan '" + path + "': bad edit count");

    const nlohmann::json& deltas = ar.meta.at("deltas");
    for (size_t i = 0; i < deltas.size(); ++i) {
        const nlohmann::json& j = deltas[i];
        const std::string sfx = "." + std::to_string(i);
        PlannedDelta d;
        d.pathway = pathway_from_name(j.at("pathway").get<std::string>());
        d.layer = j.at("layer").get<int>();
        d.scale = j.at("scale").get<double>();
        d.rel_residual = j.at("rel_residual").get<double>();
        d.delta = tensor_as_matd(ar.require("delta" + sfx), path);
        d.residual = tensor_as_matd(ar.require("residual" + sfx), path);
        d.k1 = tensor_as_matd(ar.require("k1" + sfx), path);
        d.c0 = tensor_as_matd(ar.require("c0" + sfx), path);
        if (d.k1.cols != plan.n_edits || d.residual.cols != plan.n_edits ||
            d.residual.rows != d.delta.rows || d.delta.cols != d.k1.rows ||
            d.c0.rows != d.k1.rows || d.c0.cols != d.k1.rows)
            throw std::runtime_error("edit plan '" + path + "': inconsistent tensor shapes");
        plan.deltas.push_back(std::move(d));
    }
    return plan;
}

}  // namespace editlab
