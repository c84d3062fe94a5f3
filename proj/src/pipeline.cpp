#include "editlab/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include "editlab/rng.hpp"
#include "editlab/train.hpp"

namespace editlab {

namespace {

std::string join(const std::string& dir, const std::string& name) {
    return dir + "/" + name;
}

nlohmann::json provenance(const StageContext& ctx) {
    nlohmann::json j;
    j["config_hash"] = hex_u64(config_hash(ctx.cfg));
    j["version"] = EDITLAB_VERSION;
    j["overrides"] = ctx.overrides;
    return j;
}

void write_json(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << j.dump(2) << "\n";
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("'") + path + "': " + e.what());
    }
    return j;
}

// Sidecar provenance for artifacts whose own format cannot embed it.
void write_sidecar(const std::string& path, const StageContext& ctx) {
    write_json(path + ".meta.json", provenance(ctx));
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create directory '" + dir + "': " + ec.message());
}

FactWorld load_stage_world(const ExperimentConfig& cfg) {
    const std::string path = world_path(cfg);
    if (!std::filesystem::exists(path))
        throw std::runtime_error("missing world artifact '" + path + "'; run the world stage first");
    return load_world(path);
}

Checkpoint load_stage_checkpoint(const ExperimentConfig& cfg) {
    const std::string path = checkpoint_path(cfg);
    if (!std::filesystem::exists(path))
        throw std::runtime_error("missing checkpoint '" + path + "'; run the train stage first");
    return load_checkpoint(path);
}

KeyContext make_key_context(const EditStageConfig& e) {
    KeyContext kc;
    kc.n_prefixes = e.key_prefixes;
    kc.seed = e.key_seed;
    return kc;  // candidate tokens default to the world's non-BOS vocab
}

}  // namespace

std::string world_path(const ExperimentConfig& cfg) { return join(cfg.out_dir, "world.json"); }
std::string checkpoint_path(const ExperimentConfig& cfg) {
    return join(cfg.out_dir, "checkpoint.bin");
}
std::string train_log_path(const ExperimentConfig& cfg) {
    return join(cfg.out_dir, "train_log.csv");
}
std::string trace_dir(const ExperimentConfig& cfg) { return join(cfg.out_dir, "trace"); }
std::string trace_summary_path(const ExperimentConfig& cfg) {
    return join(trace_dir(cfg), "summary.json");
}
std::string edited_checkpoint_path(const ExperimentConfig& cfg) {
    return join(cfg.out_dir, "edited_checkpoint.bin");
}
std::string edit_plan_path(const ExperimentConfig& cfg) {
    return join(cfg.out_dir, "edit_plan.bin");
}
std::string edit_summary_path(const ExperimentConfig& cfg) {
    return join(cfg.out_dir, "edit_summary.json");
}
std::string reports_dir(const ExperimentConfig& cfg) { return join(cfg.out_dir, "reports"); }
std::string eval_report_path(const ExperimentConfig& cfg) {
    return join(reports_dir(cfg), "eval.json");
}

void stage_world(const StageContext& ctx) {
    validate_config(ctx.cfg);
    ensure_dir(ctx.cfg.out_dir);
    const FactWorld w = build_world(ctx.cfg.world);
    nlohmann::json j = world_to_json(w);
    j["provenance"] = provenance(ctx);
    write_json(world_path(ctx.cfg), j);
    std::printf("world: %zu facts (%zu train / %zu edit / %zu locality), vocab %d, seed %llu\n",
                w.facts.size(), w.train_split.size(), w.edit_split.size(),
                w.locality_split.size(), w.spec.vocab_size,
                static_cast<unsigned long long>(w.spec.seed));
}

TrainOutcome stage_train(const StageContext& ctx) {
    validate_config(ctx.cfg);
    const FactWorld w = load_stage_world(ctx.cfg);
    if (w.spec.vocab_size != ctx.cfg.model.vocab_size)
        throw std::runtime_error("world vocab does not match the model config");
    ModelParams p0 = init_params(ctx.cfg.model);
    const TrainResult tr = train(ctx.cfg.model, std::move(p0), w, ctx.cfg.train);
    save_checkpoint(checkpoint_path(ctx.cfg), ctx.cfg.model, tr.params);
    write_sidecar(checkpoint_path(ctx.cfg), ctx);
    write_train_log_csv(train_log_path(ctx.cfg), tr.log);
    write_sidecar(train_log_path(ctx.cfg), ctx);
    std::printf("train: %d steps, final loss %.4f, recall %.3f (primary) %.3f (all items)\n",
                ctx.cfg.train.steps, tr.final_loss, tr.final_recall, tr.supervised_recall);
    return {tr.final_recall, tr.final_loss};
}

TraceSummary stage_trace(const StageContext& ctx) {
    validate_config(ctx.cfg);
    const FactWorld w = load_stage_world(ctx.cfg);
    const Checkpoint ck = load_stage_checkpoint(ctx.cfg);
    const TraceStageConfig& tc = ctx.cfg.trace;
    ensure_dir(trace_dir(ctx.cfg));

    const int n_probes = std::min<int>(tc.n_probes, static_cast<int>(w.train_split.size()));
    std::vector<std::vector<int>> prompts;
    std::vector<int> answers;
    for (int i = 0; i < n_probes; ++i) {
        const FactTriple& f = w.facts[w.train_split[i]];
        prompts.push_back(fact_prompt(f));
        answers.push_back(f.object);
    }

    double nu = tc.noise;
    if (nu <= 0.0) {
        // Scale from the embeddings of every token the probe corpus uses.
        std::set<int> toks;
        for (const auto& pr : prompts) toks.insert(pr.begin(), pr.end());
        const std::vector<int> tok_list(toks.begin(), toks.end());
        nu = noise_scale(gather_embedding_rows(ck.config, ck.params, tok_list));
    }

    TraceSummary sum;
    sum.nu = nu;
    std::vector<TraceReport> reports;
    for (int i = 0; i < n_probes; ++i) {
        for (int draw = 0; draw < tc.noise_samples; ++draw) {
            TraceQuery q;
            q.prompt = prompts[i];
            q.subject_positions = {kSubjectPos};
            q.answer = answers[i];
            q.noise = nu;
            q.seed = derive_seed(tc.seed, static_cast<uint64_t>(i) * 4096 + draw);
            TraceReport r = trace(ck.config, ck.params, q);
            if (draw == 0) {
                char name[64];
                std::snprintf(name, sizeof(name), "probe_%02d.csv", i);
                export_heatmap(r, join(trace_dir(ctx.cfg), name));
            }
            sum.p_clean_mean += r.p_clean;
            sum.p_corrupt_mean += r.p_corrupt;
            reports.push_back(std::move(r));
        }
    }
    sum.p_clean_mean /= static_cast<double>(reports.size());
    sum.p_corrupt_mean /= static_cast<double>(reports.size());
    if (sum.p_clean_mean < 0.5)
        std::fprintf(stderr,
                     "stage_trace: mean clean probability %.3f is near chance; the model may "
                     "not have memorized the probes and localization will be unreliable\n",
                     sum.p_clean_mean);

    // Per-layer last-subject-token LD means across probes and noise draws.
    const int n_layers = ck.config.n_layers;
    sum.mlp_ld.assign(n_layers, 0.0);
    sum.attn_ld.assign(n_layers, 0.0);
    sum.hidden_ld.assign(n_layers, 0.0);
    for (const TraceReport& r : reports) {
        const int pos = r.last_subject_pos();
        for (int l = 0; l < n_layers; ++l) {
            sum.mlp_ld[l] += r.grid(Site::MlpOut).ld.at(l, pos);
            sum.attn_ld[l] += r.grid(Site::AttnOut).ld.at(l, pos);
            sum.hidden_ld[l] += r.grid(Site::Hidden).ld.at(l, pos);
        }
    }
    for (int l = 0; l < n_layers; ++l) {
        sum.mlp_ld[l] /= static_cast<double>(reports.size());
        sum.attn_ld[l] /= static_cast<double>(reports.size());
        sum.hidden_ld[l] /= static_cast<double>(reports.size());
    }

    // Effective windows: measured selection unless the config pins them.
    sum.windows = select_windows(reports, tc.mlp_window, tc.attn_window);
    if (!tc.s_mlp.empty()) sum.windows.s_mlp = tc.s_mlp;
    if (!tc.s_attn.empty()) sum.windows.s_attn = tc.s_attn;
    sum.alpha_auto = balance_factor(reports, sum.windows.s_mlp, sum.windows.s_attn);

    double mx = 0.0, mean = 0.0;
    for (int l = 0; l < n_layers; ++l) {
        mx = std::max(mx, sum.mlp_ld[l]);
        mean += sum.mlp_ld[l] / n_layers;
    }
    sum.mlp_localization_ratio = mean > 0.0 ? mx / mean : 0.0;

    nlohmann::json j;
    j["format"] = 1;
    j["provenance"] = provenance(ctx);
    j["nu"] = sum.nu;
    j["n_probes"] = n_probes;
    j["noise_samples"] = tc.noise_samples;
    j["p_clean_mean"] = sum.p_clean_mean;
    j["p_corrupt_mean"] = sum.p_corrupt_mean;
    j["s_mlp"] = sum.windows.s_mlp;
    j["s_attn"] = sum.windows.s_attn;
    j["alpha_auto"] = sum.alpha_auto;
    j["mlp_localization_ratio"] = sum.mlp_localization_ratio;
    j["mlp_ld"] = sum.mlp_ld;
    j["attn_ld"] = sum.attn_ld;
    j["hidden_ld"] = sum.hidden_ld;
    write_json(trace_summary_path(ctx.cfg), j);

    std::printf("trace: nu %.4f, p_clean %.3f -> p_corrupt %.3f, s_mlp [%d..%d], "
                "s_attn [%d..%d], alpha_auto %.3f, mlp localization %.2fx\n",
                sum.nu, sum.p_clean_mean, sum.p_corrupt_mean, sum.windows.s_mlp.front(),
                sum.windows.s_mlp.back(), sum.windows.s_attn.front(), sum.windows.s_attn.back(),
                sum.alpha_auto, sum.mlp_localization_ratio);
    return sum;
}

TraceSummary load_trace_summary(const std::string& path) {
    const nlohmann::json j = read_json(path);
    try {
        if (j.at("format").get<int>() != 1)
            throw std::runtime_error("unsupported trace summary format");
        TraceSummary s;
        s.nu = j.at("nu").get<double>();
        s.p_clean_mean = j.at("p_clean_mean").get<double>();
        s.p_corrupt_mean = j.at("p_corrupt_mean").get<double>();
        s.windows.s_mlp = j.at("s_mlp").get<std::vector<int>>();
        s.windows.s_attn = j.at("s_attn").get<std::vector<int>>();
        s.alpha_auto = j.at("alpha_auto").get<double>();
        s.mlp_localization_ratio = j.at("mlp_localization_ratio").get<double>();
        s.mlp_ld = j.at("mlp_ld").get<std::vector<double>>();
        s.attn_ld = j.at("attn_ld").get<std::vector<double>>();
        s.hidden_ld = j.at("hidden_ld").get<std::vector<double>>();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("trace summary '" + path + "': " + e.what());
    }
}

namespace {

// Windows and balance factor for the edit, honoring config pins and flag
// overrides; falls back to the trace summary for anything unspecified.
struct ResolvedEdit {
    double alpha = 0.0;
    std::string alpha_source;
    LayerWindows windows;
};

ResolvedEdit resolve_edit(const StageContext& ctx) {
    const TraceStageConfig& tc = ctx.cfg.trace;
    ResolvedEdit r;
    const bool need_summary = ctx.cfg.edit.alpha < 0.0 || tc.s_mlp.empty() || tc.s_attn.empty();
    TraceSummary sum;
    if (need_summary) {
        const std::string path = trace_summary_path(ctx.cfg);
        if (!std::filesystem::exists(path))
            throw std::runtime_error("missing trace summary '" + path +
                                     "'; run the trace stage first or pin alpha and the layer "
                                     "windows in the config");
        sum = load_trace_summary(path);
    }
    r.windows.s_mlp = tc.s_mlp.empty() ? sum.windows.s_mlp : tc.s_mlp;
    r.windows.s_attn = tc.s_attn.empty() ? sum.windows.s_attn : tc.s_attn;
    if (ctx.cfg.edit.alpha >= 0.0) {
        r.alpha = ctx.cfg.edit.alpha;
        r.alpha_source = ctx.overrides.contains("edit.alpha") ? "flag" : "config";
    } else {
        r.alpha = sum.alpha_auto;
        r.alpha_source = "auto";
    }
    return r;
}

}  // namespace

EditOutcome stage_edit(const StageContext& ctx) {
    validate_config(ctx.cfg);
    const FactWorld w = load_stage_world(ctx.cfg);
    const Checkpoint ck = load_stage_checkpoint(ctx.cfg);
    const ResolvedEdit res = resolve_edit(ctx);
    const EditStageConfig& ec = ctx.cfg.edit;

    EditRequest req;
    req.edits = sample_counterfacts(w, ec.t, ec.counterfact_seed);
    req.mode = edit_mode_from_name(ec.mode);
    req.alpha = res.alpha;
    req.mlp_layers = res.windows.s_mlp;
    req.attn_layers = res.windows.s_attn;
    req.key_context = make_key_context(ec);
    req.value_opt = ec.value_opt;
    req.cov_samples = ec.cov_samples;
    req.cov_seed = ec.cov_seed;
    req.cov_shrink = ec.cov_shrink;

    const EditPlan plan = plan_edit(ck.config, ck.params, w, req);
    const ModelParams post = apply_edit(ck.params, plan);
    save_plan(edit_plan_path(ctx.cfg), plan);
    write_sidecar(edit_plan_path(ctx.cfg), ctx);
    save_checkpoint(edited_checkpoint_path(ctx.cfg), ck.config, post);
    write_sidecar(edited_checkpoint_path(ctx.cfg), ctx);

    EditOutcome out;
    out.alpha = plan.alpha;
    out.alpha_source = res.alpha_source;
    out.windows = res.windows;
    out.n_deltas = static_cast<int>(plan.deltas.size());
    for (const PlannedDelta& d : plan.deltas)
        out.max_rel_residual = std::max(out.max_rel_residual, d.rel_residual);

    nlohmann::json j;
    j["format"] = 1;
    j["provenance"] = provenance(ctx);
    j["mode"] = ec.mode;
    j["alpha"] = plan.alpha;
    j["alpha_source"] = res.alpha_source;
    j["t"] = ec.t;
    j["counterfact_seed"] = ec.counterfact_seed;
    j["s_mlp"] = res.windows.s_mlp;
    j["s_attn"] = res.windows.s_attn;
    j["n_deltas"] = out.n_deltas;
    j["max_rel_residual"] = out.max_rel_residual;
    j["pre_fingerprint"] = hex_u64(plan.params_fp);
    j["post_fingerprint"] = hex_u64(params_fingerprint(post));
    nlohmann::json deltas = nlohmann::json::array();
    for (const PlannedDelta& d : plan.deltas) {
        deltas.push_back({{"pathway", pathway_name(d.pathway)},
                          {"layer", d.layer},
                          {"scale", d.scale},
                          {"frobenius", frobenius_norm(d.delta)},
                          {"rel_residual", d.rel_residual}});
    }
    j["deltas"] = deltas;
    write_json(edit_summary_path(ctx.cfg), j);

    std::printf("edit: mode %s, alpha %.3f (%s), t %d, %d deltas, max residual %.3g\n",
                ec.mode.c_str(), plan.alpha, res.alpha_source.c_str(), ec.t, out.n_deltas,
                out.max_rel_residual);
    return out;
}

MetricsReport stage_eval(const StageContext& ctx) {
    validate_config(ctx.cfg);
    const FactWorld w = load_stage_world(ctx.cfg);
    const Checkpoint pre = load_stage_checkpoint(ctx.cfg);
    const std::string edited_path = edited_checkpoint_path(ctx.cfg);
    if (!std::filesystem::exists(edited_path))
        throw std::runtime_error("missing edited checkpoint '" + edited_path +
                                 "'; run the edit stage first");
    const Checkpoint post = load_checkpoint(edited_path);
    const nlohmann::json es = read_json(edit_summary_path(ctx.cfg));

    // The same counterfact draw the edit stage used.
    const int t = es.at("t").get<int>();
    const uint64_t cf_seed = es.at("counterfact_seed").get<uint64_t>();
    const std::vector<CounterfactEdit> edits = sample_counterfacts(w, t, cf_seed);
    if (es.at("pre_fingerprint").get<std::string>() != hex_u64(params_fingerprint(pre.params)))
        throw std::runtime_error("checkpoint changed since the edit plan was built");

    MetricsReport r = evaluate_edit(pre.config, pre.params, post.params, w, edits,
                                    ctx.cfg.eval.gen_len);
    r.t = t;
    r.mode = edit_mode_from_name(es.at("mode").get<std::string>());
    r.alpha = es.at("alpha").get<double>();
    r.mlp_layers = es.at("s_mlp").get<std::vector<int>>();
    r.attn_layers = es.at("s_attn").get<std::vector<int>>();
    r.cov_samples = ctx.cfg.edit.cov_samples;
    r.cov_seed = ctx.cfg.edit.cov_seed;
    r.cov_shrink = ctx.cfg.edit.cov_shrink;
    r.counterfact_seed = cf_seed;

    ensure_dir(reports_dir(ctx.cfg));
    const std::string path = eval_report_path(ctx.cfg);
    save_metrics_report(path, r);
    nlohmann::json j = read_json(path);
    j["provenance"] = provenance(ctx);
    write_json(path, j);

    std::printf("eval: success %.1f, portability %.1f, locality %.1f, fluency %.3f bits\n",
                r.edit_success, r.portability, r.locality, r.fluency);
    return r;
}

std::vector<MetricsReport> stage_sweep(const StageContext& ctx,
                                       const std::vector<std::string>& modes,
                                       const std::vector<double>& alphas,
                                       const std::vector<int>& ts) {
    validate_config(ctx.cfg);
    if (modes.empty() || ts.empty())
        throw std::invalid_argument("stage_sweep: empty mode or t list");
    const FactWorld w = load_stage_world(ctx.cfg);
    const Checkpoint ck = load_stage_checkpoint(ctx.cfg);
    const ResolvedEdit res = resolve_edit(ctx);

    std::vector<ExperimentCell> grid;
    for (const std::string& mode_name : modes) {
        const EditMode mode = edit_mode_from_name(mode_name);
        // Only the dual mode consumes the balance factor; other modes get a
        // single cell per batch size.
        std::vector<double> cell_alphas;
        if (mode == EditMode::Dual) {
            if (alphas.empty()) throw std::invalid_argument("stage_sweep: dual mode needs alphas");
            for (double a : alphas) cell_alphas.push_back(a < 0.0 ? res.alpha : a);
        } else {
            cell_alphas.push_back(0.0);
        }
        for (int t : ts)
            for (double a : cell_alphas) grid.push_back({mode, a, t});
    }

    ExperimentConfigEval cfg;
    cfg.mlp_layers = res.windows.s_mlp;
    cfg.attn_layers = res.windows.s_attn;
    cfg.key_context = make_key_context(ctx.cfg.edit);
    cfg.value_opt = ctx.cfg.edit.value_opt;
    cfg.cov_samples = ctx.cfg.edit.cov_samples;
    cfg.cov_seed = ctx.cfg.edit.cov_seed;
    cfg.cov_shrink = ctx.cfg.edit.cov_shrink;
    cfg.counterfact_seed = ctx.cfg.edit.counterfact_seed;
    cfg.gen_len = ctx.cfg.eval.gen_len;

    const std::vector<MetricsReport> reports = run_experiment(ck.config, ck.params, w, grid, cfg);

    ensure_dir(reports_dir(ctx.cfg));
    for (const MetricsReport& r : reports) {
        char name[96];
        std::snprintf(name, sizeof(name), "%s_a%03d_t%03d.json", edit_mode_name(r.mode),
                      static_cast<int>(std::lround(r.alpha * 100)), r.t);
        const std::string path = join(reports_dir(ctx.cfg), name);
        save_metrics_report(path, r);
        nlohmann::json j = read_json(path);
        j["provenance"] = provenance(ctx);
        write_json(path, j);
    }
    write_reports_csv(join(reports_dir(ctx.cfg), "summary.csv"), reports);
    write_sidecar(join(reports_dir(ctx.cfg), "summary.csv"), ctx);

    int failed = 0;
    for (const MetricsReport& r : reports) failed += r.failed ? 1 : 0;
    std::printf("sweep: %zu cells (%d failed), reports under %s\n", reports.size(), failed,
                reports_dir(ctx.cfg).c_str());
    return reports;
}

}  // namespace editlab
