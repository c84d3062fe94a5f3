#include "editlab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "editlab/train.hpp"

namespace editlab {

namespace {

std::vector<int> batch_predict(const ModelConfig& c, const ModelParams& p,
                               const std::vector<std::vector<int>>& prompts) {
    return predict_argmax(c, p, prompts);
}

}  // namespace

double edit_success(const ModelConfig& c, const ModelParams& post,
                    const std::vector<std::vector<int>>& prompts,
                    const std::vector<int>& targets) {
    if (prompts.empty()) throw std::invalid_argument("edit_success: empty prompt set");
    if (prompts.size() != targets.size())
        throw std::invalid_argument("edit_success: prompt/target count mismatch");
    const std::vector<int> pred = batch_predict(c, post, prompts);
    int hit = 0;
    for (size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == targets[i]) ++hit;
    return 100.0 * hit / static_cast<double>(prompts.size());
}

double locality(const ModelConfig& c, const ModelParams& pre, const ModelParams& post,
                const std::vector<std::vector<int>>& prompts) {
    if (prompts.empty()) throw std::invalid_argument("locality: empty prompt set");
    const std::vector<int> before = batch_predict(c, pre, prompts);
    const std::vector<int> after = batch_predict(c, post, prompts);
    int same = 0;
    for (size_t i = 0; i < before.size(); ++i)
        if (before[i] == after[i]) ++same;
    return 100.0 * same / static_cast<double>(prompts.size());
}

std::vector<std::vector<int>> greedy_generate(const ModelConfig& c, const ModelParams& p,
                                              const std::vector<std::vector<int>>& prompts,
                                              int gen_len) {
    if (gen_len < 1) throw std::invalid_argument("greedy_generate: gen_len must be >= 1");
    std::vector<std::vector<int>> out(prompts.size());
    std::vector<std::vector<int>> work = prompts;
    for (int step = 0; step < gen_len; ++step) {
        // Stop extending prompts that hit the context limit.
        std::vector<size_t> live;
        std::vector<std::vector<int>> batch;
        for (size_t i = 0; i < work.size(); ++i) {
            if (static_cast<int>(work[i].size()) < c.max_seq_len) {
                live.push_back(i);
                batch.push_back(work[i]);
            }
        }
        if (batch.empty()) break;
        // predict_argmax needs one shared length; group by length.
        std::map<size_t, std::vector<size_t>> by_len;
        for (size_t bi = 0; bi < batch.size(); ++bi) by_len[batch[bi].size()].push_back(bi);
        for (const auto& [len, members] : by_len) {
            std::vector<std::vector<int>> group;
            group.reserve(members.size());
            for (size_t bi : members) group.push_back(batch[bi]);
            const std::vector<int> next = predict_argmax(c, p, group);
            for (size_t m = 0; m < members.size(); ++m) {
                const size_t i = live[members[m]];
                work[i].push_back(next[m]);
                out[i].push_back(next[m]);
            }
        }
    }
    return out;
}

double ngram_entropy_bits(const std::vector<std::vector<int>>& corpus, int n) {
    if (n < 1) throw std::invalid_argument("ngram_entropy_bits: n must be >= 1");
    std::map<std::vector<int>, long long> counts;
    long long total = 0;
    for (const auto& seq : corpus) {
        if (static_cast<int>(seq.size()) < n) continue;
        for (size_t i = 0; i + n <= seq.size(); ++i) {
            std::vector<int> gram(seq.begin() + i, seq.begin() + i + n);
            ++counts[gram];
            ++total;
        }
    }
    if (total == 0) return 0.0;
    double h = 0.0;
    for (const auto& [gram, cnt] : counts) {
        const double g = static_cast<double>(cnt) / static_cast<double>(total);
        h -= g * std::log2(g);
    }
    return h;
}

double fluency(const ModelConfig& c, const ModelParams& p,
               const std::vector<std::vector<int>>& prompts, int gen_len) {
    if (prompts.empty()) throw std::invalid_argument("fluency: empty prompt set");
    if (gen_len < 3) throw std::invalid_argument("fluency: gen_len must be >= 3");
    const std::vector<std::vector<int>> gen = greedy_generate(c, p, prompts, gen_len);
    return (2.0 / 3.0) * ngram_entropy_bits(gen, 2) + (4.0 / 3.0) * ngram_entropy_bits(gen, 3);
}

MetricsReport evaluate_edit(const ModelConfig& c, const ModelParams& pre, const ModelParams& post,
                            const FactWorld& world, const std::vector<CounterfactEdit>& edits,
                            int gen_len) {
    if (edits.empty()) throw std::invalid_argument("evaluate_edit: no edits");
    MetricsReport r;
    r.t = static_cast<int>(edits.size());
    r.pre_fingerprint = params_fingerprint(pre);
    r.post_fingerprint = params_fingerprint(post);

    std::vector<std::vector<int>> eprompts, pprompts;
    std::vector<int> etargets;
    for (const CounterfactEdit& e : edits) {
        const FactTriple& f = world.facts[e.fact_index];
        eprompts.push_back(fact_prompt(f));
        pprompts.push_back(paraphrase_prompt(f));
        etargets.push_back(e.new_object);
    }
    std::vector<std::vector<int>> lprompts;
    for (int fi : world.locality_split) {
        const FactTriple& f = world.facts[fi];
        lprompts.push_back(fact_prompt(f));
        lprompts.push_back(paraphrase_prompt(f));
    }

    auto fill = [&](const std::vector<std::vector<int>>& prompts, const std::vector<int>& targets,
                    std::vector<ProbeRecord>& recs) {
        const std::vector<int> before = batch_predict(c, pre, prompts);
        const std::vector<int> after = batch_predict(c, post, prompts);
        for (size_t i = 0; i < prompts.size(); ++i) {
            ProbeRecord pr;
            pr.prompt = prompts[i];
            pr.target = targets.empty() ? before[i] : targets[i];
            pr.pre_prediction = before[i];
            pr.post_prediction = after[i];
            recs.push_back(std::move(pr));
        }
    };
    fill(eprompts, etargets, r.edit_records);
    fill(pprompts, etargets, r.paraphrase_records);
    fill(lprompts, {}, r.locality_records);

    r.edit_success = edit_success(c, post, eprompts, etargets);
    r.portability = pprompts.empty() ? -1.0 : edit_success(c, post, pprompts, etargets);
    r.locality = lprompts.empty() ? -1.0 : locality(c, pre, post, lprompts);
    r.fluency = fluency(c, post, eprompts, gen_len);
    return r;
}

std::vector<MetricsReport> run_experiment(const ModelConfig& c, const ModelParams& params,
                                          const FactWorld& world,
                                          const std::vector<ExperimentCell>& grid,
                                          const ExperimentConfigEval& cfg) {
    std::vector<MetricsReport> out;
    for (const ExperimentCell& cell : grid) {
        MetricsReport r;
        r.mode = cell.mode;
        r.alpha = cell.alpha;
        r.t = cell.t;
        r.mlp_layers = cfg.mlp_layers;
        r.attn_layers = cfg.attn_layers;
        r.cov_samples = cfg.cov_samples;
        r.cov_seed = cfg.cov_seed;
        r.cov_shrink = cfg.cov_shrink;
        r.counterfact_seed = cfg.counterfact_seed;
        try {
            const std::vector<CounterfactEdit> edits =
                sample_counterfacts(world, cell.t, cfg.counterfact_seed);
            EditRequest req;
            req.edits = edits;
            req.mode = cell.mode;
            req.alpha = cell.alpha;
            req.mlp_layers = cfg.mlp_layers;
            req.attn_layers = cfg.attn_layers;
            req.key_context = cfg.key_context;
            req.value_opt = cfg.value_opt;
            req.cov_samples = cfg.cov_samples;
            req.cov_seed = cfg.cov_seed;
            req.cov_shrink = cfg.cov_shrink;

            // Fresh copy of the checkpoint per cell.
            ModelParams pre = params;
            const EditPlan plan = plan_edit(c, pre, world, req);
            const ModelParams post = apply_edit(pre, plan);

            MetricsReport scored = evaluate_edit(c, pre, post, world, edits, cfg.gen_len);
            scored.mode = r.mode;
            scored.alpha = plan.alpha;
            scored.mlp_layers = r.mlp_layers;
            scored.attn_layers = r.attn_layers;
            scored.cov_samples = r.cov_samples;
            scored.cov_seed = r.cov_seed;
            scored.cov_shrink = r.cov_shrink;
            scored.counterfact_seed = r.counterfact_seed;
            r = std::move(scored);
        } catch (const std::exception& e) {
            r.failed = true;
            r.error = e.what();
            std::fprintf(stderr, "run_experiment: cell mode=%s alpha=%.3f t=%d failed: %s\n",
                         edit_mode_name(cell.mode), cell.alpha, cell.t, e.what());
        }
        out.push_back(std::move(r));
    }
    return out;
}

namespace {

nlohmann::json records_to_json(const std::vector<ProbeRecord>& recs) {
    nlohmann::json arr = nlohmann::json::array();
    for (const ProbeRecord& r : recs) {
        arr.push_back({{"prompt", r.prompt},
                       {"target", r.target},
                       {"pre", r.pre_prediction},
                       {"post", r.post_prediction}});
    }
    return arr;
}

std::vector<ProbeRecord> records_from_json(const nlohmann::json& arr) {
    std::vector<ProbeRecord> out;
    for (const auto& j : arr) {
        ProbeRecord r;
        r.prompt = j.at("prompt").get<std::vector<int>>();
        r.target = j.at("target").get<int>();
        r.pre_prediction = j.at("pre").get<int>();
        r.post_prediction = j.at("post").get<int>();
        out.push_back(std::move(r));
    }
    return out;
}

char hex_digit(uint64_t v) { return "0123456789abcdef"[v & 0xf]; }

std::string hex64(uint64_t v) {
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[i] = hex_digit(v);
    return s;
}

uint64_t parse_hex64(const std::string& s) { return std::stoull(s, nullptr, 16); }

}  // namespace

void save_metrics_report(const std::string& path, const MetricsReport& r) {
    nlohmann::json j;
    j["format"] = 1;
    j["edit_success"] = r.edit_success;
    j["portability"] = r.portability;
    j["locality"] = r.locality;
    j["fluency"] = r.fluency;
    j["t"] = r.t;
    j["mode"] = edit_mode_name(r.mode);
    j["alpha"] = r.alpha;
    j["mlp_layers"] = r.mlp_layers;
    j["attn_layers"] = r.attn_layers;
    j["cov_samples"] = r.cov_samples;
    j["cov_seed"] = r.cov_seed;
    j["cov_shrink"] = r.cov_shrink;
    j["counterfact_seed"] = r.counterfact_seed;
    j["pre_fingerprint"] = hex64(r.pre_fingerprint);
    j["post_fingerprint"] = hex64(r.post_fingerprint);
    j["failed"] = r.failed;
    j["error"] = r.error;
    j["edit_records"] = records_to_json(r.edit_records);
    j["paraphrase_records"] = records_to_json(r.paraphrase_records);
    j["locality_records"] = records_to_json(r.locality_records);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << j.dump(2) << "\n";
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

MetricsReport load_metrics_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open report file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("report file '" + path + "': " + e.what());
    }
    try {
        if (j.at("format").get<int>() != 1)
            throw std::runtime_error("unsupported report format");
        MetricsReport r;
        r.edit_success = j.at("edit_success").get<double>();
        r.portability = j.at("portability").get<double>();
        r.locality = j.at("locality").get<double>();
        r.fluency = j.at("fluency").get<double>();
        r.t = j.at("t").get<int>();
        r.mode = edit_mode_from_name(j.at("mode").get<std::string>());
        r.alpha = j.at("alpha").get<double>();
        r.mlp_layers = j.at("mlp_layers").get<std::vector<int>>();
        r.attn_layers = j.at("attn_layers").get<std::vector<int>>();
        r.cov_samples = j.at("cov_samples").get<int>();
        r.cov_seed = j.at("cov_seed").get<uint64_t>();
        r.cov_shrink = j.at("cov_shrink").get<double>();
        r.counterfact_seed = j.at("counterfact_seed").get<uint64_t>();
        r.pre_fingerprint = parse_hex64(j.at("pre_fingerprint").get<std::string>());
        r.post_fingerprint = parse_hex64(j.at("post_fingerprint").get<std::string>());
        r.failed = j.at("failed").get<bool>();
        r.error = j.at("error").get<std::string>();
        r.edit_records = records_from_json(j.at("edit_records"));
        r.paraphrase_records = records_from_json(j.at("paraphrase_records"));
        r.locality_records = records_from_json(j.at("locality_records"));
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("report file '" + path + "': " + e.what());
    }
}

void write_reports_csv(const std::string& path, const std::vector<MetricsReport>& reports) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << "mode,alpha,t,edit_success,portability,locality,fluency,failed\n";
    char line[256];
    for (const MetricsReport& r : reports) {
        std::snprintf(line, sizeof(line), "%s,%.6g,%d,%.6g,%.6g,%.6g,%.6g,%d\n",
                      edit_mode_name(r.mode), r.alpha, r.t, r.edit_success, r.portability,
                      r.locality, r.fluency, r.failed ? 1 : 0);
        out << line;
    }
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace editlab
