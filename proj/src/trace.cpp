#include "editlab/trace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace editlab {

namespace {

const std::array<Site, kNumSites> kAllSites{Site::Hidden, Site::AttnOut, Site::MlpOut,
                                            Site::MlpKey, Site::AttnKey};

void validate_query(const ModelConfig& c, const TraceQuery& q) {
    if (q.prompt.empty()) throw std::invalid_argument("trace: empty prompt");
    if (q.subject_positions.empty())
        throw std::invalid_argument("trace: no subject positions to corrupt");
    for (int pos : q.subject_positions)
        if (pos < 0 || pos >= static_cast<int>(q.prompt.size()))
            throw std::invalid_argument("trace: subject position outside the prompt");
    if (q.answer < 0 || q.answer >= c.vocab_size)
        throw std::invalid_argument("trace: answer token outside vocab");
    if (q.contrast >= c.vocab_size)
        throw std::invalid_argument("trace: contrast token outside vocab");
    if (q.contrast >= 0 && q.contrast == q.answer)
        throw std::invalid_argument("trace: contrast must differ from the answer");
    if (!(q.noise > 0.0)) throw std::invalid_argument("trace: noise scale must be positive");
    if (q.sites == 0) throw std::invalid_argument("trace: no sites requested");
    if ((q.sites & ~kCaptureAll) != 0)
        throw std::invalid_argument("trace: unknown site bit in query");
}

}  // namespace

const TraceGrid& TraceReport::grid(Site s) const {
    if (!has(s))
        throw std::invalid_argument(std::string("trace report has no grid for site ") +
                                    site_name(s));
    return grids[static_cast<int>(s)];
}

int TraceReport::last_subject_pos() const {
    return *std::max_element(query.subject_positions.begin(), query.subject_positions.end());
}

double noise_scale(const MatD& embedding_rows) {
    const ColumnStats st = column_stats(embedding_rows);
    if (!(st.entry_std > 1e-12))
        throw std::invalid_argument("noise_scale: embedding entries are degenerate");
    return 3.0 * st.entry_std;
}

MatD gather_embedding_rows(const ModelConfig& c, const ModelParams& p,
                           const std::vector<int>& tokens) {
    if (tokens.empty()) throw std::invalid_argument("gather_embedding_rows: empty token set");
    MatD rows(static_cast<int>(tokens.size()), c.d_model);
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || tokens[i] >= c.vocab_size)
            throw std::invalid_argument("gather_embedding_rows: token outside vocab");
        for (int j = 0; j < c.d_model; ++j)
            rows.at(static_cast<int>(i), j) = p.tok_emb.at(tokens[i], j);
    }
    return rows;
}

TraceReport trace(const ModelConfig& c, const ModelParams& p, const TraceQuery& query) {
    validate_query(c, query);

    TraceReport rep;
    rep.query = query;
    rep.n_layers = c.n_layers;
    rep.seq_len = static_cast<int>(query.prompt.size());
    const int last = rep.seq_len - 1;

    const ForwardResult clean = forward(c, p, query.prompt, query.sites);

    // The query seed is the noise seed, so a caller can rebuild the exact
    // corruption with make_embedding_noise and replay any run.
    const EmbeddingNoise noise =
        make_embedding_noise(query.subject_positions, c.d_model, query.noise, query.seed);
    const ForwardResult corrupt = forward(c, p, query.prompt, kCaptureNone, nullptr, &noise);

    if (rep.query.contrast < 0) {
        // The corrupted run's preferred wrong answer.
        int best = -1;
        for (int tok = 0; tok < c.vocab_size; ++tok) {
            if (tok == query.answer) continue;
            if (best < 0 || corrupt.probs.at(last, tok) > corrupt.probs.at(last, best)) best = tok;
        }
        rep.query.contrast = best;
    }
    const int r = rep.query.answer;
    const int rp = rep.query.contrast;

    rep.p_clean = clean.probs.at(last, r);
    rep.p_corrupt = corrupt.probs.at(last, r);
    rep.ld_clean = static_cast<double>(clean.logits.at(last, r)) - clean.logits.at(last, rp);
    rep.ld_corrupt = static_cast<double>(corrupt.logits.at(last, r)) - corrupt.logits.at(last, rp);

    const double denom = rep.ld_clean - rep.ld_corrupt;
    rep.degenerate_gap = std::fabs(denom) < kLdDenomGuard;

    for (Site s : kAllSites) {
        if (!rep.has(s)) continue;
        TraceGrid& grid = rep.grids[static_cast<int>(s)];
        grid.prob = MatD(c.n_layers, rep.seq_len);
        grid.ld = MatD(c.n_layers, rep.seq_len);
        for (int l = 0; l < c.n_layers; ++l) {
            for (int pos = 0; pos < rep.seq_len; ++pos) {
                PatchSet patch;
                patch.add(l, pos, s, clean.trace.vec(s, l, pos));
                const ForwardResult patched =
                    forward(c, p, query.prompt, kCaptureNone, &patch, &noise);
                const double p_pt = patched.probs.at(last, r);
                const double ld_pt = static_cast<double>(patched.logits.at(last, r)) -
                                     patched.logits.at(last, rp);
                grid.prob.at(l, pos) = p_pt - rep.p_corrupt;
                grid.ld.at(l, pos) =
                    rep.degenerate_gap ? 0.0 : (ld_pt - rep.ld_corrupt) / denom;
                if (!std::isfinite(grid.prob.at(l, pos)) || !std::isfinite(grid.ld.at(l, pos)))
                    throw std::runtime_error("trace: non-finite effect at layer " +
                                             std::to_string(l));
            }
        }
    }
    return rep;
}

namespace {

// Mean LD effect per layer at the last subject token, over reports.
std::vector<double> per_layer_ld(const std::vector<TraceReport>& reports, Site site) {
    if (reports.empty()) throw std::invalid_argument("per-layer LD: no trace reports");
    const int n_layers = reports[0].n_layers;
    std::vector<double> mean(n_layers, 0.0);
    for (const auto& rep : reports) {
        if (rep.n_layers != n_layers)
            throw std::invalid_argument("per-layer LD: reports disagree on layer count");
        const int pos = rep.last_subject_pos();
        for (int l = 0; l < n_layers; ++l) mean[l] += rep.grid(site).ld.at(l, pos);
    }
    for (double& m : mean) m /= static_cast<double>(reports.size());
    return mean;
}

std::vector<int> best_window(const std::vector<double>& effect, int window) {
    const int n = static_cast<int>(effect.size());
    if (window < 1 || window > n)
        throw std::invalid_argument("select_windows: window size " + std::to_string(window) +
                                    " out of range for " + std::to_string(n) + " layers");
    int best_start = 0;
    double best_sum = -1e300;
    for (int start = 0; start + window <= n; ++start) {
        double sum = 0.0;
        for (int l = start; l < start + window; ++l) sum += effect[l];
        if (sum > best_sum) {  // strict: ties keep the lower start
            best_sum = sum;
            best_start = start;
        }
    }
    std::vector<int> out(window);
    for (int i = 0; i < window; ++i) out[i] = best_start + i;
    return out;
}

}  // namespace

LayerWindows select_windows(const std::vector<TraceReport>& reports, int mlp_window,
                            int attn_window) {
    LayerWindows w;
    w.s_mlp = best_window(per_layer_ld(reports, Site::MlpOut), mlp_window);
    w.s_attn = best_window(per_layer_ld(reports, Site::AttnOut), attn_window);
    return w;
}

double balance_factor(const std::vector<TraceReport>& reports, const std::vector<int>& s_mlp,
                      const std::vector<int>& s_attn) {
    if (s_mlp.empty() || s_attn.empty())
        throw std::invalid_argument("balance_factor: empty layer window");
    const std::vector<double> mlp = per_layer_ld(reports, Site::MlpOut);
    const std::vector<double> attn = per_layer_ld(reports, Site::AttnOut);

    auto window_sum = [](const std::vector<double>& eff, const std::vector<int>& win) {
        double sum = 0.0;
        for (int l : win) {
            if (l < 0 || l >= static_cast<int>(eff.size()))
                throw std::invalid_argument("balance_factor: window layer out of range");
            sum += std::max(0.0, eff[l]);
        }
        return sum;
    };
    const double mlp_sum = window_sum(mlp, s_mlp);
    const double attn_sum = window_sum(attn, s_attn);
    if (mlp_sum + attn_sum <= 0.0)
        throw std::runtime_error("balance_factor: no causal signal in either window");
    return std::clamp(attn_sum / (mlp_sum + attn_sum), 0.0, 1.0);
}

void export_heatmap(const TraceReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << "site,layer,position,prob_effect,ld_effect\n";
    char buf[96];
    for (Site s : kAllSites) {
        if (!report.has(s)) continue;
        const TraceGrid& g = report.grid(s);
        for (int l = 0; l < report.n_layers; ++l) {
            for (int pos = 0; pos < report.seq_len; ++pos) {
                std::snprintf(buf, sizeof buf, "%s,%d,%d,%.17g,%.17g\n", site_name(s), l, pos,
                              g.prob.at(l, pos), g.ld.at(l, pos));
                out << buf;
            }
        }
    }
    if (!out) throw std::runtime_error("write failed for '" + path + "'");

    nlohmann::json meta = {
        {"prompt", report.query.prompt},
        {"subject_positions", report.query.subject_positions},
        {"answer", report.query.answer},
        {"contrast", report.query.contrast},
        {"noise", report.query.noise},
        {"seed", report.query.seed},
        {"sites", nlohmann::json::array()},
        {"n_layers", report.n_layers},
        {"seq_len", report.seq_len},
        {"p_clean", report.p_clean},
        {"p_corrupt", report.p_corrupt},
        {"ld_clean", report.ld_clean},
        {"ld_corrupt", report.ld_corrupt},
        {"degenerate_gap", report.degenerate_gap}};
    for (Site s : kAllSites)
        if (report.has(s)) meta["sites"].push_back(site_name(s));
    std::ofstream mout(path + ".meta.json", std::ios::trunc);
    if (!mout)
        throw std::runtime_error("cannot open '" + path + ".meta.json' for writing");
    mout << meta.dump(2) << "\n";
}

TraceReport load_heatmap(const std::string& path) {
    std::ifstream min(path + ".meta.json");
    if (!min) throw std::runtime_error("cannot open heatmap sidecar '" + path + ".meta.json'");
    nlohmann::json meta;
    try {
        min >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("heatmap sidecar: " + std::string(e.what()));
    }

    TraceReport rep;
    rep.query.prompt = meta.at("prompt").get<std::vector<int>>();
    rep.query.subject_positions = meta.at("subject_positions").get<std::vector<int>>();
    rep.query.answer = meta.at("answer").get<int>();
    rep.query.contrast = meta.at("contrast").get<int>();
    rep.query.noise = meta.at("noise").get<double>();
    rep.query.seed = meta.at("seed").get<uint64_t>();
    rep.query.sites = 0;
    for (const auto& name : meta.at("sites"))
        rep.query.sites |= site_bit(site_from_name(name.get<std::string>()));
    rep.n_layers = meta.at("n_layers").get<int>();
    rep.seq_len = meta.at("seq_len").get<int>();
    rep.p_clean = meta.at("p_clean").get<double>();
    rep.p_corrupt = meta.at("p_corrupt").get<double>();
    rep.ld_clean = meta.at("ld_clean").get<double>();
    rep.ld_corrupt = meta.at("ld_corrupt").get<double>();
    rep.degenerate_gap = meta.at("degenerate_gap").get<bool>();

    for (Site s : kAllSites) {
        if (!rep.has(s)) continue;
        rep.grids[static_cast<int>(s)].prob = MatD(rep.n_layers, rep.seq_len);
        rep.grids[static_cast<int>(s)].ld = MatD(rep.n_layers, rep.seq_len);
    }

    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open heatmap '" + path + "'");
    std::string line;
    std::getline(in, line);
    if (line != "site,layer,position,prob_effect,ld_effect")
        throw std::runtime_error("heatmap '" + path + "': unexpected header");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string site_str, f;
        std::getline(ss, site_str, ',');
        const Site s = site_from_name(site_str);
        std::getline(ss, f, ',');
        const int l = std::stoi(f);
        std::getline(ss, f, ',');
        const int pos = std::stoi(f);
        TraceGrid& g = rep.grids[static_cast<int>(s)];
        std::getline(ss, f, ',');
        g.prob.at(l, pos) = std::stod(f);
        std::getline(ss, f);
        g.ld.at(l, pos) = std::stod(f);
    }
    return rep;
}

}  // namespace editlab
