#include "editlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "editlab/archive.hpp"
#include "editlab/rng.hpp"

namespace editlab {

namespace {

constexpr float kLnEps = 1e-5f;

void layernorm_row(const float* x, const float* g, const float* b, int d, float* out) {
    float mean = 0.0f;
    for (int i = 0; i < d; ++i) mean += x[i];
    mean /= d;
    float var = 0.0f;
    for (int i = 0; i < d; ++i) {
        const float c = x[i] - mean;
        var += c * c;
    }
    var /= d;
    const float rstd = 1.0f / std::sqrt(var + kLnEps);
    for (int i = 0; i < d; ++i) out[i] = g[i] * ((x[i] - mean) * rstd) + b[i];
}

// y (rows x out) = x (rows x in) * w^T with w (out x in).
MatF linear(const MatF& x, const MatF& w) {
    MatF y(x.rows, w.rows);
    for (int r = 0; r < x.rows; ++r) {
        const float* xr = x.row(r);
        float* yr = y.row(r);
        for (int o = 0; o < w.rows; ++o) {
            const float* wr = w.row(o);
            float s = 0.0f;
            for (int i = 0; i < x.cols; ++i) s += xr[i] * wr[i];
            yr[o] = s;
        }
    }
    return y;
}

void softmax_row(float* x, int n) {
    float mx = x[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    float sum = 0.0f;
    for (int i = 0; i < n; ++i) {
        x[i] = std::exp(x[i] - mx);
        sum += x[i];
    }
    for (int i = 0; i < n; ++i) x[i] /= sum;
}

MatF random_mat(int rows, int cols, float std, Rng& rng) {
    MatF m(rows, cols);
    for (float& v : m.data) v = static_cast<float>(rng.normal() * std);
    return m;
}

}  // namespace

void ModelConfig::validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_mlp < 1 || vocab_size < 1 ||
        max_seq_len < 1)
        throw std::invalid_argument("model config: all counts must be >= 1");
    if (d_model % n_heads != 0)
        throw std::invalid_argument("model config: d_model must be divisible by n_heads");
}

nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers},   {"d_model", c.d_model},
            {"n_heads", c.n_heads},     {"d_mlp", c.d_mlp},
            {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
            {"seed", c.seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.n_layers = j.at("n_layers").get<int>();
        c.d_model = j.at("d_model").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.d_mlp = j.at("d_mlp").get<int>();
        c.vocab_size = j.at("vocab_size").get<int>();
        c.max_seq_len = j.at("max_seq_len").get<int>();
        c.seed = j.at("seed").get<uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

const char* site_name(Site s) {
    switch (s) {
        case Site::Hidden: return "hidden";
        case Site::AttnOut: return "attn_out";
        case Site::MlpOut: return "mlp_out";
        case Site::MlpKey: return "mlp_key";
        case Site::AttnKey: return "attn_key";
    }
    throw std::invalid_argument("unknown site");
}

Site site_from_name(const std::string& name) {
    for (int i = 0; i < kNumSites; ++i) {
        const Site s = static_cast<Site>(i);
        if (name == site_name(s)) return s;
    }
    throw std::invalid_argument("unknown site name '" + name + "'");
}

int site_dim(Site s, const ModelConfig& c) {
    return s == Site::MlpKey ? c.d_mlp : c.d_model;
}

ModelParams init_params(const ModelConfig& c) {
    c.validate();
    Rng rng(derive_seed(c.seed, 0x6d6f64656cull));  // "model"
    const float base = 0.02f;
    // Residual-feeding projections are scaled down with depth, GPT-2 style.
    const float resid = base / std::sqrt(2.0f * static_cast<float>(c.n_layers));

    ModelParams p;
    p.tok_emb = random_mat(c.vocab_size, c.d_model, base, rng);
    p.pos_emb = random_mat(c.max_seq_len, c.d_model, base, rng);
    p.layers.resize(c.n_layers);
    for (auto& l : p.layers) {
        l.ln1_g.assign(c.d_model, 1.0f);
        l.ln1_b.assign(c.d_model, 0.0f);
        l.wq = random_mat(c.d_model, c.d_model, base, rng);
        l.wk = random_mat(c.d_model, c.d_model, base, rng);
        l.wv = random_mat(c.d_model, c.d_model, base, rng);
        l.wo = random_mat(c.d_model, c.d_model, resid, rng);
        l.ln2_g.assign(c.d_model, 1.0f);
        l.ln2_b.assign(c.d_model, 0.0f);
        l.w_in = random_mat(c.d_mlp, c.d_model, base, rng);
        l.w_out = random_mat(c.d_model, c.d_mlp, resid, rng);
    }
    p.ln_f_g.assign(c.d_model, 1.0f);
    p.ln_f_b.assign(c.d_model, 0.0f);
    p.unembed = random_mat(c.vocab_size, c.d_model, base, rng);
    return p;
}

namespace {

template <class Params, class Fn>
void for_each_tensor_impl(Params& p, const Fn& fn) {
    fn("tok_emb", p.tok_emb.data.data(), p.tok_emb.size());
    fn("pos_emb", p.pos_emb.data.data(), p.pos_emb.size());
    for (size_t i = 0; i < p.layers.size(); ++i) {
        auto& l = p.layers[i];
        const std::string pre = "layers." + std::to_string(i) + ".";
        fn(pre + "ln1_g", l.ln1_g.data(), l.ln1_g.size());
        fn(pre + "ln1_b", l.ln1_b.data(), l.ln1_b.size());
        fn(pre + "wq", l.wq.data.data(), l.wq.size());
        fn(pre + "wk", l.wk.data.data(), l.wk.size());
        fn(pre + "wv", l.wv.data.data(), l.wv.size());
        fn(pre + "wo", l.wo.data.data(), l.wo.size());
        fn(pre + "ln2_g", l.ln2_g.data(), l.ln2_g.size());
        fn(pre + "ln2_b", l.ln2_b.data(), l.ln2_b.size());
        fn(pre + "w_in", l.w_in.data.data(), l.w_in.size());
        fn(pre + "w_out", l.w_out.data.data(), l.w_out.size());
    }
    fn("ln_f_g", p.ln_f_g.data(), p.ln_f_g.size());
    fn("ln_f_b", p.ln_f_b.data(), p.ln_f_b.size());
    fn("unembed", p.unembed.data.data(), p.unembed.size());
}

}  // namespace

void for_each_tensor(ModelParams& p,
                     const std::function<void(const std::string&, float*, size_t)>& fn) {
    for_each_tensor_impl(p, fn);
}

void for_each_tensor(const ModelParams& p,
                     const std::function<void(const std::string&, const float*, size_t)>& fn) {
    for_each_tensor_impl(p, fn);
}

uint64_t params_fingerprint(const ModelParams& p) {
    Fnv1a h;
    for_each_tensor(p, [&](const std::string& name, const float* data, size_t n) {
        h.update(name.data(), name.size());
        h.update(data, n * sizeof(float));
    });
    return h.digest();
}

void PatchSet::add(int layer, int pos, Site site, std::vector<float> value) {
    if (find(layer, pos, site))
        throw std::invalid_argument("patch set: duplicate key (layer " + std::to_string(layer) +
                                    ", pos " + std::to_string(pos) + ", " + site_name(site) + ")");
    entries.push_back({layer, pos, site, std::move(value)});
}

const PatchSet::Entry* PatchSet::find(int layer, int pos, Site site) const {
    for (const auto& e : entries)
        if (e.layer == layer && e.pos == pos && e.site == site) return &e;
    return nullptr;
}

EmbeddingNoise make_embedding_noise(const std::vector<int>& positions, int d_model, double scale,
                                    uint64_t seed) {
    EmbeddingNoise n;
    n.positions = positions;
    n.rows = MatF(static_cast<int>(positions.size()), d_model);
    Rng rng(seed);
    for (float& v : n.rows.data) v = static_cast<float>(rng.normal() * scale);
    return n;
}

const MatF& ActivationTrace::layer_acts(Site s, int layer) const {
    if (!has(s))
        throw std::invalid_argument(std::string("trace did not capture site ") + site_name(s));
    if (layer < 0 || layer >= n_layers) throw std::invalid_argument("trace: layer out of range");
    return acts[static_cast<int>(s)][layer];
}

std::vector<float> ActivationTrace::vec(Site s, int layer, int pos) const {
    const MatF& m = layer_acts(s, layer);
    if (pos < 0 || pos >= m.rows) throw std::invalid_argument("trace: position out of range");
    return std::vector<float>(m.row(pos), m.row(pos) + m.cols);
}

ForwardResult forward(const ModelConfig& c, const ModelParams& p, const std::vector<int>& tokens,
                      uint32_t capture_mask, const PatchSet* patches,
                      const EmbeddingNoise* noise) {
    const int t_len = static_cast<int>(tokens.size());
    if (t_len == 0) throw std::invalid_argument("forward: empty token sequence");
    if (t_len > c.max_seq_len) throw std::invalid_argument("forward: sequence exceeds max_seq_len");
    for (int tok : tokens)
        if (tok < 0 || tok >= c.vocab_size)
            throw std::invalid_argument("forward: token id " + std::to_string(tok) +
                                        " outside vocab");
    if (patches) {
        for (const auto& e : patches->entries) {
            if (e.layer < 0 || e.layer >= c.n_layers)
                throw std::invalid_argument("patch targets nonexistent layer " +
                                            std::to_string(e.layer));
            if (e.pos < 0 || e.pos >= t_len)
                throw std::invalid_argument("patch targets position outside the sequence");
            if (static_cast<int>(e.value.size()) != site_dim(e.site, c))
                throw std::invalid_argument(std::string("patch vector size mismatch at site ") +
                                            site_name(e.site));
        }
    }

    ForwardResult res;
    ActivationTrace& trace = res.trace;
    trace.n_layers = c.n_layers;
    trace.seq_len = t_len;
    trace.mask = capture_mask;
    for (int s = 0; s < kNumSites; ++s)
        if (capture_mask & (1u << s)) trace.acts[s].resize(c.n_layers);

    // Replace patched rows in place, then optionally record the site.
    auto patch_and_capture = [&](MatF& m, int layer, Site s) {
        if (patches) {
            for (const auto& e : patches->entries) {
                if (e.layer != layer || e.site != s) continue;
                std::copy(e.value.begin(), e.value.end(), m.row(e.pos));
            }
        }
        if (capture_mask & site_bit(s)) trace.acts[static_cast<int>(s)][layer] = m;
    };

    MatF h(t_len, c.d_model);
    for (int i = 0; i < t_len; ++i) {
        const float* te = p.tok_emb.row(tokens[i]);
        const float* pe = p.pos_emb.row(i);
        float* hr = h.row(i);
        for (int j = 0; j < c.d_model; ++j) hr[j] = te[j] + pe[j];
    }
    if (noise) {
        for (size_t i = 0; i < noise->positions.size(); ++i) {
            const int pos = noise->positions[i];
            if (pos < 0 || pos >= t_len)
                throw std::invalid_argument("embedding noise position outside the sequence");
            float* hr = h.row(pos);
            const float* nr = noise->rows.row(static_cast<int>(i));
            for (int j = 0; j < c.d_model; ++j) hr[j] += nr[j];
        }
    }

    const int dh = c.d_head();
    const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));

    for (int l = 0; l < c.n_layers; ++l) {
        const LayerParams& lp = p.layers[l];

        MatF x1(t_len, c.d_model);
        for (int i = 0; i < t_len; ++i)
            layernorm_row(h.row(i), lp.ln1_g.data(), lp.ln1_b.data(), c.d_model, x1.row(i));

        const MatF q = linear(x1, lp.wq);
        const MatF k = linear(x1, lp.wk);
        const MatF v = linear(x1, lp.wv);

        MatF concat(t_len, c.d_model);
        std::vector<float> scores(t_len);
        for (int hd = 0; hd < c.n_heads; ++hd) {
            const int off = hd * dh;
            for (int i = 0; i < t_len; ++i) {
                for (int j = 0; j <= i; ++j) {
                    float s = 0.0f;
                    const float* qr = q.row(i) + off;
                    const float* kr = k.row(j) + off;
                    for (int e = 0; e < dh; ++e) s += qr[e] * kr[e];
                    scores[j] = s * att_scale;
                }
                softmax_row(scores.data(), i + 1);
                float* cr = concat.row(i) + off;
                std::fill(cr, cr + dh, 0.0f);
                for (int j = 0; j <= i; ++j) {
                    const float w = scores[j];
                    const float* vr = v.row(j) + off;
                    for (int e = 0; e < dh; ++e) cr[e] += w * vr[e];
                }
            }
        }
        patch_and_capture(concat, l, Site::AttnKey);

        MatF attn_out = linear(concat, lp.wo);
        patch_and_capture(attn_out, l, Site::AttnOut);
        for (size_t i = 0; i < h.data.size(); ++i) h.data[i] += attn_out.data[i];

        MatF x2(t_len, c.d_model);
        for (int i = 0; i < t_len; ++i)
            layernorm_row(h.row(i), lp.ln2_g.data(), lp.ln2_b.data(), c.d_model, x2.row(i));

        MatF key = linear(x2, lp.w_in);
        for (float& e : key.data) e = gelu(e);
        patch_and_capture(key, l, Site::MlpKey);

        MatF mlp_out = linear(key, lp.w_out);
        patch_and_capture(mlp_out, l, Site::MlpOut);
        for (size_t i = 0; i < h.data.size(); ++i) h.data[i] += mlp_out.data[i];

        patch_and_capture(h, l, Site::Hidden);
    }

    MatF final(t_len, c.d_model);
    for (int i = 0; i < t_len; ++i)
        layernorm_row(h.row(i), p.ln_f_g.data(), p.ln_f_b.data(), c.d_model, final.row(i));

    res.logits = linear(final, p.unembed);
    res.probs = res.logits;
    for (int i = 0; i < t_len; ++i) softmax_row(res.probs.row(i), c.vocab_size);
    return res;
}

std::vector<int> generate(const ModelConfig& c, const ModelParams& p, std::vector<int> prompt,
                          int length) {
    if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
    for (int step = 0; step < length; ++step) {
        const int ctx_len = std::min<int>(static_cast<int>(prompt.size()), c.max_seq_len);
        const std::vector<int> ctx(prompt.end() - ctx_len, prompt.end());
        const ForwardResult r = forward(c, p, ctx);
        const float* last = r.logits.row(ctx_len - 1);
        int best = 0;
        for (int tok = 1; tok < c.vocab_size; ++tok)
            if (last[tok] > last[best]) best = tok;
        prompt.push_back(best);
    }
    return prompt;
}

void save_checkpoint(const std::string& path, const ModelConfig& c, const ModelParams& p) {
    Archive a;
    a.kind = "checkpoint";
    a.meta = {{"format", 1}, {"config", config_to_json(c)}};
    for_each_tensor(p, [&](const std::string& name, const float* data, size_t n) {
        a.add_f32(name, {static_cast<int64_t>(n)}, data);
    });
    write_archive(path, a);
}

Checkpoint load_checkpoint(const std::string& path) {
    const Archive a = read_archive(path, "checkpoint");
    if (a.meta.value("format", 0) != 1)
        throw std::runtime_error("checkpoint '" + path + "': unsupported format version");

    Checkpoint ck;
    ck.config = config_from_json(a.meta.at("config"));
    ck.params = init_params(ck.config);
    for_each_tensor(ck.params, [&](const std::string& name, float* data, size_t n) {
        const ArchiveTensor& t = a.require(name);
        if (t.element_count() != n)
            throw std::runtime_error("checkpoint tensor '" + name + "' has " +
                                     std::to_string(t.element_count()) + " elements, expected " +
                                     std::to_string(n));
        std::copy(t.as_f32(), t.as_f32() + n, data);
    });
    return ck;
}

}  // namespace editlab
