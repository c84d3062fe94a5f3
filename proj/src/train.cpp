#include "editlab/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "editlab/rng.hpp"
#include "fgemm.hpp"

namespace editlab {

namespace {

using detail::matmul_nn;
using detail::matmul_tn_acc;
using detail::transposed;

constexpr float kLnEps = 1e-5f;

ModelParams zeroed_params(const ModelConfig& c) {
    ModelParams p;
    p.tok_emb = MatF(c.vocab_size, c.d_model);
    p.pos_emb = MatF(c.max_seq_len, c.d_model);
    p.layers.resize(c.n_layers);
    for (auto& l : p.layers) {
        l.ln1_g.assign(c.d_model, 0.0f);
        l.ln1_b.assign(c.d_model, 0.0f);
        l.wq = MatF(c.d_model, c.d_model);
        l.wk = MatF(c.d_model, c.d_model);
        l.wv = MatF(c.d_model, c.d_model);
        l.wo = MatF(c.d_model, c.d_model);
        l.ln2_g.assign(c.d_model, 0.0f);
        l.ln2_b.assign(c.d_model, 0.0f);
        l.w_in = MatF(c.d_mlp, c.d_model);
        l.w_out = MatF(c.d_model, c.d_mlp);
    }
    p.ln_f_g.assign(c.d_model, 0.0f);
    p.ln_f_b.assign(c.d_model, 0.0f);
    p.unembed = MatF(c.vocab_size, c.d_model);
    return p;
}

std::vector<std::pair<float*, size_t>> tensor_ptrs(ModelParams& p) {
    std::vector<std::pair<float*, size_t>> out;
    for_each_tensor(p, [&](const std::string&, float* data, size_t n) {
        out.push_back({data, n});
    });
    return out;
}

// Weight matrices pre-transposed once per step so every forward GEMM runs
// in saxpy form.
struct TW {
    std::vector<MatF> wq, wk, wv, wo, w_in, w_out;
    MatF unembed;
};

TW build_tw(const ModelParams& p) {
    TW tw;
    for (const auto& l : p.layers) {
        tw.wq.push_back(transposed(l.wq));
        tw.wk.push_back(transposed(l.wk));
        tw.wv.push_back(transposed(l.wv));
        tw.wo.push_back(transposed(l.wo));
        tw.w_in.push_back(transposed(l.w_in));
        tw.w_out.push_back(transposed(l.w_out));
    }
    tw.unembed = transposed(p.unembed);
    return tw;
}

// Activation substitution during a batch run; only meaningful with B = 1.
struct PatchSpec {
    int layer = 0;
    int pos = 0;
    Site site = Site::MlpOut;
    const float* v = nullptr;
};

struct LayerCache {
    MatF h_in, x1, q, k, v, concat, h_mid, x2, pre, key;
    std::vector<float> mean1, rstd1, mean2, rstd2;
    std::vector<float> att;  // (b, head, query, key) flattened
};

struct Caches {
    int b = 0, t = 0;
    std::vector<LayerCache> layers;
    MatF h;        // final residual stream, rows b*t
    MatF y_final;  // normed last-position rows, b x d_model
    std::vector<float> meanf, rstdf;
    MatF logits, probs;  // b x vocab
};

void ln_rows(const MatF& x, const std::vector<float>& g, const std::vector<float>& b, MatF& y,
             std::vector<float>& mean, std::vector<float>& rstd) {
    const int d = x.cols;
    y = MatF(x.rows, d);
    mean.resize(x.rows);
    rstd.resize(x.rows);
    for (int r = 0; r < x.rows; ++r) {
        const float* xr = x.row(r);
        float m = 0.0f;
        for (int i = 0; i < d; ++i) m += xr[i];
        m /= d;
        float var = 0.0f;
        for (int i = 0; i < d; ++i) {
            const float cdev = xr[i] - m;
            var += cdev * cdev;
        }
        var /= d;
        const float rs = 1.0f / std::sqrt(var + kLnEps);
        mean[r] = m;
        rstd[r] = rs;
        float* yr = y.row(r);
        for (int i = 0; i < d; ++i) yr[i] = g[i] * ((xr[i] - m) * rs) + b[i];
    }
}

void ln_row_backward(const float* dy, const float* x, float mean, float rstd, const float* g,
                     float* dg, float* db, float* dx_acc, int d) {
    float m1 = 0.0f, m2 = 0.0f;
    for (int i = 0; i < d; ++i) {
        const float xh = (x[i] - mean) * rstd;
        const float dyg = dy[i] * g[i];
        m1 += dyg;
        m2 += dyg * xh;
        if (dg) dg[i] += dy[i] * xh;
        if (db) db[i] += dy[i];
    }
    m1 /= d;
    m2 /= d;
    for (int i = 0; i < d; ++i) {
        const float xh = (x[i] - mean) * rstd;
        dx_acc[i] += rstd * (dy[i] * g[i] - m1 - xh * m2);
    }
}

void apply_patch_row(MatF& m, const PatchSpec* patch, int layer, Site site, int t) {
    if (!patch || patch->layer != layer || patch->site != site) return;
    const int r = patch->pos;  // batch size 1: row index equals position
    (void)t;
    std::copy(patch->v, patch->v + m.cols, m.row(r));
}

bool patch_matches(const PatchSpec* patch, int layer, Site site) {
    return patch && patch->layer == layer && patch->site == site;
}

// Fused batched forward over B sequences of equal length T. Logits are
// computed at the final position of each sequence only.
void batch_forward(const ModelConfig& c, const ModelParams& p, const TW& tw,
                   const std::vector<int>& tokens, int nb, int nt, const PatchSpec* patch,
                   Caches& cc) {
    const int rows = nb * nt;
    const int d = c.d_model;
    const int dh = c.d_head();
    const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));

    cc.b = nb;
    cc.t = nt;
    cc.layers.assign(c.n_layers, LayerCache{});

    cc.h = MatF(rows, d);
    for (int b = 0; b < nb; ++b) {
        for (int t = 0; t < nt; ++t) {
            const int r = b * nt + t;
            const float* te = p.tok_emb.row(tokens[r]);
            const float* pe = p.pos_emb.row(t);
            float* hr = cc.h.row(r);
            for (int i = 0; i < d; ++i) hr[i] = te[i] + pe[i];
        }
    }

    for (int l = 0; l < c.n_layers; ++l) {
        LayerCache& lc = cc.layers[l];
        const LayerParams& lp = p.layers[l];
        lc.h_in = cc.h;

        ln_rows(lc.h_in, lp.ln1_g, lp.ln1_b, lc.x1, lc.mean1, lc.rstd1);
        matmul_nn(lc.x1, tw.wq[l], lc.q);
        matmul_nn(lc.x1, tw.wk[l], lc.k);
        matmul_nn(lc.x1, tw.wv[l], lc.v);

        lc.concat = MatF(rows, d);
        lc.att.assign(static_cast<size_t>(nb) * c.n_heads * nt * nt, 0.0f);
        for (int b = 0; b < nb; ++b) {
            for (int hd = 0; hd < c.n_heads; ++hd) {
                const int off = hd * dh;
                float* att_bh = lc.att.data() +
                                (static_cast<size_t>(b) * c.n_heads + hd) * nt * nt;
                for (int t = 0; t < nt; ++t) {
                    const int r = b * nt + t;
                    float* arow = att_bh + static_cast<size_t>(t) * nt;
                    float mx = -1e30f;
                    for (int j = 0; j <= t; ++j) {
                        const float* qr = lc.q.row(r) + off;
                        const float* kr = lc.k.row(b * nt + j) + off;
                        float s = 0.0f;
                        for (int e = 0; e < dh; ++e) s += qr[e] * kr[e];
                        arow[j] = s * att_scale;
                        mx = std::max(mx, arow[j]);
                    }
                    float sum = 0.0f;
                    for (int j = 0; j <= t; ++j) {
                        arow[j] = std::exp(arow[j] - mx);
                        sum += arow[j];
                    }
                    for (int j = 0; j <= t; ++j) arow[j] /= sum;

                    float* cr = lc.concat.row(r) + off;
                    std::fill(cr, cr + dh, 0.0f);
                    for (int j = 0; j <= t; ++j) {
                        const float w = arow[j];
                        const float* vr = lc.v.row(b * nt + j) + off;
                        for (int e = 0; e < dh; ++e) cr[e] += w * vr[e];
                    }
                }
            }
        }
        apply_patch_row(lc.concat, patch, l, Site::AttnKey, nt);

        MatF attn_out;
        matmul_nn(lc.concat, tw.wo[l], attn_out);
        apply_patch_row(attn_out, patch, l, Site::AttnOut, nt);
        for (size_t i = 0; i < cc.h.data.size(); ++i) cc.h.data[i] = lc.h_in.data[i] + attn_out.data[i];
        lc.h_mid = cc.h;

        ln_rows(lc.h_mid, lp.ln2_g, lp.ln2_b, lc.x2, lc.mean2, lc.rstd2);
        matmul_nn(lc.x2, tw.w_in[l], lc.pre);
        lc.key = lc.pre;
        for (float& e : lc.key.data) e = gelu(e);
        apply_patch_row(lc.key, patch, l, Site::MlpKey, nt);

        MatF mlp_out;
        matmul_nn(lc.key, tw.w_out[l], mlp_out);
        apply_patch_row(mlp_out, patch, l, Site::MlpOut, nt);
        for (size_t i = 0; i < cc.h.data.size(); ++i) cc.h.data[i] = lc.h_mid.data[i] + mlp_out.data[i];

        if (patch_matches(patch, l, Site::Hidden))
            std::copy(patch->v, patch->v + d, cc.h.row(patch->pos));
    }

    // Final norm and readout at the last position of each sequence.
    cc.y_final = MatF(nb, d);
    cc.meanf.resize(nb);
    cc.rstdf.resize(nb);
    for (int b = 0; b < nb; ++b) {
        const float* xr = cc.h.row(b * nt + (nt - 1));
        float m = 0.0f;
        for (int i = 0; i < d; ++i) m += xr[i];
        m /= d;
        float var = 0.0f;
        for (int i = 0; i < d; ++i) {
            const float cdev = xr[i] - m;
            var += cdev * cdev;
        }
        var /= d;
        const float rs = 1.0f / std::sqrt(var + kLnEps);
        cc.meanf[b] = m;
        cc.rstdf[b] = rs;
        float* yr = cc.y_final.row(b);
        for (int i = 0; i < d; ++i) yr[i] = p.ln_f_g[i] * ((xr[i] - m) * rs) + p.ln_f_b[i];
    }

    matmul_nn(cc.y_final, tw.unembed, cc.logits);
    cc.probs = cc.logits;
    for (int b = 0; b < nb; ++b) {
        float* pr = cc.probs.row(b);
        float mx = pr[0];
        for (int j = 1; j < c.vocab_size; ++j) mx = std::max(mx, pr[j]);
        float sum = 0.0f;
        for (int j = 0; j < c.vocab_size; ++j) {
            pr[j] = std::exp(pr[j] - mx);
            sum += pr[j];
        }
        for (int j = 0; j < c.vocab_size; ++j) pr[j] /= sum;
    }
}

double batch_loss(const Caches& cc, const std::vector<int>& targets) {
    double loss = 0.0;
    for (int b = 0; b < cc.b; ++b)
        loss -= std::log(std::max(static_cast<double>(cc.probs.at(b, targets[b])), 1e-300));
    return loss / cc.b;
}

// Backward pass for the batch_forward loss. Parameter gradients accumulate
// into g when given; dv receives d(loss)/d(patched vector) when a patch was
// active in the forward pass.
void batch_backward(const ModelConfig& c, const ModelParams& p, const Caches& cc,
                    const std::vector<int>& tokens, const std::vector<int>& targets,
                    ModelParams* g, const PatchSpec* patch, std::vector<float>* dv) {
    const int nb = cc.b, nt = cc.t;
    const int rows = nb * nt;
    const int d = c.d_model;
    const int dh = c.d_head();
    const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));

    MatF dlogits = cc.probs;
    for (int b = 0; b < nb; ++b) {
        dlogits.at(b, targets[b]) -= 1.0f;
        float* r = dlogits.row(b);
        for (int j = 0; j < c.vocab_size; ++j) r[j] /= nb;
    }

    if (g) matmul_tn_acc(dlogits, cc.y_final, g->unembed);
    MatF dyf;
    matmul_nn(dlogits, p.unembed, dyf);

    MatF dh_mat(rows, d);
    for (int b = 0; b < nb; ++b) {
        const int r = b * nt + (nt - 1);
        ln_row_backward(dyf.row(b), cc.h.row(r), cc.meanf[b], cc.rstdf[b], p.ln_f_g.data(),
                        g ? g->ln_f_g.data() : nullptr, g ? g->ln_f_b.data() : nullptr,
                        dh_mat.row(r), d);
    }

    MatF dm, dkey, dx2, da, dcon, dq, dk, dvv, dx1;
    for (int l = c.n_layers - 1; l >= 0; --l) {
        const LayerCache& lc = cc.layers[l];
        const LayerParams& lp = p.layers[l];
        LayerParams* gl = g ? &g->layers[l] : nullptr;

        // A patched Hidden row replaces the stream, so nothing upstream of
        // it in this layer receives gradient through that row.
        if (patch_matches(patch, l, Site::Hidden) && dv) {
            const float* src = dh_mat.row(patch->pos);
            dv->assign(src, src + d);
            std::fill(dh_mat.row(patch->pos), dh_mat.row(patch->pos) + d, 0.0f);
        }

        // MLP branch: h = h_mid + mlp_out.
        dm = dh_mat;
        if (patch_matches(patch, l, Site::MlpOut) && dv) {
            const float* src = dm.row(patch->pos);
            dv->assign(src, src + d);
            std::fill(dm.row(patch->pos), dm.row(patch->pos) + d, 0.0f);
        }
        if (gl) matmul_tn_acc(dm, lc.key, gl->w_out);
        matmul_nn(dm, lp.w_out, dkey);
        if (patch_matches(patch, l, Site::MlpKey) && dv) {
            const float* src = dkey.row(patch->pos);
            dv->assign(src, src + c.d_mlp);
            std::fill(dkey.row(patch->pos), dkey.row(patch->pos) + c.d_mlp, 0.0f);
        }
        for (size_t i = 0; i < dkey.data.size(); ++i) dkey.data[i] *= gelu_grad(lc.pre.data[i]);
        if (gl) matmul_tn_acc(dkey, lc.x2, gl->w_in);
        matmul_nn(dkey, lp.w_in, dx2);
        for (int r = 0; r < rows; ++r)
            ln_row_backward(dx2.row(r), lc.h_mid.row(r), lc.mean2[r], lc.rstd2[r], lp.ln2_g.data(),
                            gl ? gl->ln2_g.data() : nullptr, gl ? gl->ln2_b.data() : nullptr,
                            dh_mat.row(r), d);

        // Attention branch: h_mid = h_in + attn_out.
        da = dh_mat;
        if (patch_matches(patch, l, Site::AttnOut) && dv) {
            const float* src = da.row(patch->pos);
            dv->assign(src, src + d);
            std::fill(da.row(patch->pos), da.row(patch->pos) + d, 0.0f);
        }
        if (gl) matmul_tn_acc(da, lc.concat, gl->wo);
        matmul_nn(da, lp.wo, dcon);
        if (patch_matches(patch, l, Site::AttnKey) && dv) {
            const float* src = dcon.row(patch->pos);
            dv->assign(src, src + d);
            std::fill(dcon.row(patch->pos), dcon.row(patch->pos) + d, 0.0f);
        }

        dq = MatF(rows, d);
        dk = MatF(rows, d);
        dvv = MatF(rows, d);
        for (int b = 0; b < nb; ++b) {
            for (int hd = 0; hd < c.n_heads; ++hd) {
                const int off = hd * dh;
                const float* att_bh = lc.att.data() +
                                      (static_cast<size_t>(b) * c.n_heads + hd) * nt * nt;
                for (int t = 0; t < nt; ++t) {
                    const int r = b * nt + t;
                    const float* arow = att_bh + static_cast<size_t>(t) * nt;
                    const float* dcr = dcon.row(r) + off;

                    float dsum = 0.0f;
                    std::vector<float> datt(t + 1);
                    for (int j = 0; j <= t; ++j) {
                        const int jr = b * nt + j;
                        const float* vr = lc.v.row(jr) + off;
                        float acc = 0.0f;
                        for (int e = 0; e < dh; ++e) {
                            acc += dcr[e] * vr[e];
                            dvv.row(jr)[off + e] += arow[j] * dcr[e];
                        }
                        datt[j] = acc;
                        dsum += arow[j] * acc;
                    }
                    for (int j = 0; j <= t; ++j) {
                        const int jr = b * nt + j;
                        const float ds = arow[j] * (datt[j] - dsum) * att_scale;
                        const float* kr = lc.k.row(jr) + off;
                        const float* qr = lc.q.row(r) + off;
                        float* dqr = dq.row(r) + off;
                        float* dkr = dk.row(jr) + off;
                        for (int e = 0; e < dh; ++e) {
                            dqr[e] += ds * kr[e];
                            dkr[e] += ds * qr[e];
                        }
                    }
                }
            }
        }

        if (gl) {
            matmul_tn_acc(dq, lc.x1, gl->wq);
            matmul_tn_acc(dk, lc.x1, gl->wk);
            matmul_tn_acc(dvv, lc.x1, gl->wv);
        }
        matmul_nn(dq, lp.wq, dx1);
        MatF tmp;
        matmul_nn(dk, lp.wk, tmp);
        for (size_t i = 0; i < dx1.data.size(); ++i) dx1.data[i] += tmp.data[i];
        matmul_nn(dvv, lp.wv, tmp);
        for (size_t i = 0; i < dx1.data.size(); ++i) dx1.data[i] += tmp.data[i];

        for (int r = 0; r < rows; ++r)
            ln_row_backward(dx1.row(r), lc.h_in.row(r), lc.mean1[r], lc.rstd1[r], lp.ln1_g.data(),
                            gl ? gl->ln1_g.data() : nullptr, gl ? gl->ln1_b.data() : nullptr,
                            dh_mat.row(r), d);
    }

    if (g) {
        for (int b = 0; b < nb; ++b) {
            for (int t = 0; t < nt; ++t) {
                const int r = b * nt + t;
                float* te = g->tok_emb.row(tokens[r]);
                float* pe = g->pos_emb.row(t);
                const float* dr = dh_mat.row(r);
                for (int i = 0; i < d; ++i) {
                    te[i] += dr[i];
                    pe[i] += dr[i];
                }
            }
        }
    }
}

void flatten_batch(const std::vector<TrainItem>& items, const std::vector<size_t>& idx,
                   std::vector<int>& tokens, std::vector<int>& targets, int& nt) {
    nt = static_cast<int>(items[idx[0]].prompt.size());
    tokens.clear();
    targets.clear();
    for (size_t i : idx) {
        const TrainItem& it = items[i];
        if (static_cast<int>(it.prompt.size()) != nt)
            throw std::invalid_argument("training batch mixes prompt lengths");
        tokens.insert(tokens.end(), it.prompt.begin(), it.prompt.end());
        targets.push_back(it.target);
    }
}

std::vector<int> argmax_rows(const MatF& logits) {
    std::vector<int> out(logits.rows);
    for (int r = 0; r < logits.rows; ++r) {
        const float* row = logits.row(r);
        int best = 0;
        for (int j = 1; j < logits.cols; ++j)
            if (row[j] > row[best]) best = j;
        out[r] = best;
    }
    return out;
}

}  // namespace

std::vector<int> predict_argmax(const ModelConfig& c, const ModelParams& p,
                                const std::vector<std::vector<int>>& prompts) {
    if (prompts.empty()) return {};
    const TW tw = build_tw(p);
    std::vector<int> preds;
    preds.reserve(prompts.size());
    const int chunk = 256;
    Caches cc;
    std::vector<int> tokens;
    for (size_t start = 0; start < prompts.size(); start += chunk) {
        const size_t end = std::min(prompts.size(), start + chunk);
        const int nt = static_cast<int>(prompts[start].size());
        tokens.clear();
        for (size_t i = start; i < end; ++i) {
            if (static_cast<int>(prompts[i].size()) != nt)
                throw std::invalid_argument("predict_argmax: prompts must share one length");
            tokens.insert(tokens.end(), prompts[i].begin(), prompts[i].end());
        }
        batch_forward(c, p, tw, tokens, static_cast<int>(end - start), nt, nullptr, cc);
        const auto am = argmax_rows(cc.logits);
        preds.insert(preds.end(), am.begin(), am.end());
    }
    return preds;
}

double evaluate_recall(const ModelConfig& c, const ModelParams& p,
                       const std::vector<TrainItem>& items) {
    if (items.empty()) throw std::invalid_argument("evaluate_recall: empty item set");
    std::vector<std::vector<int>> prompts;
    prompts.reserve(items.size());
    for (const auto& it : items) prompts.push_back(it.prompt);
    const auto preds = predict_argmax(c, p, prompts);
    int hits = 0;
    for (size_t i = 0; i < items.size(); ++i)
        if (preds[i] == items[i].target) ++hits;
    return static_cast<double>(hits) / items.size();
}

BatchGrads batch_gradients(const ModelConfig& c, const ModelParams& p,
                           const std::vector<TrainItem>& batch) {
    if (batch.empty()) throw std::invalid_argument("batch_gradients: empty batch");
    std::vector<size_t> idx(batch.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<int> tokens, targets;
    int nt = 0;
    flatten_batch(batch, idx, tokens, targets, nt);

    const TW tw = build_tw(p);
    Caches cc;
    batch_forward(c, p, tw, tokens, static_cast<int>(batch.size()), nt, nullptr, cc);

    BatchGrads out;
    out.loss = batch_loss(cc, targets);
    out.grads = zeroed_params(c);
    batch_backward(c, p, cc, tokens, targets, &out.grads, nullptr, nullptr);
    return out;
}

ValuePatchGrad value_patch_gradient(const ModelConfig& c, const ModelParams& p,
                                    const std::vector<int>& tokens, int target, int layer, int pos,
                                    Site site, const std::vector<float>& v) {
    if (layer < 0 || layer >= c.n_layers)
        throw std::invalid_argument("value_patch_gradient: layer out of range");
    if (pos < 0 || pos >= static_cast<int>(tokens.size()))
        throw std::invalid_argument("value_patch_gradient: position out of range");
    if (target < 0 || target >= c.vocab_size)
        throw std::invalid_argument("value_patch_gradient: target outside vocab");
    if (static_cast<int>(v.size()) != site_dim(site, c))
        throw std::invalid_argument("value_patch_gradient: vector size mismatch");

    PatchSpec patch{layer, pos, site, v.data()};
    const TW tw = build_tw(p);
    Caches cc;
    batch_forward(c, p, tw, tokens, 1, static_cast<int>(tokens.size()), &patch, cc);

    ValuePatchGrad out;
    out.p_target = cc.probs.at(0, target);
    out.log_p_target = std::log(std::max(out.p_target, 1e-300));

    std::vector<float> dv;
    batch_backward(c, p, cc, tokens, {target}, nullptr, &patch, &dv);
    if (dv.empty())
        throw std::logic_error("value_patch_gradient: patch site saw no gradient");
    // batch_backward produces d(-log P)/dv; flip to d(log P)/dv.
    out.grad.resize(dv.size());
    for (size_t i = 0; i < dv.size(); ++i) {
        if (!std::isfinite(dv[i]))
            throw std::runtime_error("value_patch_gradient: non-finite gradient");
        out.grad[i] = -dv[i];
    }
    return out;
}

TrainResult train(const ModelConfig& c, ModelParams initial, const FactWorld& world,
                  const TrainConfig& tc) {
    if (tc.batch_size < 1 || tc.steps < 0) throw std::invalid_argument("train: bad config");
    const std::vector<TrainItem> items = supervised_items(world);
    const std::vector<TrainItem> recall_items = split_primary_items(world, world.train_split);

    TrainResult res;
    res.params = std::move(initial);

    ModelParams grads = zeroed_params(c);
    ModelParams adam_m = zeroed_params(c);
    ModelParams adam_v = zeroed_params(c);
    auto w_ptrs = tensor_ptrs(res.params);
    auto g_ptrs = tensor_ptrs(grads);
    auto m_ptrs = tensor_ptrs(adam_m);
    auto v_ptrs = tensor_ptrs(adam_v);

    Rng batch_rng(derive_seed(tc.seed, 0x6261746368ull));  // "batch"
    Caches cc;
    std::vector<int> tokens, targets;
    std::vector<size_t> idx(tc.batch_size);

    for (int step = 0; step < tc.steps; ++step) {
        for (auto& i : idx) i = batch_rng.index(items.size());
        int nt = 0;
        flatten_batch(items, idx, tokens, targets, nt);

        const TW tw = build_tw(res.params);
        batch_forward(c, res.params, tw, tokens, tc.batch_size, nt, nullptr, cc);
        const double loss = batch_loss(cc, targets);
        if (!std::isfinite(loss))
            throw std::runtime_error("training diverged at step " + std::to_string(step + 1) +
                                     " (loss is not finite)");

        for (auto& [ptr, n] : g_ptrs) std::memset(ptr, 0, n * sizeof(float));
        batch_backward(c, res.params, cc, tokens, targets, &grads, nullptr, nullptr);

        const double lr_t =
            tc.cosine_decay
                ? tc.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * step / tc.steps))
                : tc.lr;
        const double bc1 = 1.0 - std::pow(tc.beta1, step + 1);
        const double bc2 = 1.0 - std::pow(tc.beta2, step + 1);
        for (size_t t = 0; t < w_ptrs.size(); ++t) {
            float* w = w_ptrs[t].first;
            const float* gr = g_ptrs[t].first;
            float* m = m_ptrs[t].first;
            float* v = v_ptrs[t].first;
            const size_t n = w_ptrs[t].second;
            for (size_t i = 0; i < n; ++i) {
                m[i] = static_cast<float>(tc.beta1 * m[i] + (1.0 - tc.beta1) * gr[i]);
                v[i] = static_cast<float>(tc.beta2 * v[i] + (1.0 - tc.beta2) * gr[i] * gr[i]);
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                w[i] -= static_cast<float>(lr_t * mhat / (std::sqrt(vhat) + tc.adam_eps));
            }
        }

        TrainLogRow row;
        row.step = step + 1;
        row.loss = loss;
        if ((step + 1) % tc.eval_every == 0 || step + 1 == tc.steps)
            row.recall = evaluate_recall(c, res.params, recall_items);
        res.log.push_back(row);
    }

    res.final_loss = res.log.empty() ? 0.0 : res.log.back().loss;
    res.final_recall = evaluate_recall(c, res.params, recall_items);
    res.supervised_recall = evaluate_recall(c, res.params, items);
    return res;
}

void write_train_log_csv(const std::string& path, const std::vector<TrainLogRow>& log) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << "step,loss,recall\n";
    char buf[64];
    for (const auto& row : log) {
        std::snprintf(buf, sizeof buf, "%d,%.9g,", row.step, row.loss);
        out << buf;
        if (row.recall >= 0.0) {
            std::snprintf(buf, sizeof buf, "%.9g", row.recall);
            out << buf;
        }
        out << "\n";
    }
}

std::vector<TrainLogRow> read_train_log_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open training log '" + path + "'");
    std::string line;
    std::getline(in, line);
    if (line != "step,loss,recall")
        throw std::runtime_error("training log '" + path + "': unexpected header");
    std::vector<TrainLogRow> log;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string f1, f2, f3;
        std::getline(ss, f1, ',');
        std::getline(ss, f2, ',');
        std::getline(ss, f3);
        TrainLogRow row;
        row.step = std::stoi(f1);
        row.loss = std::stod(f2);
        row.recall = f3.empty() ? -1.0 : std::stod(f3);
        log.push_back(row);
    }
    return log;
}

}  // namespace editlab
