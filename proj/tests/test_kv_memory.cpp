#include <cmath>
#include <cstdio>
#include <stdexcept>

#include <doctest.h>

#include "editlab/fact_world.hpp"
#include "editlab/kv_memory.hpp"
#include "editlab/model.hpp"
#include "editlab/rng.hpp"
#include "editlab/train.hpp"

using namespace editlab;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_mlp = 16;
    c.vocab_size = 20;
    c.max_seq_len = 8;
    c.seed = 1;
    return c;
}

WorldSpec tiny_world_spec() {
    WorldSpec s;
    s.n_subjects = 4;
    s.n_relations = 2;
    s.n_objects = 6;
    s.n_facts = 6;
    s.vocab_size = 20;
    s.seed = 2;
    return s;
}

KeyContext plain_context() {
    KeyContext kc;
    kc.n_prefixes = 0;
    return kc;
}

ModelParams zero_params(const ModelConfig& c) {
    ModelParams p = init_params(c);
    for_each_tensor(p, [](const std::string&, float* data, size_t n) {
        for (size_t i = 0; i < n; ++i) data[i] = 0.0f;
    });
    return p;
}

}  // namespace

TEST_CASE("pathway naming and dimensions") {
    CHECK(pathway_from_name("mlp") == Pathway::Mlp);
    CHECK(pathway_from_name("attn") == Pathway::Attn);
    CHECK(pathway_name(Pathway::Mlp) == std::string("mlp"));
    CHECK(pathway_name(Pathway::Attn) == std::string("attn"));
    CHECK_THROWS_AS(pathway_from_name("conv"), std::invalid_argument);

    const ModelConfig c = tiny_config();
    CHECK(key_site(Pathway::Mlp) == Site::MlpKey);
    CHECK(key_site(Pathway::Attn) == Site::AttnKey);
    CHECK(value_site(Pathway::Mlp) == Site::MlpOut);
    CHECK(value_site(Pathway::Attn) == Site::AttnOut);
    CHECK(key_dim(Pathway::Mlp, c) == c.d_mlp);
    CHECK(key_dim(Pathway::Attn, c) == c.d_model);
}

TEST_CASE("key contexts keep the prompt and add seeded prefixes") {
    const std::vector<int> prompt = {0, 3, 4};

    SUBCASE("plain only") {
        const auto ctxs = key_contexts(prompt, 1, plain_context());
        REQUIRE(ctxs.size() == 1);
        CHECK(ctxs[0].tokens == prompt);
        CHECK(ctxs[0].subject_pos == 1);
    }

    SUBCASE("prefixed variants") {
        KeyContext kc;
        kc.n_prefixes = 8;
        kc.min_len = 1;
        kc.max_len = 2;
        kc.candidates = {5, 6, 7};
        kc.seed = 3;
        const auto ctxs = key_contexts(prompt, 1, kc);
        REQUIRE(ctxs.size() == 9);
        CHECK(ctxs[0].tokens == prompt);
        bool saw_len1 = false, saw_len2 = false;
        for (size_t i = 1; i < ctxs.size(); ++i) {
            const auto& v = ctxs[i];
            const int plen = static_cast<int>(v.tokens.size() - prompt.size());
            REQUIRE(plen >= 1);
            REQUIRE(plen <= 2);
            (plen == 1 ? saw_len1 : saw_len2) = true;
            CHECK(v.tokens[0] == prompt[0]);
            for (int j = 1; j <= plen; ++j) {
                const bool from_candidates = v.tokens[j] == 5 || v.tokens[j] == 6 || v.tokens[j] == 7;
                CHECK(from_candidates);
            }
            CHECK(v.subject_pos == 1 + plen);
            CHECK(v.tokens[v.subject_pos] == prompt[1]);
            CHECK(v.tokens.back() == prompt[2]);
        }
        CHECK(saw_len1);
        CHECK(saw_len2);

        const auto again = key_contexts(prompt, 1, kc);
        for (size_t i = 0; i < ctxs.size(); ++i) {
            CHECK(again[i].tokens == ctxs[i].tokens);
            CHECK(again[i].subject_pos == ctxs[i].subject_pos);
        }
    }

    SUBCASE("rejects bad inputs") {
        CHECK_THROWS_AS(key_contexts({}, 0, plain_context()), std::invalid_argument);
        CHECK_THROWS_AS(key_contexts(prompt, 3, plain_context()), std::invalid_argument);
        KeyContext kc;
        kc.n_prefixes = -1;
        CHECK_THROWS_AS(key_contexts(prompt, 1, kc), std::invalid_argument);
        kc.n_prefixes = 2;
        CHECK_THROWS_AS(key_contexts(prompt, 1, kc), std::invalid_argument);  // no candidates
        kc.candidates = {5};
        kc.min_len = 0;
        CHECK_THROWS_AS(key_contexts(prompt, 1, kc), std::invalid_argument);
        kc.min_len = 3;
        kc.max_len = 2;
        CHECK_THROWS_AS(key_contexts(prompt, 1, kc), std::invalid_argument);
    }
}

TEST_CASE("extracted keys equal the forward capture") {
    const ModelConfig c = tiny_config();
    const ModelParams p = init_params(c);
    const std::vector<int> prompt = {0, 3, 4};

    for (Pathway pw : {Pathway::Mlp, Pathway::Attn}) {
        for (int layer = 0; layer < c.n_layers; ++layer) {
            const auto key = extract_key(c, p, pw, layer, prompt, 1, plain_context());
            const ForwardResult run = forward(c, p, prompt, site_bit(key_site(pw)));
            const auto cap = run.trace.vec(key_site(pw), layer, 1);
            REQUIRE(key.size() == cap.size());
            for (size_t i = 0; i < key.size(); ++i)
                CHECK(key[i] == static_cast<double>(cap[i]));
        }
    }
}

TEST_CASE("prefix-averaged key is the mean of the per-context captures") {
    const ModelConfig c = tiny_config();
    const ModelParams p = init_params(c);
    const std::vector<int> prompt = {0, 3, 4};

    KeyContext kc;
    kc.n_prefixes = 4;
    kc.candidates = {5, 6, 7, 8};
    kc.seed = 9;

    const auto key = extract_key(c, p, Pathway::Mlp, 1, prompt, 1, kc);
    const auto ctxs = key_contexts(prompt, 1, kc);
    std::vector<double> mean(c.d_mlp, 0.0);
    for (const auto& ctx : ctxs) {
        const ForwardResult run = forward(c, p, ctx.tokens, site_bit(Site::MlpKey));
        const auto cap = run.trace.vec(Site::MlpKey, 1, ctx.subject_pos);
        for (int i = 0; i < c.d_mlp; ++i) mean[i] += cap[i];
    }
    for (auto& v : mean) v /= ctxs.size();
    for (int i = 0; i < c.d_mlp; ++i) CHECK(key[i] == mean[i]);
}

TEST_CASE("zero weights give zero keys and values") {
    const ModelConfig c = tiny_config();
    const ModelParams p = zero_params(c);
    const std::vector<int> prompt = {0, 3, 4};

    // With every weight zero the stream stays zero, so the MLP key is
    // gelu(0) = 0 and the attention key is a zero vector too.
    for (Pathway pw : {Pathway::Mlp, Pathway::Attn}) {
        const auto key = extract_key(c, p, pw, 0, prompt, 1, plain_context());
        for (double v : key) CHECK(v == 0.0);
        const auto val = current_value(c, p, pw, 0, key);
        REQUIRE(static_cast<int>(val.size()) == c.d_model);
        for (double v : val) CHECK(v == 0.0);
    }
}

TEST_CASE("identity output projection returns the key as its value") {
    const ModelConfig c = tiny_config();
    ModelParams p = init_params(c);
    for (int i = 0; i < c.d_model; ++i)
        for (int j = 0; j < c.d_model; ++j) p.layers[0].wo.at(i, j) = i == j ? 1.0f : 0.0f;

    std::vector<double> key(c.d_model);
    for (int i = 0; i < c.d_model; ++i) key[i] = 0.25 * (i + 1);
    const auto val = current_value(c, p, Pathway::Attn, 0, key);
    for (int i = 0; i < c.d_model; ++i) CHECK(val[i] == key[i]);

    CHECK_THROWS_AS(current_value(c, p, Pathway::Attn, 5, key), std::invalid_argument);
    key.pop_back();
    CHECK_THROWS_AS(current_value(c, p, Pathway::Attn, 0, key), std::invalid_argument);
}

TEST_CASE("covariance accumulates one sampled key outer product per draw") {
    // A one-fact world has a two-prompt pool (primary, paraphrase). The
    // sampler draws a prompt index and then a position per sample, so the
    // whole estimate can be replayed against forward captures.
    const ModelConfig c = tiny_config();
    const ModelParams p = init_params(c);
    WorldSpec s = tiny_world_spec();
    s.n_facts = 1;
    const FactWorld w = build_world(s);

    const FactTriple& f = w.facts[0];
    const std::vector<std::vector<int>> pool = {fact_prompt(f), paraphrase_prompt(f)};
    std::vector<std::vector<float>> keys[2];
    for (int i = 0; i < 2; ++i) {
        const ForwardResult run = forward(c, p, pool[i], site_bit(Site::AttnKey));
        for (int pos = 0; pos < 3; ++pos)
            keys[i].push_back(run.trace.vec(Site::AttnKey, 1, pos));
    }

    for (const int n : {1, 7}) {
        const CovEstimate est = estimate_covariance(c, p, w, Pathway::Attn, 1, n, 4);
        REQUIRE(est.c0.rows == c.d_model);
        REQUIRE(est.sample_count == n);

        MatD replay(c.d_model, c.d_model);
        Rng rng(4);
        for (int t = 0; t < n; ++t) {
            const size_t idx = rng.index(pool.size());
            const size_t pos = rng.index(pool[idx].size());
            const std::vector<float>& k = keys[idx][pos];
            for (int i = 0; i < c.d_model; ++i)
                for (int j = 0; j < c.d_model; ++j)
                    replay.at(i, j) += static_cast<double>(k[i]) * static_cast<double>(k[j]);
        }
        CHECK(est.c0 == replay);
    }
}

TEST_CASE("covariance is symmetric positive semidefinite") {
    const ModelConfig c = tiny_config();
    const ModelParams p = init_params(c);
    const FactWorld w = build_world(tiny_world_spec());

    const CovEstimate est = estimate_covariance(c, p, w, Pathway::Mlp, 0, 40, 7);
    REQUIRE(est.c0.rows == c.d_mlp);
    for (int i = 0; i < c.d_mlp; ++i)
        for (int j = 0; j < i; ++j) CHECK(est.c0.at(i, j) == est.c0.at(j, i));

    const SymEigen eig = sym_eigen(est.c0);
    for (double v : eig.values) CHECK(v >= -1e-10);

    const CovEstimate again = estimate_covariance(c, p, w, Pathway::Mlp, 0, 40, 7);
    CHECK(again.c0 == est.c0);
    const CovEstimate other = estimate_covariance(c, p, w, Pathway::Mlp, 0, 40, 8);
    CHECK(other.c0 != est.c0);

    CHECK_THROWS_AS(estimate_covariance(c, p, w, Pathway::Mlp, 0, 0, 7), std::invalid_argument);
    CHECK_THROWS_AS(estimate_covariance(c, p, w, Pathway::Mlp, 9, 40, 7), std::invalid_argument);
}

TEST_CASE("covariance archives round-trip and reject mismatches") {
    const ModelConfig c = tiny_config();
    const ModelParams p = init_params(c);
    const FactWorld w = build_world(tiny_world_spec());
    const uint64_t fp = params_fingerprint(p);
    const CovEstimate est = estimate_covariance(c, p, w, Pathway::Attn, 1, 16, 5);

    const std::string path = "test_cov.bin";
    save_covariance(path, est, Pathway::Attn, 1, fp);
    const CovEstimate back = load_covariance(path, Pathway::Attn, 1, fp);
    CHECK(back.c0 == est.c0);
    CHECK(back.sample_count == est.sample_count);

    CHECK_THROWS_AS(load_covariance(path, Pathway::Mlp, 1, fp), std::runtime_error);
    CHECK_THROWS_AS(load_covariance(path, Pathway::Attn, 0, fp), std::runtime_error);
    CHECK_THROWS_AS(load_covariance(path, Pathway::Attn, 1, fp + 1), std::runtime_error);
    std::remove(path.c_str());
    CHECK_THROWS_AS(load_covariance(path, Pathway::Attn, 1, fp), std::runtime_error);
}

TEST_CASE("value optimization never loses probability and moves boundedly") {
    const ModelConfig c = tiny_config();
    const ModelParams p = init_params(c);
    const std::vector<int> prompt = {0, 3, 4};
    ValueOptConfig cfg;

    // Layer 0 of two: layer 1's attention carries the subject position's
    // patched value into the readout. (At the last layer the subject
    // position has no path to the final position and the gradient is zero.)
    for (Pathway pw : {Pathway::Mlp, Pathway::Attn}) {
        const ValueTarget t = optimize_target_value(c, p, prompt, 1, 7, pw, 0, cfg);
        CHECK(t.p_final >= t.p_start);
        CHECK(t.steps <= cfg.max_steps);
        REQUIRE(static_cast<int>(t.v.size()) == c.d_model);

        // Adam moves each coordinate by at most a few lr per step.
        double max_move = 0.0;
        const ForwardResult run = forward(c, p, prompt, site_bit(value_site(pw)));
        const auto v0 = run.trace.vec(value_site(pw), 0, 1);
        for (int i = 0; i < c.d_model; ++i)
            max_move = std::max(max_move, std::fabs(static_cast<double>(t.v[i]) - v0[i]));
        CHECK(max_move <= cfg.max_steps * cfg.lr * 3.2);
    }
}

TEST_CASE("value optimization climbs on a trained model") {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 32;
    c.n_heads = 2;
    c.d_mlp = 64;
    c.vocab_size = 64;
    c.max_seq_len = 8;
    c.seed = 5;

    WorldSpec ws;
    ws.n_subjects = 10;
    ws.n_relations = 2;
    ws.n_objects = 20;
    ws.n_facts = 20;
    ws.vocab_size = 64;
    ws.seed = 3;
    const FactWorld w = build_world(ws);

    TrainConfig tc;
    tc.steps = 600;
    tc.batch_size = 32;
    tc.seed = 9;
    const TrainResult r = train(c, init_params(c), w, tc);
    REQUIRE(r.final_recall == doctest::Approx(1.0));

    const auto cfs = sample_counterfacts(w, 1, 17);
    const FactTriple& f = w.facts[cfs[0].fact_index];
    ValueOptConfig cfg;
    for (Pathway pw : {Pathway::Mlp, Pathway::Attn}) {
        const ValueTarget t = optimize_target_value(c, r.params, fact_prompt(f), kSubjectPos,
                                                    cfs[0].new_object, pw, 0, cfg);
        CHECK(t.p_final >= 2.0 * t.p_start);
    }
}

TEST_CASE("value optimization stops immediately on an easy target") {
    const ModelConfig c = tiny_config();
    ModelParams p = init_params(c);
    // Sharpen the softmax so the model's own argmax carries P >= 0.95.
    for (auto& v : p.unembed.data) v *= 3000.0f;

    const std::vector<int> prompt = {0, 3, 4};
    const ForwardResult run = forward(c, p, prompt);
    int argmax = 0;
    for (int t = 1; t < c.vocab_size; ++t)
        if (run.probs.at(2, t) > run.probs.at(2, argmax)) argmax = t;
    REQUIRE(run.probs.at(2, argmax) >= 0.95);

    ValueOptConfig cfg;
    const ValueTarget t = optimize_target_value(c, p, prompt, 1, argmax, Pathway::Mlp, 1, cfg);
    CHECK(t.steps == 0);
    CHECK(t.p_final == t.p_start);
    const auto v0 = forward(c, p, prompt, site_bit(Site::MlpOut)).trace.vec(Site::MlpOut, 1, 1);
    CHECK(t.v == v0);
}

TEST_CASE("an overwhelming penalty keeps the current value") {
    const ModelConfig c = tiny_config();
    const ModelParams p = init_params(c);
    const std::vector<int> prompt = {0, 3, 4};

    ValueOptConfig cfg;
    cfg.beta = 1e12;
    const ValueTarget t = optimize_target_value(c, p, prompt, 1, 7, Pathway::Mlp, 1, cfg);
    CHECK(t.steps == 0);
    CHECK(t.p_final == t.p_start);
    const auto v0 = forward(c, p, prompt, site_bit(Site::MlpOut)).trace.vec(Site::MlpOut, 1, 1);
    CHECK(t.v == v0);
}

TEST_CASE("value optimization rejects bad inputs") {
    const ModelConfig c = tiny_config();
    const ModelParams p = init_params(c);
    const std::vector<int> prompt = {0, 3, 4};
    ValueOptConfig cfg;

    CHECK_THROWS_AS(optimize_target_value(c, p, prompt, 5, 7, Pathway::Mlp, 1, cfg),
                    std::invalid_argument);
    CHECK_THROWS_AS(optimize_target_value(c, p, prompt, 1, c.vocab_size, Pathway::Mlp, 1, cfg),
                    std::invalid_argument);
    CHECK_THROWS_AS(optimize_target_value(c, p, prompt, 1, 7, Pathway::Mlp, 9, cfg),
                    std::invalid_argument);
    ValueOptConfig bad = cfg;
    bad.lr = 0.0;
    CHECK_THROWS_AS(optimize_target_value(c, p, prompt, 1, 7, Pathway::Mlp, 1, bad),
                    std::invalid_argument);
    bad = cfg;
    bad.beta = -1.0;
    CHECK_THROWS_AS(optimize_target_value(c, p, prompt, 1, 7, Pathway::Mlp, 1, bad),
                    std::invalid_argument);
}
