#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <doctest.h>

#include "editlab/archive.hpp"
#include "editlab/model.hpp"

using namespace editlab;

namespace {

ModelConfig small_config() {
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

const std::vector<int> kTokens{0, 5, 11, 3};

}  // namespace

TEST_CASE("config validation rejects bad shapes") {
    ModelConfig c = small_config();
    CHECK_NOTHROW(c.validate());
    c.n_heads = 3;  // 8 % 3 != 0
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = small_config();
    c.n_layers = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("site names round-trip") {
    for (int i = 0; i < kNumSites; ++i) {
        const Site s = static_cast<Site>(i);
        CHECK(site_from_name(site_name(s)) == s);
    }
    CHECK_THROWS_AS(site_from_name("bogus"), std::invalid_argument);
}

TEST_CASE("forward rejects invalid input") {
    const ModelConfig c = small_config();
    const ModelParams p = init_params(c);
    CHECK_THROWS_AS(forward(c, p, {0, 99}), std::invalid_argument);
    CHECK_THROWS_AS(forward(c, p, std::vector<int>(9, 1)), std::invalid_argument);
    CHECK_THROWS_AS(forward(c, p, {}), std::invalid_argument);

    PatchSet bad_layer;
    bad_layer.add(5, 0, Site::Hidden, std::vector<float>(8, 0.0f));
    CHECK_THROWS_AS(forward(c, p, kTokens, kCaptureNone, &bad_layer), std::invalid_argument);

    PatchSet bad_size;
    bad_size.add(0, 0, Site::MlpKey, std::vector<float>(8, 0.0f));  // needs d_mlp = 16
    CHECK_THROWS_AS(forward(c, p, kTokens, kCaptureNone, &bad_size), std::invalid_argument);

    PatchSet dup;
    dup.add(0, 0, Site::Hidden, std::vector<float>(8, 0.0f));
    CHECK_THROWS_AS(dup.add(0, 0, Site::Hidden, std::vector<float>(8, 1.0f)),
                    std::invalid_argument);
}

TEST_CASE("softmax rows are valid distributions") {
    const ModelConfig c = small_config();
    const ModelParams p = init_params(c);
    const ForwardResult r = forward(c, p, kTokens);
    for (int i = 0; i < r.probs.rows; ++i) {
        double sum = 0.0;
        for (int j = 0; j < r.probs.cols; ++j) {
            CHECK(r.probs.at(i, j) >= 0.0f);
            sum += r.probs.at(i, j);
        }
        CHECK(std::fabs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("residual stream identity holds at every layer and position") {
    const ModelConfig c = small_config();
    const ModelParams p = init_params(c);
    const ForwardResult r = forward(c, p, kTokens, kCaptureAll);
    const auto& tr = r.trace;
    for (int l = 0; l < c.n_layers; ++l) {
        for (int pos = 0; pos < tr.seq_len; ++pos) {
            for (int j = 0; j < c.d_model; ++j) {
                float prev;
                if (l == 0) {
                    prev = p.tok_emb.at(kTokens[pos], j) + p.pos_emb.at(pos, j);
                } else {
                    prev = tr.layer_acts(Site::Hidden, l - 1).at(pos, j);
                }
                const float expect = prev + tr.layer_acts(Site::AttnOut, l).at(pos, j) +
                                     tr.layer_acts(Site::MlpOut, l).at(pos, j);
                CHECK(std::fabs(tr.layer_acts(Site::Hidden, l).at(pos, j) - expect) < 1e-5f);
            }
        }
    }
}

TEST_CASE("empty patch set and repeated runs are bit-identical") {
    const ModelConfig c = small_config();
    const ModelParams p = init_params(c);
    const ForwardResult plain = forward(c, p, kTokens);
    PatchSet empty;
    const ForwardResult patched = forward(c, p, kTokens, kCaptureNone, &empty);
    CHECK(plain.logits == patched.logits);
    CHECK(plain.logits == forward(c, p, kTokens).logits);
}

TEST_CASE("self-patching with a run's own activations changes nothing") {
    const ModelConfig c = small_config();
    const ModelParams p = init_params(c);
    const ForwardResult clean = forward(c, p, kTokens, kCaptureAll);

    PatchSet all;
    for (int s = 0; s < kNumSites; ++s)
        for (int l = 0; l < c.n_layers; ++l)
            for (int pos = 0; pos < static_cast<int>(kTokens.size()); ++pos)
                all.add(l, pos, static_cast<Site>(s), clean.trace.vec(static_cast<Site>(s), l, pos));

    const ForwardResult rerun = forward(c, p, kTokens, kCaptureNone, &all);
    CHECK(rerun.logits == clean.logits);
}

TEST_CASE("embedding noise perturbs output and is seed-deterministic") {
    const ModelConfig c = small_config();
    const ModelParams p = init_params(c);
    const EmbeddingNoise n1 = make_embedding_noise({1}, c.d_model, 0.5, 7);
    const EmbeddingNoise n2 = make_embedding_noise({1}, c.d_model, 0.5, 7);
    CHECK(n1.rows == n2.rows);

    const ForwardResult clean = forward(c, p, kTokens);
    const ForwardResult noisy = forward(c, p, kTokens, kCaptureNone, nullptr, &n1);
    CHECK(clean.logits.data != noisy.logits.data);
    CHECK(noisy.logits == forward(c, p, kTokens, kCaptureNone, nullptr, &n2).logits);
}

TEST_CASE("patching the last hidden state restores the clean readout") {
    const ModelConfig c = small_config();
    const ModelParams p = init_params(c);
    const int last = static_cast<int>(kTokens.size()) - 1;
    const ForwardResult clean = forward(c, p, kTokens, kCaptureAll);
    const EmbeddingNoise noise = make_embedding_noise({1}, c.d_model, 1.0, 3);

    PatchSet restore;
    restore.add(c.n_layers - 1, last, Site::Hidden,
                clean.trace.vec(Site::Hidden, c.n_layers - 1, last));
    const ForwardResult patched = forward(c, p, kTokens, kCaptureNone, &restore, &noise);
    for (int j = 0; j < c.vocab_size; ++j)
        CHECK(patched.logits.at(last, j) == clean.logits.at(last, j));
}

TEST_CASE("capture mask limits stored sites") {
    const ModelConfig c = small_config();
    const ModelParams p = init_params(c);
    const ForwardResult r = forward(c, p, kTokens, site_bit(Site::MlpKey));
    CHECK(r.trace.has(Site::MlpKey));
    CHECK_FALSE(r.trace.has(Site::Hidden));
    CHECK(r.trace.layer_acts(Site::MlpKey, 0).cols == c.d_mlp);
    CHECK_THROWS_AS(r.trace.layer_acts(Site::Hidden, 0), std::invalid_argument);
}

TEST_CASE("generate: length zero, greedy determinism, tie-break") {
    const ModelConfig c = small_config();
    ModelParams p = init_params(c);
    CHECK(generate(c, p, {0, 5}, 0) == std::vector<int>{0, 5});

    const auto g1 = generate(c, p, {0, 5}, 6);
    CHECK(g1.size() == 8);
    CHECK(g1 == generate(c, p, {0, 5}, 6));

    // Zero unembedding gives all-zero logits; ties resolve to token 0.
    for (float& v : p.unembed.data) v = 0.0f;
    CHECK(generate(c, p, {3}, 2) == std::vector<int>{3, 0, 0});
}

TEST_CASE("generate uses a rolling context window") {
    const ModelConfig c = small_config();
    const ModelParams p = init_params(c);
    const auto g = generate(c, p, {0, 1, 2, 3, 4, 5, 6, 7}, 3);
    CHECK(g.size() == 11);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
    const ModelConfig c = small_config();
    const ModelParams p = init_params(c);
    const std::string path = "model_test_ckpt.bin";
    save_checkpoint(path, c, p);
    const Checkpoint ck = load_checkpoint(path);
    CHECK(ck.config == c);
    CHECK(params_fingerprint(ck.params) == params_fingerprint(p));
    CHECK(ck.params.unembed == p.unembed);
    CHECK(forward(c, ck.params, kTokens).logits == forward(c, p, kTokens).logits);
    std::remove(path.c_str());
}

TEST_CASE("checkpoint load rejects truncation and shape edits") {
    const ModelConfig c = small_config();
    const ModelParams p = init_params(c);
    const std::string path = "model_test_ckpt2.bin";
    save_checkpoint(path, c, p);

    // Drop one element from a tensor; the loader must name it.
    Archive a = read_archive(path, "checkpoint");
    for (auto& t : a.tensors) {
        if (t.name == "layers.0.wq") {
            t.shape = {static_cast<int64_t>(t.element_count() - 1)};
            t.bytes.resize(t.bytes.size() - 4);
        }
    }
    write_archive(path, a);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("layers.0.wq"),
                         std::runtime_error);

    save_checkpoint(path, c, p);
    std::ifstream in(path, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(all.data(), static_cast<std::streamsize>(all.size() / 2));
    out.close();
    CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
    std::remove(path.c_str());
}

TEST_CASE("params fingerprint tracks weight changes") {
    const ModelConfig c = small_config();
    ModelParams p = init_params(c);
    const uint64_t before = params_fingerprint(p);
    CHECK(before == params_fingerprint(p));
    p.layers[1].w_out.at(0, 0) += 1.0f;
    CHECK(before != params_fingerprint(p));
}

TEST_CASE("gelu matches its derivative numerically") {
    for (float x : {-3.0f, -1.0f, -0.1f, 0.0f, 0.5f, 2.0f}) {
        const float h = 1e-3f;
        const float fd = (gelu(x + h) - gelu(x - h)) / (2.0f * h);
        CHECK(std::fabs(fd - gelu_grad(x)) < 1e-3f);
    }
}
