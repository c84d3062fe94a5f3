#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "editlab/matrix.hpp"

namespace editlab {

// Decoder-only pre-norm transformer, small enough to train on one CPU core.
// Every forward pass can capture activations and substitute stored ones at
// any (layer, position, site), which is what the tracing and editing
// machinery is built on.

struct ModelConfig {
    int n_layers = 8;
    int d_model = 64;
    int n_heads = 4;
    int d_mlp = 256;
    int vocab_size = 256;
    int max_seq_len = 16;
    uint64_t seed = 0;

    int d_head() const { return d_model / n_heads; }

    // Throws std::invalid_argument when a field is out of range.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

nlohmann::json config_to_json(const ModelConfig& c);
ModelConfig config_from_json(const nlohmann::json& j);

// Patchable / capturable activation sites inside one layer.
//   Hidden  : residual stream after the full block, d_model
//   AttnOut : attention block output added to the stream, d_model
//   MlpOut  : MLP block output added to the stream, d_model
//   MlpKey  : post-GELU MLP hidden activation, d_mlp
//   AttnKey : concatenated head outputs before the output projection, d_model
enum class Site { Hidden = 0, AttnOut = 1, MlpOut = 2, MlpKey = 3, AttnKey = 4 };

inline constexpr int kNumSites = 5;
inline constexpr uint32_t site_bit(Site s) { return 1u << static_cast<int>(s); }
inline constexpr uint32_t kCaptureNone = 0;
inline constexpr uint32_t kCaptureAll = (1u << kNumSites) - 1;

const char* site_name(Site s);
Site site_from_name(const std::string& name);
int site_dim(Site s, const ModelConfig& c);

// GELU (tanh approximation). The trainer's backward pass differentiates
// exactly this function, so both live here.
inline float gelu(float x) {
    const float u = 0.7978845608028654f * (x + 0.044715f * x * x * x);
    return 0.5f * x * (1.0f + std::tanh(u));
}

inline float gelu_grad(float x) {
    const float c = 0.7978845608028654f;
    const float u = c * (x + 0.044715f * x * x * x);
    const float t = std::tanh(u);
    const float sech2 = 1.0f - t * t;
    return 0.5f * (1.0f + t) + 0.5f * x * sech2 * c * (1.0f + 3.0f * 0.044715f * x * x);
}

// All linear weights are stored output-major: y = W x with W (d_out, d_in).
struct LayerParams {
    std::vector<float> ln1_g, ln1_b;  // d_model
    MatF wq, wk, wv, wo;              // d_model x d_model
    std::vector<float> ln2_g, ln2_b;  // d_model
    MatF w_in;                        // d_mlp x d_model
    MatF w_out;                       // d_model x d_mlp
};

struct ModelParams {
    MatF tok_emb;  // vocab_size x d_model
    MatF pos_emb;  // max_seq_len x d_model
    std::vector<LayerParams> layers;
    std::vector<float> ln_f_g, ln_f_b;  // d_model
    MatF unembed;                       // vocab_size x d_model
};

ModelParams init_params(const ModelConfig& c);

// Calls fn(name, data, element_count) for every tensor in a fixed order.
void for_each_tensor(ModelParams& p,
                     const std::function<void(const std::string&, float*, size_t)>& fn);
void for_each_tensor(const ModelParams& p,
                     const std::function<void(const std::string&, const float*, size_t)>& fn);

uint64_t params_fingerprint(const ModelParams& p);

// Activation replacements, keyed by (layer, position, site).
struct PatchSet {
    struct Entry {
        int layer = 0;
        int pos = 0;
        Site site = Site::Hidden;
        std::vector<float> value;
    };
    std::vector<Entry> entries;

    // Throws std::invalid_argument on a duplicate (layer, pos, site) key.
    void add(int layer, int pos, Site site, std::vector<float> value);
    const Entry* find(int layer, int pos, Site site) const;
    bool empty() const { return entries.empty(); }
};

// Additive corruption of token embeddings before layer 0: rows.row(i) is
// added at positions[i]. Built once per trace and shared across runs.
struct EmbeddingNoise {
    std::vector<int> positions;
    MatF rows;  // positions.size() x d_model
};

EmbeddingNoise make_embedding_noise(const std::vector<int>& positions, int d_model, double scale,
                                    uint64_t seed);

struct ActivationTrace {
    int n_layers = 0;
    int seq_len = 0;
    uint32_t mask = kCaptureNone;
    // acts[site][layer] is seq_len x site_dim; empty unless the site is in mask.
    std::array<std::vector<MatF>, kNumSites> acts;

    bool has(Site s) const { return (mask & site_bit(s)) != 0; }
    const MatF& layer_acts(Site s, int layer) const;
    std::vector<float> vec(Site s, int layer, int pos) const;
};

struct ForwardResult {
    MatF logits;  // seq_len x vocab_size
    MatF probs;   // row-wise softmax of logits
    ActivationTrace trace;
};

ForwardResult forward(const ModelConfig& c, const ModelParams& p, const std::vector<int>& tokens,
                      uint32_t capture_mask = kCaptureNone, const PatchSet* patches = nullptr,
                      const EmbeddingNoise* noise = nullptr);

// Greedy continuation; ties go to the lowest token id. When the sequence
// outgrows max_seq_len the context is the trailing window.
std::vector<int> generate(const ModelConfig& c, const ModelParams& p, std::vector<int> prompt,
                          int length);

struct Checkpoint {
    ModelConfig config;
    ModelParams params;
};

void save_checkpoint(const std::string& path, const ModelConfig& c, const ModelParams& p);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace editlab
