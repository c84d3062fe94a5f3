#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "editlab/fact_world.hpp"
#include "editlab/model.hpp"

namespace editlab {

// Adam with cosine learning-rate decay over a fixed step budget. All
// sampling is seed-deterministic.
struct TrainConfig {
    int steps = 3000;
    int batch_size = 64;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    bool cosine_decay = true;
    int eval_every = 100;  // recall evaluation cadence, in steps
    uint64_t seed = 0;
};

struct TrainLogRow {
    int step = 0;       // 1-based, the step just completed
    double loss = 0.0;  // minibatch cross-entropy at this step
    double recall = -1.0;  // train-split recall; -1 when not evaluated
};

struct TrainResult {
    ModelParams params;
    std::vector<TrainLogRow> log;  // one row per step
    double final_loss = 0.0;
    double final_recall = 0.0;     // train-split primary prompts
    double supervised_recall = 0.0;  // every supervised item
};

// Cross-entropy of the target token at the final position, averaged over
// the supervised items of the world. Throws on divergence (non-finite loss).
TrainResult train(const ModelConfig& c, ModelParams initial, const FactWorld& world,
                  const TrainConfig& tc);

// CSV columns: step, loss, recall (recall blank when not evaluated).
void write_train_log_csv(const std::string& path, const std::vector<TrainLogRow>& log);
std::vector<TrainLogRow> read_train_log_csv(const std::string& path);

// Batched greedy prediction at the final position of every prompt. All
// prompts must share one length.
std::vector<int> predict_argmax(const ModelConfig& c, const ModelParams& p,
                                const std::vector<std::vector<int>>& prompts);

double evaluate_recall(const ModelConfig& c, const ModelParams& p,
                       const std::vector<TrainItem>& items);

// Loss and parameter gradients for one batch, exposed for gradient checks.
struct BatchGrads {
    double loss = 0.0;
    ModelParams grads;
};
BatchGrads batch_gradients(const ModelConfig& c, const ModelParams& p,
                           const std::vector<TrainItem>& batch);

// Probability of `target` at the final position when `v` replaces the given
// site's activation at (layer, pos), plus the gradient of log P with
// respect to v. Site must be AttnOut or MlpOut.
struct ValuePatchGrad {
    double p_target = 0.0;
    double log_p_target = 0.0;
    std::vector<float> grad;
};
ValuePatchGrad value_patch_gradient(const ModelConfig& c, const ModelParams& p,
                                    const std::vector<int>& tokens, int target, int layer, int pos,
                                    Site site, const std::vector<float>& v);

}  // namespace editlab
