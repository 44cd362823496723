#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mergeforge/model.hpp"
#include "mergeforge/tasks.hpp"

namespace mergeforge {

// A ParameterSet-shaped delta tuned - base (the task vector). Values are
// stored so that base + delta reproduces the tuned checkpoint bit-exactly.
class TaskVector {
public:
    TaskVector() = default;
    TaskVector(const ParameterSet& base, const ParameterSet& tuned);
    static TaskVector from_delta(ParameterSet delta);

    const ParameterSet& delta() const { return delta_; }
    uint64_t manifest_hash() const { return delta_.manifest_hash(); }

    std::vector<double> flatten() const { return delta_.flatten(); }
    double norm() const;

private:
    ParameterSet delta_;
};

TaskVector task_vector(const ParameterSet& base, const ParameterSet& tuned);
// base + tau, elementwise; reproduces the original tuned checkpoint bitwise.
ParameterSet reconstruct(const ParameterSet& base, const TaskVector& tau);

struct TrainConfig {
    double learning_rate = 3e-4;
    int batch_size = 16;
    int epochs = 40;
    uint64_t seed = 0;
    double beta1 = 0.9;   // Adam defaults
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainLog {
    std::vector<double> epoch_loss;  // mean completion cross-entropy per epoch
};

// Supervised fine-tuning with completion-only cross-entropy: the loss covers
// the answer tokens and the closing EOS, never the prompt positions. Returns
// a new ParameterSet; the base is untouched. With an empty train split the
// output equals the base bitwise.
ParameterSet finetune(const ModelConfig& config, const ParameterSet& base, const TaskDataset& task,
                      const TrainConfig& train_config, TrainLog* log = nullptr);

// Tokenized completion example: input tokens, the row of each predicted
// position, and the target token ids (answer bytes then EOS).
struct CompletionItem {
    std::vector<int32_t> input;
    std::vector<int32_t> rows;
    std::vector<int32_t> targets;
};
CompletionItem completion_item(const TaskExample& example);

}  // namespace mergeforge
