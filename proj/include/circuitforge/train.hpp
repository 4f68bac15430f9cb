#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "circuitforge/model.hpp"

namespace circuitforge::train {

// Gaussian weights with standard deviation `stddev`; layer-norm gains 1, biases 0.
std::shared_ptr<const WeightStore> random_weights(const ModelSpec& spec, std::uint64_t seed,
                                                  double stddev = 0.02);

struct ToyTrainConfig {
    ModelSpec spec;
    std::size_t steps = 8000;
    std::size_t batch = 32;
    double lr = 1e-3;
    // Group-lasso weight on each head's W_O block; concentrates the task in few heads.
    double head_sparsity = 1.0;
    // Keep training at least this long even once the accuracy target is met.
    std::size_t min_steps = 5000;
    std::uint64_t seed = 0;
    double target_accuracy = 0.95;
    std::size_t eval_every = 100;
    std::size_t eval_samples = 200;

    void validate() const;
};

struct TrainReport {
    std::shared_ptr<const WeightStore> weights;
    std::size_t steps_run = 0;
    double accuracy = 0.0;  // held-out ToyInduction accuracy at the final position
    double final_loss = 0.0;
    bool converged = false;
};

// A training sequence; targets[t] is the token expected after position t, or -1.
struct Example {
    std::vector<std::int32_t> tokens;
    std::vector<std::int32_t> targets;
};

struct LossAndGradients {
    double loss = 0.0;  // mean cross-entropy over targeted positions
    std::map<std::string, std::vector<double>> gradients;
};

// Double-precision forward and backward pass of an attention-only model.
// Errors: InvalidSpec (spec with MLPs), InvalidArgument (empty batch or no targets).
LossAndGradients loss_and_gradients(const WeightStore& weights, const std::vector<Example>& batch);

// Double-precision logits [seq, vocab] for one sequence, as seen by the trainer.
std::vector<double> trainer_logits(const WeightStore& weights, const std::vector<std::int32_t>& tokens);

// Fraction of ToyInduction clean prompts whose final-position argmax is the answer.
double induction_accuracy(const Model& model, std::size_t n, std::uint64_t seed);

// Adam on next-token loss over repeated-token and ToyInduction examples.
// Stops early once held-out accuracy reaches the target; never throws DidNotConverge.
TrainReport train_toy(const ToyTrainConfig& cfg);

}  // namespace circuitforge::train
