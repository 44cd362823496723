#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mergeforge/divergence.hpp"
#include "mergeforge/model.hpp"
#include "mergeforge/tasks.hpp"
#include "mergeforge/trainer.hpp"

namespace mergeforge {

enum class MergeLevel { task, layer };

const char* merge_level_name(MergeLevel level);
MergeLevel merge_level_from_name(const std::string& name);

// The merging coefficients Gamma: one real per task (task level) or one per
// (task, layer) pair (layer level, task-major order). No sign constraint.
struct MergeCoefficients {
    MergeLevel level = MergeLevel::task;
    std::vector<std::string> task_ids;
    size_t n_layers = 0;  // meaningful at layer level
    std::vector<double> values;

    static MergeCoefficients task_level(std::vector<std::string> task_ids,
                                        std::vector<double> values);
    static MergeCoefficients layer_level(std::vector<std::string> task_ids, size_t n_layers,
                                         std::vector<double> values);

    size_t n_tasks() const { return task_ids.size(); }
    // Coefficient applied to layer l of task t (level-independent accessor).
    double value(size_t task, size_t layer) const;
    void validate() const;
};

// theta_0 + sum_t Gamma_t tau_t, with per-layer coefficients at layer level.
ParameterSet apply_task_arithmetic(const ParameterSet& base, std::span<const TaskVector> taus,
                                   const MergeCoefficients& coeffs);

// Uniform elementwise average of >= 2 compatible checkpoints.
ParameterSet model_average(std::span<const ParameterSet> checkpoints);

// Spherical linear interpolation over normalized task vectors:
//   theta_0 + sin((1-t)W)/sin(W) tau_1/|tau_1| + sin(tW)/sin(W) tau_2/|tau_2|
// with W the angle between the flattened vectors. Near-parallel vectors
// (W < 1e-8) fall back to linear interpolation of the normalized vectors.
ParameterSet slerp_merge(const ParameterSet& base, const TaskVector& tau1, const TaskVector& tau2,
                         double t);

// n-ary SLERP: weighted Frechet mean of the normalized task vectors on the
// unit hypersphere (iterative tangent-space averaging), rescaled by the
// weighted arithmetic mean of the original norms.
ParameterSet multi_slerp_merge(const ParameterSet& base, std::span<const TaskVector> taus,
                               std::span<const double> weights);

// The Multi-SLERP core: weighted Frechet mean of unit vectors on the sphere,
// iterated until the tangent update norm drops below 1e-10.
std::vector<double> sphere_frechet_mean(std::span<const std::vector<double>> units,
                                        std::span<const double> weights);

// TIES: per task keep the top mask_rate fraction of coordinates by absolute
// value, elect a per-coordinate sign from the sum of trimmed values, average
// the sign-consistent survivors, and add lambda times the result to the base.
ParameterSet ties_merge(const ParameterSet& base, std::span<const TaskVector> taus,
                        double mask_rate, double lambda);

// Arithmetic mean of the task vectors: the minimizer of sum_t |tau - tau_t|^2.
TaskVector kracher_mean(std::span<const TaskVector> taus);

struct CoeffOptimConfig {
    double lr = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int epochs = 4;
    int batch_per_task = 4;     // iteration batch is 4 x n prompts
    int budget_per_task = 0;    // validation prompts used per task; 0 = all
    int max_new_tokens = 32;
    double init_value = 0.5;
    uint64_t seed = 0;
};

struct MergeIteration {
    int iteration;
    double loss;
    std::vector<double> gamma;
};

struct MergeLog {
    std::string method;
    nlohmann::json spec;
    std::vector<MergeIteration> iterations;
    MergeCoefficients final_coefficients;
};

void write_merge_log(const std::filesystem::path& file, const MergeLog& log);

// Divergence-guided coefficient estimation: minimizes
//   sum_t D_{X_t}(theta_t || theta_0 + sum Gamma tau)
// over Gamma with Adam, using greedy traces of each fine-tuned model as the
// fixed reference side. dL/dGamma_t is the inner product of the parameter
// gradient with tau_t (restricted per layer at layer level).
MergeCoefficients optimize_divergence_coeffs(const ModelConfig& config, const ParameterSet& base,
                                             std::span<const TaskVector> taus,
                                             std::span<const TaskDataset> tasks,
                                             DivergenceKind kind, MergeLevel level,
                                             const CoeffOptimConfig& opt, MergeLog* log = nullptr);

// AdaMerging-style baseline: same loop, loss = mean Shannon entropy of the
// merged model's own greedy step distributions on unlabeled prompts.
MergeCoefficients entropy_min_coeffs(const ModelConfig& config, const ParameterSet& base,
                                     std::span<const TaskVector> taus,
                                     std::span<const std::string> unlabeled_prompts,
                                     MergeLevel level, const CoeffOptimConfig& opt,
                                     MergeLog* log = nullptr);

}  // namespace mergeforge
