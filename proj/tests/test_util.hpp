#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mergeforge/divergence.hpp"
#include "mergeforge/model.hpp"
#include "mergeforge/rng.hpp"
#include "mergeforge/tasks.hpp"
#include "mergeforge/trainer.hpp"

namespace mftest {

using namespace mergeforge;

// Small configs used across the tests. micro stays under 1e4 parameters for
// exhaustive finite-difference sweeps.
ModelConfig micro_config();  // d_model 8, 1 block, 2 heads
ModelConfig tiny_config();   // d_model 16, 2 blocks, 2 heads

// Central finite difference of f at x, step h.
double central_diff(const std::function<double(double)>& f, double x, double h);

// Independent straight-line forward pass (plain loops, no tape, no Eigen):
// next-token distribution for the production architecture.
std::vector<double> reference_next_token_distribution(const ModelConfig& config,
                                                      const ParameterSet& params,
                                                      std::span<const int32_t> context);

std::vector<double> random_simplex(Rng& rng, size_t dim);

// Hand-built single-layer ParameterSet wrapping one flat vector, for merge
// math tests that do not need a real model shape.
ParameterSet flat_parameter_set(const std::vector<double>& values);
TaskVector flat_task_vector(const std::vector<double>& values);

// A tiny fixture pair: two quickly trained checkpoints on two small
// support-disjoint tasks over the tiny config (shared across test cases).
struct TrainedPair {
    ModelConfig config;
    ParameterSet base;
    std::vector<TaskDataset> tasks;
    std::vector<ParameterSet> tuned;
    std::vector<TaskVector> taus;
};
const TrainedPair& trained_pair();

// Out-of-band evaluation of the summed divergence objective at the given
// coefficients, from fixed reference traces (no tape involved).
double coeff_objective(const ModelConfig& config, const ParameterSet& base,
                       std::span<const TaskVector> taus,
                       const std::vector<std::vector<ReferenceTrace>>& traces,
                       std::span<const double> gamma_task_level, DivergenceKind kind);

}  // namespace mftest
