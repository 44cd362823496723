#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mergeforge/divergence.hpp"
#include "mergeforge/model.hpp"
#include "mergeforge/tasks.hpp"
#include "mergeforge/trainer.hpp"

namespace mergeforge {

struct CheckReport {
    std::string check_id;
    bool passed = false;
    nlohmann::json measured;    // quantities observed by the check
    nlohmann::json tolerances;  // thresholds the verdict was computed against
    std::string note;

    nlohmann::json to_json() const;
};

// Weight-disentanglement at desk scale: on support-disjoint tasks, the merged
// model's next-token distributions along each fine-tuned model's greedy
// trajectories must stay within epsilon nats/token (JS) of that fine-tuned
// model. Also reports the summed merging loss so the zero-loss <=>
// disentanglement correspondence is visible in one place. Refuses task sets
// whose prompt supports overlap.
CheckReport check_disentanglement(const ModelConfig& config, const ParameterSet& merged,
                                  std::span<const ParameterSet> finetuned,
                                  std::span<const TaskDataset> tasks, double epsilon = 0.1,
                                  int max_new_tokens = 32);

// Distribution-shift bound: |JS_X - JS_Xtilde| <= 2 ln 2 * TV(X, Xtilde) for
// empirical prompt distributions over a shared universe.
struct EmpiricalPrompts {
    std::vector<std::string> prompts;  // shared universe
    std::vector<double> p;             // weights of X (simplex over prompts)
    std::vector<double> q;             // weights of Xtilde
};
CheckReport check_tv_bound(const ModelConfig& config, const ParameterSet& theta_t,
                           const ParameterSet& merged, const EmpiricalPrompts& dists,
                           int max_new_tokens = 32);

// Cross-entropy identity H(p, q) = H(p) + KL(p || q) on random simplex pairs.
CheckReport check_cross_entropy_identity(int n_trials, int dim, uint64_t seed);

// The Kracher (centroid) mean lies in span{tau_t}: least-squares projection
// residual relative to |tau_F| stays below 1e-8.
CheckReport check_kracher_span(std::span<const TaskVector> taus);

}  // namespace mergeforge
