#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mergeforge/model.hpp"
#include "mergeforge/tape.hpp"

namespace mergeforge {

enum class DivergenceKind { KL, JS };

inline constexpr double kEpsilonFloor = 1e-12;

const char* divergence_name(DivergenceKind kind);
DivergenceKind divergence_from_name(const std::string& name);

// KL(mu || nu) in nats. mu is the reference distribution; nu (and only nu) is
// floored at eps and renormalized before the ratio, which removes the
// singularity without biasing the reference. Terms with mu(i) == 0 contribute
// zero. eps <= 0 disables flooring.
double kl_divergence(std::span<const double> mu, std::span<const double> nu,
                     double eps = kEpsilonFloor);

// JS(mu, nu) = (KL(mu||m) + KL(nu||m)) / 2 with m the midpoint; bounded by
// ln 2. The non-reference side nu is floored as in kl_divergence.
double js_divergence(std::span<const double> mu, std::span<const double> nu,
                     double eps = kEpsilonFloor);

// Shannon entropy -sum p log p (nats), 0 log 0 = 0.
double shannon_entropy(std::span<const double> p);
// Cross entropy -sum p log q (nats); terms with p(i) == 0 contribute zero.
double cross_entropy(std::span<const double> p, std::span<const double> q);

struct EstimatorConfig {
    DivergenceKind kind = DivergenceKind::JS;
    int max_new_tokens = 32;
    double epsilon_floor = kEpsilonFloor;
};

struct PerExampleDivergence {
    size_t example_id;
    std::vector<double> per_token;
    int t_x;  // generated steps counted, EOS step inclusive
};

struct DivergenceEstimate {
    double value = 0.0;  // mean over examples of mean over tokens
    std::vector<PerExampleDivergence> per_example;
    EstimatorConfig config;
};

// The reference side of the sequence-level estimator: greedy generation from
// the reference model with the per-step distributions stored. Independent of
// any candidate, so traces are computed once and reused.
struct ReferenceTrace {
    std::vector<int32_t> prompt_toks;               // BOS + prompt bytes
    std::vector<int32_t> generated;                 // includes final EOS if emitted
    std::vector<std::vector<double>> step_probs;    // one distribution per generated token
    std::vector<int32_t> extended;                  // prompt_toks + generated
    int t_x = 0;
};

ReferenceTrace trace_reference(const LanguageModel& reference, const std::string& prompt,
                               int max_new_tokens);

// Per-token divergence of the candidate against a stored trace: one forward
// pass over the extended sequence, compared row-by-row with the stored
// reference distributions.
std::vector<double> per_token_divergence(const LanguageModel& candidate,
                                         const ReferenceTrace& trace, DivergenceKind kind,
                                         double eps = kEpsilonFloor);

// Sequence-level divergence D_X(reference || candidate) over a prompt set,
// aggregated as mean over prompts of mean over generated tokens.
DivergenceEstimate sequence_divergence(const LanguageModel& reference,
                                       const LanguageModel& candidate,
                                       std::span<const std::string> prompts, DivergenceKind kind,
                                       int max_new_tokens);

// Tape-embedded mean-per-token divergence for one trace. candidate_log_probs
// must be the [t_x x vocab] node of candidate log-probabilities at the
// generated positions; the reference side enters as constants, so gradients
// flow only through the candidate.
NodeId divergence_loss_vs_trace(Tape& tape, NodeId candidate_log_probs,
                                const ReferenceTrace& trace, DivergenceKind kind,
                                double eps = kEpsilonFloor);

// Rows of the extended sequence whose forward output predicts each generated
// token (for forward_log_probs out_rows).
std::vector<int32_t> trace_prediction_rows(const ReferenceTrace& trace);

// CSV matrix of D_{X_i}(theta_i || theta_j): rows reference task, columns candidate.
void write_divergence_heatmap_csv(const std::filesystem::path& file,
                                  std::span<const std::string> task_ids,
                                  const std::vector<std::vector<double>>& matrix);

}  // namespace mergeforge
