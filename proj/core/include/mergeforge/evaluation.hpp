#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mergeforge/divergence.hpp"
#include "mergeforge/model.hpp"
#include "mergeforge/tasks.hpp"
#include "mergeforge/trainer.hpp"

namespace mergeforge {

enum class MetricKind { accuracy, rouge1 };

const char* metric_name(MetricKind m);
MetricKind metric_from_name(const std::string& name);
MetricKind default_metric(const TaskDataset& task);

struct PerfResult {
    std::string task_id;
    MetricKind metric = MetricKind::accuracy;
    double value = 0.0;  // in [0, 1]
    size_t n_examples = 0;
};

// Test-split performance. Accuracy: greedy generation truncated at EOS,
// whitespace-trimmed, exactly equal to the answer. rouge1: mean unigram-F1
// over whitespace tokens.
PerfResult perf(const LanguageModel& model, const TaskDataset& task, MetricKind metric,
                int max_new_tokens = 32);

// Unigram F1 between one generation and one reference answer.
double rouge1_f1(const std::string& generated, const std::string& answer);

struct ANPReport {
    std::vector<std::string> merged_task_ids;
    std::vector<double> per_task_ratios;  // may exceed 1
    double anp = 0.0;                     // mean of the ratios
    std::string method;
};

// Average Normalized Performance: mean over tasks of merged performance over
// the matching fine-tuned model's performance (both on test splits).
ANPReport anp(const ModelConfig& config, const ParameterSet& merged,
              std::span<const TaskDataset> tasks, std::span<const ParameterSet> finetuned,
              MetricKind metric, int max_new_tokens = 32, const std::string& method = "");

// Spearman rank correlation with average-rank tie handling. A constant input
// vector has no defined ranking and raises ContractViolation.
double spearman(std::span<const double> xs, std::span<const double> ys);

struct CorrelationReport {
    std::vector<std::string> task_ids;
    std::vector<double> per_task;  // Spearman of (-D_{X_i}(theta_i||theta_j))_j vs PERF(theta_j, i)_j
    double average = 0.0;
    std::vector<std::vector<double>> divergence_matrix;  // D_{X_i}(theta_i || theta_j)
    std::vector<std::vector<double>> perf_matrix;        // PERF(theta_j; i)
};

// Divergences on validation prompts, performance on test splits.
CorrelationReport divergence_perf_correlation(const ModelConfig& config,
                                              std::span<const ParameterSet> checkpoints,
                                              std::span<const TaskDataset> tasks,
                                              DivergenceKind kind, int max_new_tokens = 32);

// Pairwise cosine similarities of flattened task vectors; unit diagonal.
std::vector<std::vector<double>> cosine_similarity_matrix(std::span<const TaskVector> taus);

struct SweepExperiment {
    std::vector<size_t> task_indices;  // into the sweep's task list
    ANPReport report;
};

struct SweepReport {
    int k = 0;
    std::vector<SweepExperiment> experiments;  // all C(n, k) combinations
    double mean_anp = 0.0;
    double ci95_margin = 0.0;  // 1.96 * stderr, normal approximation
};

// Merges every k-combination of tasks with the supplied method and scores it.
using MergeFn =
    std::function<ParameterSet(std::span<const size_t> task_indices)>;
std::vector<SweepReport> merge_sweep(const ModelConfig& config, const MergeFn& merge,
                                     std::span<const TaskDataset> tasks,
                                     std::span<const ParameterSet> finetuned, MetricKind metric,
                                     int k_min, int k_max, int max_new_tokens = 32,
                                     const std::string& method = "");

std::vector<std::vector<size_t>> combinations(size_t n, size_t k);

// 1.96 * stderr under the normal approximation; 0 for fewer than 2 values.
double ci95_margin(std::span<const double> values);

void write_sweep_csv(const std::filesystem::path& file, const std::string& method,
                     const std::string& level, std::span<const TaskDataset> tasks,
                     std::span<const SweepReport> reports);
void write_sweep_summary_json(const std::filesystem::path& file, const std::string& method,
                              std::span<const SweepReport> reports);
void write_matrix_csv(const std::filesystem::path& file, std::span<const std::string> row_ids,
                      std::span<const std::string> col_ids,
                      const std::vector<std::vector<double>>& matrix,
                      const std::string& corner = "row\\col");

}  // namespace mergeforge
