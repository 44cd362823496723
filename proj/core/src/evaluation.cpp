#include "mergeforge/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "mergeforge/errors.hpp"
#include "mergeforge/threading.hpp"

namespace mergeforge {

const char* metric_name(MetricKind m) { return m == MetricKind::accuracy ? "accuracy" : "rouge1"; }

MetricKind metric_from_name(const std::string& name) {
    if (name == "accuracy") return MetricKind::accuracy;
    if (name == "rouge1") return MetricKind::rouge1;
    throw ContractViolation("unknown metric: " + name);
}

MetricKind default_metric(const TaskDataset& task) {
    return task.kind == TaskKind::generation ? MetricKind::rouge1 : MetricKind::accuracy;
}

namespace {

std::string trim(const std::string& s) {
    const char* ws = " \t\r\n";
    const size_t b = s.find_first_not_of(ws);
    if (b == std::string::npos) return "";
    const size_t e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

std::vector<std::string> whitespace_tokens(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

}  // namespace

double rouge1_f1(const std::string& generated, const std::string& answer) {
    auto gen = whitespace_tokens(generated);
    auto ref = whitespace_tokens(answer);
    if (gen.empty() && ref.empty()) return 1.0;
    if (gen.empty() || ref.empty()) return 0.0;
    std::map<std::string, int> counts;
    for (const auto& t : ref) ++counts[t];
    int overlap = 0;
    for (const auto& t : gen) {
        auto it = counts.find(t);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    if (overlap == 0) return 0.0;
    const double p = static_cast<double>(overlap) / static_cast<double>(gen.size());
    const double r = static_cast<double>(overlap) / static_cast<double>(ref.size());
    return 2.0 * p * r / (p + r);
}

PerfResult perf(const LanguageModel& model, const TaskDataset& task, MetricKind metric,
                int max_new_tokens) {
    const auto examples = task.split_examples(Split::test);
    if (examples.empty()) throw ContractViolation("task " + task.task_id + " has an empty test split");

    std::vector<double> scores(examples.size(), 0.0);
    parallel_for(examples.size(), [&](size_t i) {
        auto gen = model.greedy_generate(tokens::prompt_tokens(examples[i].prompt), max_new_tokens);
        const std::string text = trim(tokens::decode(gen.tokens));
        const std::string answer = trim(examples[i].answer);
        scores[i] = metric == MetricKind::accuracy ? (text == answer ? 1.0 : 0.0)
                                                   : rouge1_f1(text, answer);
    });

    double s = 0.0;
    for (double v : scores) s += v;
    return {task.task_id, metric, s / static_cast<double>(examples.size()), examples.size()};
}

ANPReport anp(const ModelConfig& config, const ParameterSet& merged,
              std::span<const TaskDataset> tasks, std::span<const ParameterSet> finetuned,
              MetricKind metric, int max_new_tokens, const std::string& method) {
    if (tasks.size() != finetuned.size())
        throw ContractViolation("anp needs one fine-tuned checkpoint per task");

    ANPReport report;
    report.method = method;
    LanguageModel merged_model(config, merged);
    for (size_t t = 0; t < tasks.size(); ++t) {
        report.merged_task_ids.push_back(tasks[t].task_id);
        const double denom =
            perf(LanguageModel(config, finetuned[t]), tasks[t], metric, max_new_tokens).value;
        if (denom <= 0.0)
            throw ContractViolation("fine-tuned performance is zero on task " + tasks[t].task_id +
                                    "; ANP is undefined");
        const double num = perf(merged_model, tasks[t], metric, max_new_tokens).value;
        report.per_task_ratios.push_back(num / denom);
    }
    double s = 0.0;
    for (double v : report.per_task_ratios) s += v;
    report.anp = s / static_cast<double>(report.per_task_ratios.size());
    return report;
}

namespace {

std::vector<double> average_ranks(std::span<const double> xs) {
    const size_t n = xs.size();
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && xs[idx[j + 1]] == xs[idx[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double spearman(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size()) throw ContractViolation("spearman: length mismatch");
    if (xs.size() < 3) throw ContractViolation("spearman needs at least 3 points");
    auto rx = average_ranks(xs);
    auto ry = average_ranks(ys);

    const double n = static_cast<double>(xs.size());
    const double mean = (n + 1.0) / 2.0;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        const double dx = rx[i] - mean;
        const double dy = ry[i] - mean;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0)
        throw ContractViolation("spearman undefined for a constant input vector");
    return sxy / std::sqrt(sxx * syy);
}

CorrelationReport divergence_perf_correlation(const ModelConfig& config,
                                              std::span<const ParameterSet> checkpoints,
                                              std::span<const TaskDataset> tasks,
                                              DivergenceKind kind, int max_new_tokens) {
    if (tasks.size() < 3) throw ContractViolation("correlation needs at least 3 tasks");
    if (checkpoints.size() != tasks.size())
        throw ContractViolation("correlation needs one checkpoint per task");
    const size_t n = tasks.size();

    CorrelationReport report;
    for (const auto& t : tasks) report.task_ids.push_back(t.task_id);
    report.divergence_matrix.assign(n, std::vector<double>(n, 0.0));
    report.perf_matrix.assign(n, std::vector<double>(n, 0.0));

    for (size_t i = 0; i < n; ++i) {
        // Reference traces depend only on theta_i; compute once per row.
        LanguageModel ref(config, checkpoints[i]);
        const auto prompts = tasks[i].prompts(Split::validation);
        std::vector<ReferenceTrace> traces(prompts.size());
        parallel_for(prompts.size(), [&](size_t p) {
            traces[p] = trace_reference(ref, prompts[p], max_new_tokens);
        });
        for (size_t j = 0; j < n; ++j) {
            if (j == i) continue;  // D(theta_i || theta_i) = 0
            LanguageModel cand(config, checkpoints[j]);
            std::vector<double> means(traces.size());
            parallel_for(traces.size(), [&](size_t p) {
                auto per_token = per_token_divergence(cand, traces[p], kind);
                double s = 0.0;
                for (double v : per_token) s += v;
                means[p] = s / static_cast<double>(traces[p].t_x);
            });
            double acc = 0.0;
            for (double v : means) acc += v;
            report.divergence_matrix[i][j] = acc / static_cast<double>(means.size());
        }
        for (size_t j = 0; j < n; ++j) {
            report.perf_matrix[i][j] =
                perf(LanguageModel(config, checkpoints[j]), tasks[i], default_metric(tasks[i]),
                     max_new_tokens)
                    .value;
        }
    }

    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        std::vector<double> neg_div(n);
        for (size_t j = 0; j < n; ++j) neg_div[j] = -report.divergence_matrix[i][j];
        report.per_task.push_back(spearman(neg_div, report.perf_matrix[i]));
        acc += report.per_task.back();
    }
    report.average = acc / static_cast<double>(n);
    return report;
}

std::vector<std::vector<double>> cosine_similarity_matrix(std::span<const TaskVector> taus) {
    if (taus.size() < 2) throw ContractViolation("cosine matrix needs at least 2 vectors");
    std::vector<std::vector<double>> flats;
    std::vector<double> norms;
    for (const auto& tau : taus) {
        flats.push_back(tau.flatten());
        double s = 0.0;
        for (double v : flats.back()) s += v * v;
        if (s == 0.0) throw ContractViolation("cosine similarity undefined for a zero task vector");
        norms.push_back(std::sqrt(s));
    }
    const size_t n = taus.size();
    std::vector<std::vector<double>> out(n, std::vector<double>(n, 0.0));
    for (size_t i = 0; i < n; ++i) {
        out[i][i] = 1.0;
        for (size_t j = i + 1; j < n; ++j) {
            double dot = 0.0;
            for (size_t k = 0; k < flats[i].size(); ++k) dot += flats[i][k] * flats[j][k];
            out[i][j] = out[j][i] = dot / (norms[i] * norms[j]);
        }
    }
    return out;
}

std::vector<std::vector<size_t>> combinations(size_t n, size_t k) {
    std::vector<std::vector<size_t>> out;
    if (k > n || k == 0) return out;
    std::vector<size_t> combo(k);
    std::iota(combo.begin(), combo.end(), 0);
    for (;;) {
        out.push_back(combo);
        // advance lexicographically
        size_t i = k;
        while (i > 0) {
            --i;
            if (combo[i] != i + n - k) {
                ++combo[i];
                for (size_t j = i + 1; j < k; ++j) combo[j] = combo[j - 1] + 1;
                break;
            }
            if (i == 0) return out;
        }
    }
}

std::vector<SweepReport> merge_sweep(const ModelConfig& config, const MergeFn& merge,
                                     std::span<const TaskDataset> tasks,
                                     std::span<const ParameterSet> finetuned, MetricKind metric,
                                     int k_min, int k_max, int max_new_tokens,
                                     const std::string& method) {
    const size_t n = tasks.size();
    if (k_min < 2 || static_cast<size_t>(k_max) > n || k_min > k_max)
        throw ContractViolation("sweep k range must lie within [2, n]");

    // Denominators PERF(theta_t; t) are combination-independent; compute once.
    std::vector<double> denom(n);
    for (size_t t = 0; t < n; ++t) {
        denom[t] = perf(LanguageModel(config, finetuned[t]), tasks[t], metric, max_new_tokens).value;
        if (denom[t] <= 0.0)
            throw ContractViolation("fine-tuned performance is zero on task " + tasks[t].task_id +
                                    "; ANP is undefined");
    }

    std::vector<SweepReport> reports;
    for (int k = k_min; k <= k_max; ++k) {
        SweepReport rep;
        rep.k = k;
        for (const auto& combo : combinations(n, static_cast<size_t>(k))) {
            ParameterSet merged = merge(combo);
            LanguageModel merged_model(config, merged);
            SweepExperiment exp;
            exp.task_indices = combo;
            exp.report.method = method;
            for (size_t idx : combo) {
                exp.report.merged_task_ids.push_back(tasks[idx].task_id);
                const double num = perf(merged_model, tasks[idx], metric, max_new_tokens).value;
                exp.report.per_task_ratios.push_back(num / denom[idx]);
            }
            double s = 0.0;
            for (double v : exp.report.per_task_ratios) s += v;
            exp.report.anp = s / static_cast<double>(exp.report.per_task_ratios.size());
            rep.experiments.push_back(std::move(exp));
        }
        double mean = 0.0;
        std::vector<double> anps;
        for (const auto& e : rep.experiments) anps.push_back(e.report.anp);
        for (double v : anps) mean += v;
        mean /= static_cast<double>(anps.size());
        rep.mean_anp = mean;
        rep.ci95_margin = ci95_margin(anps);
        reports.push_back(std::move(rep));
    }
    return reports;
}

double ci95_margin(std::span<const double> values) {
    if (values.size() < 2) return 0.0;
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    const double stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
    return 1.96 * stddev / std::sqrt(static_cast<double>(values.size()));
}

void write_sweep_csv(const std::filesystem::path& file, const std::string& method,
                     const std::string& level, std::span<const TaskDataset> tasks,
                     std::span<const SweepReport> reports) {
    std::ofstream out(file);
    if (!out) throw ContractViolation("cannot write " + file.string());
    out.precision(17);
    out << "method,level,k,tasks,per_task_ratios,anp\n";
    for (const auto& rep : reports) {
        for (const auto& e : rep.experiments) {
            out << method << "," << level << "," << rep.k << ",";
            for (size_t i = 0; i < e.task_indices.size(); ++i) {
                if (i) out << "+";
                out << tasks[e.task_indices[i]].task_id;
            }
            out << ",";
            for (size_t i = 0; i < e.report.per_task_ratios.size(); ++i) {
                if (i) out << ";";
                out << e.report.per_task_ratios[i];
            }
            out << "," << e.report.anp << "\n";
        }
    }
}

void write_sweep_summary_json(const std::filesystem::path& file, const std::string& method,
                              std::span<const SweepReport> reports) {
    nlohmann::json j;
    j["method"] = method;
    nlohmann::json per_k = nlohmann::json::array();
    for (const auto& rep : reports) {
        per_k.push_back({{"k", rep.k},
                         {"experiments", rep.experiments.size()},
                         {"mean_anp", rep.mean_anp},
                         {"ci95_margin", rep.ci95_margin}});
    }
    j["per_k"] = std::move(per_k);
    std::ofstream out(file);
    if (!out) throw ContractViolation("cannot write " + file.string());
    out << j.dump(2) << "\n";
}

void write_matrix_csv(const std::filesystem::path& file, std::span<const std::string> row_ids,
                      std::span<const std::string> col_ids,
                      const std::vector<std::vector<double>>& matrix, const std::string& corner) {
    std::ofstream out(file);
    if (!out) throw ContractViolation("cannot write " + file.string());
    out.precision(17);
    out << corner;
    for (const auto& id : col_ids) out << "," << id;
    out << "\n";
    for (size_t i = 0; i < matrix.size(); ++i) {
        out << row_ids[i];
        for (double v : matrix[i]) out << "," << v;
        out << "\n";
    }
}

}  // namespace mergeforge
