#include "mergeforge/theory.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <set>

#include "mergeforge/errors.hpp"
#include "mergeforge/merging.hpp"
#include "mergeforge/rng.hpp"
#include "mergeforge/threading.hpp"

namespace mergeforge {

using nlohmann::json;

json CheckReport::to_json() const {
    return json{{"check_id", check_id},
                {"passed", passed},
                {"measured", measured},
                {"tolerances", tolerances},
                {"note", note}};
}

namespace {

double mean_token_js(const LanguageModel& candidate, const ReferenceTrace& trace) {
    auto per_token = per_token_divergence(candidate, trace, DivergenceKind::JS);
    double s = 0.0;
    for (double v : per_token) s += v;
    return s / static_cast<double>(trace.t_x);
}

}  // namespace

CheckReport check_disentanglement(const ModelConfig& config, const ParameterSet& merged,
                                  std::span<const ParameterSet> finetuned,
                                  std::span<const TaskDataset> tasks, double epsilon,
                                  int max_new_tokens) {
    if (tasks.size() != finetuned.size())
        throw ContractViolation("check_disentanglement needs one checkpoint per task");

    // Def. 1 precondition: pairwise non-overlapping prompt supports.
    std::vector<std::set<std::string>> supports(tasks.size());
    for (size_t t = 0; t < tasks.size(); ++t)
        for (const auto& e : tasks[t].examples) supports[t].insert(e.prompt);
    for (size_t a = 0; a < tasks.size(); ++a)
        for (size_t b = a + 1; b < tasks.size(); ++b)
            for (const auto& p : supports[a])
                if (supports[b].count(p))
                    throw ContractViolation("tasks " + tasks[a].task_id + " and " +
                                            tasks[b].task_id +
                                            " have overlapping supports; Def. 1 does not apply");

    LanguageModel merged_model(config, merged);
    std::vector<double> per_task_mean(tasks.size(), 0.0);
    for (size_t t = 0; t < tasks.size(); ++t) {
        LanguageModel ref(config, finetuned[t]);
        const auto prompts = tasks[t].prompts(Split::validation);
        std::vector<double> means(prompts.size());
        parallel_for(prompts.size(), [&](size_t p) {
            means[p] = mean_token_js(merged_model, trace_reference(ref, prompts[p], max_new_tokens));
        });
        double acc = 0.0;
        for (double v : means) acc += v;
        per_task_mean[t] = acc / static_cast<double>(means.size());
    }

    double summed_loss = 0.0;
    bool all_below = true;
    json per_task = json::object();
    for (size_t t = 0; t < tasks.size(); ++t) {
        summed_loss += per_task_mean[t];
        all_below = all_below && per_task_mean[t] < epsilon;
        per_task[tasks[t].task_id] = per_task_mean[t];
    }

    CheckReport report;
    report.check_id = "disentanglement";
    report.passed = all_below;
    report.measured = {{"per_task_mean_js", per_task}, {"summed_loss", summed_loss}};
    report.tolerances = {{"epsilon_per_task", epsilon}};
    report.note = "per-task mean JS along fine-tuned greedy trajectories; summed loss shown "
                  "for the zero-loss correspondence";
    return report;
}

CheckReport check_tv_bound(const ModelConfig& config, const ParameterSet& theta_t,
                           const ParameterSet& merged, const EmpiricalPrompts& dists,
                           int max_new_tokens) {
    const size_t n = dists.prompts.size();
    if (n == 0 || dists.p.size() != n || dists.q.size() != n)
        throw ContractViolation("check_tv_bound needs aligned prompt universe and weights");
    for (const auto* w : {&dists.p, &dists.q}) {
        double s = 0.0;
        for (double v : *w) {
            if (v < 0.0) throw ContractViolation("negative empirical weight");
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-9)
            throw ContractViolation("empirical weights must sum to 1");
    }

    LanguageModel ref(config, theta_t);
    LanguageModel cand(config, merged);
    std::vector<double> per_prompt(n, 0.0);
    parallel_for(n, [&](size_t i) {
        if (dists.p[i] == 0.0 && dists.q[i] == 0.0) return;  // never sampled
        per_prompt[i] = mean_token_js(cand, trace_reference(ref, dists.prompts[i], max_new_tokens));
    });

    double js_x = 0.0, js_xt = 0.0, tv = 0.0;
    for (size_t i = 0; i < n; ++i) {
        js_x += dists.p[i] * per_prompt[i];
        js_xt += dists.q[i] * per_prompt[i];
        tv += std::abs(dists.p[i] - dists.q[i]);
    }
    tv *= 0.5;
    const double lhs = std::abs(js_x - js_xt);
    const double rhs = 2.0 * std::log(2.0) * tv;

    CheckReport report;
    report.check_id = "tv_bound";
    report.passed = lhs <= rhs + 1e-9;
    report.measured = {{"js_x", js_x}, {"js_x_tilde", js_xt}, {"lhs", lhs}, {"tv", tv}, {"rhs", rhs}};
    report.tolerances = {{"slack", 1e-9}};
    report.note = "|JS_X - JS_Xtilde| <= 2 ln 2 * TV over the shared prompt universe";
    return report;
}

CheckReport check_cross_entropy_identity(int n_trials, int dim, uint64_t seed) {
    if (n_trials < 1 || dim < 2) throw ContractViolation("need n_trials >= 1 and dim >= 2");
    Rng rng = Rng(seed).fork("check/cross_entropy");

    auto sample_simplex = [&](std::vector<double>& out) {
        double s = 0.0;
        for (double& v : out) {
            double u = rng.uniform();
            while (u == 0.0) u = rng.uniform();
            v = -std::log(u);
            s += v;
        }
        for (double& v : out) v /= s;
    };

    double worst = 0.0;
    std::vector<double> p(static_cast<size_t>(dim)), q(static_cast<size_t>(dim));
    for (int i = 0; i < n_trials; ++i) {
        sample_simplex(p);
        sample_simplex(q);
        const double lhs = cross_entropy(p, q);
        const double rhs = shannon_entropy(p) + kl_divergence(p, q, /*eps=*/0.0);
        worst = std::max(worst, std::abs(lhs - rhs));
    }

    CheckReport report;
    report.check_id = "cross_entropy_identity";
    report.passed = worst < 1e-10;
    report.measured = {{"n_trials", n_trials}, {"dim", dim}, {"max_abs_error", worst}};
    report.tolerances = {{"max_abs_error", 1e-10}};
    report.note = "H(p,q) = H(p) + KL(p||q) on random simplex pairs";
    return report;
}

CheckReport check_kracher_span(std::span<const TaskVector> taus) {
    if (taus.size() < 2) throw ContractViolation("check_kracher_span needs >= 2 task vectors");

    TaskVector mean = kracher_mean(taus);
    std::vector<double> target = mean.flatten();
    double tnorm = 0.0;
    for (double v : target) tnorm += v * v;
    tnorm = std::sqrt(tnorm);

    CheckReport report;
    report.check_id = "kracher_span";
    report.tolerances = {{"relative_residual", 1e-8}};

    if (tnorm == 0.0) {
        report.passed = true;
        report.measured = {{"relative_residual", 0.0}};
        report.note = "mean is the zero vector, which lies in every span (vacuous pass)";
        return report;
    }

    const auto d = static_cast<Eigen::Index>(target.size());
    const auto m = static_cast<Eigen::Index>(taus.size());
    Eigen::MatrixXd A(d, m);
    for (Eigen::Index j = 0; j < m; ++j) {
        std::vector<double> flat = taus[static_cast<size_t>(j)].flatten();
        for (Eigen::Index i = 0; i < d; ++i) A(i, j) = flat[static_cast<size_t>(i)];
    }
    Eigen::VectorXd b = Eigen::Map<Eigen::VectorXd>(target.data(), d);
    Eigen::VectorXd coeff = A.colPivHouseholderQr().solve(b);
    const double residual = (A * coeff - b).norm() / tnorm;

    report.passed = residual < 1e-8;
    report.measured = {{"relative_residual", residual}};
    report.note = "least-squares projection of the Kracher mean onto span{tau_t}";
    return report;
}

}  // namespace mergeforge
