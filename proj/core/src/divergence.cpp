#include "mergeforge/divergence.hpp"

#include <cmath>
#include <fstream>

#include "mergeforge/errors.hpp"
#include "mergeforge/threading.hpp"

namespace mergeforge {

const char* divergence_name(DivergenceKind kind) {
    return kind == DivergenceKind::KL ? "kl" : "js";
}

DivergenceKind divergence_from_name(const std::string& name) {
    if (name == "kl" || name == "KL") return DivergenceKind::KL;
    if (name == "js" || name == "JS") return DivergenceKind::JS;
    throw ContractViolation("unknown divergence kind: " + name);
}

namespace {

void require_simplex(std::span<const double> p, const char* who) {
    double s = 0.0;
    for (double v : p) {
        if (!(v >= 0.0)) throw ContractViolation(std::string(who) + ": negative probability entry");
        s += v;
    }
    if (std::abs(s - 1.0) > 1e-9)
        throw ContractViolation(std::string(who) + ": probabilities sum to " + std::to_string(s));
}

std::vector<double> floored(std::span<const double> nu, double eps) {
    std::vector<double> out(nu.begin(), nu.end());
    if (eps > 0.0) {
        double s = 0.0;
        for (double& v : out) {
            if (v < eps) v = eps;
            s += v;
        }
        for (double& v : out) v /= s;
    }
    return out;
}

double kl_terms(std::span<const double> mu, std::span<const double> nu) {
    double acc = 0.0;
    for (size_t i = 0; i < mu.size(); ++i) {
        if (mu[i] > 0.0) acc += mu[i] * std::log(mu[i] / nu[i]);
    }
    return acc;
}

}  // namespace

double kl_divergence(std::span<const double> mu, std::span<const double> nu, double eps) {
    if (mu.size() != nu.size()) throw ContractViolation("kl: dimension mismatch");
    require_simplex(mu, "kl");
    require_simplex(nu, "kl");
    return kl_terms(mu, floored(nu, eps));
}

double js_divergence(std::span<const double> mu, std::span<const double> nu, double eps) {
    if (mu.size() != nu.size()) throw ContractViolation("js: dimension mismatch");
    require_simplex(mu, "js");
    require_simplex(nu, "js");
    std::vector<double> nu_f = floored(nu, eps);
    std::vector<double> mid(mu.size());
    for (size_t i = 0; i < mu.size(); ++i) mid[i] = 0.5 * (mu[i] + nu_f[i]);
    return 0.5 * (kl_terms(mu, mid) + kl_terms(nu_f, mid));
}

double shannon_entropy(std::span<const double> p) {
    double h = 0.0;
    for (double v : p)
        if (v > 0.0) h -= v * std::log(v);
    return h;
}

double cross_entropy(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw ContractViolation("cross_entropy: dimension mismatch");
    double h = 0.0;
    for (size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0.0) h -= p[i] * std::log(q[i]);
    return h;
}

ReferenceTrace trace_reference(const LanguageModel& reference, const std::string& prompt,
                               int max_new_tokens) {
    ReferenceTrace trace;
    trace.prompt_toks = tokens::prompt_tokens(prompt);
    auto gen = reference.greedy_generate(trace.prompt_toks, max_new_tokens);
    if (gen.tokens.empty())
        throw ContractViolation("prompt fills the context window, nothing can be generated");
    trace.generated = gen.tokens;
    trace.step_probs.reserve(gen.step_dists.size());
    for (auto& d : gen.step_dists) trace.step_probs.push_back(std::move(d.probs));
    trace.t_x = static_cast<int>(trace.generated.size());
    trace.extended = trace.prompt_toks;
    trace.extended.insert(trace.extended.end(), trace.generated.begin(), trace.generated.end());
    return trace;
}

std::vector<int32_t> trace_prediction_rows(const ReferenceTrace& trace) {
    const int32_t p = static_cast<int32_t>(trace.prompt_toks.size());
    std::vector<int32_t> rows;
    rows.reserve(static_cast<size_t>(trace.t_x));
    for (int32_t t = 0; t < trace.t_x; ++t) rows.push_back(p - 1 + t);
    return rows;
}

std::vector<double> per_token_divergence(const LanguageModel& candidate,
                                         const ReferenceTrace& trace, DivergenceKind kind,
                                         double eps) {
    // One pass over the extended sequence. The final generated token opens no
    // new prediction row, so it is not fed back in; this also keeps the pass
    // inside the context window when generation stopped at the window edge.
    Tape tape;
    std::span<const int32_t> input(trace.extended.data(), trace.extended.size() - 1);
    NodeId lp = candidate.forward_log_probs(tape, input, trace_prediction_rows(trace));
    const Tensor& rows = tape.value(lp);

    std::vector<double> out(static_cast<size_t>(trace.t_x));
    std::vector<double> nu(static_cast<size_t>(rows.cols()));
    for (int t = 0; t < trace.t_x; ++t) {
        for (int64_t c = 0; c < rows.cols(); ++c) nu[static_cast<size_t>(c)] = std::exp(rows.at(t, c));
        const auto& mu = trace.step_probs[static_cast<size_t>(t)];
        out[static_cast<size_t>(t)] =
            kind == DivergenceKind::KL ? kl_divergence(mu, nu, eps) : js_divergence(mu, nu, eps);
    }
    return out;
}

DivergenceEstimate sequence_divergence(const LanguageModel& reference,
                                       const LanguageModel& candidate,
                                       std::span<const std::string> prompts, DivergenceKind kind,
                                       int max_new_tokens) {
    if (prompts.empty()) throw ContractViolation("sequence_divergence requires prompts");
    if (reference.params().manifest_hash() != candidate.params().manifest_hash())
        throw ContractViolation("sequence_divergence requires merge-compatible models");

    DivergenceEstimate est;
    est.config = {kind, max_new_tokens, kEpsilonFloor};
    est.per_example.resize(prompts.size());

    parallel_for(prompts.size(), [&](size_t i) {
        ReferenceTrace trace = trace_reference(reference, prompts[i], max_new_tokens);
        PerExampleDivergence pe;
        pe.example_id = i;
        pe.per_token = per_token_divergence(candidate, trace, kind);
        pe.t_x = trace.t_x;
        est.per_example[i] = std::move(pe);
    });

    double acc = 0.0;
    for (const auto& pe : est.per_example) {
        double s = 0.0;
        for (double v : pe.per_token) s += v;
        acc += s / static_cast<double>(pe.t_x);
    }
    est.value = acc / static_cast<double>(prompts.size());
    return est;
}

NodeId divergence_loss_vs_trace(Tape& tape, NodeId candidate_log_probs,
                                const ReferenceTrace& trace, DivergenceKind kind, double eps) {
    const Tensor& L = tape.value(candidate_log_probs);
    const int64_t rows = L.rows();
    const int64_t vocab = L.cols();
    if (rows != trace.t_x) throw ContractViolation("candidate rows do not match trace length");

    // Reference distributions as one stacked constant matrix.
    Tensor mu({rows, vocab});
    double mu_log_mu = 0.0;  // sum over all rows, constant w.r.t. the candidate
    for (int64_t r = 0; r < rows; ++r) {
        const auto& p = trace.step_probs[static_cast<size_t>(r)];
        for (int64_t c = 0; c < vocab; ++c) {
            const double v = p[static_cast<size_t>(c)];
            mu.at(r, c) = v;
            if (v > 0.0) mu_log_mu += v * std::log(v);
        }
    }
    NodeId mu_node = tape.constant(std::move(mu));

    // nu floored at eps via max(nu, eps) = relu(nu - eps) + eps, composed from
    // tape ops so the gradient path stays intact.
    NodeId nu = tape.exp(candidate_log_probs);
    NodeId nu_f = tape.add(tape.relu(tape.add(nu, tape.constant(Tensor::full({rows, vocab}, -eps)))),
                           tape.constant(Tensor::full({rows, vocab}, eps)));

    NodeId total;
    if (kind == DivergenceKind::KL) {
        // KL = sum mu log mu - sum mu log nu_f
        NodeId cross = tape.sum(tape.multiply(mu_node, tape.log(nu_f)));
        total = tape.add(tape.constant(Tensor::scalar(mu_log_mu)), tape.multiply_scalar(cross, -1.0));
    } else {
        // JS = 0.5 * [ sum mu log mu - sum mu log m + sum nu log nu - sum nu log m ]
        NodeId mid = tape.multiply_scalar(tape.add(mu_node, nu_f), 0.5);
        NodeId log_mid = tape.log(mid);
        NodeId mu_mid = tape.sum(tape.multiply(mu_node, log_mid));
        NodeId nu_nu = tape.sum(tape.multiply(nu_f, tape.log(nu_f)));
        NodeId nu_mid = tape.sum(tape.multiply(nu_f, log_mid));
        NodeId inner = tape.add(tape.add(tape.constant(Tensor::scalar(mu_log_mu)),
                                         tape.multiply_scalar(mu_mid, -1.0)),
                                tape.add(nu_nu, tape.multiply_scalar(nu_mid, -1.0)));
        total = tape.multiply_scalar(inner, 0.5);
    }
    return tape.multiply_scalar(total, 1.0 / static_cast<double>(trace.t_x));
}

void write_divergence_heatmap_csv(const std::filesystem::path& file,
                                  std::span<const std::string> task_ids,
                                  const std::vector<std::vector<double>>& matrix) {
    std::ofstream out(file);
    if (!out) throw ContractViolation("cannot write " + file.string());
    out << "reference\\candidate";
    for (const auto& id : task_ids) out << "," << id;
    out << "\n";
    out.precision(17);
    for (size_t i = 0; i < matrix.size(); ++i) {
        out << task_ids[i];
        for (double v : matrix[i]) out << "," << v;
        out << "\n";
    }
}

}  // namespace mergeforge
