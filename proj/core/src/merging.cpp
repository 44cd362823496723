#include "mergeforge/merging.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "mergeforge/errors.hpp"
#include "mergeforge/optim.hpp"
#include "mergeforge/rng.hpp"
#include "mergeforge/threading.hpp"

namespace mergeforge {

using nlohmann::json;

const char* merge_level_name(MergeLevel level) {
    return level == MergeLevel::task ? "task" : "layer";
}

MergeLevel merge_level_from_name(const std::string& name) {
    if (name == "task") return MergeLevel::task;
    if (name == "layer") return MergeLevel::layer;
    throw ContractViolation("unknown merge level: " + name);
}

MergeCoefficients MergeCoefficients::task_level(std::vector<std::string> task_ids,
                                                std::vector<double> values) {
    MergeCoefficients c;
    c.level = MergeLevel::task;
    c.task_ids = std::move(task_ids);
    c.values = std::move(values);
    c.validate();
    return c;
}

MergeCoefficients MergeCoefficients::layer_level(std::vector<std::string> task_ids,
                                                 size_t n_layers, std::vector<double> values) {
    MergeCoefficients c;
    c.level = MergeLevel::layer;
    c.task_ids = std::move(task_ids);
    c.n_layers = n_layers;
    c.values = std::move(values);
    c.validate();
    return c;
}

double MergeCoefficients::value(size_t task, size_t layer) const {
    return level == MergeLevel::task ? values[task] : values[task * n_layers + layer];
}

void MergeCoefficients::validate() const {
    const size_t expected = level == MergeLevel::task ? n_tasks() : n_tasks() * n_layers;
    if (values.size() != expected)
        throw ContractViolation("coefficient count " + std::to_string(values.size()) +
                                " does not match expected " + std::to_string(expected));
    for (double v : values)
        if (!std::isfinite(v)) throw ContractViolation("non-finite merging coefficient");
}

namespace {

void require_compatible(const ParameterSet& base, std::span<const TaskVector> taus) {
    for (const auto& tau : taus)
        if (tau.manifest_hash() != base.manifest_hash())
            throw ContractViolation("task vector manifest does not match the base");
}

ParameterSet assemble_merge(const ParameterSet& base, const std::vector<double>& base_flat,
                            const std::vector<std::vector<double>>& tau_flats,
                            const std::vector<std::pair<size_t, size_t>>& spans,
                            const MergeCoefficients& coeffs) {
    std::vector<double> merged = base_flat;
    for (size_t t = 0; t < tau_flats.size(); ++t) {
        for (size_t l = 0; l < spans.size(); ++l) {
            const double c = coeffs.value(t, l);
            if (c == 0.0) continue;
            const auto [off, len] = spans[l];
            const double* tau = tau_flats[t].data() + off;
            double* out = merged.data() + off;
            for (size_t i = 0; i < len; ++i) out[i] += c * tau[i];
        }
    }
    ParameterSet result = base;
    result.assign_from_flat(merged);
    return result;
}

}  // namespace

ParameterSet apply_task_arithmetic(const ParameterSet& base, std::span<const TaskVector> taus,
                                   const MergeCoefficients& coeffs) {
    require_compatible(base, taus);
    coeffs.validate();
    if (coeffs.n_tasks() != taus.size())
        throw ContractViolation("coefficient task count does not match task vectors");
    if (coeffs.level == MergeLevel::layer && coeffs.n_layers != base.n_layers())
        throw ContractViolation("layer-level coefficients do not match the layer count");

    std::vector<std::vector<double>> tau_flats;
    tau_flats.reserve(taus.size());
    for (const auto& tau : taus) tau_flats.push_back(tau.flatten());
    return assemble_merge(base, base.flatten(), tau_flats, base.layer_spans(), coeffs);
}

ParameterSet model_average(std::span<const ParameterSet> checkpoints) {
    if (checkpoints.size() < 2) throw ContractViolation("model_average requires >= 2 checkpoints");
    for (const auto& ck : checkpoints)
        if (!ck.compatible_with(checkpoints.front()))
            throw ContractViolation("model_average requires merge-compatible checkpoints");

    ParameterSet out = checkpoints.front();
    std::vector<double> acc = out.flatten();
    for (size_t k = 1; k < checkpoints.size(); ++k) {
        std::vector<double> f = checkpoints[k].flatten();
        for (size_t i = 0; i < acc.size(); ++i) acc[i] += f[i];
    }
    const double inv = 1.0 / static_cast<double>(checkpoints.size());
    for (double& v : acc) v *= inv;
    out.assign_from_flat(acc);
    return out;
}

namespace {

double vec_norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

double vec_dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

ParameterSet slerp_merge(const ParameterSet& base, const TaskVector& tau1, const TaskVector& tau2,
                         double t) {
    require_compatible(base, std::span<const TaskVector>(&tau1, 1));
    require_compatible(base, std::span<const TaskVector>(&tau2, 1));
    if (t < 0.0 || t > 1.0) throw ContractViolation("slerp t must lie in [0, 1]");

    std::vector<double> u1 = tau1.flatten();
    std::vector<double> u2 = tau2.flatten();
    const double n1 = vec_norm(u1);
    const double n2 = vec_norm(u2);
    if (n1 == 0.0 || n2 == 0.0) throw ContractViolation("slerp requires nonzero task vectors");

    const double cos_omega = std::clamp(vec_dot(u1, u2) / (n1 * n2), -1.0, 1.0);
    const double omega = std::acos(cos_omega);

    double c1, c2;
    if (omega < 1e-8) {
        c1 = 1.0 - t;  // near-parallel: linear interpolation of the unit vectors
        c2 = t;
    } else {
        const double s = std::sin(omega);
        c1 = std::sin((1.0 - t) * omega) / s;
        c2 = std::sin(t * omega) / s;
    }

    std::vector<double> merged = base.flatten();
    for (size_t i = 0; i < merged.size(); ++i)
        merged[i] += c1 * u1[i] / n1 + c2 * u2[i] / n2;
    ParameterSet out = base;
    out.assign_from_flat(merged);
    return out;
}

ParameterSet multi_slerp_merge(const ParameterSet& base, std::span<const TaskVector> taus,
                               std::span<const double> weights) {
    require_compatible(base, taus);
    if (taus.empty()) throw ContractViolation("multi_slerp requires at least one task vector");
    if (weights.size() != taus.size())
        throw ContractViolation("multi_slerp weight count mismatch");
    double wsum = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw ContractViolation("multi_slerp weights must be nonnegative");
        wsum += w;
    }
    if (std::abs(wsum - 1.0) > 1e-9) throw ContractViolation("multi_slerp weights must sum to 1");

    const size_t d = static_cast<size_t>(base.parameter_count());
    std::vector<std::vector<double>> units(taus.size());
    double scale = 0.0;  // weighted arithmetic mean of the original norms
    for (size_t t = 0; t < taus.size(); ++t) {
        units[t] = taus[t].flatten();
        const double n = vec_norm(units[t]);
        if (n == 0.0) throw ContractViolation("multi_slerp requires nonzero task vectors");
        for (double& v : units[t]) v /= n;
        scale += weights[t] * n;
    }

    std::vector<double> m = sphere_frechet_mean(units, weights);

    std::vector<double> merged = base.flatten();
    for (size_t i = 0; i < d; ++i) merged[i] += scale * m[i];
    ParameterSet out = base;
    out.assign_from_flat(merged);
    return out;
}

std::vector<double> sphere_frechet_mean(std::span<const std::vector<double>> units,
                                        std::span<const double> weights) {
    if (units.empty() || units.size() != weights.size())
        throw ContractViolation("sphere_frechet_mean needs aligned units and weights");
    const size_t d = units.front().size();

    // Initialize at the normalized weighted extrinsic mean.
    std::vector<double> m(d, 0.0);
    for (size_t t = 0; t < units.size(); ++t)
        for (size_t i = 0; i < d; ++i) m[i] += weights[t] * units[t][i];
    const double mn = vec_norm(m);
    if (mn < 1e-12) throw NumericError("sphere mean direction is degenerate");
    for (double& v : m) v /= mn;

    // Tangent-space averaging until the update norm vanishes.
    std::vector<double> tangent(d);
    for (int it = 0; it < 1000; ++it) {
        std::fill(tangent.begin(), tangent.end(), 0.0);
        for (size_t t = 0; t < units.size(); ++t) {
            const double c = std::clamp(vec_dot(m, units[t]), -1.0, 1.0);
            const double phi = std::acos(c);
            const double s = std::sin(phi);
            const double f = s < 1e-15 ? 1.0 : phi / s;  // log-map factor, ->1 as phi->0
            for (size_t i = 0; i < d; ++i)
                tangent[i] += weights[t] * f * (units[t][i] - c * m[i]);
        }
        const double tn = vec_norm(tangent);
        if (tn < 1e-10) return m;
        const double ct = std::cos(tn), st = std::sin(tn);
        for (size_t i = 0; i < d; ++i) m[i] = ct * m[i] + st * tangent[i] / tn;
        const double nn = vec_norm(m);  // renormalize against drift
        for (double& v : m) v /= nn;
    }
    throw NumericError("sphere_frechet_mean failed to converge in 1000 iterations");
}

ParameterSet ties_merge(const ParameterSet& base, std::span<const TaskVector> taus,
                        double mask_rate, double lambda) {
    require_compatible(base, taus);
    if (taus.empty()) throw ContractViolation("ties_merge requires at least one task vector");
    if (!(mask_rate > 0.0 && mask_rate <= 1.0))
        throw ContractViolation("ties mask_rate must lie in (0, 1]");

    const size_t d = static_cast<size_t>(base.parameter_count());
    const size_t keep = std::max<size_t>(1, static_cast<size_t>(std::llround(mask_rate * static_cast<double>(d))));

    // Trim: per task, zero everything outside the top-|.| keep fraction.
    std::vector<std::vector<double>> trimmed(taus.size());
    for (size_t t = 0; t < taus.size(); ++t) {
        std::vector<double> flat = taus[t].flatten();
        if (keep < d) {
            std::vector<size_t> idx(d);
            std::iota(idx.begin(), idx.end(), 0);
            std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep - 1), idx.end(),
                             [&](size_t a, size_t b) {
                                 const double fa = std::abs(flat[a]), fb = std::abs(flat[b]);
                                 return fa != fb ? fa > fb : a < b;
                             });
            std::vector<double> kept(d, 0.0);
            for (size_t j = 0; j < keep; ++j) kept[idx[j]] = flat[idx[j]];
            trimmed[t] = std::move(kept);
        } else {
            trimmed[t] = std::move(flat);
        }
    }

    // Elect signs and take the disjoint mean of sign-consistent values.
    std::vector<double> merged_vec(d, 0.0);
    for (size_t i = 0; i < d; ++i) {
        double sum = 0.0;
        for (const auto& tv : trimmed) sum += tv[i];
        if (sum == 0.0) continue;
        const double sign = sum > 0.0 ? 1.0 : -1.0;
        double acc = 0.0;
        int count = 0;
        for (const auto& tv : trimmed) {
            if (tv[i] != 0.0 && (tv[i] > 0.0) == (sign > 0.0)) {
                acc += tv[i];
                ++count;
            }
        }
        if (count > 0) merged_vec[i] = acc / static_cast<double>(count);
    }

    std::vector<double> merged = base.flatten();
    for (size_t i = 0; i < d; ++i) merged[i] += lambda * merged_vec[i];
    ParameterSet out = base;
    out.assign_from_flat(merged);
    return out;
}

TaskVector kracher_mean(std::span<const TaskVector> taus) {
    if (taus.empty()) throw ContractViolation("kracher_mean requires at least one task vector");
    for (const auto& tau : taus)
        if (tau.manifest_hash() != taus.front().manifest_hash())
            throw ContractViolation("kracher_mean requires compatible task vectors");

    ParameterSet mean = taus.front().delta();
    std::vector<double> acc = mean.flatten();
    for (size_t t = 1; t < taus.size(); ++t) {
        std::vector<double> f = taus[t].flatten();
        for (size_t i = 0; i < acc.size(); ++i) acc[i] += f[i];
    }
    const double inv = 1.0 / static_cast<double>(taus.size());
    for (double& v : acc) v *= inv;
    mean.assign_from_flat(acc);
    return TaskVector::from_delta(std::move(mean));
}

void write_merge_log(const std::filesystem::path& file, const MergeLog& log) {
    json j;
    j["method"] = log.method;
    j["spec"] = log.spec;
    json iters = json::array();
    for (const auto& it : log.iterations) {
        iters.push_back({{"iteration", it.iteration}, {"loss", it.loss}, {"gamma", it.gamma}});
    }
    j["iterations"] = std::move(iters);
    j["final_coefficients"] = {{"level", merge_level_name(log.final_coefficients.level)},
                               {"task_ids", log.final_coefficients.task_ids},
                               {"n_layers", log.final_coefficients.n_layers},
                               {"values", log.final_coefficients.values}};
    std::ofstream out(file);
    if (!out) throw ContractViolation("cannot write " + file.string());
    out << j.dump(2) << "\n";
}

namespace {

// State shared by both coefficient optimizers.
struct CoeffLoop {
    const ModelConfig* config;
    const ParameterSet* base;
    std::vector<double> base_flat;
    std::vector<std::vector<double>> tau_flats;
    std::vector<std::pair<size_t, size_t>> spans;
    std::vector<std::string> task_ids;
    MergeLevel level;
    size_t n = 0;
    size_t n_layers = 0;

    CoeffLoop(const ModelConfig& cfg, const ParameterSet& b, std::span<const TaskVector> taus,
              std::vector<std::string> ids, MergeLevel lvl)
        : config(&cfg), base(&b), task_ids(std::move(ids)), level(lvl) {
        require_compatible(b, taus);
        base_flat = b.flatten();
        for (const auto& tau : taus) tau_flats.push_back(tau.flatten());
        spans = b.layer_spans();
        n = taus.size();
        n_layers = b.n_layers();
    }

    MergeCoefficients coeffs(const std::vector<double>& gamma) const {
        return level == MergeLevel::task
                   ? MergeCoefficients::task_level(task_ids, gamma)
                   : MergeCoefficients::layer_level(task_ids, n_layers, gamma);
    }

    size_t gamma_size() const { return level == MergeLevel::task ? n : n * n_layers; }

    ParameterSet assemble(const std::vector<double>& gamma) const {
        return assemble_merge(*base, base_flat, tau_flats, spans, coeffs(gamma));
    }

    // dL/dGamma from the flat parameter gradient: full inner product with
    // tau_t at task level, per-layer restrictions at layer level.
    std::vector<double> gamma_grad(const std::vector<double>& theta_grad) const {
        std::vector<double> g(gamma_size(), 0.0);
        for (size_t t = 0; t < n; ++t) {
            for (size_t l = 0; l < n_layers; ++l) {
                const auto [off, len] = spans[l];
                double dot = 0.0;
                const double* tg = theta_grad.data() + off;
                const double* tf = tau_flats[t].data() + off;
                for (size_t i = 0; i < len; ++i) dot += tg[i] * tf[i];
                if (level == MergeLevel::task) g[t] += dot;
                else g[t * n_layers + l] = dot;
            }
        }
        return g;
    }
};

// Flattens the per-leaf gradients of one tape into parameter order.
std::vector<double> flat_param_grad(const Tape& tape, const TapeBinding& binding,
                                    const std::vector<Tensor>& node_grads, size_t total) {
    std::vector<double> g;
    g.reserve(total);
    for (const auto& layer_ids : binding.param_leaf)
        for (NodeId id : layer_ids) {
            const Tensor& gt = node_grads[static_cast<size_t>(id)];
            if (gt.empty()) {
                g.insert(g.end(), static_cast<size_t>(tape.value(id).numel()), 0.0);
            } else {
                g.insert(g.end(), gt.vec().begin(), gt.vec().end());
            }
        }
    return g;
}

}  // namespace

MergeCoefficients optimize_divergence_coeffs(const ModelConfig& config, const ParameterSet& base,
                                             std::span<const TaskVector> taus,
                                             std::span<const TaskDataset> tasks,
                                             DivergenceKind kind, MergeLevel level,
                                             const CoeffOptimConfig& opt, MergeLog* log) {
    if (taus.empty() || tasks.size() != taus.size())
        throw ContractViolation("optimize_divergence_coeffs needs one task dataset per task vector");

    std::vector<std::string> ids;
    for (const auto& t : tasks) ids.push_back(t.task_id);
    CoeffLoop loop(config, base, taus, ids, level);

    // Fixed reference side: greedy traces of each fine-tuned model on its own
    // validation prompts, generated once.
    std::vector<ParameterSet> refs;
    refs.reserve(taus.size());
    for (const auto& tau : taus) refs.push_back(reconstruct(base, tau));

    std::vector<std::vector<std::string>> prompts(tasks.size());
    for (size_t t = 0; t < tasks.size(); ++t) {
        auto all = tasks[t].prompts(Split::validation);
        if (all.empty()) throw ContractViolation("task " + ids[t] + " has an empty validation set");
        size_t budget = opt.budget_per_task > 0
                            ? std::min(all.size(), static_cast<size_t>(opt.budget_per_task))
                            : all.size();
        prompts[t].assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(budget));
    }

    std::vector<std::vector<ReferenceTrace>> traces(tasks.size());
    for (size_t t = 0; t < tasks.size(); ++t) {
        traces[t].resize(prompts[t].size());
        LanguageModel ref_model(config, refs[t]);
        parallel_for(prompts[t].size(), [&](size_t p) {
            traces[t][p] = trace_reference(ref_model, prompts[t][p], opt.max_new_tokens);
        });
    }

    size_t min_budget = prompts.front().size();
    for (const auto& ps : prompts) min_budget = std::min(min_budget, ps.size());
    const size_t batch = static_cast<size_t>(std::max(1, opt.batch_per_task));
    const size_t iters_per_epoch = std::max<size_t>(1, min_budget / batch);

    std::vector<double> gamma(loop.gamma_size(), opt.init_value);
    Adam adam({opt.lr, opt.beta1, opt.beta2, opt.eps}, gamma.size());
    Rng root(opt.seed);
    if (log) {
        log->method = std::string("divergence_") + divergence_name(kind);
        log->iterations.clear();
    }

    int iteration = 0;
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        std::vector<std::vector<size_t>> order(tasks.size());
        for (size_t t = 0; t < tasks.size(); ++t) {
            order[t].resize(prompts[t].size());
            std::iota(order[t].begin(), order[t].end(), 0);
            Rng r = root.fork("merge/epoch/" + std::to_string(epoch) + "/task/" + ids[t]);
            std::shuffle(order[t].begin(), order[t].end(), r.engine());
        }

        for (size_t it = 0; it < iters_per_epoch; ++it) {
            ParameterSet merged = loop.assemble(gamma);
            LanguageModel cand(config, merged);

            struct Item {
                size_t task;
                const ReferenceTrace* trace;
            };
            std::vector<Item> items;
            for (size_t t = 0; t < tasks.size(); ++t)
                for (size_t j = 0; j < batch; ++j) {
                    const size_t p = order[t][(it * batch + j) % order[t].size()];
                    items.push_back({t, &traces[t][p]});
                }

            std::vector<double> losses(items.size());
            std::vector<std::vector<double>> grads(items.size());
            parallel_for(items.size(), [&](size_t i) {
                const ReferenceTrace& trace = *items[i].trace;
                Tape tape;
                TapeBinding binding;
                std::span<const int32_t> input(trace.extended.data(), trace.extended.size() - 1);
                NodeId lp = cand.forward_log_probs(tape, input, trace_prediction_rows(trace), &binding);
                NodeId loss = divergence_loss_vs_trace(tape, lp, trace, kind);
                losses[i] = tape.value(loss).at(0);
                grads[i] = flat_param_grad(tape, binding, tape.backward(loss), loop.base_flat.size());
            });

            // Sum of per-task batch means, reduced in item order.
            const double inv_batch = 1.0 / static_cast<double>(batch);
            double total_loss = 0.0;
            std::vector<double> theta_grad(loop.base_flat.size(), 0.0);
            for (size_t i = 0; i < items.size(); ++i) {
                total_loss += losses[i] * inv_batch;
                const auto& g = grads[i];
                for (size_t k = 0; k < theta_grad.size(); ++k) theta_grad[k] += g[k] * inv_batch;
            }
            if (!std::isfinite(total_loss))
                throw NumericError("divergence merging loss became non-finite");

            if (log) log->iterations.push_back({iteration, total_loss, gamma});
            std::vector<double> g = loop.gamma_grad(theta_grad);
            adam.step(gamma, g);
            ++iteration;
        }
    }

    MergeCoefficients result = loop.coeffs(gamma);
    if (log) log->final_coefficients = result;
    return result;
}

MergeCoefficients entropy_min_coeffs(const ModelConfig& config, const ParameterSet& base,
                                     std::span<const TaskVector> taus,
                                     std::span<const std::string> unlabeled_prompts,
                                     MergeLevel level, const CoeffOptimConfig& opt,
                                     MergeLog* log) {
    if (taus.empty()) throw ContractViolation("entropy_min_coeffs requires task vectors");
    if (unlabeled_prompts.empty()) throw ContractViolation("entropy_min_coeffs requires prompts");

    std::vector<std::string> ids;
    for (size_t t = 0; t < taus.size(); ++t) ids.push_back("task" + std::to_string(t));
    CoeffLoop loop(config, base, taus, ids, level);

    const size_t batch = static_cast<size_t>(std::max(1, opt.batch_per_task)) * taus.size();
    size_t budget = unlabeled_prompts.size();
    if (opt.budget_per_task > 0)
        budget = std::min(budget, static_cast<size_t>(opt.budget_per_task) * taus.size());
    const size_t iters_per_epoch = std::max<size_t>(1, budget / batch);

    std::vector<double> gamma(loop.gamma_size(), opt.init_value);
    Adam adam({opt.lr, opt.beta1, opt.beta2, opt.eps}, gamma.size());
    Rng root(opt.seed);
    if (log) {
        log->method = "entropy_min";
        log->iterations.clear();
    }

    int iteration = 0;
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        std::vector<size_t> order(budget);
        std::iota(order.begin(), order.end(), 0);
        Rng r = root.fork("adamerge/epoch/" + std::to_string(epoch));
        std::shuffle(order.begin(), order.end(), r.engine());

        for (size_t it = 0; it < iters_per_epoch; ++it) {
            ParameterSet merged = loop.assemble(gamma);
            LanguageModel cand(config, merged);

            std::vector<double> losses(batch);
            std::vector<std::vector<double>> grads(batch);
            parallel_for(batch, [&](size_t j) {
                const std::string& prompt = unlabeled_prompts[order[(it * batch + j) % budget]];
                // The merged model's own greedy trajectory; re-generated every
                // iteration because it moves with Gamma.
                auto prompt_toks = tokens::prompt_tokens(prompt);
                auto gen = cand.greedy_generate(prompt_toks, opt.max_new_tokens);
                if (gen.tokens.empty()) throw ContractViolation("prompt fills the context window");
                const int t_x = static_cast<int>(gen.tokens.size());

                std::vector<int32_t> input = prompt_toks;
                input.insert(input.end(), gen.tokens.begin(), gen.tokens.end() - 1);
                std::vector<int32_t> rows;
                const int32_t p = static_cast<int32_t>(prompt_toks.size());
                for (int32_t t = 0; t < t_x; ++t) rows.push_back(p - 1 + t);

                Tape tape;
                TapeBinding binding;
                NodeId lp = cand.forward_log_probs(tape, input, rows, &binding);
                // mean_t H(p_t) = -1/T sum_t sum_i p_ti log p_ti
                NodeId h = tape.sum(tape.multiply(tape.exp(lp), lp));
                NodeId loss = tape.multiply_scalar(h, -1.0 / static_cast<double>(t_x));
                losses[j] = tape.value(loss).at(0);
                grads[j] = flat_param_grad(tape, binding, tape.backward(loss), loop.base_flat.size());
            });

            const double inv_batch = 1.0 / static_cast<double>(batch);
            double total_loss = 0.0;
            std::vector<double> theta_grad(loop.base_flat.size(), 0.0);
            for (size_t j = 0; j < batch; ++j) {
                total_loss += losses[j] * inv_batch;
                const auto& g = grads[j];
                for (size_t k = 0; k < theta_grad.size(); ++k) theta_grad[k] += g[k] * inv_batch;
            }
            if (!std::isfinite(total_loss)) throw NumericError("entropy merging loss became non-finite");

            if (log) log->iterations.push_back({iteration, total_loss, gamma});
            std::vector<double> g = loop.gamma_grad(theta_grad);
            adam.step(gamma, g);
            ++iteration;
        }
    }

    MergeCoefficients result = loop.coeffs(gamma);
    if (log) log->final_coefficients = result;
    return result;
}

}  // namespace mergeforge
