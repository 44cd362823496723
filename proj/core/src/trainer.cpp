#include "mergeforge/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mergeforge/errors.hpp"
#include "mergeforge/optim.hpp"
#include "mergeforge/rng.hpp"
#include "mergeforge/threading.hpp"

namespace mergeforge {

namespace {

// Chooses a stored delta d with fl(b + d) == t. fl(t - b) is within one ulp
// of that already; nudging by a few ulps always lands on an exact preimage.
double exact_delta(double b, double t) {
    double d = t - b;
    if (b + d == t) return d;
    for (int dir = 0; dir < 2; ++dir) {
        double cand = d;
        for (int step = 0; step < 4; ++step) {
            cand = std::nextafter(cand, dir == 0 ? std::numeric_limits<double>::infinity()
                                                 : -std::numeric_limits<double>::infinity());
            if (b + cand == t) return cand;
        }
    }
    throw NumericError("task vector delta has no exact reconstruction");
}

}  // namespace

TaskVector::TaskVector(const ParameterSet& base, const ParameterSet& tuned) {
    if (!base.compatible_with(tuned))
        throw ContractViolation("task_vector requires matching manifests");
    delta_ = tuned;
    for (size_t l = 0; l < delta_.n_layers(); ++l) {
        for (size_t p = 0; p < delta_.layers()[l].params.size(); ++p) {
            Tensor& d = delta_.param(l, p);
            const Tensor& b = base.param(l, p);
            for (int64_t i = 0; i < d.numel(); ++i) d.at(i) = exact_delta(b.at(i), d.at(i));
        }
    }
}

TaskVector TaskVector::from_delta(ParameterSet delta) {
    TaskVector tv;
    tv.delta_ = std::move(delta);
    return tv;
}

double TaskVector::norm() const {
    double s = 0.0;
    for (const auto& layer : delta_.layers())
        for (const auto& [name, tensor] : layer.params)
            for (double v : tensor.vec()) s += v * v;
    return std::sqrt(s);
}

TaskVector task_vector(const ParameterSet& base, const ParameterSet& tuned) {
    return TaskVector(base, tuned);
}

ParameterSet reconstruct(const ParameterSet& base, const TaskVector& tau) {
    if (!base.compatible_with(tau.delta()))
        throw ContractViolation("reconstruct requires matching manifests");
    ParameterSet out = base;
    for (size_t l = 0; l < out.n_layers(); ++l)
        for (size_t p = 0; p < out.layers()[l].params.size(); ++p) {
            Tensor& o = out.param(l, p);
            const Tensor& d = tau.delta().param(l, p);
            for (int64_t i = 0; i < o.numel(); ++i) o.at(i) += d.at(i);
        }
    return out;
}

CompletionItem completion_item(const TaskExample& example) {
    CompletionItem item;
    std::vector<int32_t> full = tokens::prompt_tokens(example.prompt);
    const int32_t prompt_len = static_cast<int32_t>(full.size());
    for (int32_t t : tokens::encode_bytes(example.answer)) full.push_back(t);
    full.push_back(tokens::kEos);
    const int32_t total = static_cast<int32_t>(full.size());

    // Row p-1 of the forward pass predicts token p; the targets are the
    // answer bytes and the final EOS.
    for (int32_t p = prompt_len; p < total; ++p) {
        item.rows.push_back(p - 1);
        item.targets.push_back(full[static_cast<size_t>(p)]);
    }
    item.input.assign(full.begin(), full.end() - 1);
    return item;
}

ParameterSet finetune(const ModelConfig& config, const ParameterSet& base, const TaskDataset& task,
                      const TrainConfig& train_config, TrainLog* log) {
    config.validate();
    if (base.manifest_hash() != init_model(config, 0).manifest_hash())
        throw ContractViolation("base parameters do not match the model config");
    if (train_config.epochs < 1) throw ContractViolation("epochs must be >= 1");
    if (train_config.batch_size < 1) throw ContractViolation("batch_size must be >= 1");
    if (train_config.learning_rate <= 0) throw ContractViolation("learning_rate must be > 0");

    ParameterSet params = base;
    std::vector<double> flat = params.flatten();
    Adam adam({train_config.learning_rate, train_config.beta1, train_config.beta2,
               train_config.eps},
              flat.size());
    Rng root(train_config.seed);

    std::vector<CompletionItem> items;
    for (size_t i : task.train_idx) items.push_back(completion_item(task.examples[i]));

    for (int epoch = 0; epoch < train_config.epochs; ++epoch) {
        std::vector<size_t> order(items.size());
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng = root.fork("finetune/epoch/" + std::to_string(epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng.engine());

        double epoch_loss = 0.0;
        size_t n_batches = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(train_config.batch_size)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(train_config.batch_size));
            const size_t bsz = end - start;

            params.assign_from_flat(flat);
            LanguageModel model(config, params);

            std::vector<double> losses(bsz, 0.0);
            std::vector<std::vector<double>> grads(bsz);
            parallel_for(bsz, [&](size_t j) {
                const CompletionItem& item = items[order[start + j]];
                Tape tape;
                TapeBinding binding;
                NodeId lp = model.forward_log_probs(tape, item.input, item.rows, &binding);

                const int64_t nt = static_cast<int64_t>(item.targets.size());
                Tensor onehot({nt, config.vocab_size});
                for (int64_t r = 0; r < nt; ++r) onehot.at(r, item.targets[static_cast<size_t>(r)]) = 1.0;
                NodeId picked = tape.multiply(lp, tape.constant(std::move(onehot)));
                NodeId loss = tape.multiply_scalar(tape.sum(picked), -1.0 / static_cast<double>(nt));

                losses[j] = tape.value(loss).at(0);
                auto node_grads = tape.backward(loss);

                std::vector<double>& g = grads[j];
                g.reserve(flat.size());
                for (const auto& layer_ids : binding.param_leaf)
                    for (NodeId id : layer_ids) {
                        const Tensor& gt = node_grads[static_cast<size_t>(id)];
                        if (gt.empty()) {
                            const Tensor& v = tape.value(id);
                            g.insert(g.end(), static_cast<size_t>(v.numel()), 0.0);
                        } else {
                            g.insert(g.end(), gt.vec().begin(), gt.vec().end());
                        }
                    }
            });

            // Deterministic reduction in batch order.
            double batch_loss = 0.0;
            std::vector<double> grad(flat.size(), 0.0);
            for (size_t j = 0; j < bsz; ++j) {
                batch_loss += losses[j];
                const auto& g = grads[j];
                for (size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
            }
            batch_loss /= static_cast<double>(bsz);
            const double inv = 1.0 / static_cast<double>(bsz);
            for (double& g : grad) g *= inv;

            if (!std::isfinite(batch_loss)) throw NumericError("fine-tuning loss became non-finite");
            adam.step(flat, grad);
            epoch_loss += batch_loss;
            ++n_batches;
        }
        if (log) log->epoch_loss.push_back(n_batches ? epoch_loss / static_cast<double>(n_batches) : 0.0);
    }

    params.assign_from_flat(flat);
    return params;
}

}  // namespace mergeforge
