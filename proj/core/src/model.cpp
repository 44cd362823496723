#include "mergeforge/model.hpp"

#include <cmath>
#include <cstring>
#include <numeric>

#include "mergeforge/errors.hpp"
#include "mergeforge/rng.hpp"

namespace mergeforge {

namespace tokens {

std::vector<int32_t> encode_bytes(std::string_view text) {
    std::vector<int32_t> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(static_cast<int32_t>(c));
    return out;
}

std::vector<int32_t> prompt_tokens(std::string_view prompt) {
    std::vector<int32_t> out;
    out.reserve(prompt.size() + 1);
    out.push_back(kBos);
    for (unsigned char c : prompt) out.push_back(static_cast<int32_t>(c));
    return out;
}

std::string decode(std::span<const int32_t> toks) {
    std::string out;
    for (int32_t t : toks) {
        if (t == kEos) break;
        if (t >= 0 && t < 256) out.push_back(static_cast<char>(t));
    }
    return out;
}

}  // namespace tokens

void ModelConfig::validate() const {
    if (vocab_size != tokens::kVocabSize)
        throw ContractViolation("vocab_size must be 259 (byte vocabulary with BOS/EOS/PAD)");
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0)
        throw ContractViolation("model dimensions must be positive");
    if (d_model % n_heads != 0) throw ContractViolation("d_model must be divisible by n_heads");
    if (max_seq_len < 2) throw ContractViolation("max_seq_len must be at least 2");
}

ParameterSet::ParameterSet(std::vector<Layer> layers) : layers_(std::move(layers)) { rehash(); }

void ParameterSet::rehash() {
    uint64_t h = fnv1a64("mergeforge-manifest-v1");
    for (const auto& layer : layers_) {
        h = fnv1a64(layer.name, h);
        h = fnv1a64("|", h);
        for (const auto& [name, tensor] : layer.params) {
            h = fnv1a64(name, h);
            for (int64_t d : tensor.shape()) {
                h = fnv1a64(":" + std::to_string(d), h);
            }
            h = fnv1a64(";", h);
        }
    }
    manifest_hash_ = h;
}

int64_t ParameterSet::parameter_count() const {
    int64_t n = 0;
    for (const auto& layer : layers_)
        for (const auto& [name, tensor] : layer.params) n += tensor.numel();
    return n;
}

const Tensor* ParameterSet::find(std::string_view layer_name, std::string_view param_name) const {
    for (const auto& layer : layers_) {
        if (layer.name != layer_name) continue;
        for (const auto& [name, tensor] : layer.params)
            if (name == param_name) return &tensor;
    }
    return nullptr;
}

std::vector<double> ParameterSet::flatten() const {
    std::vector<double> flat;
    flat.reserve(static_cast<size_t>(parameter_count()));
    for (const auto& layer : layers_)
        for (const auto& [name, tensor] : layer.params)
            flat.insert(flat.end(), tensor.vec().begin(), tensor.vec().end());
    return flat;
}

void ParameterSet::assign_from_flat(std::span<const double> flat) {
    if (static_cast<int64_t>(flat.size()) != parameter_count())
        throw ContractViolation("flat buffer length does not match parameter count");
    size_t off = 0;
    for (auto& layer : layers_)
        for (auto& [name, tensor] : layer.params) {
            std::memcpy(tensor.data(), flat.data() + off, sizeof(double) * tensor.vec().size());
            off += tensor.vec().size();
        }
}

std::vector<std::pair<size_t, size_t>> ParameterSet::layer_spans() const {
    std::vector<std::pair<size_t, size_t>> spans;
    spans.reserve(layers_.size());
    size_t off = 0;
    for (const auto& layer : layers_) {
        size_t len = 0;
        for (const auto& [name, tensor] : layer.params) len += tensor.vec().size();
        spans.emplace_back(off, len);
        off += len;
    }
    return spans;
}

namespace {

Tensor init_tensor(std::vector<int64_t> shape, double stddev, Rng rng) {
    Tensor t(std::move(shape));
    if (stddev > 0.0) {
        for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = rng.normal(0.0, stddev);
    }
    return t;
}

}  // namespace

ParameterSet init_model(const ModelConfig& config, uint64_t seed) {
    config.validate();
    Rng root(seed);
    const int64_t d = config.d_model;
    const int64_t dh = config.head_dim();
    const int64_t v = config.vocab_size;

    const double emb_std = 0.05;
    const double proj_std = 0.05;
    // Residual-branch outputs are scaled down so the stream stays well
    // conditioned without normalization layers.
    const double resid_std = proj_std / std::sqrt(2.0 * config.n_layers);

    auto make = [&](const std::string& layer, const std::string& name,
                    std::vector<int64_t> shape, double stddev) {
        return std::make_pair(name, init_tensor(std::move(shape), stddev,
                                                root.fork("init/" + layer + "/" + name)));
    };

    std::vector<ParameterSet::Layer> layers;
    {
        ParameterSet::Layer embed{"embed", {}};
        embed.params.push_back(make("embed", "tok_embedding", {v, d}, emb_std));
        embed.params.push_back(make("embed", "pos_embedding", {config.max_seq_len, d}, emb_std));
        layers.push_back(std::move(embed));
    }
    for (int32_t b = 0; b < config.n_layers; ++b) {
        ParameterSet::Layer block{"block" + std::to_string(b), {}};
        for (int32_t h = 0; h < config.n_heads; ++h) {
            const std::string prefix = "attn.h" + std::to_string(h) + ".";
            block.params.push_back(make(block.name, prefix + "wq", {d, dh}, proj_std));
            block.params.push_back(make(block.name, prefix + "wk", {d, dh}, proj_std));
            block.params.push_back(make(block.name, prefix + "wv", {d, dh}, proj_std));
            block.params.push_back(make(block.name, prefix + "wo", {dh, d}, resid_std));
        }
        block.params.push_back(make(block.name, "mlp.w1", {d, 4 * d}, proj_std));
        block.params.push_back(make(block.name, "mlp.b1", {4 * d}, 0.0));
        block.params.push_back(make(block.name, "mlp.w2", {4 * d, d}, resid_std));
        block.params.push_back(make(block.name, "mlp.b2", {d}, 0.0));
        layers.push_back(std::move(block));
    }
    {
        ParameterSet::Layer head{"head", {}};
        head.params.push_back(make("head", "w", {d, v}, proj_std));
        layers.push_back(std::move(head));
    }
    return ParameterSet(std::move(layers));
}

int64_t expected_parameter_count(const ModelConfig& c) {
    const int64_t d = c.d_model;
    // embed: vocab*d + max_seq*d; per block: 4 d^2 attention (any head count)
    // + 8 d^2 + 5 d MLP; head: d*vocab.
    return c.vocab_size * d + c.max_seq_len * d + c.n_layers * (12 * d * d + 5 * d) +
           d * c.vocab_size;
}

LanguageModel::LanguageModel(const ModelConfig& config, const ParameterSet& params)
    : config_(&config), params_(&params) {
    config.validate();
}

NodeId LanguageModel::forward_log_probs(Tape& tape, std::span<const int32_t> toks,
                                        const std::vector<int32_t>& out_rows,
                                        TapeBinding* binding) const {
    const auto& cfg = *config_;
    const int64_t T = static_cast<int64_t>(toks.size());
    if (T < 1) throw ContractViolation("forward requires a nonempty token sequence");
    if (T > cfg.max_seq_len) throw ContractViolation("context longer than max_seq_len");
    for (int32_t t : toks) {
        if (t < 0 || t >= cfg.vocab_size) throw ContractViolation("token id out of vocabulary");
    }

    tape.reserve(tape.size() + 24 * static_cast<size_t>(cfg.n_layers) *
                                   static_cast<size_t>(cfg.n_heads) + 32);

    // Bind every parameter as a leaf, in canonical order.
    std::vector<std::vector<NodeId>> leaf(params_->n_layers());
    for (size_t l = 0; l < params_->n_layers(); ++l) {
        const auto& layer = params_->layers()[l];
        leaf[l].reserve(layer.params.size());
        for (const auto& [name, tensor] : layer.params) leaf[l].push_back(tape.leaf(tensor));
    }
    if (binding) binding->param_leaf = leaf;

    auto find_leaf = [&](size_t l, std::string_view name) -> NodeId {
        const auto& layer = params_->layers()[l];
        for (size_t i = 0; i < layer.params.size(); ++i)
            if (layer.params[i].first == name) return leaf[l][i];
        throw ContractViolation("parameter not found: " + std::string(name));
    };

    std::vector<int32_t> ids(toks.begin(), toks.end());
    std::vector<int32_t> positions(static_cast<size_t>(T));
    std::iota(positions.begin(), positions.end(), 0);

    NodeId x = tape.add(tape.embedding_lookup(find_leaf(0, "tok_embedding"), ids),
                        tape.embedding_lookup(find_leaf(0, "pos_embedding"), positions));

    // Additive causal mask: a large negative (finite) constant above the
    // diagonal zeroes attention to future positions after the softmax.
    Tensor mask({T, T});
    for (int64_t r = 0; r < T; ++r)
        for (int64_t c = r + 1; c < T; ++c) mask.at(r, c) = -1e9;
    NodeId mask_node = tape.constant(std::move(mask));

    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));

    for (int32_t b = 0; b < cfg.n_layers; ++b) {
        const size_t l = static_cast<size_t>(b) + 1;
        NodeId attn_sum = kNoNode;
        for (int32_t h = 0; h < cfg.n_heads; ++h) {
            const std::string prefix = "attn.h" + std::to_string(h) + ".";
            NodeId q = tape.matmul(x, find_leaf(l, prefix + "wq"));
            NodeId k = tape.matmul(x, find_leaf(l, prefix + "wk"));
            NodeId v = tape.matmul(x, find_leaf(l, prefix + "wv"));
            NodeId scores = tape.add(tape.multiply_scalar(tape.matmul(q, k, false, true),
                                                          inv_sqrt_dh),
                                     mask_node);
            NodeId probs = tape.exp(tape.log_softmax_rows(scores));
            NodeId contrib = tape.matmul(tape.matmul(probs, v), find_leaf(l, prefix + "wo"));
            attn_sum = attn_sum == kNoNode ? contrib : tape.add(attn_sum, contrib);
        }
        x = tape.add(x, attn_sum);
        NodeId hmid = tape.relu(tape.add(tape.matmul(x, find_leaf(l, "mlp.w1")),
                                         find_leaf(l, "mlp.b1")));
        NodeId m = tape.add(tape.matmul(hmid, find_leaf(l, "mlp.w2")), find_leaf(l, "mlp.b2"));
        x = tape.add(x, m);
    }

    NodeId hx = out_rows.empty() ? x : tape.gather_rows(x, out_rows);
    NodeId logits = tape.matmul(hx, find_leaf(params_->n_layers() - 1, "w"));
    return tape.log_softmax_rows(logits);
}

TokenDistribution LanguageModel::next_token_distribution(std::span<const int32_t> context) const {
    Tape tape;
    NodeId lp = forward_log_probs(tape, context, {static_cast<int32_t>(context.size()) - 1});
    const Tensor& row = tape.value(lp);
    TokenDistribution dist;
    dist.probs.resize(static_cast<size_t>(row.cols()));
    for (int64_t c = 0; c < row.cols(); ++c) dist.probs[static_cast<size_t>(c)] = std::exp(row.at(0, c));
    return dist;
}

LanguageModel::Generation LanguageModel::greedy_generate(std::span<const int32_t> prompt,
                                                         int max_new_tokens) const {
    if (max_new_tokens < 1) throw ContractViolation("max_new_tokens must be >= 1");
    Generation gen;
    std::vector<int32_t> ctx(prompt.begin(), prompt.end());
    for (int step = 0; step < max_new_tokens; ++step) {
        if (static_cast<int32_t>(ctx.size()) > config_->max_seq_len) break;  // window full
        TokenDistribution dist = next_token_distribution(ctx);
        int32_t best = 0;
        for (int32_t i = 1; i < static_cast<int32_t>(dist.probs.size()); ++i) {
            if (dist.probs[static_cast<size_t>(i)] > dist.probs[static_cast<size_t>(best)]) best = i;
        }
        gen.tokens.push_back(best);
        gen.step_dists.push_back(std::move(dist));
        ctx.push_back(best);
        if (best == tokens::kEos) break;
    }
    return gen;
}

}  // namespace mergeforge
