#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mergeforge/tape.hpp"
#include "mergeforge/tensor.hpp"

namespace mergeforge {

namespace tokens {
inline constexpr int32_t kVocabSize = 259;  // 256 bytes + BOS + EOS + PAD
inline constexpr int32_t kBos = 256;
inline constexpr int32_t kEos = 257;
inline constexpr int32_t kPad = 258;

std::vector<int32_t> encode_bytes(std::string_view text);
// BOS followed by the prompt bytes; the shape every model input starts with.
std::vector<int32_t> prompt_tokens(std::string_view prompt);
// Bytes up to (excluding) the first EOS; specials are dropped.
std::string decode(std::span<const int32_t> toks);
}  // namespace tokens

struct ModelConfig {
    int32_t vocab_size = tokens::kVocabSize;
    int32_t d_model = 64;
    int32_t n_layers = 2;
    int32_t n_heads = 4;
    int32_t max_seq_len = 64;

    void validate() const;
    int32_t head_dim() const { return d_model / n_heads; }
    bool operator==(const ModelConfig&) const = default;
};

// Named, shaped, ordered collection of parameter buffers. The layer
// partition is exhaustive and canonical: flattening walks layers and params
// in declaration order. Two sets are merge-compatible iff their manifest
// hashes (a digest of names and shapes) are equal.
class ParameterSet {
public:
    struct Layer {
        std::string name;
        std::vector<std::pair<std::string, Tensor>> params;
    };

    ParameterSet() = default;
    explicit ParameterSet(std::vector<Layer> layers);

    const std::vector<Layer>& layers() const { return layers_; }
    std::vector<Layer>& layers() { return layers_; }
    size_t n_layers() const { return layers_.size(); }

    uint64_t manifest_hash() const { return manifest_hash_; }
    bool compatible_with(const ParameterSet& other) const {
        return manifest_hash_ == other.manifest_hash_;
    }

    int64_t parameter_count() const;
    const Tensor& param(size_t layer, size_t idx) const { return layers_[layer].params[idx].second; }
    Tensor& param(size_t layer, size_t idx) { return layers_[layer].params[idx].second; }
    const Tensor* find(std::string_view layer_name, std::string_view param_name) const;

    std::vector<double> flatten() const;
    void assign_from_flat(std::span<const double> flat);
    // Per-layer (offset, length) into the flat order; the layer partition.
    std::vector<std::pair<size_t, size_t>> layer_spans() const;

    // Must be called after mutating layer structure (not needed for value edits).
    void rehash();

private:
    std::vector<Layer> layers_;
    uint64_t manifest_hash_ = 0;
};

// Deterministic initialization of the full parameter set from a seed. Every
// tensor gets its own named substream, so values do not depend on traversal
// order.
ParameterSet init_model(const ModelConfig& config, uint64_t seed);

struct TokenDistribution {
    std::vector<double> probs;  // length vocab_size, sums to 1
};

// Ids of parameter leaves bound into a tape, aligned with
// ParameterSet::layers() (outer index layer, inner index param).
struct TapeBinding {
    std::vector<std::vector<NodeId>> param_leaf;
};

// Decoder-only byte-level transformer view over (config, params). Blocks are
// pre-norm-free residual attention + ReLU MLP; attention probabilities are
// exp(log_softmax(scores)) with an additive causal mask. Parameters are
// immutable during forward/backward; the view is safe to share across
// threads as long as each thread uses its own Tape.
class LanguageModel {
public:
    LanguageModel(const ModelConfig& config, const ParameterSet& params);

    const ModelConfig& config() const { return *config_; }
    const ParameterSet& params() const { return *params_; }

    // Log-probabilities [R x vocab] for the next token after each requested
    // position (all positions when out_rows is empty). Binds every parameter
    // as a tape leaf; binding receives the leaf ids when non-null.
    NodeId forward_log_probs(Tape& tape, std::span<const int32_t> toks,
                             const std::vector<int32_t>& out_rows = {},
                             TapeBinding* binding = nullptr) const;

    TokenDistribution next_token_distribution(std::span<const int32_t> context) const;

    struct Generation {
        std::vector<int32_t> tokens;                 // includes the final EOS if produced
        std::vector<TokenDistribution> step_dists;   // one per generated token
    };
    // Greedy decoding from an already-tokenized prompt (BOS included by the
    // caller). Stops at EOS, max_new_tokens, or a full context window.
    // Argmax ties break toward the lowest token id.
    Generation greedy_generate(std::span<const int32_t> prompt, int max_new_tokens) const;

private:
    const ModelConfig* config_;
    const ParameterSet* params_;
};

// Closed-form parameter count for the architecture above.
int64_t expected_parameter_count(const ModelConfig& config);

}  // namespace mergeforge
