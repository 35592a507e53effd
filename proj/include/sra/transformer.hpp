#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sra/tensor.hpp"

namespace sra {

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 0;
  int n_layers = 0;
  int n_heads = 0;
  int d_ff = 0;
  int max_seq = 0;

  bool operator==(const ModelConfig&) const = default;
};

// Everything a forward pass produces that downstream consumers need:
// logits, the per-layer residual stream, and attention probabilities.
struct ModelActivations {
  Tensor logits;               // (S, vocab)
  std::vector<Tensor> hidden;  // hidden[0] = embeddings, hidden[k] = block k output
  Tensor final_norm;           // layernorm(hidden.back()), the head input
  std::vector<Tensor> attn;    // per layer (heads, S, S) attention probabilities
  // per block, the two residual contributions: block output =
  // previous hidden + attn_residual + ff_residual (in that addition order)
  std::vector<Tensor> attn_residual;
  std::vector<Tensor> ff_residual;
};

// Decoder-only pre-norm transformer: learned absolute position embeddings,
// causal multi-head self-attention, SiLU feed-forward, parameter-free
// layernorms, untied input/output embeddings. Float64 end to end.
class Model {
 public:
  Model(const ModelConfig& config, uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParamList& params() { return params_; }
  const ParamList& params() const { return params_; }
  int64_t param_count() const;

  // Runs the model over one token sequence. When `tape` is non-null every
  // parameter is routed through it and all returned activations are tracked,
  // so gradients can flow from any of them (logits, hidden states, attention
  // probabilities) back to the parameters.
  ModelActivations forward(const std::vector<int>& ids, Tape* tape = nullptr) const;

  void save(const std::string& path) const;
  static Model load(const std::string& path);

 private:
  Model() = default;
  ModelConfig config_;
  ParamList params_;
};

}  // namespace sra
