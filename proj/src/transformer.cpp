#include "sra/transformer.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace sra {

namespace {

constexpr char kMagic[4] = {'S', 'R', 'A', '1'};

void validate_config(const ModelConfig& c) {
  if (c.vocab_size < 4 || c.d_model < 2 || c.n_layers < 1 || c.n_heads < 1 || c.d_ff < 1 ||
      c.max_seq < 1) {
    throw std::invalid_argument("model config: all dimensions must be positive (vocab >= 4)");
  }
  if (c.d_model % c.n_heads != 0) {
    throw std::invalid_argument("model config: d_model must be divisible by n_heads");
  }
}

std::string layer_name(int layer, const char* field) {
  return "layer" + std::to_string(layer) + "." + field;
}

}  // namespace

Model::Model(const ModelConfig& config, uint64_t seed) : config_(config) {
  validate_config(config_);
  Rng rng(seed);
  const int d = config_.d_model;
  const int ff = config_.d_ff;
  const double w = 0.05;
  auto push = [&](const std::string& name, Tensor t) { params_.push_back({name, std::move(t)}); };

  push("tok_emb", Tensor::randn({config_.vocab_size, d}, rng, w));
  push("pos_emb", Tensor::randn({config_.max_seq, d}, rng, w));
  for (int l = 0; l < config_.n_layers; ++l) {
    push(layer_name(l, "wq"), Tensor::randn({d, d}, rng, w));
    push(layer_name(l, "wk"), Tensor::randn({d, d}, rng, w));
    push(layer_name(l, "wv"), Tensor::randn({d, d}, rng, w));
    push(layer_name(l, "wo"), Tensor::randn({d, d}, rng, w));
    push(layer_name(l, "w1"), Tensor::randn({d, ff}, rng, w));
    push(layer_name(l, "b1"), Tensor::zeros({ff}));
    push(layer_name(l, "w2"), Tensor::randn({ff, d}, rng, w));
    push(layer_name(l, "b2"), Tensor::zeros({d}));
  }
  push("head", Tensor::randn({d, config_.vocab_size}, rng, w));
}

int64_t Model::param_count() const {
  int64_t n = 0;
  for (const Param& p : params_) {
    n += p.value.size();
  }
  return n;
}

ModelActivations Model::forward(const std::vector<int>& ids, Tape* tape) const {
  const int s = static_cast<int>(ids.size());
  if (s < 1) {
    throw std::invalid_argument("forward: empty sequence");
  }
  if (s > config_.max_seq) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(s) +
                                " exceeds max_seq " + std::to_string(config_.max_seq));
  }
  const int d = config_.d_model;
  const int h = config_.n_heads;
  const int dk = d / h;

  auto p = [&](const std::string& name) { return use_param(params_, name, tape); };

  std::vector<int> positions(s);
  std::iota(positions.begin(), positions.end(), 0);
  // strictly-upper-triangular mask: 1 where a query may not see a key
  Tensor mask = Tensor::zeros({h, s, s});
  {
    std::vector<double>& m = mask.mutable_data();
    for (int hh = 0; hh < h; ++hh) {
      for (int i = 0; i < s; ++i) {
        for (int j = i + 1; j < s; ++j) {
          m[(static_cast<int64_t>(hh) * s + i) * s + j] = 1.0;
        }
      }
    }
  }

  ModelActivations acts;
  Tensor x = add(embedding_lookup(p("tok_emb"), ids), embedding_lookup(p("pos_emb"), positions));
  acts.hidden.push_back(x);

  auto split_heads = [&](const Tensor& t) {
    // (S, d) -> (H, S, dk)
    return permute(reshape(t, {s, h, dk}), {1, 0, 2});
  };

  for (int l = 0; l < config_.n_layers; ++l) {
    Tensor a_in = layernorm_lastdim(x);
    Tensor q = split_heads(matmul(a_in, p(layer_name(l, "wq"))));
    Tensor k = split_heads(matmul(a_in, p(layer_name(l, "wk"))));
    Tensor v = split_heads(matmul(a_in, p(layer_name(l, "wv"))));
    Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dk)));
    Tensor probs = softmax_lastdim(masked_fill(scores, mask, -1e9));
    acts.attn.push_back(probs);
    Tensor context = reshape(permute(matmul(probs, v), {1, 0, 2}), {s, d});
    Tensor attn_out = matmul(context, p(layer_name(l, "wo")));
    acts.attn_residual.push_back(attn_out);

    Tensor mid = add(x, attn_out);
    Tensor f_in = layernorm_lastdim(mid);
    Tensor ff_out = add(
        matmul(silu(add(matmul(f_in, p(layer_name(l, "w1"))), p(layer_name(l, "b1")))),
               p(layer_name(l, "w2"))),
        p(layer_name(l, "b2")));
    acts.ff_residual.push_back(ff_out);

    x = add(mid, ff_out);
    acts.hidden.push_back(x);
  }

  acts.final_norm = layernorm_lastdim(x);
  acts.logits = matmul(acts.final_norm, p("head"));
  return acts;
}

void Model::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) {
    throw std::runtime_error("cannot open '" + path + "' for writing");
  }
  f.write(kMagic, 4);
  const int32_t cfg[6] = {config_.vocab_size, config_.d_model,  config_.n_layers,
                          config_.n_heads,    config_.d_ff,     config_.max_seq};
  f.write(reinterpret_cast<const char*>(cfg), sizeof(cfg));
  const int32_t n = static_cast<int32_t>(params_.size());
  f.write(reinterpret_cast<const char*>(&n), sizeof(n));
  for (const Param& param : params_) {
    const int32_t name_len = static_cast<int32_t>(param.name.size());
    f.write(reinterpret_cast<const char*>(&name_len), sizeof(name_len));
    f.write(param.name.data(), name_len);
    const int32_t rank = param.value.rank();
    f.write(reinterpret_cast<const char*>(&rank), sizeof(rank));
    for (int i = 0; i < rank; ++i) {
      const int32_t dim = param.value.shape()[i];
      f.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
    }
    f.write(reinterpret_cast<const char*>(param.value.data().data()),
            static_cast<std::streamsize>(param.value.size() * sizeof(double)));
  }
  if (!f) {
    throw std::runtime_error("write to '" + path + "' failed");
  }
}

Model Model::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw std::runtime_error("cannot open '" + path + "'");
  }
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("checkpoint '" + path + "': bad magic");
  }
  int32_t cfg[6];
  f.read(reinterpret_cast<char*>(cfg), sizeof(cfg));
  if (!f) {
    throw std::runtime_error("checkpoint '" + path + "': truncated config");
  }
  ModelConfig config{cfg[0], cfg[1], cfg[2], cfg[3], cfg[4], cfg[5]};
  Model model(config, /*seed=*/0);

  int32_t n = 0;
  f.read(reinterpret_cast<char*>(&n), sizeof(n));
  if (!f || n != static_cast<int32_t>(model.params_.size())) {
    throw std::runtime_error("checkpoint '" + path + "': parameter count mismatch");
  }
  for (Param& param : model.params_) {
    int32_t name_len = 0;
    f.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    if (!f || name_len <= 0 || name_len > 1024) {
      throw std::runtime_error("checkpoint '" + path + "': corrupt parameter name");
    }
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    if (!f || name != param.name) {
      throw std::runtime_error("checkpoint '" + path + "': expected parameter '" + param.name +
                               "', found '" + name + "'");
    }
    int32_t rank = 0;
    f.read(reinterpret_cast<char*>(&rank), sizeof(rank));
    if (!f || rank != param.value.rank()) {
      throw std::runtime_error("checkpoint '" + path + "': rank mismatch for '" + name + "'");
    }
    for (int i = 0; i < rank; ++i) {
      int32_t dim = 0;
      f.read(reinterpret_cast<char*>(&dim), sizeof(dim));
      if (!f || dim != param.value.shape()[i]) {
        throw std::runtime_error("checkpoint '" + path + "': shape mismatch for '" + name + "'");
      }
    }
    f.read(reinterpret_cast<char*>(param.value.mutable_data().data()),
           static_cast<std::streamsize>(param.value.size() * sizeof(double)));
    if (!f) {
      throw std::runtime_error("checkpoint '" + path + "': truncated data for '" + name + "'");
    }
  }
  return model;
}

}  // namespace sra
