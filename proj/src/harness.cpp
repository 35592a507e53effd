#include "sra/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace sra {

namespace {

using nlohmann::json;

constexpr const char* kWordAlphabet = "abdelors";
// Disjoint from the word alphabet so fillers never merge with real words.
constexpr const char* kFillerAlphabet = "xz";

// Fixed word-to-word successor map: gives the corpus a first-order structure
// a unigram table cannot represent.
int successor(int word, int types) { return (3 * word + 1) % types; }

std::vector<int> shuffled_indices(int n, Rng& rng) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int i = n - 1; i > 0; --i) {
    std::swap(order[i], order[rng.uniform_int(i + 1)]);
  }
  return order;
}

int kept_targets(const std::vector<int>& targets) {
  int kept = 0;
  for (int t : targets) {
    if (t >= 0) {
      ++kept;
    }
  }
  return kept;
}

Tensor find_param(const ParamList& params, const std::string& name) {
  for (const Param& p : params) {
    if (p.name == name) {
      return p.value;
    }
  }
  throw std::invalid_argument("no parameter named '" + name + "'");
}

Tensor row_of(const Tensor& m, int i) {
  const int cols = m.dim(1);
  return reshape(slice(m, {i, 0}, {i + 1, cols}), {cols});
}

std::vector<double> unit_rows(const Tensor& m) {
  const int rows = m.dim(0);
  const int cols = m.dim(1);
  std::vector<double> out(m.data());
  for (int i = 0; i < rows; ++i) {
    double sq = 0.0;
    for (int c = 0; c < cols; ++c) {
      sq += out[i * cols + c] * out[i * cols + c];
    }
    const double inv = 1.0 / std::sqrt(sq + 1e-24);
    for (int c = 0; c < cols; ++c) {
      out[i * cols + c] *= inv;
    }
  }
  return out;
}

// Mean squared difference between the two sides' pairwise cosine
// similarities; the held-out geometry metric.
void pairwise_discrepancy(const Tensor& student_rows, const Tensor& teacher_rows,
                          double* sq_sum, int64_t* pair_count) {
  const int k = student_rows.dim(0);
  if (k < 2) {
    return;
  }
  const int ds = student_rows.dim(1);
  const int dt = teacher_rows.dim(1);
  const std::vector<double> us = unit_rows(student_rows);
  const std::vector<double> ut = unit_rows(teacher_rows);
  for (int i = 0; i < k; ++i) {
    for (int j = i + 1; j < k; ++j) {
      double cs = 0.0, ct = 0.0;
      for (int c = 0; c < ds; ++c) {
        cs += us[i * ds + c] * us[j * ds + c];
      }
      for (int c = 0; c < dt; ++c) {
        ct += ut[i * dt + c] * ut[j * dt + c];
      }
      *sq_sum += (cs - ct) * (cs - ct);
      ++*pair_count;
    }
  }
}

std::vector<int> make_targets(const Encoded& enc, size_t prompt_len, bool mask_prompt) {
  const int s = static_cast<int>(enc.ids.size());
  std::vector<int> targets(s, -1);
  for (int i = 0; i + 1 < s; ++i) {
    targets[i] = enc.ids[i + 1];
  }
  if (mask_prompt) {
    // position j-1 predicts token j; drop it when token j lies in the prompt
    for (int j = 1; j + 1 < s; ++j) {
      if (enc.offsets[j] > 0 && enc.offsets[j] <= static_cast<int>(prompt_len)) {
        targets[j - 1] = -1;
      }
    }
  }
  return targets;
}

void check_hyperparams(const Hyperparams& hp, const ModelConfig& student,
                       const ModelConfig& teacher) {
  if (hp.alpha < 0.0 || hp.alpha > 1.0) {
    throw std::invalid_argument("hyperparams: alpha must lie in [0, 1]");
  }
  if (hp.tau <= 0.0 || hp.p < 0.0 || hp.lambda < 0.0) {
    throw std::invalid_argument("hyperparams: tau must be positive, p and lambda non-negative");
  }
  if (hp.epochs < 0 || hp.batch_size < 1) {
    throw std::invalid_argument("hyperparams: bad epochs or batch size");
  }
  if (hp.transfer_layers.empty()) {
    throw std::invalid_argument("hyperparams: transfer_layers must not be empty");
  }
  for (int off : hp.transfer_layers) {
    if (off < 0 || off >= kCachedLayers || off >= student.n_layers || off >= teacher.n_layers) {
      throw std::invalid_argument("hyperparams: transfer layer offset out of range");
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

std::vector<CorpusItem> generate_corpus(const CorpusSpec& spec) {
  if (spec.sentences < 0 || spec.word_types < 2 || spec.min_words < 1 ||
      spec.max_words < spec.min_words || spec.noise < 0.0 || spec.noise > 1.0) {
    throw std::invalid_argument("generate_corpus: malformed spec");
  }
  Rng rng(spec.seed);
  const int alpha_n = static_cast<int>(std::string(kWordAlphabet).size());

  std::set<std::string> seen;
  const auto make_words = [&](int count) {
    std::vector<std::string> out;
    while (static_cast<int>(out.size()) < count) {
      const int len = 6 + rng.uniform_int(3);
      std::string w;
      for (int i = 0; i < len; ++i) {
        w.push_back(kWordAlphabet[rng.uniform_int(alpha_n)]);
      }
      if (seen.insert(w).second) {
        out.push_back(w);
      }
    }
    return out;
  };
  const std::vector<std::string> words = make_words(spec.word_types);
  // Prompt keys come from a pool several times larger than the chain
  // vocabulary, so each key recurs only a handful of times across the corpus
  // and stays harder to model than the chain words it introduces.
  const std::vector<std::string> keys = make_words(spec.word_types * 5);

  std::vector<CorpusItem> items;
  items.reserve(spec.sentences);
  for (int s = 0; s < spec.sentences; ++s) {
    const int a = rng.uniform_int(static_cast<int>(keys.size()));
    const int b = rng.uniform_int(spec.word_types);
    CorpusItem item;
    item.prompt = keys[a] + " " + words[b] + ":";
    const int count = spec.min_words + rng.uniform_int(spec.max_words - spec.min_words + 1);
    int cur = successor((a + b) % spec.word_types, spec.word_types);
    for (int w = 0; w < count; ++w) {
      item.response += " " + words[cur];
      cur = rng.uniform() < 0.7 ? successor(cur, spec.word_types)
                                : rng.uniform_int(spec.word_types);
      if (rng.uniform() < spec.noise) {
        // Filler drawn from a disjoint alphabet: unpredictable itself and
        // useless for predicting what follows (the word chain skips over it).
        const int len = 1 + rng.uniform_int(2);
        item.response += " ";
        for (int i = 0; i < len; ++i) {
          item.response += kFillerAlphabet[rng.uniform_int(2)];
        }
      }
    }
    item.response += ".";
    items.push_back(std::move(item));
  }
  return items;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

RunConfig default_config() {
  RunConfig config;
  config.corpus = {/*seed=*/7, /*sentences=*/200, /*word_types=*/20, /*min_words=*/3,
                   /*max_words=*/7};
  config.teacher_model = {/*vocab_size=*/0, /*d_model=*/48, /*n_layers=*/3, /*n_heads=*/4,
                          /*d_ff=*/96, /*max_seq=*/96};
  config.student_model = {/*vocab_size=*/0, /*d_model=*/24, /*n_layers=*/2, /*n_heads=*/2,
                          /*d_ff=*/48, /*max_seq=*/96};
  return config;
}

namespace {

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") {
    return true;
  }
  if (v == "false" || v == "0") {
    return false;
  }
  throw std::invalid_argument("config: bad boolean '" + v + "'");
}

int to_int(const std::string& v) {
  size_t pos = 0;
  const int out = std::stoi(v, &pos);
  if (pos != v.size()) {
    throw std::invalid_argument("config: bad integer '" + v + "'");
  }
  return out;
}

double to_double(const std::string& v) {
  size_t pos = 0;
  const double out = std::stod(v, &pos);
  if (pos != v.size()) {
    throw std::invalid_argument("config: bad number '" + v + "'");
  }
  return out;
}

uint64_t to_uint64(const std::string& v) {
  size_t pos = 0;
  const uint64_t out = std::stoull(v, &pos);
  if (pos != v.size()) {
    throw std::invalid_argument("config: bad integer '" + v + "'");
  }
  return out;
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  size_t e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> parts;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    if (!part.empty()) {
      parts.push_back(part);
    }
  }
  return parts;
}

void apply_key(RunConfig& c, const std::string& key, const std::string& value) {
  if (key == "corpus.seed") {
    c.corpus.seed = std::stoull(value);
  } else if (key == "corpus.sentences") {
    c.corpus.sentences = to_int(value);
  } else if (key == "corpus.word_types") {
    c.corpus.word_types = to_int(value);
  } else if (key == "corpus.min_words") {
    c.corpus.min_words = to_int(value);
  } else if (key == "corpus.max_words") {
    c.corpus.max_words = to_int(value);
  } else if (key == "corpus.noise") {
    c.corpus.noise = to_double(value);
  } else if (key == "teacher.vocab") {
    c.teacher_vocab = to_int(value);
  } else if (key == "teacher.d_model") {
    c.teacher_model.d_model = to_int(value);
  } else if (key == "teacher.layers") {
    c.teacher_model.n_layers = to_int(value);
  } else if (key == "teacher.heads") {
    c.teacher_model.n_heads = to_int(value);
  } else if (key == "teacher.ff") {
    c.teacher_model.d_ff = to_int(value);
  } else if (key == "teacher.max_seq") {
    c.teacher_model.max_seq = to_int(value);
  } else if (key == "teacher.scheme") {
    c.teacher_scheme = scheme_from_name(value);
  } else if (key == "teacher.epochs") {
    c.teacher_epochs = to_int(value);
  } else if (key == "teacher.lr") {
    c.teacher_lr = to_double(value);
  } else if (key == "teacher.seed") {
    c.teacher_seed = std::stoull(value);
  } else if (key == "student.vocab") {
    c.student_vocab = to_int(value);
  } else if (key == "student.d_model") {
    c.student_model.d_model = to_int(value);
  } else if (key == "student.layers") {
    c.student_model.n_layers = to_int(value);
  } else if (key == "student.heads") {
    c.student_model.n_heads = to_int(value);
  } else if (key == "student.ff") {
    c.student_model.d_ff = to_int(value);
  } else if (key == "student.max_seq") {
    c.student_model.max_seq = to_int(value);
  } else if (key == "student.scheme") {
    c.student_scheme = scheme_from_name(value);
  } else if (key == "holdout") {
    c.holdout = to_int(value);
  } else if (key == "seeds") {
    c.seeds.clear();
    for (const std::string& s : split_list(value)) {
      c.seeds.push_back(to_uint64(s));
    }
  } else if (key == "hp.alpha") {
    c.hp.alpha = to_double(value);
  } else if (key == "hp.lambda") {
    c.hp.lambda = to_double(value);
  } else if (key == "hp.p") {
    c.hp.p = to_double(value);
  } else if (key == "hp.tau") {
    c.hp.tau = to_double(value);
  } else if (key == "hp.model_lr") {
    c.hp.model_lr = to_double(value);
  } else if (key == "hp.projector_lr") {
    c.hp.projector_lr = to_double(value);
  } else if (key == "hp.epochs") {
    c.hp.epochs = to_int(value);
  } else if (key == "hp.batch_size") {
    c.hp.batch_size = to_int(value);
  } else if (key == "hp.weighted_pooling") {
    c.hp.weighted_pooling = to_bool(value);
  } else if (key == "hp.weighted_span_loss") {
    c.hp.weighted_span_loss = to_bool(value);
  } else if (key == "hp.use_cos") {
    c.hp.use_cos = to_bool(value);
  } else if (key == "hp.use_geo") {
    c.hp.use_geo = to_bool(value);
  } else if (key == "hp.use_kd") {
    c.hp.use_kd = to_bool(value);
  } else if (key == "hp.mask_prompt") {
    c.hp.mask_prompt = to_bool(value);
  } else if (key == "hp.kd_tau_sq") {
    c.hp.kd_tau_sq = to_bool(value);
  } else if (key == "hp.norm") {
    if (value == "com") {
      c.hp.norm_mode = ComMode::Com;
    } else if (value == "raw") {
      c.hp.norm_mode = ComMode::Raw;
    } else {
      throw std::invalid_argument("config: hp.norm must be com or raw");
    }
  } else if (key == "hp.transfer_layers") {
    c.hp.transfer_layers.clear();
    for (const std::string& s : split_list(value)) {
      c.hp.transfer_layers.push_back(to_int(s));
    }
  } else {
    throw std::invalid_argument("config: unknown key '" + key + "'");
  }
}

}  // namespace

RunConfig parse_config(std::istream& in) {
  RunConfig config = default_config();
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) {
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": expected key = value");
    }
    apply_key(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return config;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open config file: " + path);
  }
  return parse_config(in);
}

std::string write_config(const RunConfig& c) {
  std::ostringstream out;
  char buf[64];
  auto num = [&buf](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  out << "corpus.seed = " << c.corpus.seed << "\n";
  out << "corpus.sentences = " << c.corpus.sentences << "\n";
  out << "corpus.word_types = " << c.corpus.word_types << "\n";
  out << "corpus.min_words = " << c.corpus.min_words << "\n";
  out << "corpus.max_words = " << c.corpus.max_words << "\n";
  out << "corpus.noise = " << num(c.corpus.noise) << "\n";
  out << "teacher.vocab = " << c.teacher_vocab << "\n";
  out << "teacher.d_model = " << c.teacher_model.d_model << "\n";
  out << "teacher.layers = " << c.teacher_model.n_layers << "\n";
  out << "teacher.heads = " << c.teacher_model.n_heads << "\n";
  out << "teacher.ff = " << c.teacher_model.d_ff << "\n";
  out << "teacher.max_seq = " << c.teacher_model.max_seq << "\n";
  out << "teacher.scheme = " << scheme_name(c.teacher_scheme) << "\n";
  out << "teacher.epochs = " << c.teacher_epochs << "\n";
  out << "teacher.lr = " << num(c.teacher_lr) << "\n";
  out << "teacher.seed = " << c.teacher_seed << "\n";
  out << "student.vocab = " << c.student_vocab << "\n";
  out << "student.d_model = " << c.student_model.d_model << "\n";
  out << "student.layers = " << c.student_model.n_layers << "\n";
  out << "student.heads = " << c.student_model.n_heads << "\n";
  out << "student.ff = " << c.student_model.d_ff << "\n";
  out << "student.max_seq = " << c.student_model.max_seq << "\n";
  out << "student.scheme = " << scheme_name(c.student_scheme) << "\n";
  out << "holdout = " << c.holdout << "\n";
  out << "seeds = ";
  for (size_t i = 0; i < c.seeds.size(); ++i) {
    out << (i ? "," : "") << c.seeds[i];
  }
  out << "\n";
  out << "hp.alpha = " << num(c.hp.alpha) << "\n";
  out << "hp.lambda = " << num(c.hp.lambda) << "\n";
  out << "hp.p = " << num(c.hp.p) << "\n";
  out << "hp.tau = " << num(c.hp.tau) << "\n";
  out << "hp.model_lr = " << num(c.hp.model_lr) << "\n";
  out << "hp.projector_lr = " << num(c.hp.projector_lr) << "\n";
  out << "hp.epochs = " << c.hp.epochs << "\n";
  out << "hp.batch_size = " << c.hp.batch_size << "\n";
  out << "hp.weighted_pooling = " << (c.hp.weighted_pooling ? "true" : "false") << "\n";
  out << "hp.weighted_span_loss = " << (c.hp.weighted_span_loss ? "true" : "false") << "\n";
  out << "hp.use_cos = " << (c.hp.use_cos ? "true" : "false") << "\n";
  out << "hp.use_geo = " << (c.hp.use_geo ? "true" : "false") << "\n";
  out << "hp.use_kd = " << (c.hp.use_kd ? "true" : "false") << "\n";
  out << "hp.mask_prompt = " << (c.hp.mask_prompt ? "true" : "false") << "\n";
  out << "hp.kd_tau_sq = " << (c.hp.kd_tau_sq ? "true" : "false") << "\n";
  out << "hp.norm = " << (c.hp.norm_mode == ComMode::Com ? "com" : "raw") << "\n";
  out << "hp.transfer_layers = ";
  for (size_t i = 0; i < c.hp.transfer_layers.size(); ++i) {
    out << (i ? "," : "") << c.hp.transfer_layers[i];
  }
  out << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Item preparation
// ---------------------------------------------------------------------------

ItemData prepare_item(const CorpusItem& item, const ToyTokenizer& teacher_tok,
                      const ToyTokenizer& student_tok, bool mask_prompt) {
  ItemData d;
  d.teacher_enc = teacher_tok.encode_with_offsets(item.text());
  d.student_enc = student_tok.encode_with_offsets(item.text());
  d.spans = align_spans(d.teacher_enc.offsets, d.student_enc.offsets);
  d.teacher_targets = make_targets(d.teacher_enc, item.prompt.size(), mask_prompt);
  d.student_targets = make_targets(d.student_enc, item.prompt.size(), mask_prompt);
  return d;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

Adam::Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(Param& param, const Tensor& grad, double lr) {
  std::vector<double>& buf = param.value.mutable_data();
  if (static_cast<size_t>(grad.size()) != buf.size()) {
    throw std::invalid_argument("Adam::step: gradient shape mismatch for " + param.name);
  }
  Slot& slot = slots_[param.name];
  if (slot.m.empty()) {
    slot.m.assign(buf.size(), 0.0);
    slot.v.assign(buf.size(), 0.0);
  }
  ++slot.t;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(slot.t));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(slot.t));
  const std::vector<double>& g = grad.data();
  for (size_t i = 0; i < buf.size(); ++i) {
    slot.m[i] = beta1_ * slot.m[i] + (1.0 - beta1_) * g[i];
    slot.v[i] = beta2_ * slot.v[i] + (1.0 - beta2_) * g[i] * g[i];
    buf[i] -= lr * (slot.m[i] / bc1) / (std::sqrt(slot.v[i] / bc2) + eps_);
  }
}

// ---------------------------------------------------------------------------
// Teacher pretraining
// ---------------------------------------------------------------------------

Model pretrain_teacher(const RunConfig& config, std::vector<ItemData>& train_data,
                       std::vector<double>* step_ce) {
  Model teacher(config.teacher_model, config.teacher_seed);
  if (config.teacher_epochs == 0 || train_data.empty()) {
    return teacher;
  }
  Adam opt;
  Rng shuffle_rng(config.teacher_seed * 0x9E3779B97F4A7C15ull + 1);
  const int n = static_cast<int>(train_data.size());
  const int bs = config.hp.batch_size;
  for (int epoch = 1; epoch <= config.teacher_epochs; ++epoch) {
    const std::vector<int> order = shuffled_indices(n, shuffle_rng);
    for (int start = 0; start < n; start += bs) {
      const int stop = std::min(n, start + bs);
      Tape tape;
      Tensor acc = Tensor::scalar(0.0);
      for (int b = start; b < stop; ++b) {
        const ItemData& d = train_data[order[b]];
        ModelActivations acts = teacher.forward(d.teacher_enc.ids, &tape);
        acc = add(acc, ce_loss(acts.logits, d.teacher_targets));
      }
      Tensor loss = scale(acc, 1.0 / (stop - start));
      if (!std::isfinite(loss.value())) {
        throw std::runtime_error("pretrain_teacher: loss diverged at epoch " +
                                 std::to_string(epoch) + ", batch offset " +
                                 std::to_string(start));
      }
      GradientMap grads = tape.backward(loss);
      for (Param& p : teacher.params()) {
        if (grads.contains(p.name)) {
          opt.step(p, grads.at(p.name), config.teacher_lr);
        }
      }
      if (step_ce) {
        step_ce->push_back(loss.value());
      }
    }
  }
  return teacher;
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

namespace {

// Cross-entropy of held-out targets under an add-one-smoothed unigram table
// fit on the training targets: the floor a context-free predictor reaches.
double unigram_crossentropy(const std::vector<ItemData>& train,
                            const std::vector<ItemData>& holdout, int vocab) {
  std::vector<int64_t> counts(vocab, 0);
  int64_t total = 0;
  for (const ItemData& d : train) {
    for (int t : d.teacher_targets) {
      if (t >= 0) {
        ++counts[t];
        ++total;
      }
    }
  }
  double nll = 0.0;
  int64_t n = 0;
  for (const ItemData& d : holdout) {
    for (int t : d.teacher_targets) {
      if (t >= 0) {
        nll -= std::log((counts[t] + 1.0) / (total + static_cast<double>(vocab)));
        ++n;
      }
    }
  }
  return n ? nll / n : 0.0;
}

double corpus_ce(const Model& model, const std::vector<ItemData>& data, bool teacher_side) {
  double nll = 0.0;
  int64_t kept_total = 0;
  for (const ItemData& d : data) {
    const Encoded& enc = teacher_side ? d.teacher_enc : d.student_enc;
    const std::vector<int>& targets = teacher_side ? d.teacher_targets : d.student_targets;
    const int kept = kept_targets(targets);
    if (kept == 0) {
      continue;
    }
    ModelActivations acts = model.forward(enc.ids, nullptr);
    nll += ce_loss(acts.logits, targets).value() * kept;
    kept_total += kept;
  }
  if (kept_total == 0) {
    throw std::invalid_argument("corpus_ce: no unmasked targets");
  }
  return nll / kept_total;
}

void fill_teacher_cache(const Model& teacher, ItemData& d) {
  ModelActivations acts = teacher.forward(d.teacher_enc.ids, nullptr);
  const Tensor tw = token_weights(acts.attn.back());
  d.teacher_token_w = tw.data();
  d.teacher_hidden.clear();
  const int layers = teacher.config().n_layers;
  for (int off = 0; off < kCachedLayers && off < layers; ++off) {
    d.teacher_hidden.push_back(acts.hidden[layers - off]);
  }
}

}  // namespace

Pipeline build_pipeline(const RunConfig& config_in) {
  RunConfig config = config_in;
  if (config.holdout < 1 || config.holdout >= config.corpus.sentences) {
    throw std::invalid_argument("build_pipeline: holdout must leave both splits non-empty");
  }
  std::vector<CorpusItem> items = generate_corpus(config.corpus);
  std::vector<std::string> texts;
  texts.reserve(items.size());
  for (const CorpusItem& item : items) {
    texts.push_back(item.text());
  }

  ToyTokenizer teacher_tok =
      ToyTokenizer::train(config.teacher_scheme, texts, config.teacher_vocab, config.corpus.seed);
  ToyTokenizer student_tok =
      ToyTokenizer::train(config.student_scheme, texts, config.student_vocab, config.corpus.seed);
  config.teacher_model.vocab_size = teacher_tok.vocab_size();
  config.student_model.vocab_size = student_tok.vocab_size();
  check_hyperparams(config.hp, config.student_model, config.teacher_model);

  const int train_n = config.corpus.sentences - config.holdout;
  std::vector<CorpusItem> train_items(items.begin(), items.begin() + train_n);
  std::vector<CorpusItem> eval_items(items.begin() + train_n, items.end());

  std::vector<ItemData> train_data, eval_data;
  int differing = 0;
  for (const CorpusItem& item : train_items) {
    train_data.push_back(prepare_item(item, teacher_tok, student_tok, config.hp.mask_prompt));
    if (train_data.back().teacher_enc.offsets != train_data.back().student_enc.offsets) {
      ++differing;
    }
  }
  for (const CorpusItem& item : eval_items) {
    eval_data.push_back(prepare_item(item, teacher_tok, student_tok, config.hp.mask_prompt));
  }

  std::vector<int> shared_t, shared_s;
  for (const SharedToken& tok : shared_vocabulary(teacher_tok, student_tok)) {
    if (tok.text == "<pad>" || tok.text == "<bos>") {
      continue;  // never predicted; keep the compared vocabulary meaningful
    }
    shared_t.push_back(tok.id_a);
    shared_s.push_back(tok.id_b);
  }
  if (shared_t.empty()) {
    throw std::runtime_error("build_pipeline: the two vocabularies share no tokens");
  }
  Tensor sel_t = shared_selection_matrix(config.teacher_model.vocab_size, shared_t);
  Tensor sel_s = shared_selection_matrix(config.student_model.vocab_size, shared_s);

  std::vector<double> step_ce;
  Model teacher = pretrain_teacher(config, train_data, &step_ce);
  for (ItemData& d : train_data) {
    fill_teacher_cache(teacher, d);
  }
  for (ItemData& d : eval_data) {
    fill_teacher_cache(teacher, d);
  }

  Pipeline pipe{std::move(config),
                std::move(train_items),
                std::move(eval_items),
                std::move(teacher_tok),
                std::move(student_tok),
                std::move(shared_t),
                std::move(shared_s),
                std::move(sel_t),
                std::move(sel_s),
                std::move(teacher),
                std::move(train_data),
                std::move(eval_data),
                std::move(step_ce),
                /*teacher_eval_ce=*/0.0,
                /*unigram_baseline=*/0.0,
                differing};
  pipe.teacher_eval_ce = corpus_ce(pipe.teacher, pipe.eval_data, /*teacher_side=*/true);
  pipe.unigram_baseline = unigram_crossentropy(pipe.train_data, pipe.eval_data,
                                               pipe.teacher.config().vocab_size);
  return pipe;
}

// ---------------------------------------------------------------------------
// Metrics formatting
// ---------------------------------------------------------------------------

std::string metrics_line(const StepMetrics& m) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "{\"seed\":%llu,\"epoch\":%d,\"ce\":%.17g,\"hs_span\":%.17g,\"geo\":%.17g,"
                "\"kd_span\":%.17g,\"overall\":%.17g}",
                static_cast<unsigned long long>(m.seed), m.epoch, m.ce, m.hs_span, m.geo,
                m.kd_span, m.overall);
  return buf;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

EvalMetrics evaluate(const Pipeline& pipe, const Model& student, const Tensor& projector) {
  if (pipe.eval_data.empty()) {
    throw std::invalid_argument("evaluate: empty evaluation set");
  }
  const int d_s = student.config().d_model;
  const int d_t = pipe.teacher.config().d_model;
  if (projector.rank() != 2 || projector.dim(0) != d_s || projector.dim(1) != d_t) {
    throw std::invalid_argument("evaluate: projector must be (student d_model, teacher d_model)");
  }
  const Tensor student_head = find_param(student.params(), "head");
  const Tensor teacher_head = find_param(pipe.teacher.params(), "head");
  // The student model may share the teacher's tokenizer (same-tokenizer mode);
  // pick the selection matrix matching its actual vocabulary.
  const Tensor& student_sel = student.config().vocab_size == pipe.student_selection.dim(0)
                                  ? pipe.student_selection
                                  : pipe.teacher_selection;

  EvalMetrics out;
  double cos_sum = 0.0, kl_sum = 0.0, nll_sum = 0.0, disc_sum = 0.0;
  int64_t span_count = 0, kept_total = 0, pair_count = 0;
  const int student_layers = student.config().n_layers;
  for (const ItemData& d : pipe.eval_data) {
    ModelActivations acts = student.forward(d.student_enc.ids, nullptr);
    const int kept = kept_targets(d.student_targets);
    if (kept > 0) {
      nll_sum += ce_loss(acts.logits, d.student_targets).value() * kept;
      kept_total += kept;
    }
    if (d.spans.empty()) {
      continue;
    }
    const Tensor sw = token_weights(acts.attn.back());
    const Tensor cs = span_com_matrix(acts.hidden[student_layers], sw, d.spans,
                                      SpanSide::Student, ComMode::Com);
    const Tensor tw(Shape{static_cast<int>(d.teacher_token_w.size())}, d.teacher_token_w);
    const Tensor ct =
        span_com_matrix(d.teacher_hidden[0], tw, d.spans, SpanSide::Teacher, ComMode::Com);
    const Tensor projected = matmul(cs, projector);
    const int k = static_cast<int>(d.spans.size());
    for (int i = 0; i < k; ++i) {
      cos_sum += cosine_sim(row_of(projected, i), row_of(ct, i)).value();
    }
    const Tensor zs = project_shared(matmul(cs, student_head), student_sel);
    const Tensor zt = project_shared(matmul(ct, teacher_head), pipe.teacher_selection);
    kl_sum += kd_span_loss(zs, zt, 1.0).value();
    span_count += k;
    pairwise_discrepancy(cs, ct, &disc_sum, &pair_count);
  }
  if (span_count == 0) {
    throw std::runtime_error("evaluate: no aligned spans in the evaluation set");
  }
  out.span_cos = cos_sum / span_count;
  out.span_kl = kl_sum / span_count;
  out.ce = kept_total ? nll_sum / kept_total : 0.0;
  out.geo_disc = pair_count ? disc_sum / pair_count : 0.0;
  out.spans = span_count;
  return out;
}

// ---------------------------------------------------------------------------
// Distillation
// ---------------------------------------------------------------------------

namespace {

// Teacher-side quantities that are constant for one run configuration.
struct RunItemAssets {
  std::vector<Tensor> teacher_com;  // one (K, d_T) matrix per transfer layer
  Tensor teacher_logits;            // (K, shared) final-layer CoM logits
  std::vector<double> span_w;
};

RunItemAssets prep_item_assets(const Pipeline& pipe, const Hyperparams& hp, const ItemData& d,
                               const Tensor& teacher_head) {
  RunItemAssets assets;
  const int s_t = static_cast<int>(d.teacher_enc.ids.size());
  const Tensor tw = hp.weighted_pooling
                        ? Tensor(Shape{s_t}, d.teacher_token_w)
                        : Tensor::full(Shape{s_t}, 1.0);
  for (int off : hp.transfer_layers) {
    assets.teacher_com.push_back(
        span_com_matrix(d.teacher_hidden[off], tw, d.spans, SpanSide::Teacher, hp.norm_mode));
  }
  if (hp.use_kd) {
    const Tensor com0 =
        hp.transfer_layers[0] == 0
            ? assets.teacher_com[0]
            : span_com_matrix(d.teacher_hidden[0], tw, d.spans, SpanSide::Teacher, hp.norm_mode);
    assets.teacher_logits = project_shared(matmul(com0, teacher_head), pipe.teacher_selection);
  }
  assets.span_w = hp.weighted_span_loss
                      ? span_weights(d.teacher_token_w, d.spans, hp.p)
                      : std::vector<double>(d.spans.size(), 1.0 / d.spans.size());
  return assets;
}

}  // namespace

SeedResult run_distillation(const Pipeline& pipe, const Hyperparams& hp, uint64_t seed,
                            const std::function<void(const StepMetrics&)>& on_step) {
  check_hyperparams(hp, pipe.config.student_model, pipe.teacher.config());
  const int n = static_cast<int>(pipe.train_data.size());
  if (n == 0) {
    throw std::invalid_argument("run_distillation: no training items");
  }

  Model student(pipe.config.student_model, seed);
  const int d_s = student.config().d_model;
  const int d_t = pipe.teacher.config().d_model;
  Rng proj_rng(seed * 0x100000001B3ull + 77);
  ParamList projectors;
  for (int off : hp.transfer_layers) {
    projectors.push_back(
        {"projector" + std::to_string(off), Tensor::randn({d_s, d_t}, proj_rng, 0.05)});
  }
  const Tensor teacher_head = find_param(pipe.teacher.params(), "head");
  // Deep copy: optimizer updates mutate parameter buffers in place.
  auto snapshot_params = [](const ParamList& params) {
    ParamList out;
    out.reserve(params.size());
    for (const Param& p : params) {
      out.push_back({p.name, Tensor(p.value.shape(), p.value.data())});
    }
    return out;
  };

  std::vector<RunItemAssets> assets;
  assets.reserve(n);
  for (const ItemData& d : pipe.train_data) {
    assets.push_back(d.spans.empty() ? RunItemAssets{}
                                     : prep_item_assets(pipe, hp, d, teacher_head));
  }

  Adam opt;
  Rng shuffle_rng(seed * 0x9E3779B97F4A7C15ull + 13);
  SeedResult result;
  result.seed = seed;
  const int student_layers = student.config().n_layers;
  double best_kl = std::numeric_limits<double>::infinity();

  for (int epoch = 1; epoch <= hp.epochs; ++epoch) {
    const std::vector<int> order = shuffled_indices(n, shuffle_rng);
    for (int start = 0; start < n; start += hp.batch_size) {
      const int stop = std::min(n, start + hp.batch_size);
      const double inv_b = 1.0 / (stop - start);
      Tape tape;
      Tensor ce_acc = Tensor::scalar(0.0);
      Tensor cos_acc = Tensor::scalar(0.0);
      Tensor geo_acc = Tensor::scalar(0.0);
      Tensor kd_acc = Tensor::scalar(0.0);
      for (int b = start; b < stop; ++b) {
        const ItemData& d = pipe.train_data[order[b]];
        const RunItemAssets& a = assets[order[b]];
        ModelActivations acts = student.forward(d.student_enc.ids, &tape);
        ce_acc = add(ce_acc, ce_loss(acts.logits, d.student_targets));
        if (d.spans.empty()) {
          ++result.skipped_items;
          continue;
        }
        const int s_s = static_cast<int>(d.student_enc.ids.size());
        const Tensor sw = hp.weighted_pooling ? token_weights(acts.attn.back())
                                              : Tensor::full(Shape{s_s}, 1.0);
        Tensor com0;
        for (size_t li = 0; li < hp.transfer_layers.size(); ++li) {
          const int off = hp.transfer_layers[li];
          const Tensor cs = span_com_matrix(acts.hidden[student_layers - off], sw, d.spans,
                                            SpanSide::Student, hp.norm_mode);
          if (off == 0) {
            com0 = cs;
          }
          if (hp.use_cos) {
            const Tensor projected =
                matmul(cs, use_param(projectors, "projector" + std::to_string(off), &tape));
            cos_acc = add(cos_acc, span_cosine_loss(projected, a.teacher_com[li], a.span_w));
          }
          if (hp.use_geo) {
            geo_acc = add(geo_acc, geo_loss(cs, a.teacher_com[li], a.span_w));
          }
        }
        if (hp.use_kd) {
          if (!com0.defined()) {
            com0 = span_com_matrix(acts.hidden[student_layers], sw, d.spans, SpanSide::Student,
                                   hp.norm_mode);
          }
          const Tensor zs = project_shared(matmul(com0, use_param(student.params(), "head", &tape)),
                                           pipe.student_selection);
          kd_acc = add(kd_acc, kd_span_loss(zs, a.teacher_logits, hp.tau, hp.kd_tau_sq));
        }
      }
      const Tensor ce_mean = scale(ce_acc, inv_b);
      const Tensor cos_mean = scale(cos_acc, inv_b);
      const Tensor geo_mean = scale(geo_acc, inv_b);
      const Tensor kd_mean = scale(kd_acc, inv_b);
      const Tensor hs_total = add(cos_mean, scale(geo_mean, hp.lambda));
      const Tensor loss = overall_loss(ce_mean, hs_total, kd_mean, hp.alpha);
      if (!std::isfinite(loss.value())) {
        throw std::runtime_error("run_distillation: loss diverged (seed " + std::to_string(seed) +
                                 ", epoch " + std::to_string(epoch) + ")");
      }
      GradientMap grads = tape.backward(loss);
      for (Param& p : student.params()) {
        if (grads.contains(p.name)) {
          opt.step(p, grads.at(p.name), hp.model_lr);
        }
      }
      for (Param& p : projectors) {
        if (grads.contains(p.name)) {
          opt.step(p, grads.at(p.name), hp.projector_lr);
        }
      }
      StepMetrics m{seed,           epoch,           ce_mean.value(), cos_mean.value(),
                    geo_mean.value(), kd_mean.value(), loss.value()};
      result.steps.push_back(m);
      result.metrics_stream += metrics_line(m);
      result.metrics_stream += '\n';
      if (on_step) {
        on_step(m);
      }
    }
    // the measurement protocol reads last-block CoMs, so prefer the matching
    // projector; fall back to the first one if offset 0 was not transferred
    Tensor eval_proj = projectors.front().value;
    for (const Param& p : projectors) {
      if (p.name == "projector0") {
        eval_proj = p.value;
      }
    }
    const EvalMetrics em = evaluate(pipe, student, eval_proj);
    if (em.span_kl < best_kl) {
      best_kl = em.span_kl;
      result.final_eval = em;
      result.best_epoch = epoch;
      result.model_params = snapshot_params(student.params());
      result.projector_params = snapshot_params(projectors);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

std::vector<AblationCell> ablation_cells(const Hyperparams& base, const std::string& axis) {
  std::vector<AblationCell> cells;
  if (axis == "loss_components") {
    Hyperparams full = base;
    full.use_cos = full.use_geo = full.use_kd = true;
    cells.push_back({"full", full});
    Hyperparams v = full;
    v.use_cos = false;
    cells.push_back({"no_cos", v});
    v = full;
    v.use_geo = false;
    cells.push_back({"no_geo", v});
    v = full;
    v.use_kd = false;
    cells.push_back({"no_kd", v});
    v = full;
    v.use_cos = v.use_geo = v.use_kd = false;
    v.alpha = 1.0;
    cells.push_back({"ce_only", v});
  } else if (axis == "weighting") {
    for (bool wsl : {true, false}) {
      for (bool wsp : {true, false}) {
        Hyperparams v = base;
        v.weighted_span_loss = wsl;
        v.weighted_pooling = wsp;
        std::string name = std::string("wsl_") + (wsl ? "on" : "off") + "_wsp_" +
                           (wsp ? "on" : "off");
        cells.push_back({name, v});
      }
    }
  } else if (axis == "layers") {
    Hyperparams v = base;
    v.transfer_layers = {0};
    cells.push_back({"last", v});
    v.transfer_layers = {0, 1};
    cells.push_back({"last2", v});
  } else if (axis == "p") {
    for (double p : {0.0, 0.5, 1.0}) {
      Hyperparams v = base;
      v.p = p;
      char name[16];
      std::snprintf(name, sizeof name, "p%g", p);
      cells.push_back({name, v});
    }
  } else {
    throw std::invalid_argument("ablation_cells: unknown axis '" + axis + "'");
  }
  return cells;
}

CellSummary run_cell(const Pipeline& pipe, const AblationCell& cell,
                     const std::function<void(const StepMetrics&)>& on_step) {
  CellSummary summary;
  summary.name = cell.name;
  summary.hp = cell.hp;
  for (uint64_t seed : pipe.config.seeds) {
    summary.seeds.push_back(run_distillation(pipe, cell.hp, seed, on_step));
  }
  const double inv = 1.0 / summary.seeds.size();
  for (const SeedResult& r : summary.seeds) {
    summary.mean_span_cos += r.final_eval.span_cos * inv;
    summary.mean_span_kl += r.final_eval.span_kl * inv;
    summary.mean_ce += r.final_eval.ce * inv;
    summary.mean_geo_disc += r.final_eval.geo_disc * inv;
  }
  return summary;
}

std::vector<CellSummary> run_ablation(const Pipeline& pipe, const std::string& axis) {
  std::vector<CellSummary> out;
  for (const AblationCell& cell : ablation_cells(pipe.config.hp, axis)) {
    out.push_back(run_cell(pipe, cell));
  }
  return out;
}

std::string report_json(const Pipeline& pipe, const std::vector<CellSummary>& cells,
                        double wall_seconds) {
  json doc;
  doc["config"] = write_config(pipe.config);
  doc["teacher"] = {{"eval_ce", pipe.teacher_eval_ce},
                    {"unigram_baseline", pipe.unigram_baseline},
                    {"pretrain_steps", pipe.teacher_step_ce.size()},
                    {"vocab", pipe.teacher.config().vocab_size}};
  doc["data"] = {{"train_items", pipe.train_data.size()},
                 {"eval_items", pipe.eval_data.size()},
                 {"shared_vocabulary", pipe.shared_teacher_ids.size()},
                 {"differing_segmentations", pipe.differing_segmentations}};
  doc["cells"] = json::array();
  for (const CellSummary& cell : cells) {
    json c;
    c["name"] = cell.name;
    c["mean_span_cos"] = cell.mean_span_cos;
    c["mean_span_kl"] = cell.mean_span_kl;
    c["mean_ce"] = cell.mean_ce;
    c["mean_geo_disc"] = cell.mean_geo_disc;
    c["seeds"] = json::array();
    for (const SeedResult& r : cell.seeds) {
      c["seeds"].push_back({{"seed", r.seed},
                            {"best_epoch", r.best_epoch},
                            {"span_cos", r.final_eval.span_cos},
                            {"span_kl", r.final_eval.span_kl},
                            {"ce", r.final_eval.ce},
                            {"geo_disc", r.final_eval.geo_disc},
                            {"spans", r.final_eval.spans},
                            {"skipped_items", r.skipped_items},
                            {"steps", r.steps.size()}});
    }
    doc["cells"].push_back(std::move(c));
  }
  doc["wall_seconds"] = wall_seconds;
  return doc.dump(2);
}

// ---------------------------------------------------------------------------
// Tensor persistence
// ---------------------------------------------------------------------------

void save_tensor(const Tensor& t, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("save_tensor: cannot open " + path);
  }
  const char magic[4] = {'S', 'R', 'A', 'T'};
  out.write(magic, 4);
  const int32_t rank = t.rank();
  out.write(reinterpret_cast<const char*>(&rank), sizeof rank);
  for (int i = 0; i < rank; ++i) {
    const int32_t dim = t.dim(i);
    out.write(reinterpret_cast<const char*>(&dim), sizeof dim);
  }
  out.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!out) {
    throw std::runtime_error("save_tensor: write failed for " + path);
  }
}

Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("load_tensor: cannot open " + path);
  }
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "SRAT") {
    throw std::runtime_error("load_tensor: bad magic in " + path);
  }
  int32_t rank = 0;
  in.read(reinterpret_cast<char*>(&rank), sizeof rank);
  if (!in || rank < 0 || rank > 8) {
    throw std::runtime_error("load_tensor: bad rank in " + path);
  }
  Shape shape(rank);
  int64_t count = 1;
  for (int i = 0; i < rank; ++i) {
    int32_t dim = 0;
    in.read(reinterpret_cast<char*>(&dim), sizeof dim);
    if (!in || dim < 1) {
      throw std::runtime_error("load_tensor: bad dimension in " + path);
    }
    shape[i] = dim;
    count *= dim;
  }
  std::vector<double> data(count);
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) {
    throw std::runtime_error("load_tensor: truncated file " + path);
  }
  return Tensor(shape, std::move(data));
}

void save_params(const ParamList& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("save_params: cannot open " + path);
  }
  const char magic[4] = {'S', 'R', 'A', 'P'};
  out.write(magic, 4);
  const int32_t count = static_cast<int32_t>(params.size());
  out.write(reinterpret_cast<const char*>(&count), sizeof count);
  for (const Param& p : params) {
    const int32_t name_len = static_cast<int32_t>(p.name.size());
    out.write(reinterpret_cast<const char*>(&name_len), sizeof name_len);
    out.write(p.name.data(), name_len);
    const int32_t rank = p.value.rank();
    out.write(reinterpret_cast<const char*>(&rank), sizeof rank);
    for (int i = 0; i < rank; ++i) {
      const int32_t dim = p.value.dim(i);
      out.write(reinterpret_cast<const char*>(&dim), sizeof dim);
    }
    out.write(reinterpret_cast<const char*>(p.value.data().data()),
              static_cast<std::streamsize>(p.value.size() * sizeof(double)));
  }
  if (!out) {
    throw std::runtime_error("save_params: write failed for " + path);
  }
}

ParamList load_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("load_params: cannot open " + path);
  }
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "SRAP") {
    throw std::runtime_error("load_params: bad magic in " + path);
  }
  int32_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof count);
  if (!in || count < 0 || count > 1 << 20) {
    throw std::runtime_error("load_params: bad entry count in " + path);
  }
  ParamList params;
  params.reserve(count);
  for (int32_t e = 0; e < count; ++e) {
    int32_t name_len = 0;
    in.read(reinterpret_cast<char*>(&name_len), sizeof name_len);
    if (!in || name_len < 1 || name_len > 4096) {
      throw std::runtime_error("load_params: bad name length in " + path);
    }
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    int32_t rank = 0;
    in.read(reinterpret_cast<char*>(&rank), sizeof rank);
    if (!in || rank < 0 || rank > 8) {
      throw std::runtime_error("load_params: bad rank in " + path);
    }
    Shape shape(rank);
    int64_t n = 1;
    for (int i = 0; i < rank; ++i) {
      int32_t dim = 0;
      in.read(reinterpret_cast<char*>(&dim), sizeof dim);
      if (!in || dim < 1) {
        throw std::runtime_error("load_params: bad dimension in " + path);
      }
      shape[i] = dim;
      n *= dim;
    }
    std::vector<double> data(n);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) {
      throw std::runtime_error("load_params: truncated file " + path);
    }
    params.push_back({std::move(name), Tensor(shape, std::move(data))});
  }
  return params;
}

}  // namespace sra
