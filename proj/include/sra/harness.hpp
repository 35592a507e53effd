#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "sra/losses.hpp"
#include "sra/span_align.hpp"
#include "sra/span_pool.hpp"
#include "sra/tokenizer.hpp"
#include "sra/transformer.hpp"

namespace sra {

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

struct CorpusSpec {
  uint64_t seed = 7;
  int sentences = 200;
  int word_types = 20;   // distinct multi-character words
  int min_words = 3;     // response length bounds, in words
  int max_words = 7;
  double noise = 0.15;   // chance of an uninformative filler word after each response word

  bool operator==(const CorpusSpec&) const = default;
};

// One training item: an instruction-style prompt and its continuation.
// The cross-entropy loss may mask out prompt characters.
struct CorpusItem {
  std::string prompt;    // e.g. "ralesdo belaros:"
  std::string response;  // e.g. " belaros odersal xz alsedor."
  std::string text() const { return prompt + response; }
};

// Deterministic sentences built from a fixed word inventory with a strong
// first-order word-transition structure, so a language model has something
// a unigram table cannot capture. Same spec -> identical corpus.
std::vector<CorpusItem> generate_corpus(const CorpusSpec& spec);

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct Hyperparams {
  double alpha = 0.5;        // CE weight in the overall objective
  double lambda = 50.0;      // geometry-preservation weight inside the hidden-state term
  double p = 1.0;            // span-weight sharpness exponent
  double tau = 2.0;          // distillation temperature
  double model_lr = 1e-3;
  double projector_lr = 5e-4;
  int epochs = 48;
  int batch_size = 8;
  bool weighted_pooling = true;   // attention-weighted span pooling (off = plain mean)
  bool weighted_span_loss = true; // per-span importance weights (off = uniform)
  bool use_cos = true;            // projected-CoM cosine term
  bool use_geo = true;            // pairwise-geometry term
  bool use_kd = true;             // shared-vocabulary logit distillation term
  bool mask_prompt = true;        // exclude prompt tokens from CE
  bool kd_tau_sq = false;         // multiply the logit term by tau^2
  ComMode norm_mode = ComMode::Com;
  std::vector<int> transfer_layers = {0};  // 0 = last block, 1 = one before it, ...

  bool operator==(const Hyperparams&) const = default;
};

struct RunConfig {
  CorpusSpec corpus;
  ModelConfig teacher_model;
  ModelConfig student_model;
  TokenizerScheme teacher_scheme = TokenizerScheme::PairMerge;
  TokenizerScheme student_scheme = TokenizerScheme::Lexicon;
  int teacher_vocab = 120;
  int student_vocab = 100;
  int teacher_epochs = 3;
  double teacher_lr = 1e-3;
  uint64_t teacher_seed = 97;
  int holdout = 40;  // items reserved for evaluation, taken from the corpus tail
  Hyperparams hp;
  std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};

  bool operator==(const RunConfig&) const = default;
};

// Desk-scale defaults sized so a full ablation grid runs in minutes.
RunConfig default_config();

// `key = value` lines, '#' comments. Unknown keys and malformed values are
// rejected. write_config produces text parse_config accepts (round-trip).
RunConfig parse_config(std::istream& in);
RunConfig load_config(const std::string& path);
std::string write_config(const RunConfig& config);

// ---------------------------------------------------------------------------
// Prepared data
// ---------------------------------------------------------------------------

// Everything about one corpus item that is fixed across runs once the
// tokenizers exist: both encodings, the span alignment between them, and
// next-token targets (prompt positions already masked with -1).
struct ItemData {
  Encoded teacher_enc;
  Encoded student_enc;
  std::vector<SpanPair> spans;
  std::vector<int> teacher_targets;
  std::vector<int> student_targets;
  // teacher activations, filled once the teacher is trained:
  std::vector<double> teacher_token_w;  // length S_T, final-layer attention masses
  std::vector<Tensor> teacher_hidden;   // per cached transfer layer, (S_T, d_T)
};

ItemData prepare_item(const CorpusItem& item, const ToyTokenizer& teacher_tok,
                      const ToyTokenizer& student_tok, bool mask_prompt);

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// Adam with per-call learning rate, state keyed by parameter name.
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(Param& param, const Tensor& grad, double lr);

 private:
  struct Slot {
    std::vector<double> m, v;
    int64_t t = 0;
  };
  double beta1_, beta2_, eps_;
  std::map<std::string, Slot> slots_;
};

// ---------------------------------------------------------------------------
// Pipeline: corpus + tokenizers + trained teacher + caches
// ---------------------------------------------------------------------------

struct Pipeline {
  RunConfig config;
  std::vector<CorpusItem> train_items, eval_items;
  ToyTokenizer teacher_tok, student_tok;
  std::vector<int> shared_teacher_ids;  // aligned: entry k of both lists is the
  std::vector<int> shared_student_ids;  // same token string in either vocabulary
  Tensor teacher_selection;  // (V_T, shared) 0/1 column selector
  Tensor student_selection;  // (V_S, shared)
  Model teacher;
  std::vector<ItemData> train_data, eval_data;
  std::vector<double> teacher_step_ce;  // pretraining trace
  double teacher_eval_ce = 0.0;
  double unigram_baseline = 0.0;  // held-out cross-entropy of a train-fit unigram table
  int differing_segmentations = 0;  // train sentences the two tokenizers split differently
};

// How many trailing blocks the teacher cache keeps per item (transfer layer
// offsets 0 .. kCachedLayers-1 are valid).
inline constexpr int kCachedLayers = 2;

// Trains the teacher with Adam on prompt-masked CE. Aborts with a diagnostic
// if the loss ever goes non-finite. Zero epochs returns the initialization.
Model pretrain_teacher(const RunConfig& config, std::vector<ItemData>& train_data,
                       std::vector<double>* step_ce = nullptr);

// Generates the corpus, trains both tokenizers, pretrains the teacher, and
// fills every per-item cache. Deterministic for a given config.
Pipeline build_pipeline(const RunConfig& config);

// ---------------------------------------------------------------------------
// Distillation runs
// ---------------------------------------------------------------------------

struct StepMetrics {
  uint64_t seed = 0;
  int epoch = 0;
  double ce = 0.0;
  double hs_span = 0.0;  // cosine part of the hidden-state term (geo reported separately)
  double geo = 0.0;      // raw geometry term, before lambda
  double kd_span = 0.0;
  double overall = 0.0;
};

// One JSON object per step, fixed field order, %.17g floats: byte-identical
// streams are the determinism contract.
std::string metrics_line(const StepMetrics& m);

struct EvalMetrics {
  double span_cos = 0.0;   // mean cosine similarity, projected student CoM vs teacher CoM
  double span_kl = 0.0;    // mean per-span shared-vocabulary KL at tau = 1
  double ce = 0.0;         // student CE over non-masked held-out targets
  double geo_disc = 0.0;   // mean squared pairwise-similarity discrepancy (unprojected)
  int64_t spans = 0;
};

// Fixed measurement protocol regardless of how the student was trained:
// attention-weighted CoM pooling, last block, normalized; plain cosine and
// tau = 1 KL. `projector` maps student CoMs into teacher space (d_S, d_T).
EvalMetrics evaluate(const Pipeline& pipe, const Model& student, const Tensor& projector);

struct SeedResult {
  uint64_t seed = 0;
  std::vector<StepMetrics> steps;
  EvalMetrics final_eval;  // best epoch by held-out span KL
  int best_epoch = 0;
  int skipped_items = 0;  // items whose span alignment was empty
  std::string metrics_stream;
  ParamList model_params;      // student parameters at the best epoch
  ParamList projector_params;  // projector parameters at the best epoch
};

// Trains a fresh student (+ per-layer projectors) against the cached teacher.
// Evaluates after every epoch and keeps the best epoch's metrics.
SeedResult run_distillation(const Pipeline& pipe, const Hyperparams& hp, uint64_t seed,
                            const std::function<void(const StepMetrics&)>& on_step = {});

// ---------------------------------------------------------------------------
// Ablation grids
// ---------------------------------------------------------------------------

struct AblationCell {
  std::string name;
  Hyperparams hp;
};

// axis is one of: loss_components, weighting, layers, p.
std::vector<AblationCell> ablation_cells(const Hyperparams& base, const std::string& axis);

struct CellSummary {
  std::string name;
  Hyperparams hp;
  std::vector<SeedResult> seeds;
  double mean_span_cos = 0.0;
  double mean_span_kl = 0.0;
  double mean_ce = 0.0;
  double mean_geo_disc = 0.0;
};

CellSummary run_cell(const Pipeline& pipe, const AblationCell& cell,
                     const std::function<void(const StepMetrics&)>& on_step = {});
std::vector<CellSummary> run_ablation(const Pipeline& pipe, const std::string& axis);

// Summary document: config echo, teacher stats, one block per cell with
// per-seed finals and means.
std::string report_json(const Pipeline& pipe, const std::vector<CellSummary>& cells,
                        double wall_seconds);

// ---------------------------------------------------------------------------
// Small persistence helpers (projector checkpoints)
// ---------------------------------------------------------------------------

void save_tensor(const Tensor& t, const std::string& path);
Tensor load_tensor(const std::string& path);

// Whole named parameter lists (model or projector checkpoints).
void save_params(const ParamList& params, const std::string& path);
ParamList load_params(const std::string& path);

}  // namespace sra
