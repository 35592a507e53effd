// Command-line front end: train / ablate / eval / align / config.
//
// Metrics stream as one JSON object per line (to stdout, or to files under
// --out); the final summary is a JSON document. Any invariant breach surfaces
// as an exception and a nonzero exit code.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sra/harness.hpp"

namespace {

using sra::CellSummary;
using sra::EvalMetrics;
using sra::Param;
using sra::ParamList;
using sra::Pipeline;
using sra::SeedResult;
using sra::StepMetrics;
using sra::Tensor;

const Tensor& param_named(const ParamList& params, const std::string& name) {
  for (const Param& p : params) {
    if (p.name == name) {
      return p.value;
    }
  }
  throw std::runtime_error("checkpoint is missing parameter '" + name + "'");
}

bool same_tensor(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank()) {
    return false;
  }
  for (int i = 0; i < a.rank(); ++i) {
    if (a.dim(i) != b.dim(i)) {
      return false;
    }
  }
  return a.data() == b.data();
}

void fill_means(CellSummary& cell) {
  const double n = static_cast<double>(cell.seeds.size());
  for (const SeedResult& r : cell.seeds) {
    cell.mean_span_cos += r.final_eval.span_cos / n;
    cell.mean_span_kl += r.final_eval.span_kl / n;
    cell.mean_ce += r.final_eval.ce / n;
    cell.mean_geo_disc += r.final_eval.geo_disc / n;
  }
}

// Returns a per-step sink: a flushing file stream under `out_dir`, or stdout.
std::function<void(const StepMetrics&)> metrics_sink(const std::string& out_dir,
                                                     const std::string& stem,
                                                     std::ofstream& file) {
  if (out_dir.empty()) {
    return [](const StepMetrics& m) { std::cout << sra::metrics_line(m) << std::endl; };
  }
  file.open(out_dir + "/" + stem + ".jsonl");
  if (!file) {
    throw std::runtime_error("cannot open metrics file under " + out_dir);
  }
  return [&file](const StepMetrics& m) { file << sra::metrics_line(m) << std::endl; };
}

void emit_summary(const std::string& out_dir, const std::string& text) {
  if (out_dir.empty()) {
    std::cout << text << "\n";
  } else {
    std::ofstream out(out_dir + "/summary.json");
    if (!out) {
      throw std::runtime_error("cannot write summary under " + out_dir);
    }
    out << text << "\n";
  }
}

int run_train(const std::string& config_path, int64_t seed_override,
              const std::string& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  const sra::RunConfig cfg = sra::load_config(config_path);
  const Pipeline pipe = sra::build_pipeline(cfg);
  std::cerr << "teacher eval ce " << pipe.teacher_eval_ce << " (unigram baseline "
            << pipe.unigram_baseline << ")\n";

  std::vector<uint64_t> seeds = cfg.seeds;
  if (seed_override >= 0) {
    seeds = {static_cast<uint64_t>(seed_override)};
  }

  CellSummary cell;
  cell.name = "train";
  cell.hp = cfg.hp;
  for (uint64_t seed : seeds) {
    std::ofstream file;
    const auto sink = metrics_sink(out_dir, "metrics_seed" + std::to_string(seed), file);
    SeedResult r = sra::run_distillation(pipe, cfg.hp, seed, sink);
    std::cerr << "seed " << seed << ": best epoch " << r.best_epoch << ", span cos "
              << r.final_eval.span_cos << ", span kl " << r.final_eval.span_kl << "\n";
    if (!out_dir.empty()) {
      ParamList ckpt = r.model_params;
      for (const Param& p : r.projector_params) {
        ckpt.push_back(p);
      }
      sra::save_params(ckpt, out_dir + "/student_seed" + std::to_string(seed) + ".ckpt");
    }
    cell.seeds.push_back(std::move(r));
  }
  fill_means(cell);

  if (!out_dir.empty()) {
    sra::save_params(pipe.teacher.params(), out_dir + "/teacher.ckpt");
    pipe.teacher_tok.save(out_dir + "/teacher.tok");
    pipe.student_tok.save(out_dir + "/student.tok");
  }
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  emit_summary(out_dir, sra::report_json(pipe, {cell}, wall));
  return 0;
}

int run_ablate(const std::string& config_path, const std::string& axis,
               const std::string& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  const sra::RunConfig cfg = sra::load_config(config_path);
  const Pipeline pipe = sra::build_pipeline(cfg);
  std::vector<CellSummary> cells;
  for (const sra::AblationCell& spec : sra::ablation_cells(cfg.hp, axis)) {
    std::ofstream file;
    const auto sink = metrics_sink(out_dir, "metrics_" + spec.name, file);
    cells.push_back(sra::run_cell(pipe, spec, sink));
    const CellSummary& c = cells.back();
    std::cerr << spec.name << ": mean span cos " << c.mean_span_cos << ", mean span kl "
              << c.mean_span_kl << "\n";
  }
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  emit_summary(out_dir, sra::report_json(pipe, cells, wall));
  return 0;
}

int run_eval(const std::string& config_path, const std::string& student_path,
             const std::string& teacher_path) {
  const sra::RunConfig cfg = sra::load_config(config_path);
  const Pipeline pipe = sra::build_pipeline(cfg);

  // The teacher is a deterministic function of the config; a checkpoint that
  // disagrees means the student was trained against a different setup, so the
  // cached activations in this pipeline would not be the ones it distilled
  // from. Refuse rather than report misleading numbers.
  const ParamList teacher_ckpt = sra::load_params(teacher_path);
  const ParamList& live = pipe.teacher.params();
  if (teacher_ckpt.size() != live.size()) {
    throw std::runtime_error("teacher checkpoint does not match the configured teacher");
  }
  for (size_t i = 0; i < live.size(); ++i) {
    if (teacher_ckpt[i].name != live[i].name ||
        !same_tensor(teacher_ckpt[i].value, live[i].value)) {
      throw std::runtime_error("teacher checkpoint does not match the configured teacher");
    }
  }

  const ParamList student_ckpt = sra::load_params(student_path);
  sra::Model student(pipe.config.student_model, /*seed=*/0);
  for (Param& p : student.params()) {
    const Tensor& stored = param_named(student_ckpt, p.name);
    if (stored.rank() != p.value.rank()) {
      throw std::runtime_error("checkpoint shape mismatch for '" + p.name + "'");
    }
    for (int i = 0; i < stored.rank(); ++i) {
      if (stored.dim(i) != p.value.dim(i)) {
        throw std::runtime_error("checkpoint shape mismatch for '" + p.name + "'");
      }
    }
    p.value = stored;
  }
  const EvalMetrics em =
      sra::evaluate(pipe, student, param_named(student_ckpt, "projector0"));
  nlohmann::json doc = {{"span_cos", em.span_cos},
                        {"span_kl", em.span_kl},
                        {"ce", em.ce},
                        {"geo_disc", em.geo_disc},
                        {"spans", em.spans}};
  std::cout << doc.dump() << "\n";
  return 0;
}

int run_align(const std::string& teacher_tok_path, const std::string& student_tok_path,
              const std::string& text) {
  const sra::ToyTokenizer teacher_tok = sra::ToyTokenizer::load(teacher_tok_path);
  const sra::ToyTokenizer student_tok = sra::ToyTokenizer::load(student_tok_path);
  const sra::Encoded t = teacher_tok.encode_with_offsets(text);
  const sra::Encoded s = student_tok.encode_with_offsets(text);
  const std::vector<sra::SpanPair> spans = sra::align_spans(t.offsets, s.offsets);
  sra::validate_alignment(spans, t.offsets, s.offsets);
  for (const sra::SpanPair& sp : spans) {
    std::printf("{\"t\":[%d,%d],\"s\":[%d,%d],\"chars\":[%d,%d]}\n", sp.teacher.start,
                sp.teacher.end, sp.student.start, sp.student.end, sp.char_start, sp.char_end);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"span-aligned cross-tokenizer distillation workbench"};
  app.require_subcommand(1);

  std::string config_path, out_dir, axis;
  int64_t seed_override = -1;

  CLI::App* train = app.add_subcommand("train", "distill a student over the configured seeds");
  train->add_option("--config", config_path, "run configuration file")->required();
  train->add_option("--seed", seed_override, "run a single seed instead of the configured set");
  train->add_option("--out", out_dir, "directory for metrics, checkpoints, and the summary");

  CLI::App* ablate = app.add_subcommand("ablate", "run one ablation axis over all seeds");
  ablate->add_option("--config", config_path, "run configuration file")->required();
  ablate->add_option("--axis", axis, "loss_components | weighting | layers | p")->required();
  ablate->add_option("--out", out_dir, "directory for metrics and the summary");

  std::string student_path, teacher_path;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a student checkpoint");
  eval->add_option("--student", student_path, "student checkpoint (model + projector)")
      ->required();
  eval->add_option("--teacher", teacher_path, "teacher checkpoint to validate against")
      ->required();
  eval->add_option("--config", config_path, "run configuration file")->required();

  std::string teacher_tok_path, student_tok_path, text;
  CLI::App* align = app.add_subcommand("align", "print aligned span pairs for a text");
  align->add_option("--teacher-tok", teacher_tok_path, "teacher tokenizer file")->required();
  align->add_option("--student-tok", student_tok_path, "student tokenizer file")->required();
  align->add_option("--text", text, "text to segment")->required();

  std::string dump_path;
  CLI::App* config = app.add_subcommand("config", "print the default configuration");
  config->add_option("--out", dump_path, "write to a file instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (!out_dir.empty()) {
      std::filesystem::create_directories(out_dir);
    }
    if (*train) {
      return run_train(config_path, seed_override, out_dir);
    }
    if (*ablate) {
      return run_ablate(config_path, axis, out_dir);
    }
    if (*eval) {
      return run_eval(config_path, student_path, teacher_path);
    }
    if (*align) {
      return run_align(teacher_tok_path, student_tok_path, text);
    }
    const std::string text_out = sra::write_config(sra::default_config());
    if (dump_path.empty()) {
      std::cout << text_out;
    } else {
      std::ofstream out(dump_path);
      if (!out) {
        throw std::runtime_error("cannot write " + dump_path);
      }
      out << text_out;
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
