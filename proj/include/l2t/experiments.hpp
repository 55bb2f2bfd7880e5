#pragma once

#include <optional>
#include <string>
#include <vector>

#include "l2t/manifest.hpp"
#include "l2t/metrics.hpp"
#include "l2t/synthworld.hpp"
#include "l2t/trainer.hpp"

namespace l2t {

// The default shortcut benchmark: 10k/1k split, leaky phrasings, tiny model.
struct BenchmarkSpec {
  int n_total = 11000;
  double split_frac = 10000.0 / 11000.0;
  double leak_prob = 0.9;
  ShortcutConfig::Channel leak_channel = ShortcutConfig::Channel::Phrasing;
  // Caption pairs train stage 1; the fine-tune mix leans on question kinds
  // where the phrasing shortcut operates.
  TaskMix mix{0.80, 0.10, 0.05, 0.05, 0.00};
  // Sparser grids keep the binding task within reach of the tiny decoder.
  double cell_empty_prob = 0.75;
  uint64_t data_seed = 42;
  int n_pretrain = 558;
  int vocab_cap = 512;
  double template_theta = 0.01;

  MllmConfig model;  // vocab_size filled during prepare; seed per cell
  TrainConfig pre_cfg = TrainConfig::desk_preset(Stage::Pretrain);
  TrainConfig fine_cfg = TrainConfig::desk_preset(Stage::Finetune);

  int eval_max_new = 12;
  uint64_t vc_noise_seed = 2024;
  int vc_noise_draws = 1;
  int n_threads = 2;
};

// Prepared inputs shared by every cell of a benchmark run. Datasets, vocab
// and templates are generated once into `dir` and reloaded from there.
struct BenchmarkEnv {
  BenchmarkSpec spec;
  SynthWorldConfig world = SynthWorldConfig::standard();
  ChatTemplate chat;
  std::vector<DatasetRecord> train;
  std::vector<DatasetRecord> test;
  std::vector<DatasetRecord> pretrain_pairs;
  Vocab vocab;
  TemplateSet templates;
  std::string dir;

  std::string train_path() const { return dir + "/train.jsonl"; }
  std::string test_path() const { return dir + "/test.jsonl"; }
  std::string pretrain_path() const { return dir + "/pretrain.jsonl"; }
  std::string vocab_path() const { return dir + "/vocab.txt"; }
  std::string templates_path() const { return dir + "/templates.txt"; }
};

BenchmarkEnv prepare_benchmark(const BenchmarkSpec& spec,
                               const std::string& dir);

struct EvalMetrics {
  double accuracy = 0.0;       // non-caption records, greedy decode
  double mean_vc = 0.0;        // per-sample VC sums averaged
  double mean_vc_per_token = 0.0;
  double mean_resp_nll = 0.0;  // per-token response NLL averaged
  int64_t n_records = 0;
  int64_t n_accuracy_records = 0;
  // Per-sample rows: id, vc_sum, vc_per_token, resp_nll, correct
  std::vector<std::string> per_sample_csv;
};

EvalMetrics evaluate_model(const TinyMllm& model,
                           const std::vector<DatasetRecord>& records,
                           const BenchmarkEnv& env);

struct CellResult {
  MaskMode mode = MaskMode::Vit;
  uint64_t seed = 0;
  double data_frac = 1.0;
  std::string primary_kind;  // empty = full mix
  EvalMetrics test_metrics;
  double train_final_loss = 0.0;
  int64_t skipped_empty_mask = 0;
  std::string checkpoint_path;
};

// Pretrains (cached per seed under env.dir), finetunes under `mode`, then
// evaluates on the held-out split. Artifacts land in out_dir.
CellResult run_cell(const BenchmarkEnv& env, MaskMode mode, uint64_t seed,
                    const std::string& out_dir, double data_frac = 1.0,
                    const std::string& primary_kind = "");

struct AblateOptions {
  std::vector<MaskMode> modes{MaskMode::Vit, MaskMode::L2tFull,
                              MaskMode::L2tNoSys, MaskMode::L2t};
  std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<double> data_fracs{1.0};
  std::vector<std::string> primary_kinds{""};
};

std::vector<CellResult> run_ablate(const BenchmarkEnv& env,
                                   const AblateOptions& opts,
                                   const std::string& out_dir);

// Long-format CSV: mode,seed,data_frac,primary_kind,metric,value
void write_ablate_csv(const std::string& path,
                      const std::vector<CellResult>& cells);

struct ChairReport {
  ChairResult greedy;
  std::optional<ChairResult> beam;
  int64_t n_captions = 0;
};

// Generates captions for the first n test images and scores them against
// gt_objects over the closed object vocabulary.
ChairReport run_chair(const TinyMllm& model, const BenchmarkEnv& env, int n,
                      bool include_beam, int beam_width = 5,
                      int max_new_tokens = 64);

}  // namespace l2t
