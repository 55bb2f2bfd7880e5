#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "l2t/dataset.hpp"
#include "l2t/model.hpp"

namespace l2t {

enum class Stage : uint8_t { Pretrain, Finetune };

// How per-sample losses combine into the batch objective. SampleMean keeps
// the per-sample token sums (the joint-NLL form) and averages over the
// batch, so a response token carries the same gradient weight under every
// mask mode. TokenMean divides by the supervised-token count instead; under
// Adam it starves response tokens for the larger masks, so it is kept for
// comparison runs rather than as the default.
enum class LossReduction : uint8_t { SampleMean, TokenMean };

struct TrainConfig {
  Stage stage = Stage::Finetune;
  MaskMode mask_mode = MaskMode::Vit;
  LossReduction reduction = LossReduction::SampleMean;
  double lr_peak = 1e-3;
  double warmup_ratio = 0.03;
  int batch_size = 8;
  int epochs = 1;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  // Relative weight of non-response supervised tokens; 1.0 keeps the plain
  // joint objective. Exposed for sensitivity runs only.
  double instr_weight = 1.0;
  bool supervise_eos = true;
  bool from_scratch = false;  // allow finetune without a pretrain stage
  uint64_t seed = 1;
  int n_threads = 1;

  void validate() const;

  // Tiny-model defaults for both stages.
  static TrainConfig desk_preset(Stage stage);
  // The published recipe values (pretrain lr 1e-3 / finetune lr 2e-5,
  // batch 256/128); schedule shape is identical to the desk preset.
  static TrainConfig paper_faithful_preset(Stage stage);
};

// Linear warmup to lr_peak over warmup_ratio*total_steps, cosine to zero.
double lr_at(int64_t step, int64_t total_steps, const TrainConfig& cfg);

struct LogRow {
  int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double loss_vit_component = 0.0;
  int64_t tokens_resp = 0;
  int64_t tokens_instr = 0;
  int64_t tokens_template = 0;
  double ms_per_step = 0.0;
};

struct TrainStats {
  std::vector<LogRow> rows;
  int64_t steps = 0;
  int64_t skipped_empty_mask = 0;
  double final_loss = 0.0;
};

void write_train_log_csv(const std::string& path,
                         const std::vector<LogRow>& rows);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  int64_t t = 0;
};

// One decoupled-weight-decay Adam update over parameter/gradient pairs.
void adamw_step(std::vector<Tensor*>& params,
                const std::vector<std::vector<double>>& grads,
                AdamState& state, const TrainConfig& cfg, double lr);

// Connector-only caption alignment. Mask mode is forced to response-only
// supervision regardless of cfg; decoder and projection stay untouched.
TrainStats pretrain(TinyMllm& model, const std::vector<DatasetRecord>& data,
                    const Vocab& vocab, const ChatTemplate& chat,
                    const TemplateSet& templates, TrainConfig cfg);

// End-to-end stage: connector + decoder train, projection stays frozen.
TrainStats finetune(TinyMllm& model, const std::vector<DatasetRecord>& data,
                    const Vocab& vocab, const ChatTemplate& chat,
                    const TemplateSet& templates, TrainConfig cfg);

struct SelfGenerated {
  std::vector<DatasetRecord> records;
  int64_t malformed = 0;
  int64_t total = 0;
  double malformed_rate() const {
    return total == 0 ? 0.0 : static_cast<double>(malformed) / total;
  }
};

// Prompts the model with image-only prefixes and splits each generation at
// the assistant tag into an (instruction, response) pair. Generations
// without the tag are dropped and counted.
SelfGenerated self_generate(const TinyMllm& model,
                            const std::vector<DatasetRecord>& images, int n,
                            const Vocab& vocab, const ChatTemplate& chat,
                            const GenerateConfig& gen);

}  // namespace l2t
