#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "l2t/dataset.hpp"
#include "l2t/model.hpp"
#include "l2t/trainer.hpp"

namespace l2t {

// Sum of -log p over the response target positions, independent of the mask
// mode used in training.
double response_nll(const TinyMllm& model, const SerializedSample& s,
                    std::span<const double> feature);

struct VcResult {
  double sum = 0.0;        // log p(resp | image) - log p(resp | noise)
  double per_token = 0.0;  // sum / response token count
  int64_t n_resp_tokens = 0;
};

// Response log-likelihood with the real image minus with a seeded
// uniform(-1,1) noise feature pushed through the same projection+connector
// path. noise_draws > 1 averages the noise term over draws.
VcResult visual_contribution(const TinyMllm& model, const SerializedSample& s,
                             std::span<const double> feature,
                             const std::string& sample_id, uint64_t noise_seed,
                             int noise_draws = 1);

// Same computation with a caller-supplied substitute feature.
VcResult visual_contribution_with_noise(const TinyMllm& model,
                                        const SerializedSample& s,
                                        std::span<const double> feature,
                                        std::span<const double> noise);

struct ChairResult {
  double chair_s = 0.0;  // captions with at least one hallucinated object
  double chair_i = 0.0;  // hallucinated mentions over all mentions
  std::vector<uint8_t> flagged;
  int64_t total_mentioned = 0;
  int64_t total_hallucinated = 0;
};

ChairResult chair(const std::vector<std::string>& captions,
                  const std::vector<std::vector<std::string>>& gt_objects,
                  const std::vector<std::string>& object_vocab);

// Exact string match after tokenizer normalization.
double accuracy(const std::vector<std::string>& outputs,
                const std::vector<std::string>& references);

struct AttentionProbe {
  int anchor = -1;
  std::vector<double> visual_mass;  // per head, last layer
  Tensor anchor_rows;               // [heads x seq_len] full rows
};

// Attention mass from the answer-anchor position onto the visual tokens,
// per head of the last decoder layer.
AttentionProbe attention_probe(const TinyMllm& model,
                               const SerializedSample& s,
                               std::span<const double> feature);

// Pure helper over a weights tensor {H, S, S}; exposed for direct checks.
std::vector<double> probe_from_weights(const Tensor& weights, int anchor,
                                       int slot_begin, int slot_count);

struct ThroughputResult {
  double samples_per_s = 0.0;
  double steps_per_s = 0.0;
  int64_t timed_steps = 0;
};

// Wall-clock training throughput; the first `warmup_steps` are excluded.
// Runs one step per batch over the records, cycling as needed.
ThroughputResult throughput_bench(const TinyMllm& model,
                                  const std::vector<DatasetRecord>& records,
                                  const Vocab& vocab, const ChatTemplate& chat,
                                  const TemplateSet& templates,
                                  MaskMode mode, int n_steps, int batch_size,
                                  int warmup_steps = 5, int n_threads = 1);

}  // namespace l2t
