#include "l2t/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <set>

#include "l2t/kernels.hpp"
#include "l2t/tokenizer.hpp"

namespace l2t {

namespace {

double response_logprob(const TinyMllm& model, const SerializedSample& s,
                        std::span<const double> feature) {
  auto fwd = model.forward(s.ids, feature);
  LossMask vit = build_loss_mask(s, MaskMode::Vit);
  if (vit.count() == 0) raise(Err::EmptyMask, "sample has no response targets");
  CeInputs ce = ce_inputs(s, vit);
  NodeId loss = fwd.graph.cross_entropy_masked(fwd.logits, ce.targets, ce.mask,
                                               Reduction::Sum);
  return -fwd.graph.value(loss).data[0];
}

}  // namespace

double response_nll(const TinyMllm& model, const SerializedSample& s,
                    std::span<const double> feature) {
  return -response_logprob(model, s, feature);
}

namespace {

VcResult vc_from_logprobs(const SerializedSample& s, double real_lp,
                          double noise_lp) {
  VcResult out;
  LossMask vit = build_loss_mask(s, MaskMode::Vit);
  out.n_resp_tokens = vit.count();
  out.sum = real_lp - noise_lp;
  out.per_token = out.n_resp_tokens > 0 ? out.sum / out.n_resp_tokens : 0.0;
  return out;
}

}  // namespace

VcResult visual_contribution(const TinyMllm& model, const SerializedSample& s,
                             std::span<const double> feature,
                             const std::string& sample_id, uint64_t noise_seed,
                             int noise_draws) {
  if (feature.empty()) raise(Err::InvalidArgument, "sample has no image");
  if (noise_draws < 1) raise(Err::InvalidArgument, "noise_draws must be >= 1");
  double real_lp = response_logprob(model, s, feature);

  double noise_lp_acc = 0.0;
  for (int draw = 0; draw < noise_draws; ++draw) {
    std::mt19937_64 rng(
        mix_seed(noise_seed ^ fnv1a64(sample_id), static_cast<uint64_t>(draw)));
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    std::vector<double> noise(feature.size());
    for (double& v : noise) v = uni(rng);
    noise_lp_acc += response_logprob(model, s, noise);
  }
  return vc_from_logprobs(s, real_lp, noise_lp_acc / noise_draws);
}

VcResult visual_contribution_with_noise(const TinyMllm& model,
                                        const SerializedSample& s,
                                        std::span<const double> feature,
                                        std::span<const double> noise) {
  if (feature.empty()) raise(Err::InvalidArgument, "sample has no image");
  return vc_from_logprobs(s, response_logprob(model, s, feature),
                          response_logprob(model, s, noise));
}

ChairResult chair(const std::vector<std::string>& captions,
                  const std::vector<std::vector<std::string>>& gt_objects,
                  const std::vector<std::string>& object_vocab) {
  if (captions.empty()) raise(Err::EmptyCorpus, "no captions to score");
  if (captions.size() != gt_objects.size())
    raise(Err::LengthMismatch, "captions and ground truth differ in length");
  std::set<std::string> vocab(object_vocab.begin(), object_vocab.end());

  ChairResult out;
  out.flagged.assign(captions.size(), 0);
  int64_t flagged_count = 0;
  for (size_t i = 0; i < captions.size(); ++i) {
    std::set<std::string> mentioned;
    for (const std::string& tok : split_words(captions[i]))
      if (vocab.count(tok)) mentioned.insert(tok);
    std::set<std::string> gt(gt_objects[i].begin(), gt_objects[i].end());
    int64_t halluc = 0;
    for (const std::string& m : mentioned)
      if (!gt.count(m)) ++halluc;
    out.total_mentioned += static_cast<int64_t>(mentioned.size());
    out.total_hallucinated += halluc;
    if (halluc > 0) {
      out.flagged[i] = 1;
      ++flagged_count;
    }
  }
  out.chair_s = static_cast<double>(flagged_count) /
                static_cast<double>(captions.size());
  out.chair_i = out.total_mentioned > 0
                    ? static_cast<double>(out.total_hallucinated) /
                          static_cast<double>(out.total_mentioned)
                    : 0.0;
  return out;
}

double accuracy(const std::vector<std::string>& outputs,
                const std::vector<std::string>& references) {
  if (outputs.size() != references.size())
    raise(Err::LengthMismatch, "outputs and references differ in length");
  if (outputs.empty()) return 0.0;
  int64_t hits = 0;
  for (size_t i = 0; i < outputs.size(); ++i)
    if (normalize_text(outputs[i]) == normalize_text(references[i])) ++hits;
  return static_cast<double>(hits) / static_cast<double>(outputs.size());
}

std::vector<double> probe_from_weights(const Tensor& weights, int anchor,
                                       int slot_begin, int slot_count) {
  if (weights.shape.size() != 3)
    raise(Err::ShapeMismatch, "weights must be {H, S, S}");
  int H = weights.shape[0], S = weights.shape[1];
  if (anchor < 0 || anchor >= S) raise(Err::AnchorMissing, "anchor out of range");
  std::vector<double> mass(H, 0.0);
  for (int h = 0; h < H; ++h) {
    const double* row = weights.data.data() +
                        (static_cast<size_t>(h) * S + anchor) * S;
    for (int j = slot_begin; j < slot_begin + slot_count; ++j)
      mass[h] += row[j];
  }
  return mass;
}

AttentionProbe attention_probe(const TinyMllm& model,
                               const SerializedSample& s,
                               std::span<const double> feature) {
  if (s.answer_anchors.empty())
    raise(Err::AnchorMissing, "sample has no answer anchor");
  if (s.slot_begin < 0)
    raise(Err::AnchorMissing, "sample has no visual tokens to probe");
  auto fwd = model.forward(s.ids, feature);
  Tensor weights =
      fwd.graph.attention_weights(fwd.attention.back());  // last layer
  AttentionProbe out;
  out.anchor = s.answer_anchors.front();
  out.visual_mass = probe_from_weights(weights, out.anchor, s.slot_begin,
                                       s.visual_slot_count);
  int H = weights.shape[0], S = weights.shape[1];
  out.anchor_rows = Tensor::zeros({H, S});
  for (int h = 0; h < H; ++h) {
    const double* row = weights.data.data() +
                        (static_cast<size_t>(h) * S + out.anchor) * S;
    std::copy(row, row + S,
              out.anchor_rows.data.begin() + static_cast<size_t>(h) * S);
  }
  return out;
}

ThroughputResult throughput_bench(const TinyMllm& model,
                                  const std::vector<DatasetRecord>& records,
                                  const Vocab& vocab, const ChatTemplate& chat,
                                  const TemplateSet& templates, MaskMode mode,
                                  int n_steps, int batch_size,
                                  int warmup_steps, int n_threads) {
  if (n_steps < 10) raise(Err::InvalidArgument, "need at least 10 steps");
  if (records.empty()) raise(Err::EmptyCorpus, "no benchmark records");

  // Clone so timing runs never touch the caller's parameters.
  TinyMllm work = model;
  work.set_trainable(ParamGroup::Connector, true);
  work.set_trainable(ParamGroup::Decoder, true);

  struct Prep {
    SerializedSample s;
    LossMask mask;
    const std::vector<double>* feature;
  };
  std::vector<Prep> prepared;
  for (const DatasetRecord& rec : records) {
    Prep p;
    p.s = serialize(rec.sample, chat, vocab, templates);
    p.mask = build_loss_mask(p.s, mode);
    if (p.mask.count() == 0) continue;
    p.feature = &rec.feature;
    prepared.push_back(std::move(p));
  }
  if (prepared.empty()) raise(Err::EmptyCorpus, "all records were maskless");

  std::vector<int> trainable_idx;
  for (int i = 0; i < work.n_params(); ++i)
    if (work.trainable(i)) trainable_idx.push_back(i);
  std::vector<Tensor*> param_ptrs;
  for (int idx : trainable_idx) param_ptrs.push_back(&work.mutable_param(idx));
  AdamState adam;
  TrainConfig cfg;
  cfg.lr_peak = 1e-4;

  const auto& K = kern::active();
  const int n_shards = std::min(4, batch_size);
  std::vector<std::vector<std::vector<double>>> shard_grads(n_shards);
  std::vector<int64_t> shard_tokens(n_shards, 0);
  for (auto& grads : shard_grads) {
    grads.resize(trainable_idx.size());
    for (size_t i = 0; i < grads.size(); ++i)
      grads[i].assign(param_ptrs[i]->numel(), 0.0);
  }

  double timed_seconds = 0.0;
  int64_t timed_steps = 0;
  int64_t timed_samples = 0;
  size_t cursor = 0;
  for (int step = 0; step < n_steps + warmup_steps; ++step) {
    auto t0 = std::chrono::steady_clock::now();
    size_t base = cursor;
    cursor = (cursor + batch_size) % prepared.size();
    for (int s = 0; s < n_shards; ++s) {
      for (auto& g : shard_grads[s]) std::fill(g.begin(), g.end(), 0.0);
      shard_tokens[s] = 0;
    }
    parallel_shards(batch_size, n_shards, n_threads,
                    [&](int shard, size_t begin, size_t end) {
      auto& grads = shard_grads[shard];
      for (size_t b = begin; b < end; ++b) {
        const Prep& p = prepared[(base + b) % prepared.size()];
        auto fwd = work.forward(p.s.ids, *p.feature);
        CeInputs ce = ce_inputs(p.s, p.mask);
        NodeId loss = fwd.graph.cross_entropy_masked(fwd.logits, ce.targets,
                                                     ce.mask, Reduction::Sum);
        GradMap gm = fwd.graph.backward(loss);
        for (size_t gi = 0; gi < trainable_idx.size(); ++gi) {
          NodeId leaf = fwd.param_leaf[trainable_idx[gi]];
          if (leaf < 0 || !gm.has(leaf)) continue;
          K.axpy(grads[gi].data(), gm.at(leaf).data.data(), 1.0,
                 grads[gi].size());
        }
        shard_tokens[shard] += p.mask.count();
      }
    });
    int64_t supervised = 0;
    for (int s = 1; s < n_shards; ++s) {
      for (size_t gi = 0; gi < trainable_idx.size(); ++gi)
        K.axpy(shard_grads[0][gi].data(), shard_grads[s][gi].data(), 1.0,
               shard_grads[0][gi].size());
    }
    for (int s = 0; s < n_shards; ++s) supervised += shard_tokens[s];
    double inv = supervised > 0 ? 1.0 / static_cast<double>(supervised) : 1.0;
    for (auto& g : shard_grads[0]) K.scale(g.data(), g.data(), inv, g.size());
    adamw_step(param_ptrs, shard_grads[0], adam, cfg, cfg.lr_peak);
    auto t1 = std::chrono::steady_clock::now();
    if (step >= warmup_steps) {
      timed_seconds += std::chrono::duration<double>(t1 - t0).count();
      ++timed_steps;
      timed_samples += batch_size;
    }
  }
  ThroughputResult out;
  out.timed_steps = timed_steps;
  if (timed_seconds > 0.0) {
    out.steps_per_s = static_cast<double>(timed_steps) / timed_seconds;
    out.samples_per_s = static_cast<double>(timed_samples) / timed_seconds;
  }
  return out;
}

}  // namespace l2t
