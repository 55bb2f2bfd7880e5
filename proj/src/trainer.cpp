#include "l2t/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "l2t/kernels.hpp"

namespace l2t {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct PreparedSample {
  SerializedSample serialized;
  LossMask mask;       // active mode
  LossMask vit_mask;   // response-only, for the logged component
  RoleTokenCounts counts;
  const std::vector<double>* feature = nullptr;
};

struct BatchAccum {
  std::vector<std::vector<double>> grads;  // per trainable param slot
  double loss_sum = 0.0;
  double vit_loss_sum = 0.0;
  int64_t vit_tokens = 0;
  RoleTokenCounts counts;

  void init(const std::vector<size_t>& sizes) {
    grads.resize(sizes.size());
    for (size_t i = 0; i < sizes.size(); ++i) grads[i].assign(sizes[i], 0.0);
  }
  void reduce_from(const BatchAccum& other) {
    const auto& K = kern::active();
    for (size_t i = 0; i < grads.size(); ++i)
      K.axpy(grads[i].data(), other.grads[i].data(), 1.0, grads[i].size());
    loss_sum += other.loss_sum;
    vit_loss_sum += other.vit_loss_sum;
    vit_tokens += other.vit_tokens;
    counts.response += other.counts.response;
    counts.instr_content += other.counts.instr_content;
    counts.templates += other.counts.templates;
  }
};

}  // namespace

void TrainConfig::validate() const {
  if (lr_peak <= 0.0) raise(Err::InvalidArgument, "lr_peak must be positive");
  if (warmup_ratio <= 0.0 || warmup_ratio >= 1.0)
    raise(Err::InvalidArgument, "warmup_ratio must be in (0, 1)");
  if (batch_size < 1 || epochs < 1)
    raise(Err::InvalidArgument, "batch_size and epochs must be positive");
  if (instr_weight < 0.0)
    raise(Err::InvalidArgument, "instr_weight must be non-negative");
}

TrainConfig TrainConfig::desk_preset(Stage stage) {
  TrainConfig cfg;
  cfg.stage = stage;
  cfg.lr_peak = 1e-3;
  cfg.batch_size = 8;
  return cfg;
}

TrainConfig TrainConfig::paper_faithful_preset(Stage stage) {
  TrainConfig cfg;
  cfg.stage = stage;
  cfg.lr_peak = stage == Stage::Pretrain ? 1e-3 : 2e-5;
  cfg.batch_size = stage == Stage::Pretrain ? 256 : 128;
  return cfg;
}

double lr_at(int64_t step, int64_t total_steps, const TrainConfig& cfg) {
  if (step < 0 || step > total_steps)
    raise(Err::InvalidArgument, "step outside [0, total_steps]");
  if (total_steps == 0) return 0.0;
  double warm = cfg.warmup_ratio * static_cast<double>(total_steps);
  if (static_cast<double>(step) < warm)
    return cfg.lr_peak * static_cast<double>(step) / warm;
  double span = static_cast<double>(total_steps) - warm;
  if (span <= 0.0) return 0.0;
  double progress = (static_cast<double>(step) - warm) / span;
  return cfg.lr_peak * 0.5 * (1.0 + std::cos(kPi * progress));
}

void write_train_log_csv(const std::string& path,
                         const std::vector<LogRow>& rows) {
  std::ostringstream ss;
  ss << "step,lr,loss,loss_vit_component,tokens_resp,tokens_instr,"
        "tokens_template,ms_per_step\n";
  for (const LogRow& r : rows) {
    ss << r.step << "," << fmt_double(r.lr) << "," << fmt_double(r.loss) << ","
       << fmt_double(r.loss_vit_component) << "," << r.tokens_resp << ","
       << r.tokens_instr << "," << r.tokens_template << ","
       << fmt_double(r.ms_per_step) << "\n";
  }
  write_text_file(path, ss.str());
}

void adamw_step(std::vector<Tensor*>& params,
                const std::vector<std::vector<double>>& grads,
                AdamState& state, const TrainConfig& cfg, double lr) {
  if (params.size() != grads.size())
    raise(Err::LengthMismatch, "params/grads size mismatch");
  if (state.m.size() != params.size()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i]->numel(), 0.0);
      state.v[i].assign(params[i]->numel(), 0.0);
    }
  }
  ++state.t;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  const auto& K = kern::active();
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i]->numel() != grads[i].size())
      raise(Err::ShapeMismatch, "gradient shape mismatch");
    K.adamw(params[i]->data.data(), state.m[i].data(), state.v[i].data(),
            grads[i].data(), grads[i].size(), lr, cfg.beta1, cfg.beta2,
            cfg.adam_eps, cfg.weight_decay, bc1, bc2);
  }
}

namespace {

TrainStats run_training(TinyMllm& model, const std::vector<DatasetRecord>& data,
                        const Vocab& vocab, const ChatTemplate& chat,
                        const TemplateSet& templates, TrainConfig cfg) {
  cfg.validate();
  if (data.empty()) raise(Err::EmptyCorpus, "no training data");

  TrainStats stats;
  MaskOptions mopts;
  mopts.supervise_eos = cfg.supervise_eos;

  // Serialize once; samples whose mask is empty are skipped and counted.
  std::vector<PreparedSample> prepared;
  prepared.reserve(data.size());
  for (const DatasetRecord& rec : data) {
    PreparedSample ps;
    ps.serialized = serialize(rec.sample, chat, vocab, templates);
    ps.mask = build_loss_mask(ps.serialized, cfg.mask_mode, mopts);
    if (ps.mask.count() == 0) {
      ++stats.skipped_empty_mask;
      continue;
    }
    ps.vit_mask = build_loss_mask(ps.serialized, MaskMode::Vit, mopts);
    ps.counts = count_supervised_roles(ps.serialized, ps.mask);
    ps.feature = &rec.feature;
    prepared.push_back(std::move(ps));
  }
  if (prepared.empty()) raise(Err::EmptyCorpus, "every sample had an empty mask");

  std::vector<int> trainable_idx;
  for (int i = 0; i < model.n_params(); ++i)
    if (model.trainable(i)) trainable_idx.push_back(i);
  std::vector<size_t> grad_sizes;
  for (int idx : trainable_idx) grad_sizes.push_back(model.param(idx).numel());

  const int64_t n = static_cast<int64_t>(prepared.size());
  const int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps = steps_per_epoch * cfg.epochs;

  AdamState adam;
  std::vector<Tensor*> param_ptrs;
  for (int idx : trainable_idx)
    param_ptrs.push_back(&model.mutable_param(idx));

  std::vector<size_t> order(prepared.size());
  std::iota(order.begin(), order.end(), 0);

  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, 0x5u + epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (int64_t b = 0; b < steps_per_epoch; ++b) {
      auto t0 = std::chrono::steady_clock::now();
      size_t lo = static_cast<size_t>(b) * cfg.batch_size;
      size_t hi = std::min(lo + cfg.batch_size, prepared.size());
      size_t batch_n = hi - lo;

      const int n_shards = static_cast<int>(std::min<size_t>(4, batch_n));
      std::vector<BatchAccum> shards(n_shards);
      for (auto& s : shards) s.init(grad_sizes);

      parallel_shards(batch_n, n_shards, cfg.n_threads,
                      [&](int shard, size_t begin, size_t end) {
        BatchAccum& acc = shards[shard];
        const auto& K = kern::active();
        for (size_t bi = begin; bi < end; ++bi) {
          const PreparedSample& ps = prepared[order[lo + bi]];
          auto fwd = model.forward(ps.serialized.ids, *ps.feature);
          CeInputs ce = ce_inputs(ps.serialized, ps.mask);
          CeInputs ce_vit = ce_inputs(ps.serialized, ps.vit_mask);
          NodeId loss;
          if (cfg.instr_weight == 1.0) {
            loss = fwd.graph.cross_entropy_masked(fwd.logits, ce.targets,
                                                  ce.mask, Reduction::Sum);
          } else {
            // Split responses from the rest so the knob can reweight them.
            CeInputs ce_other = ce;
            bool any_other = false;
            for (size_t i = 0; i < ce_other.mask.size(); ++i) {
              if (ce_other.mask[i] && ce_vit.mask[i]) ce_other.mask[i] = 0;
              any_other |= ce_other.mask[i] != 0;
            }
            NodeId resp = fwd.graph.cross_entropy_masked(
                fwd.logits, ce_vit.targets, ce_vit.mask, Reduction::Sum);
            if (any_other) {
              NodeId other = fwd.graph.cross_entropy_masked(
                  fwd.logits, ce_other.targets, ce_other.mask, Reduction::Sum);
              loss = fwd.graph.add(resp,
                                   fwd.graph.scale(other, cfg.instr_weight));
            } else {
              loss = resp;
            }
          }
          NodeId vit_loss = fwd.graph.cross_entropy_masked(
              fwd.logits, ce_vit.targets, ce_vit.mask, Reduction::Sum);

          GradMap grads = fwd.graph.backward(loss);
          for (size_t gi = 0; gi < trainable_idx.size(); ++gi) {
            NodeId leaf = fwd.param_leaf[trainable_idx[gi]];
            if (leaf < 0 || !grads.has(leaf)) continue;
            const Tensor& g = grads.at(leaf);
            K.axpy(acc.grads[gi].data(), g.data.data(), 1.0, g.numel());
          }
          acc.loss_sum += fwd.graph.value(loss).data[0];
          acc.vit_loss_sum += fwd.graph.value(vit_loss).data[0];
          acc.vit_tokens += ps.vit_mask.count();
          acc.counts.response += ps.counts.response;
          acc.counts.instr_content += ps.counts.instr_content;
          acc.counts.templates += ps.counts.templates;
        }
      });

      BatchAccum& total = shards[0];
      for (int s = 1; s < n_shards; ++s) total.reduce_from(shards[s]);

      double denom;
      if (cfg.reduction == LossReduction::TokenMean) {
        denom = static_cast<double>(total.counts.response) +
                cfg.instr_weight *
                    static_cast<double>(total.counts.instr_content +
                                        total.counts.templates);
      } else {
        denom = static_cast<double>(batch_n);
      }
      if (denom <= 0.0) denom = 1.0;
      double inv_denom = 1.0 / denom;
      const auto& K = kern::active();
      for (auto& g : total.grads)
        K.scale(g.data(), g.data(), inv_denom, g.size());

      if (cfg.grad_clip > 0.0) {
        double sq = 0.0;
        for (const auto& g : total.grads)
          for (double v : g) sq += v * v;
        double norm = std::sqrt(sq);
        if (norm > cfg.grad_clip) {
          double s = cfg.grad_clip / norm;
          for (auto& g : total.grads) K.scale(g.data(), g.data(), s, g.size());
        }
      }

      double lr = lr_at(step, total_steps, cfg);
      adamw_step(param_ptrs, total.grads, adam, cfg, lr);
      ++step;

      auto t1 = std::chrono::steady_clock::now();
      LogRow row;
      row.step = step;
      row.lr = lr;
      row.loss = total.loss_sum * inv_denom;
      row.loss_vit_component =
          total.vit_tokens > 0 ? total.vit_loss_sum / total.vit_tokens : 0.0;
      row.tokens_resp = total.counts.response;
      row.tokens_instr = total.counts.instr_content;
      row.tokens_template = total.counts.templates;
      row.ms_per_step =
          std::chrono::duration<double, std::milli>(t1 - t0).count();
      stats.rows.push_back(row);
      stats.final_loss = row.loss;
    }
  }
  stats.steps = step;
  return stats;
}

}  // namespace

TrainStats pretrain(TinyMllm& model, const std::vector<DatasetRecord>& data,
                    const Vocab& vocab, const ChatTemplate& chat,
                    const TemplateSet& templates, TrainConfig cfg) {
  cfg.stage = Stage::Pretrain;
  cfg.mask_mode = MaskMode::Vit;  // caption prompts carry no signal
  model.set_trainable(ParamGroup::Connector, true);
  model.set_trainable(ParamGroup::Decoder, false);
  TrainStats stats = run_training(model, data, vocab, chat, templates, cfg);
  model.set_trainable(ParamGroup::Decoder, true);
  model.mark_pretrained();
  return stats;
}

TrainStats finetune(TinyMllm& model, const std::vector<DatasetRecord>& data,
                    const Vocab& vocab, const ChatTemplate& chat,
                    const TemplateSet& templates, TrainConfig cfg) {
  cfg.stage = Stage::Finetune;
  if (!model.pretrained() && !cfg.from_scratch)
    raise(Err::InvalidArgument,
          "model is not pretrained; set from_scratch to override");
  model.set_trainable(ParamGroup::Connector, true);
  model.set_trainable(ParamGroup::Decoder, true);
  return run_training(model, data, vocab, chat, templates, cfg);
}

SelfGenerated self_generate(const TinyMllm& model,
                            const std::vector<DatasetRecord>& images, int n,
                            const Vocab& vocab, const ChatTemplate& chat,
                            const GenerateConfig& gen) {
  SelfGenerated out;
  // Prompt prefix: everything up to and including the image slots.
  auto placeholder_pos =
      chat.user_prefix_with_image.find(chat.image_placeholder);
  if (placeholder_pos == std::string::npos)
    raise(Err::UnknownPlaceholder, "chat template lacks the image marker");

  std::vector<int> tag_ids = encode(vocab, chat.assistant_tag);
  const int limit = std::min<int>(n, static_cast<int>(images.size()));
  for (int i = 0; i < limit; ++i) {
    const DatasetRecord& src = images[i];
    std::vector<int> prompt;
    prompt.push_back(Vocab::kBos);
    for (int id : encode(vocab, chat.system_preamble)) prompt.push_back(id);
    for (int id : encode(vocab, chat.user_prefix_with_image.substr(
                                    0, placeholder_pos)))
      prompt.push_back(id);
    for (int k = 0; k < chat.n_visual_tokens; ++k)
      prompt.push_back(Vocab::kImageSlot);

    std::vector<int> generated = model.generate(prompt, src.feature, gen);
    ++out.total;

    // Find the assistant tag inside the generation.
    int tag_at = -1;
    if (!tag_ids.empty() && generated.size() >= tag_ids.size()) {
      for (size_t s = 0; s + tag_ids.size() <= generated.size(); ++s) {
        bool ok = true;
        for (size_t k = 0; k < tag_ids.size(); ++k)
          if (generated[s + k] != tag_ids[k]) {
            ok = false;
            break;
          }
        if (ok) {
          tag_at = static_cast<int>(s);
          break;
        }
      }
    }
    if (tag_at < 0) {
      ++out.malformed;
      continue;
    }
    std::vector<int> instr_ids(generated.begin(), generated.begin() + tag_at);
    std::vector<int> resp_ids(generated.begin() + tag_at + tag_ids.size(),
                              generated.end());
    while (!resp_ids.empty() && resp_ids.back() == Vocab::kEos)
      resp_ids.pop_back();
    if (instr_ids.empty() || resp_ids.empty()) {
      ++out.malformed;
      continue;
    }
    DatasetRecord rec;
    rec.sample.image_id = src.sample.image_id + "_selfgen";
    rec.sample.kind = TaskKind::Qa;
    rec.sample.turns.push_back(
        {decode(vocab, instr_ids), decode(vocab, resp_ids)});
    rec.feature = src.feature;
    rec.gt_objects = src.gt_objects;
    out.records.push_back(std::move(rec));
  }
  return out;
}

}  // namespace l2t
