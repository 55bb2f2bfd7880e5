#include "l2t/experiments.hpp"

#include <algorithm>
#include <filesystem>
#include <sstream>

namespace l2t {

namespace fs = std::filesystem;

namespace {

nlohmann::ordered_json spec_to_json(const BenchmarkSpec& s) {
  nlohmann::ordered_json j;
  j["n_total"] = s.n_total;
  j["split_frac"] = s.split_frac;
  j["leak_prob"] = s.leak_prob;
  j["leak_channel"] =
      s.leak_channel == ShortcutConfig::Channel::Phrasing ? "phrasing"
                                                          : "answer_prior";
  j["mix"] = {{"qa", s.mix.qa},
              {"presence", s.mix.presence},
              {"choice", s.mix.choice},
              {"referring", s.mix.referring},
              {"caption", s.mix.caption}};
  j["cell_empty_prob"] = s.cell_empty_prob;
  j["data_seed"] = s.data_seed;
  j["n_pretrain"] = s.n_pretrain;
  j["vocab_cap"] = s.vocab_cap;
  j["template_theta"] = s.template_theta;
  j["model"] = {{"patch_projection", s.model.patch_projection},
                {"d_model", s.model.d_model},
                {"n_layers", s.model.n_layers},
                {"n_heads", s.model.n_heads},
                {"d_ff", s.model.d_ff},
                {"n_visual_tokens", s.model.n_visual_tokens},
                {"d_enc", s.model.d_enc},
                {"connector_layers", s.model.connector_layers},
                {"max_seq_len", s.model.max_seq_len}};
  j["pretrain"] = {{"lr_peak", s.pre_cfg.lr_peak},
                   {"batch_size", s.pre_cfg.batch_size},
                   {"epochs", s.pre_cfg.epochs}};
  j["finetune"] = {{"lr_peak", s.fine_cfg.lr_peak},
                   {"batch_size", s.fine_cfg.batch_size},
                   {"epochs", s.fine_cfg.epochs},
                   {"instr_weight", s.fine_cfg.instr_weight},
                   {"supervise_eos", s.fine_cfg.supervise_eos}};
  j["eval_max_new"] = s.eval_max_new;
  j["vc_noise_seed"] = s.vc_noise_seed;
  j["vc_noise_draws"] = s.vc_noise_draws;
  return j;
}

}  // namespace

BenchmarkEnv prepare_benchmark(const BenchmarkSpec& spec,
                               const std::string& dir) {
  BenchmarkEnv env;
  env.spec = spec;
  env.dir = dir;
  env.world.cell_empty_prob = spec.cell_empty_prob;
  env.chat = ChatTemplate::compact();
  env.chat.n_visual_tokens = spec.model.n_visual_tokens;
  fs::create_directories(dir);

  if (fs::exists(env.train_path()) && fs::exists(env.test_path()) &&
      fs::exists(env.pretrain_path()) && fs::exists(env.vocab_path()) &&
      fs::exists(env.templates_path())) {
    env.train = read_jsonl(env.train_path());
    env.test = read_jsonl(env.test_path());
    env.pretrain_pairs = read_jsonl(env.pretrain_path());
    env.vocab = load_vocab(env.vocab_path());
    env.templates = load_templates(env.templates_path());
  } else {
    ShortcutConfig shortcut;
    shortcut.leak_prob = spec.leak_prob;
    shortcut.channel = spec.leak_channel;
    GeneratedSplit split = gen_dataset(env.world, spec.n_total, spec.mix,
                                       shortcut, spec.data_seed,
                                       spec.split_frac);
    env.train = std::move(split.train);
    env.test = std::move(split.test);
    env.pretrain_pairs =
        gen_pretrain_pairs(env.world, spec.n_pretrain, spec.data_seed);
    write_jsonl(env.train_path(), env.train);
    write_jsonl(env.test_path(), env.test);
    write_jsonl(env.pretrain_path(), env.pretrain_pairs);

    std::vector<std::string> text = all_text_lines(env.train);
    std::vector<std::string> pre_text = all_text_lines(env.pretrain_pairs);
    text.insert(text.end(), pre_text.begin(), pre_text.end());
    text.push_back(env.chat.system_preamble);
    text.push_back(env.chat.user_tag);
    text.push_back(env.chat.assistant_tag);
    env.vocab = build_vocab(text, spec.vocab_cap);
    save_vocab(env.vocab, env.vocab_path());

    env.templates = mine_templates(all_instructions(env.train),
                                   spec.template_theta);
    env.templates.system_templates = {env.chat.system_preamble,
                                      env.chat.user_tag,
                                      env.chat.assistant_tag};
    save_templates(env.templates, env.templates_path());
  }
  return env;
}

EvalMetrics evaluate_model(const TinyMllm& model,
                           const std::vector<DatasetRecord>& records,
                           const BenchmarkEnv& env) {
  EvalMetrics out;
  out.n_records = static_cast<int64_t>(records.size());
  if (records.empty()) return out;

  struct Row {
    double vc_sum = 0.0, vc_tok = 0.0, nll_tok = 0.0;
    int correct = -1;  // -1 = not scored for accuracy
    std::string id;
  };
  std::vector<Row> rows(records.size());

  const int n_shards = static_cast<int>(
      std::min<size_t>(std::max(1, env.spec.n_threads) * 4, records.size()));
  parallel_shards(records.size(), n_shards, env.spec.n_threads,
                  [&](int, size_t begin, size_t end) {
    for (size_t i = begin; i < end; ++i) {
      const DatasetRecord& rec = records[i];
      Row& row = rows[i];
      row.id = rec.sample.image_id;
      SerializedSample s =
          serialize(rec.sample, env.chat, env.vocab, env.templates);
      VcResult vc =
          visual_contribution(model, s, rec.feature, rec.sample.image_id,
                              env.spec.vc_noise_seed, env.spec.vc_noise_draws);
      row.vc_sum = vc.sum;
      row.vc_tok = vc.per_token;
      double nll = response_nll(model, s, rec.feature);
      row.nll_tok = vc.n_resp_tokens > 0 ? nll / vc.n_resp_tokens : 0.0;

      if (rec.sample.kind != TaskKind::Caption) {
        std::vector<int> prompt(s.ids.begin(),
                                s.ids.begin() + s.answer_anchors.front() + 1);
        GenerateConfig gen;
        gen.strategy = GenerateConfig::Strategy::Greedy;
        gen.max_new_tokens = env.spec.eval_max_new;
        std::vector<int> got = model.generate(prompt, rec.feature, gen);
        while (!got.empty() && got.back() == Vocab::kEos) got.pop_back();
        std::string text = decode(env.vocab, got);
        const std::string& ref = rec.sample.turns.front().response;
        row.correct =
            normalize_text(text) == normalize_text(ref) ? 1 : 0;
      }
    }
  });

  int64_t n_acc = 0, hits = 0;
  std::ostringstream csv;
  csv << "sample_id,vc_sum,vc_per_token,resp_nll_per_token,correct\n";
  for (const Row& r : rows) {
    out.mean_vc += r.vc_sum;
    out.mean_vc_per_token += r.vc_tok;
    out.mean_resp_nll += r.nll_tok;
    if (r.correct >= 0) {
      ++n_acc;
      hits += r.correct;
    }
    csv << r.id << "," << fmt_double(r.vc_sum) << "," << fmt_double(r.vc_tok)
        << "," << fmt_double(r.nll_tok) << "," << r.correct << "\n";
  }
  out.per_sample_csv.push_back(csv.str());
  double n = static_cast<double>(records.size());
  out.mean_vc /= n;
  out.mean_vc_per_token /= n;
  out.mean_resp_nll /= n;
  out.n_accuracy_records = n_acc;
  out.accuracy = n_acc > 0 ? static_cast<double>(hits) / n_acc : 0.0;
  return out;
}

namespace {

std::vector<DatasetRecord> select_train_subset(const BenchmarkEnv& env,
                                               double data_frac,
                                               const std::string& primary) {
  std::vector<DatasetRecord> data;
  if (primary.empty()) {
    data = env.train;
  } else {
    // Primary-type cells: every record of that kind plus a 10% tail of the
    // rest, preserving corpus order.
    TaskKind want = task_kind_from(primary);
    size_t other_kept = 0, other_seen = 0;
    for (const DatasetRecord& r : env.train) {
      if (r.sample.kind == want) {
        data.push_back(r);
      } else {
        ++other_seen;
        if (static_cast<double>(other_kept) < 0.1 * other_seen) {
          data.push_back(r);
          ++other_kept;
        }
      }
    }
  }
  if (data_frac < 1.0) {
    size_t keep = static_cast<size_t>(data_frac * data.size());
    data.resize(std::max<size_t>(1, keep));
  }
  return data;
}

std::string cell_tag(MaskMode mode, uint64_t seed, double data_frac,
                     const std::string& primary) {
  std::ostringstream ss;
  ss << mask_mode_name(mode) << "_s" << seed;
  if (data_frac < 1.0) ss << "_f" << static_cast<int>(data_frac * 100);
  if (!primary.empty()) ss << "_" << primary;
  return ss.str();
}

}  // namespace

CellResult run_cell(const BenchmarkEnv& env, MaskMode mode, uint64_t seed,
                    const std::string& out_dir, double data_frac,
                    const std::string& primary_kind) {
  fs::create_directories(out_dir);
  std::string tag = cell_tag(mode, seed, data_frac, primary_kind);
  std::string ckpt_path = out_dir + "/" + tag + ".ckpt";
  std::string log_path = out_dir + "/" + tag + "_train.csv";
  std::string metrics_path = out_dir + "/" + tag + "_metrics.json";
  std::string vc_path = out_dir + "/" + tag + "_per_sample.csv";

  RunManifest manifest(out_dir + "/" + tag + "_manifest.json",
                       "run_cell " + tag);
  nlohmann::ordered_json cfg = spec_to_json(env.spec);
  cfg["mode"] = mask_mode_name(mode);
  cfg["seed"] = seed;
  cfg["data_frac"] = data_frac;
  cfg["primary_kind"] = primary_kind;
  manifest.set_config(std::move(cfg));
  manifest.add_seed(seed);
  manifest.add_input("train", env.train_path());
  manifest.add_input("test", env.test_path());
  manifest.add_input("pretrain", env.pretrain_path());
  manifest.add_output("checkpoint", ckpt_path);
  manifest.add_output("train_log", log_path);
  manifest.add_output("metrics", metrics_path);
  manifest.add_output("per_sample", vc_path);
  manifest.write_started();

  // Stage 1 is mode-independent, so one pretrained model per seed is shared
  // by every mode cell.
  std::string pre_path = env.dir + "/pretrain_s" + std::to_string(seed) +
                         ".ckpt";
  TinyMllm model = [&]() {
    if (fs::exists(pre_path)) return TinyMllm::load(pre_path);
    MllmConfig mc = env.spec.model;
    mc.vocab_size = env.vocab.size();
    mc.feature_dim = env.world.feature_dim();
    mc.seed = seed;
    TinyMllm m(mc);
    TrainConfig pre = env.spec.pre_cfg;
    pre.seed = seed;
    pre.n_threads = env.spec.n_threads;
    pretrain(m, env.pretrain_pairs, env.vocab, env.chat, env.templates, pre);
    m.save(pre_path);
    return m;
  }();

  std::vector<DatasetRecord> data =
      select_train_subset(env, data_frac, primary_kind);
  TrainConfig fine = env.spec.fine_cfg;
  fine.mask_mode = mode;
  fine.seed = seed;
  fine.n_threads = env.spec.n_threads;
  TrainStats stats =
      finetune(model, data, env.vocab, env.chat, env.templates, fine);
  model.save(ckpt_path);
  write_train_log_csv(log_path, stats.rows);

  CellResult cell;
  cell.mode = mode;
  cell.seed = seed;
  cell.data_frac = data_frac;
  cell.primary_kind = primary_kind;
  cell.test_metrics = evaluate_model(model, env.test, env);
  cell.train_final_loss = stats.final_loss;
  cell.skipped_empty_mask = stats.skipped_empty_mask;
  cell.checkpoint_path = ckpt_path;

  if (!cell.test_metrics.per_sample_csv.empty())
    write_text_file(vc_path, cell.test_metrics.per_sample_csv.front());

  nlohmann::ordered_json mj;
  mj["schema_version"] = 1;
  mj["mode"] = mask_mode_name(mode);
  mj["seed"] = seed;
  mj["data_frac"] = data_frac;
  mj["primary_kind"] = primary_kind;
  mj["accuracy"] = cell.test_metrics.accuracy;
  mj["mean_vc"] = cell.test_metrics.mean_vc;
  mj["mean_vc_per_token"] = cell.test_metrics.mean_vc_per_token;
  mj["mean_resp_nll_per_token"] = cell.test_metrics.mean_resp_nll;
  mj["train_final_loss"] = cell.train_final_loss;
  mj["skipped_empty_mask"] = cell.skipped_empty_mask;
  mj["n_test_records"] = cell.test_metrics.n_records;
  mj["n_accuracy_records"] = cell.test_metrics.n_accuracy_records;
  write_text_file(metrics_path, mj.dump(2) + "\n");

  manifest.finalize(true);
  return cell;
}

std::vector<CellResult> run_ablate(const BenchmarkEnv& env,
                                   const AblateOptions& opts,
                                   const std::string& out_dir) {
  std::vector<CellResult> cells;
  for (const std::string& kind : opts.primary_kinds)
    for (double frac : opts.data_fracs)
      for (MaskMode mode : opts.modes)
        for (uint64_t seed : opts.seeds)
          cells.push_back(run_cell(env, mode, seed, out_dir, frac, kind));
  return cells;
}

void write_ablate_csv(const std::string& path,
                      const std::vector<CellResult>& cells) {
  std::ostringstream ss;
  ss << "mode,seed,data_frac,primary_kind,metric,value\n";
  for (const CellResult& c : cells) {
    auto emit = [&](const char* metric, double value) {
      ss << mask_mode_name(c.mode) << "," << c.seed << ","
         << fmt_double(c.data_frac) << "," << c.primary_kind << "," << metric
         << "," << fmt_double(value) << "\n";
    };
    emit("accuracy", c.test_metrics.accuracy);
    emit("mean_vc", c.test_metrics.mean_vc);
    emit("mean_vc_per_token", c.test_metrics.mean_vc_per_token);
    emit("mean_resp_nll_per_token", c.test_metrics.mean_resp_nll);
    emit("train_final_loss", c.train_final_loss);
  }
  write_text_file(path, ss.str());
}

ChairReport run_chair(const TinyMllm& model, const BenchmarkEnv& env, int n,
                      bool include_beam, int beam_width, int max_new_tokens) {
  ChairReport report;
  const auto& prompts = caption_prompts();
  const int limit = std::min<int>(n, static_cast<int>(env.test.size()));
  std::vector<std::string> greedy_store(limit), beam_store(limit);
  std::vector<std::vector<std::string>> gt_store(limit);

  const int n_shards = std::min(std::max(1, env.spec.n_threads) * 4, limit);
  parallel_shards(limit, n_shards, env.spec.n_threads,
                  [&](int, size_t begin, size_t end) {
    for (size_t i = begin; i < end; ++i) {
      const DatasetRecord& rec = env.test[i];
      ConversationSample sample;
      sample.image_id = rec.sample.image_id;
      sample.kind = TaskKind::Caption;
      sample.turns.push_back({prompts[i % prompts.size()], "."});
      SerializedSample s =
          serialize(sample, env.chat, env.vocab, env.templates);
      std::vector<int> prompt(s.ids.begin(),
                              s.ids.begin() + s.answer_anchors.front() + 1);
      GenerateConfig gen;
      gen.max_new_tokens = max_new_tokens;
      gen.strategy = GenerateConfig::Strategy::Greedy;
      std::vector<int> got = model.generate(prompt, rec.feature, gen);
      while (!got.empty() && got.back() == Vocab::kEos) got.pop_back();
      greedy_store[i] = decode(env.vocab, got);
      if (include_beam) {
        gen.strategy = GenerateConfig::Strategy::Beam;
        gen.beam_width = beam_width;
        got = model.generate(prompt, rec.feature, gen);
        while (!got.empty() && got.back() == Vocab::kEos) got.pop_back();
        beam_store[i] = decode(env.vocab, got);
      }
      gt_store[i] = rec.gt_objects;
    }
  });

  report.n_captions = limit;
  report.greedy = chair(greedy_store, gt_store, env.world.objects);
  if (include_beam)
    report.beam = chair(beam_store, gt_store, env.world.objects);
  return report;
}

}  // namespace l2t
