// Command-line entry point: dataset generation, template mining, training,
// evaluation, hallucination scoring, throughput benchmarks and the ablation
// matrix, all emitting CSV/JSON artifacts under the output root.

#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "l2t/experiments.hpp"

namespace fs = std::filesystem;
using namespace l2t;

namespace {

std::vector<std::string> split_list(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

BenchmarkSpec spec_from_options(int n, double leak, uint64_t seed,
                                double split, double lr, int batch,
                                int epochs, int threads) {
  BenchmarkSpec spec;
  spec.n_total = n;
  spec.leak_prob = leak;
  spec.data_seed = seed;
  spec.split_frac = split;
  spec.fine_cfg.lr_peak = lr;
  spec.fine_cfg.batch_size = batch;
  spec.fine_cfg.epochs = epochs;
  spec.n_threads = threads;
  return spec;
}

int fail_with(const std::exception& e) {
  nlohmann::ordered_json err;
  err["error"] = e.what();
  std::cerr << err.dump() << std::endl;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"l2tlab: supervision-mask experiments on synthetic "
               "multimodal data"};
  app.require_subcommand(1);

  std::string out_root = output_root();
  app.add_option("--out", out_root, "output root directory");

  // shared knobs
  int n_total = 11000;
  double leak_prob = 0.9;
  uint64_t data_seed = 42;
  double split_frac = 10000.0 / 11000.0;
  double lr = 1e-3;
  int batch = 8;
  int epochs = 1;
  int threads = 2;
  std::string bench_dir;

  auto add_bench_opts = [&](CLI::App* cmd) {
    cmd->add_option("--bench-n", n_total, "benchmark records (train+test)");
    cmd->add_option("--bench-leak", leak_prob, "phrasing leak probability");
    cmd->add_option("--bench-seed", data_seed, "benchmark data seed");
    cmd->add_option("--bench-split", split_frac, "benchmark train fraction");
    cmd->add_option("--lr", lr, "finetune peak learning rate");
    cmd->add_option("--batch", batch, "batch size");
    cmd->add_option("--epochs", epochs, "finetune epochs");
    cmd->add_option("--threads", threads, "worker threads");
    cmd->add_option("--bench-dir", bench_dir,
                    "benchmark data directory (default <out>/bench)");
  };
  auto bench_env = [&]() {
    BenchmarkSpec spec = spec_from_options(n_total, leak_prob, data_seed,
                                           split_frac, lr, batch, epochs,
                                           threads);
    std::string dir = bench_dir.empty() ? out_root + "/bench" : bench_dir;
    return prepare_benchmark(spec, dir);
  };

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a dataset split");
  int gd_n = 1000;
  double gd_leak = 0.0, gd_split = 0.9;
  uint64_t gd_seed = 7;
  std::string gd_out = "data";
  std::string gd_mix = "0.55,0.15,0.10,0.10,0.10";
  gen->add_option("--n", gd_n, "record count");
  gen->add_option("--mix", gd_mix, "qa,presence,choice,referring,caption");
  gen->add_option("--leak-prob", gd_leak, "phrasing leak probability");
  gen->add_option("--seed", gd_seed, "seed");
  gen->add_option("--split", gd_split, "train fraction");
  gen->add_option("--dir", gd_out, "output directory");
  gen->callback([&]() {
    fs::create_directories(gd_out);
    RunManifest man(gd_out + "/manifest.json", "gen-data");
    nlohmann::ordered_json cfg;
    cfg["n"] = gd_n;
    cfg["mix"] = gd_mix;
    cfg["leak_prob"] = gd_leak;
    cfg["seed"] = gd_seed;
    cfg["split"] = gd_split;
    man.set_config(cfg);
    man.add_seed(gd_seed);
    man.add_output("train", gd_out + "/train.jsonl");
    man.add_output("test", gd_out + "/test.jsonl");
    man.write_started();
    auto parts = split_list(gd_mix);
    if (parts.size() != 5)
      raise(Err::InvalidArgument, "--mix needs 5 comma-separated weights");
    TaskMix mix;
    mix.qa = std::stod(parts[0]);
    mix.presence = std::stod(parts[1]);
    mix.choice = std::stod(parts[2]);
    mix.referring = std::stod(parts[3]);
    mix.caption = std::stod(parts[4]);
    ShortcutConfig shortcut;
    shortcut.leak_prob = gd_leak;
    SynthWorldConfig world = SynthWorldConfig::standard();
    GeneratedSplit split = gen_dataset(world, gd_n, mix, shortcut, gd_seed,
                                       gd_split);
    write_jsonl(gd_out + "/train.jsonl", split.train);
    write_jsonl(gd_out + "/test.jsonl", split.test);
    man.finalize(true);
    std::cout << "train=" << split.train.size()
              << " test=" << split.test.size() << " dir=" << gd_out
              << std::endl;
  });

  // gen-pretrain
  auto* genp = app.add_subcommand("gen-pretrain", "generate caption pairs");
  int gp_n = 558;
  uint64_t gp_seed = 7;
  std::string gp_out = "data/pretrain.jsonl";
  genp->add_option("--n", gp_n, "pair count");
  genp->add_option("--seed", gp_seed, "seed");
  genp->add_option("--file", gp_out, "output file");
  genp->callback([&]() {
    fs::create_directories(fs::path(gp_out).parent_path().string().empty()
                               ? "."
                               : fs::path(gp_out).parent_path().string());
    SynthWorldConfig world = SynthWorldConfig::standard();
    write_jsonl(gp_out, gen_pretrain_pairs(world, gp_n, gp_seed));
    std::cout << "pretrain pairs=" << gp_n << " file=" << gp_out << std::endl;
  });

  // mine-templates
  auto* mine = app.add_subcommand("mine-templates",
                                  "mine task templates from a dataset");
  std::string mt_input = "data/train.jsonl";
  double mt_theta = 0.01;
  std::string mt_out = "templates.txt";
  mine->add_option("--input", mt_input, "dataset JSONL");
  mine->add_option("--theta", mt_theta, "per-sample frequency threshold");
  mine->add_option("--out", mt_out, "template file");
  mine->callback([&]() {
    auto records = read_jsonl(mt_input);
    TemplateSet set = mine_templates(all_instructions(records), mt_theta);
    save_templates(set, mt_out);
    std::cout << "templates=" << set.task_templates.size()
              << " file=" << mt_out << std::endl;
  });

  // pretrain / finetune
  auto* pre = app.add_subcommand("pretrain", "stage-1 connector alignment");
  std::string pt_ckpt = "";
  uint64_t pt_seed = 1;
  add_bench_opts(pre);
  pre->add_option("--model-seed", pt_seed, "model init seed");
  pre->add_option("--ckpt", pt_ckpt, "checkpoint output path");
  pre->callback([&]() {
    BenchmarkEnv env = bench_env();
    MllmConfig mc = env.spec.model;
    mc.vocab_size = env.vocab.size();
    mc.feature_dim = env.world.feature_dim();
    mc.seed = pt_seed;
    TinyMllm model(mc);
    TrainConfig cfg = env.spec.pre_cfg;
    cfg.seed = pt_seed;
    cfg.n_threads = env.spec.n_threads;
    TrainStats stats = pretrain(model, env.pretrain_pairs, env.vocab,
                                env.chat, env.templates, cfg);
    std::string path = pt_ckpt.empty()
                           ? out_root + "/pretrain_s" +
                                 std::to_string(pt_seed) + ".ckpt"
                           : pt_ckpt;
    fs::create_directories(fs::path(path).parent_path());
    model.save(path);
    write_train_log_csv(path + ".train.csv", stats.rows);
    std::cout << "steps=" << stats.steps << " final_loss="
              << fmt_double(stats.final_loss) << " ckpt=" << path
              << std::endl;
  });

  auto* fine = app.add_subcommand("finetune", "stage-2 end-to-end training");
  std::string ft_mode = "vit";
  uint64_t ft_seed = 1;
  add_bench_opts(fine);
  fine->add_option("--mode", ft_mode, "vit|l2t_full|l2t_no_sys|l2t");
  fine->add_option("--model-seed", ft_seed, "model/shuffle seed");
  fine->callback([&]() {
    BenchmarkEnv env = bench_env();
    CellResult cell = run_cell(env, mask_mode_from(ft_mode), ft_seed,
                               out_root + "/cells");
    std::cout << "mode=" << ft_mode << " seed=" << ft_seed
              << " accuracy=" << fmt_double(cell.test_metrics.accuracy)
              << " mean_vc=" << fmt_double(cell.test_metrics.mean_vc)
              << " ckpt=" << cell.checkpoint_path << std::endl;
  });

  // eval
  auto* ev = app.add_subcommand("eval", "metrics for a trained checkpoint");
  std::string ev_ckpt;
  std::string ev_split = "test";
  add_bench_opts(ev);
  ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--split", ev_split, "train|test|train,test");
  ev->callback([&]() {
    BenchmarkEnv env = bench_env();
    TinyMllm model = TinyMllm::load(ev_ckpt);
    fs::create_directories(out_root);
    for (const std::string& which : split_list(ev_split)) {
      const auto& records = which == "train" ? env.train : env.test;
      EvalMetrics m = evaluate_model(model, records, env);
      std::string base = out_root + "/eval_" + which;
      write_text_file(base + "_per_sample.csv", m.per_sample_csv.front());
      nlohmann::ordered_json j;
      j["schema_version"] = 1;
      j["split"] = which;
      j["accuracy"] = m.accuracy;
      j["mean_vc"] = m.mean_vc;
      j["mean_vc_per_token"] = m.mean_vc_per_token;
      j["mean_resp_nll_per_token"] = m.mean_resp_nll;
      j["n_records"] = m.n_records;
      write_text_file(base + ".json", j.dump(2) + "\n");
      std::cout << which << ": accuracy=" << fmt_double(m.accuracy)
                << " mean_vc=" << fmt_double(m.mean_vc)
                << " nll=" << fmt_double(m.mean_resp_nll) << std::endl;
    }
  });

  // attention probe dump
  auto* probe = app.add_subcommand("probe", "attention mass at the anchor");
  std::string pr_ckpt;
  int pr_n = 16;
  add_bench_opts(probe);
  probe->add_option("--ckpt", pr_ckpt, "checkpoint path")->required();
  probe->add_option("--n", pr_n, "samples to dump");
  probe->callback([&]() {
    BenchmarkEnv env = bench_env();
    TinyMllm model = TinyMllm::load(pr_ckpt);
    fs::create_directories(out_root);
    std::ostringstream ss;
    ss << "sample_id,head,visual_mass\n";
    std::ostringstream rows;
    int limit = std::min<int>(pr_n, static_cast<int>(env.test.size()));
    for (int i = 0; i < limit; ++i) {
      const DatasetRecord& rec = env.test[i];
      SerializedSample s =
          serialize(rec.sample, env.chat, env.vocab, env.templates);
      AttentionProbe p = attention_probe(model, s, rec.feature);
      for (size_t h = 0; h < p.visual_mass.size(); ++h)
        ss << rec.sample.image_id << "," << h << ","
           << fmt_double(p.visual_mass[h]) << "\n";
      for (int h = 0; h < p.anchor_rows.shape[0]; ++h) {
        rows << rec.sample.image_id << "," << h;
        for (int c = 0; c < p.anchor_rows.shape[1]; ++c)
          rows << "," << fmt_double(p.anchor_rows.at(h, c));
        rows << "\n";
      }
    }
    write_text_file(out_root + "/probe_mass.csv", ss.str());
    write_text_file(out_root + "/probe_rows.csv", rows.str());
    std::cout << "probe rows for " << limit << " samples -> " << out_root
              << std::endl;
  });

  // chair
  auto* ch = app.add_subcommand("chair", "hallucination scoring on captions");
  std::string ch_ckpt;
  int ch_n = 500;
  bool ch_beam = false;
  int ch_beam_width = 5;
  int ch_max_new = 64;
  add_bench_opts(ch);
  ch->add_option("--ckpt", ch_ckpt, "checkpoint path")->required();
  ch->add_option("--n", ch_n, "images to caption");
  ch->add_flag("--beam", ch_beam, "also run beam search");
  ch->add_option("--beam-width", ch_beam_width, "beam width");
  ch->add_option("--max-new", ch_max_new, "max new tokens");
  ch->callback([&]() {
    BenchmarkEnv env = bench_env();
    TinyMllm model = TinyMllm::load(ch_ckpt);
    ChairReport rep = run_chair(model, env, ch_n, ch_beam, ch_beam_width,
                                ch_max_new);
    fs::create_directories(out_root);
    nlohmann::ordered_json j;
    j["schema_version"] = 1;
    j["n_captions"] = rep.n_captions;
    j["greedy"] = {{"chair_s", rep.greedy.chair_s},
                   {"chair_i", rep.greedy.chair_i}};
    if (rep.beam)
      j["beam"] = {{"chair_s", rep.beam->chair_s},
                   {"chair_i", rep.beam->chair_i},
                   {"width", ch_beam_width}};
    write_text_file(out_root + "/chair.json", j.dump(2) + "\n");
    std::cout << "greedy chair_s=" << fmt_double(rep.greedy.chair_s)
              << " chair_i=" << fmt_double(rep.greedy.chair_i) << std::endl;
  });

  // bench
  auto* bn = app.add_subcommand("bench", "throughput across L_I/L_A ratios");
  std::string bn_ratios = "0.05,0.1,1,10,20";
  int bn_steps = 100;
  int bn_batch = 8;
  int bn_total_len = 42;
  add_bench_opts(bn);
  bn->add_option("--ratios", bn_ratios, "instruction/response length ratios");
  bn->add_option("--steps", bn_steps, "timed steps per cell");
  bn->add_option("--bench-batch", bn_batch, "batch size");
  bn->add_option("--total-len", bn_total_len, "content tokens per sample");
  bn->callback([&]() {
    BenchmarkEnv env = bench_env();
    MllmConfig mc = env.spec.model;
    mc.vocab_size = env.vocab.size();
    mc.feature_dim = env.world.feature_dim();
    mc.seed = 1;
    TinyMllm model(mc);
    fs::create_directories(out_root);
    std::ostringstream ss;
    ss << "ratio,mode,samples_per_s,steps_per_s\n";
    for (const std::string& rs : split_list(bn_ratios)) {
      double ratio = std::stod(rs);
      int li = std::max(1, static_cast<int>(std::lround(
                               bn_total_len * ratio / (1.0 + ratio))));
      int la = std::max(1, bn_total_len - li);
      auto records = gen_ratio_records(env.world, 64, li, la, 99);
      for (MaskMode mode : {MaskMode::Vit, MaskMode::L2t}) {
        TemplateSet empty_templates;
        ThroughputResult r = throughput_bench(model, records, env.vocab,
                                              env.chat, empty_templates, mode,
                                              bn_steps, bn_batch);
        ss << rs << "," << mask_mode_name(mode) << ","
           << fmt_double(r.samples_per_s) << "," << fmt_double(r.steps_per_s)
           << "\n";
        std::cout << "ratio=" << rs << " mode=" << mask_mode_name(mode)
                  << " steps/s=" << fmt_double(r.steps_per_s) << std::endl;
      }
    }
    write_text_file(out_root + "/bench.csv", ss.str());
  });

  // ablate
  auto* ab = app.add_subcommand("ablate",
                                "matrix over modes x seeds x fractions");
  std::string ab_modes = "vit,l2t_full,l2t_no_sys,l2t";
  std::string ab_seeds = "1,2,3,4,5";
  std::string ab_fracs = "1.0";
  std::string ab_types = "";
  add_bench_opts(ab);
  ab->add_option("--modes", ab_modes, "mask modes");
  ab->add_option("--seeds", ab_seeds, "seed list or count");
  ab->add_option("--data-frac", ab_fracs, "training-data fractions");
  ab->add_option("--types", ab_types, "primary task kinds (empty = full mix)");
  ab->callback([&]() {
    BenchmarkEnv env = bench_env();
    AblateOptions opts;
    opts.modes.clear();
    for (const std::string& m : split_list(ab_modes))
      opts.modes.push_back(mask_mode_from(m));
    opts.seeds.clear();
    auto seed_items = split_list(ab_seeds);
    if (seed_items.size() == 1 &&
        seed_items[0].find_first_not_of("0123456789") == std::string::npos &&
        std::stoi(seed_items[0]) <= 16) {
      for (int s = 1; s <= std::stoi(seed_items[0]); ++s)
        opts.seeds.push_back(static_cast<uint64_t>(s));
    } else {
      for (const std::string& s : seed_items)
        opts.seeds.push_back(std::stoull(s));
    }
    opts.data_fracs.clear();
    for (const std::string& f : split_list(ab_fracs))
      opts.data_fracs.push_back(std::stod(f));
    opts.primary_kinds.clear();
    if (ab_types.empty()) {
      opts.primary_kinds.push_back("");
    } else {
      for (const std::string& t : split_list(ab_types))
        opts.primary_kinds.push_back(t);
    }
    std::string cell_dir = out_root + "/ablate";
    std::vector<CellResult> cells = run_ablate(env, opts, cell_dir);
    write_ablate_csv(out_root + "/ablate.csv", cells);
    std::cout << "cells=" << cells.size() << " csv=" << out_root
              << "/ablate.csv" << std::endl;
  });

  // selfgen
  auto* sg = app.add_subcommand("selfgen",
                                "image-only self-generation and merge");
  std::string sg_ckpt;
  int sg_n = 500;
  std::string sg_merge_out;
  add_bench_opts(sg);
  sg->add_option("--ckpt", sg_ckpt, "checkpoint path")->required();
  sg->add_option("--n", sg_n, "image prompts");
  sg->add_option("--merged", sg_merge_out,
                 "write original+generated training file here");
  sg->callback([&]() {
    BenchmarkEnv env = bench_env();
    TinyMllm model = TinyMllm::load(sg_ckpt);
    GenerateConfig gen;
    gen.max_new_tokens = 48;
    SelfGenerated sgr =
        self_generate(model, env.test, sg_n, env.vocab, env.chat, gen);
    fs::create_directories(out_root);
    write_jsonl(out_root + "/selfgen.jsonl", sgr.records);
    if (!sg_merge_out.empty()) {
      std::vector<DatasetRecord> merged = env.train;
      merged.insert(merged.end(), sgr.records.begin(), sgr.records.end());
      write_jsonl(sg_merge_out, merged);
    }
    nlohmann::ordered_json j;
    j["schema_version"] = 1;
    j["total"] = sgr.total;
    j["malformed"] = sgr.malformed;
    j["malformed_rate"] = sgr.malformed_rate();
    write_text_file(out_root + "/selfgen.json", j.dump(2) + "\n");
    std::cout << "generated=" << sgr.records.size()
              << " malformed_rate=" << fmt_double(sgr.malformed_rate())
              << std::endl;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    return fail_with(e);
  }
  return 0;
}
