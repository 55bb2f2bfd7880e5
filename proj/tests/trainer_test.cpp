#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "l2t/experiments.hpp"
#include "l2t/trainer.hpp"

using namespace l2t;

namespace {

// Small world + model so a full two-stage run takes well under a second.
struct TrainFixture {
  SynthWorldConfig world;
  std::vector<DatasetRecord> captions;
  std::vector<DatasetRecord> instructions;
  Vocab vocab;
  ChatTemplate chat;
  TemplateSet templates;
  MllmConfig mcfg;

  TrainFixture() {
    world = SynthWorldConfig::standard();
    captions = gen_pretrain_pairs(world, 24, 11);
    TaskMix mix;
    ShortcutConfig sc;
    sc.leak_prob = 0.5;
    GeneratedSplit split = gen_dataset(world, 48, mix, sc, 12, 1.0);
    instructions = std::move(split.train);

    std::vector<std::string> text = all_text_lines(instructions);
    auto more = all_text_lines(captions);
    text.insert(text.end(), more.begin(), more.end());
    chat = ChatTemplate::standard();
    chat.n_visual_tokens = 4;
    text.push_back(chat.system_preamble);
    text.push_back(chat.user_tag);
    text.push_back(chat.assistant_tag);
    vocab = build_vocab(text, 512);
    templates = mine_templates(all_instructions(instructions), 0.2);

    mcfg.d_model = 16;
    mcfg.n_layers = 1;
    mcfg.n_heads = 2;
    mcfg.d_ff = 32;
    mcfg.vocab_size = vocab.size();
    mcfg.n_visual_tokens = 4;
    mcfg.feature_dim = world.feature_dim();
    mcfg.d_enc = 8;
    mcfg.max_seq_len = 128;
    mcfg.seed = 7;
  }

  TrainConfig quick(Stage stage) const {
    TrainConfig cfg = TrainConfig::desk_preset(stage);
    cfg.batch_size = 8;
    cfg.epochs = 1;
    cfg.seed = 5;
    return cfg;
  }
};

uint64_t group_fingerprint(const TinyMllm& m, ParamGroup g) {
  uint64_t h = 1469598103934665603ull;
  for (int i = 0; i < m.n_params(); ++i) {
    if (m.info(i).group != g) continue;
    const Tensor& t = m.param(i);
    h = fnv1a64(t.data.data(), t.data.size() * sizeof(double), h);
  }
  return h;
}

}  // namespace

TEST_CASE("learning rate schedule endpoints") {
  TrainConfig cfg;
  cfg.lr_peak = 2e-3;
  cfg.warmup_ratio = 0.03;
  const int64_t total = 1000;
  CHECK(lr_at(0, total, cfg) == 0.0);
  // warmup endpoint hits the peak
  CHECK(lr_at(30, total, cfg) == doctest::Approx(cfg.lr_peak).epsilon(1e-12));
  // cosine terminal is zero
  CHECK(lr_at(total, total, cfg) ==
        doctest::Approx(0.0).epsilon(1e-15));
  // midpoint of the decay span is half the peak
  CHECK(lr_at(515, total, cfg) ==
        doctest::Approx(cfg.lr_peak / 2).epsilon(1e-12));
  CHECK_THROWS_AS((void)lr_at(-1, total, cfg), Error);
  CHECK_THROWS_AS((void)lr_at(total + 1, total, cfg), Error);
}

TEST_CASE("adamw: zero gradient and zero decay leave parameters unchanged") {
  Tensor p = Tensor::vec({1.0, -2.0, 3.0});
  std::vector<Tensor*> params = {&p};
  std::vector<std::vector<double>> grads = {{0.0, 0.0, 0.0}};
  AdamState state;
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  adamw_step(params, grads, state, cfg, 1e-3);
  CHECK(p.data == std::vector<double>{1.0, -2.0, 3.0});
}

TEST_CASE("adamw: hand-computed first step on a scalar") {
  const double g = 0.5, lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Tensor p = Tensor::scalar(1.0);
  std::vector<Tensor*> params = {&p};
  std::vector<std::vector<double>> grads = {{g}};
  AdamState state;
  TrainConfig cfg;
  cfg.beta1 = b1;
  cfg.beta2 = b2;
  cfg.adam_eps = eps;
  adamw_step(params, grads, state, cfg, lr);
  // mhat = g, vhat = g^2 after bias correction at t=1
  double expect = 1.0 - lr * (g / (std::sqrt(g * g) + eps));
  CHECK(p.data[0] == doctest::Approx(expect).epsilon(1e-14));
  // first step magnitude is ~lr in the sign direction
  CHECK(std::fabs((1.0 - p.data[0]) - lr) < 1e-8);
}

TEST_CASE("adamw: decay-only step shrinks parameters by lr*wd*p") {
  Tensor p = Tensor::vec({2.0, -4.0});
  std::vector<Tensor*> params = {&p};
  std::vector<std::vector<double>> grads = {{0.0, 0.0}};
  AdamState state;
  TrainConfig cfg;
  cfg.weight_decay = 0.1;
  adamw_step(params, grads, state, cfg, 0.01);
  CHECK(p.data[0] == doctest::Approx(2.0 - 0.01 * 0.1 * 2.0).epsilon(1e-14));
  CHECK(p.data[1] == doctest::Approx(-4.0 - 0.01 * 0.1 * -4.0).epsilon(1e-14));
}

TEST_CASE("pretrain trains only the connector and loss decreases") {
  TrainFixture f;
  TinyMllm model(f.mcfg);
  uint64_t g_before = group_fingerprint(model, ParamGroup::VisionEncoder);
  uint64_t f_before = group_fingerprint(model, ParamGroup::Decoder);
  uint64_t h_before = group_fingerprint(model, ParamGroup::Connector);

  TrainConfig cfg = f.quick(Stage::Pretrain);
  cfg.epochs = 4;
  cfg.mask_mode = MaskMode::L2t;  // stage rule must override this
  TrainStats stats =
      pretrain(model, f.captions, f.vocab, f.chat, f.templates, cfg);

  CHECK(group_fingerprint(model, ParamGroup::VisionEncoder) == g_before);
  CHECK(group_fingerprint(model, ParamGroup::Decoder) == f_before);
  CHECK(group_fingerprint(model, ParamGroup::Connector) != h_before);
  CHECK(model.pretrained());

  REQUIRE(stats.rows.size() >= 6);
  // first-epoch mean vs last-epoch mean; single batches are too noisy
  size_t per_epoch = stats.rows.size() / 4;
  double first = 0.0, last = 0.0;
  for (size_t i = 0; i < per_epoch; ++i) {
    first += stats.rows[i].loss;
    last += stats.rows[stats.rows.size() - 1 - i].loss;
  }
  CHECK(last < first);
  // forced response-only supervision: no instruction tokens in the log
  for (const LogRow& row : stats.rows) {
    CHECK(row.tokens_instr == 0);
    CHECK(row.tokens_template == 0);
    CHECK(row.tokens_resp > 0);
  }
}

TEST_CASE("finetune requires a pretrained model unless overridden") {
  TrainFixture f;
  TinyMllm model(f.mcfg);
  TrainConfig cfg = f.quick(Stage::Finetune);
  CHECK_THROWS_AS(
      (void)finetune(model, f.instructions, f.vocab, f.chat, f.templates, cfg),
      Error);
  cfg.from_scratch = true;
  TrainStats stats =
      finetune(model, f.instructions, f.vocab, f.chat, f.templates, cfg);
  CHECK(stats.steps > 0);
}

TEST_CASE("finetune keeps the projection frozen and is deterministic") {
  TrainFixture f;
  auto run = [&](MaskMode mode) {
    TinyMllm model(f.mcfg);
    TrainConfig pre = f.quick(Stage::Pretrain);
    pretrain(model, f.captions, f.vocab, f.chat, f.templates, pre);
    TrainConfig cfg = f.quick(Stage::Finetune);
    cfg.mask_mode = mode;
    TrainStats stats =
        finetune(model, f.instructions, f.vocab, f.chat, f.templates, cfg);
    return std::make_pair(model.params_fingerprint(), stats);
  };

  auto [fp1, stats1] = run(MaskMode::L2t);
  auto [fp2, stats2] = run(MaskMode::L2t);
  CHECK(fp1 == fp2);  // bitwise reproducible end to end
  REQUIRE(stats1.rows.size() == stats2.rows.size());
  CHECK(stats1.rows.back().loss == stats2.rows.back().loss);

  TinyMllm model(f.mcfg);
  uint64_t g_before = group_fingerprint(model, ParamGroup::VisionEncoder);
  pretrain(model, f.captions, f.vocab, f.chat, f.templates,
           f.quick(Stage::Pretrain));
  TrainConfig cfg = f.quick(Stage::Finetune);
  finetune(model, f.instructions, f.vocab, f.chat, f.templates, cfg);
  CHECK(group_fingerprint(model, ParamGroup::VisionEncoder) == g_before);
}

TEST_CASE("sharded batches give bitwise-identical results across threads") {
  TrainFixture f;
  auto run = [&](int threads) {
    TinyMllm model(f.mcfg);
    TrainConfig pre = f.quick(Stage::Pretrain);
    pre.n_threads = threads;
    pretrain(model, f.captions, f.vocab, f.chat, f.templates, pre);
    TrainConfig cfg = f.quick(Stage::Finetune);
    cfg.n_threads = threads;
    finetune(model, f.instructions, f.vocab, f.chat, f.templates, cfg);
    return model.params_fingerprint();
  };
  CHECK(run(1) == run(2));
}

TEST_CASE("vit and l2t runs agree on the response component at step 0") {
  TrainFixture f;
  auto first_row = [&](MaskMode mode) {
    TinyMllm model(f.mcfg);
    pretrain(model, f.captions, f.vocab, f.chat, f.templates,
             f.quick(Stage::Pretrain));
    TrainConfig cfg = f.quick(Stage::Finetune);
    cfg.mask_mode = mode;
    TrainStats stats =
        finetune(model, f.instructions, f.vocab, f.chat, f.templates, cfg);
    return stats.rows.front();
  };
  LogRow vit = first_row(MaskMode::Vit);
  LogRow l2t = first_row(MaskMode::L2t);
  // same init, same batch: identical response-restricted loss
  CHECK(vit.loss_vit_component == l2t.loss_vit_component);
  // supervision nesting shows up in the token accounting
  CHECK(l2t.tokens_instr > 0);
  CHECK(vit.tokens_instr == 0);
  CHECK(l2t.tokens_resp == vit.tokens_resp);
}

TEST_CASE("role-split token accounting adds up each step") {
  TrainFixture f;
  TinyMllm model(f.mcfg);
  pretrain(model, f.captions, f.vocab, f.chat, f.templates,
           f.quick(Stage::Pretrain));
  TrainConfig cfg = f.quick(Stage::Finetune);
  cfg.mask_mode = MaskMode::L2tFull;
  TrainStats stats =
      finetune(model, f.instructions, f.vocab, f.chat, f.templates, cfg);
  for (const LogRow& row : stats.rows) {
    CHECK(row.tokens_resp + row.tokens_instr + row.tokens_template > 0);
    CHECK(row.ms_per_step > 0.0);
  }
  CHECK(stats.skipped_empty_mask == 0);
}

TEST_CASE("train log CSV has the full schema") {
  TrainFixture f;
  TinyMllm model(f.mcfg);
  TrainConfig cfg = f.quick(Stage::Pretrain);
  TrainStats stats =
      pretrain(model, f.captions, f.vocab, f.chat, f.templates, cfg);
  std::string path = "train_log_test.csv";
  write_train_log_csv(path, stats.rows);
  std::string text = read_text_file(path);
  CHECK(text.rfind("step,lr,loss,loss_vit_component,tokens_resp,tokens_instr,"
                   "tokens_template,ms_per_step\n",
                   0) == 0);
  std::remove(path.c_str());
}

TEST_CASE("self-generation splits at the assistant tag") {
  TrainFixture f;
  // With forced generations this is deterministic: build a model whose
  // position table emits "<instr words> assistant : red <eos>".
  std::vector<int> tag = encode(f.vocab, f.chat.assistant_tag);
  REQUIRE(tag.size() == 2);
  REQUIRE(f.vocab.size() > 16);
  std::vector<int> body = {8, 9, 10};  // arbitrary in-vocab words
  std::vector<int> resp = {11};

  MllmConfig mc = f.mcfg;
  mc.d_model = 512;  // room for vocab-wide one-hot forcing
  mc.vocab_size = f.vocab.size();
  REQUIRE(mc.vocab_size <= mc.d_model);
  mc.n_layers = 1;
  mc.n_heads = 2;
  TinyMllm model(mc);
  for (int i = 0; i < model.n_params(); ++i) {
    Tensor& t = model.mutable_param(i);
    const std::string& name = model.info(i).name;
    bool is_ln_gain =
        name.find("ln") != std::string::npos && name.back() == 'g';
    std::fill(t.data.begin(), t.data.end(), is_ln_gain ? 1.0 : 0.0);
  }
  // the prompt prefix for selfgen: bos + system + "user :" + slots
  std::vector<int> prefix;
  prefix.push_back(Vocab::kBos);
  for (int id : encode(f.vocab, f.chat.system_preamble)) prefix.push_back(id);
  for (int id : encode(f.vocab, "USER:")) prefix.push_back(id);
  for (int k = 0; k < f.chat.n_visual_tokens; ++k)
    prefix.push_back(Vocab::kImageSlot);

  std::vector<int> cont = body;
  cont.insert(cont.end(), tag.begin(), tag.end());
  cont.insert(cont.end(), resp.begin(), resp.end());
  cont.push_back(Vocab::kEos);

  for (int i = 0; i < model.n_params(); ++i) {
    Tensor& t = model.mutable_param(i);
    const std::string& name = model.info(i).name;
    if (name == "f.pos") {
      for (size_t p = 0; p < cont.size(); ++p) {
        int pos = static_cast<int>(prefix.size() + p) - 1;
        if (pos < t.rows()) t.at(pos, cont[p]) = 30.0;
      }
    } else if (name == "f.head.w") {
      for (int v = 0; v < mc.vocab_size; ++v) t.at(v, v) = 1.0;
    }
  }

  GenerateConfig gen;
  gen.max_new_tokens = 32;
  SelfGenerated sg =
      self_generate(model, f.instructions, 5, f.vocab, f.chat, gen);
  CHECK(sg.total == 5);
  CHECK(sg.malformed == 0);
  REQUIRE(sg.records.size() == 5);
  CHECK(sg.records[0].sample.turns[0].instruction == decode(f.vocab, body));
  CHECK(sg.records[0].sample.turns[0].response == decode(f.vocab, resp));
  // output records fit the dataset schema
  std::string path = "selfgen_schema_test.jsonl";
  write_jsonl(path, sg.records);
  auto back = read_jsonl(path);
  CHECK(back.size() == sg.records.size());
  std::remove(path.c_str());

  // a model that never emits the tag is all malformed
  TinyMllm blank(mc);
  for (int i = 0; i < blank.n_params(); ++i) {
    Tensor& t = blank.mutable_param(i);
    const std::string& name = blank.info(i).name;
    bool is_ln_gain =
        name.find("ln") != std::string::npos && name.back() == 'g';
    std::fill(t.data.begin(), t.data.end(), is_ln_gain ? 1.0 : 0.0);
  }
  SelfGenerated none =
      self_generate(blank, f.instructions, 5, f.vocab, f.chat, gen);
  CHECK(none.malformed == none.total);
}

TEST_CASE("presets carry the published learning rates") {
  TrainConfig pre = TrainConfig::paper_faithful_preset(Stage::Pretrain);
  TrainConfig fine = TrainConfig::paper_faithful_preset(Stage::Finetune);
  CHECK(pre.lr_peak == 1e-3);
  CHECK(fine.lr_peak == 2e-5);
  CHECK(pre.batch_size == 256);
  CHECK(fine.batch_size == 128);
  CHECK(pre.warmup_ratio == 0.03);
  CHECK(fine.epochs == 1);
}
