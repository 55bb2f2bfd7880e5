#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "l2t/experiments.hpp"
#include "l2t/metrics.hpp"

using namespace l2t;

namespace {

struct MetricsFixture {
  SynthWorldConfig world;
  std::vector<DatasetRecord> records;
  Vocab vocab;
  ChatTemplate chat;
  TemplateSet templates;
  MllmConfig mcfg;

  MetricsFixture() {
    world = SynthWorldConfig::standard();
    TaskMix mix;
    ShortcutConfig sc;
    GeneratedSplit split = gen_dataset(world, 32, mix, sc, 21, 1.0);
    records = std::move(split.train);
    chat = ChatTemplate::standard();
    chat.n_visual_tokens = 4;
    std::vector<std::string> text = all_text_lines(records);
    text.push_back(chat.system_preamble);
    text.push_back(chat.user_tag);
    text.push_back(chat.assistant_tag);
    vocab = build_vocab(text, 512);
    templates = mine_templates(all_instructions(records), 0.2);

    mcfg.d_model = 16;
    mcfg.n_layers = 1;
    mcfg.n_heads = 2;
    mcfg.d_ff = 32;
    mcfg.vocab_size = vocab.size();
    mcfg.n_visual_tokens = 4;
    mcfg.feature_dim = world.feature_dim();
    mcfg.d_enc = 8;
    mcfg.max_seq_len = 128;
    mcfg.seed = 3;
  }

  SerializedSample serialized(size_t i) const {
    return serialize(records[i].sample, chat, vocab, templates);
  }
};

}  // namespace

TEST_CASE("response nll equals the masked cross entropy, and is uniform for "
          "a zero model") {
  MetricsFixture f;
  TinyMllm model(f.mcfg);
  SerializedSample s = f.serialized(0);
  double nll = response_nll(model, s, f.records[0].feature);

  auto fwd = model.forward(s.ids, f.records[0].feature);
  LossMask vit = build_loss_mask(s, MaskMode::Vit);
  CeInputs ce = ce_inputs(s, vit);
  NodeId loss = fwd.graph.cross_entropy_masked(fwd.logits, ce.targets,
                                               ce.mask, Reduction::Sum);
  CHECK(std::fabs(nll - fwd.graph.value(loss).data[0]) < 1e-12);

  // all-zero parameters -> uniform logits -> n_resp * ln V
  TinyMllm zero(f.mcfg);
  for (int i = 0; i < zero.n_params(); ++i) {
    Tensor& t = zero.mutable_param(i);
    const std::string& name = zero.info(i).name;
    bool is_ln_gain =
        name.find("ln") != std::string::npos && name.back() == 'g';
    std::fill(t.data.begin(), t.data.end(), is_ln_gain ? 1.0 : 0.0);
  }
  double expect = vit.count() * std::log(static_cast<double>(f.vocab.size()));
  CHECK(response_nll(zero, s, f.records[0].feature) ==
        doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("visual contribution vanishes for a constant connector") {
  MetricsFixture f;
  TinyMllm model(f.mcfg);
  for (int i = 0; i < model.n_params(); ++i)
    if (model.info(i).name.rfind("h.", 0) == 0)
      std::fill(model.mutable_param(i).data.begin(),
                model.mutable_param(i).data.end(), 0.0);
  SerializedSample s = f.serialized(1);
  VcResult vc = visual_contribution(model, s, f.records[1].feature,
                                    f.records[1].sample.image_id, 99);
  CHECK(vc.sum == 0.0);
  CHECK(vc.per_token == 0.0);
}

TEST_CASE("visual contribution vanishes when the noise equals the image") {
  MetricsFixture f;
  TinyMllm model(f.mcfg);
  SerializedSample s = f.serialized(2);
  VcResult vc = visual_contribution_with_noise(
      model, s, f.records[2].feature, f.records[2].feature);
  CHECK(vc.sum == 0.0);
}

TEST_CASE("visual contribution is deterministic in the noise seed") {
  MetricsFixture f;
  TinyMllm model(f.mcfg);
  SerializedSample s = f.serialized(3);
  VcResult a = visual_contribution(model, s, f.records[3].feature,
                                   f.records[3].sample.image_id, 7);
  VcResult b = visual_contribution(model, s, f.records[3].feature,
                                   f.records[3].sample.image_id, 7);
  CHECK(a.sum == b.sum);
  VcResult multi = visual_contribution(model, s, f.records[3].feature,
                                       f.records[3].sample.image_id, 7, 4);
  CHECK(std::isfinite(multi.sum));
}

TEST_CASE("vc additivity across turns at matched contexts") {
  MetricsFixture f;
  TinyMllm model(f.mcfg);
  // two-turn sample; per-turn VC sums must add up to the whole-sample VC
  ConversationSample two = f.records[4].sample;
  two.turns.push_back({"What is in the image?", f.records[4].answer});
  SerializedSample s = serialize(two, f.chat, f.vocab, f.templates);

  std::vector<double> noise(f.records[4].feature.size());
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  for (double& v : noise) v = uni(rng);

  VcResult whole =
      visual_contribution_with_noise(model, s, f.records[4].feature, noise);

  // per-turn: response log-probs with identical full-sequence contexts
  auto logprob_turn = [&](int turn) {
    auto fwd = model.forward(s.ids, f.records[4].feature);
    auto fwd_noise = model.forward(s.ids, noise);
    LossMask vit = build_loss_mask(s, MaskMode::Vit);
    // zero out the other turn's positions
    LossMask only = vit;
    int anchor0 = s.answer_anchors[0];
    int anchor1 = s.answer_anchors[1];
    for (size_t t = 0; t < only.supervised.size(); ++t) {
      bool in_turn1 = static_cast<int>(t) >= anchor1;
      if (turn == 0 && in_turn1) only.supervised[t] = 0;
      if (turn == 1 && !in_turn1) only.supervised[t] = 0;
    }
    CeInputs ce = ce_inputs(s, only);
    NodeId l1 = fwd.graph.cross_entropy_masked(fwd.logits, ce.targets,
                                               ce.mask, Reduction::Sum);
    NodeId l2 = fwd_noise.graph.cross_entropy_masked(
        fwd_noise.logits, ce.targets, ce.mask, Reduction::Sum);
    return fwd_noise.graph.value(l2).data[0] - fwd.graph.value(l1).data[0];
  };
  double split_sum = logprob_turn(0) + logprob_turn(1);
  CHECK(std::fabs(split_sum - whole.sum) < 1e-10);
}

TEST_CASE("chair worked example") {
  std::vector<std::string> captions = {"a dog and a cat on a mat"};
  std::vector<std::vector<std::string>> gt = {{"dog", "mat"}};
  std::vector<std::string> vocab = {"dog", "cat", "mat", "bird"};
  ChairResult r = chair(captions, gt, vocab);
  CHECK(r.total_mentioned == 3);
  CHECK(r.total_hallucinated == 1);
  CHECK(r.chair_i == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(r.chair_s == 1.0);
  CHECK(r.flagged[0] == 1);
}

TEST_CASE("captions without vocabulary objects are excluded, not flagged") {
  std::vector<std::string> captions = {"nothing relevant here",
                                       "a dog sits"};
  std::vector<std::vector<std::string>> gt = {{"dog"}, {"dog"}};
  std::vector<std::string> vocab = {"dog", "cat"};
  ChairResult r = chair(captions, gt, vocab);
  CHECK(r.flagged[0] == 0);
  CHECK(r.total_mentioned == 1);
  CHECK(r.chair_s == 0.0);
  CHECK(r.chair_i == 0.0);
}

TEST_CASE("chair equals a brute-force counter on random captions") {
  SynthWorldConfig world = SynthWorldConfig::standard();
  std::mt19937_64 rng(23);
  std::vector<std::string> captions;
  std::vector<std::vector<std::string>> gts;
  for (int i = 0; i < 100; ++i) {
    int n_mention = static_cast<int>(rng() % 5);
    std::string cap = "an image with";
    std::set<std::string> mentioned;
    for (int m = 0; m < n_mention; ++m) {
      const std::string& w = world.objects[rng() % world.objects.size()];
      cap += " a " + w + (m + 1 < n_mention ? " and" : "");
      mentioned.insert(w);
    }
    cap += ".";
    std::vector<std::string> gt;
    for (int gti = 0; gti < static_cast<int>(rng() % 4); ++gti)
      gt.push_back(world.objects[rng() % world.objects.size()]);
    captions.push_back(cap);
    gts.push_back(gt);
  }
  ChairResult fast = chair(captions, gts, world.objects);

  // independent object-by-object counting
  int64_t mentions = 0, hallucs = 0, flagged = 0;
  for (size_t i = 0; i < captions.size(); ++i) {
    std::set<std::string> gt(gts[i].begin(), gts[i].end());
    std::set<std::string> seen;
    for (const std::string& obj : world.objects) {
      for (const std::string& tok : split_words(captions[i]))
        if (tok == obj) seen.insert(obj);
    }
    bool any = false;
    for (const std::string& obj : seen) {
      ++mentions;
      if (!gt.count(obj)) {
        ++hallucs;
        any = true;
      }
    }
    if (any) ++flagged;
  }
  CHECK(fast.total_mentioned == mentions);
  CHECK(fast.total_hallucinated == hallucs);
  CHECK(fast.chair_s ==
        doctest::Approx(static_cast<double>(flagged) / captions.size())
            .epsilon(1e-15));
}

TEST_CASE("adding a hallucinated object never decreases chair") {
  std::vector<std::string> vocab = {"dog", "cat", "mat"};
  std::vector<std::vector<std::string>> gt = {{"dog"}};
  ChairResult before = chair({"a dog"}, gt, vocab);
  ChairResult after = chair({"a dog and a cat"}, gt, vocab);
  CHECK(after.chair_i >= before.chair_i);
  CHECK(after.chair_s >= before.chair_s);
}

TEST_CASE("accuracy is normalized exact match") {
  CHECK(accuracy({"Red", "blue"}, {"red", "Blue"}) == 1.0);
  CHECK(accuracy({"red"}, {"blue"}) == 0.0);
  CHECK(accuracy({"a", "b", "c", "d"}, {"a", "b", "c", "x"}) == 0.75);
  CHECK_THROWS_AS((void)accuracy({"a"}, {}), Error);
}

TEST_CASE("attention probe: uniform weights give count ratio") {
  int H = 4, S = 40;
  Tensor w = Tensor::zeros({H, S, S});
  std::fill(w.data.begin(), w.data.end(), 1.0 / S);
  std::vector<double> mass = probe_from_weights(w, 30, 5, 9);
  for (double m : mass) CHECK(m == doctest::Approx(9.0 / 40).epsilon(1e-12));
  CHECK_THROWS_AS((void)probe_from_weights(w, 41, 5, 9), Error);
}

TEST_CASE("attention probe on a real sample is row-stochastic") {
  MetricsFixture f;
  TinyMllm model(f.mcfg);
  SerializedSample s = f.serialized(5);
  AttentionProbe probe = attention_probe(model, s, f.records[5].feature);
  CHECK(probe.anchor == s.answer_anchors[0]);
  REQUIRE(static_cast<int>(probe.visual_mass.size()) == f.mcfg.n_heads);
  for (double m : probe.visual_mass) {
    CHECK(m >= 0.0);
    CHECK(m <= 1.0);
  }
  for (int h = 0; h < probe.anchor_rows.shape[0]; ++h) {
    double sum = 0.0;
    for (int c = 0; c < probe.anchor_rows.shape[1]; ++c)
      sum += probe.anchor_rows.at(h, c);
    CHECK(std::fabs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("throughput bench returns sane figures") {
  MetricsFixture f;
  TinyMllm model(f.mcfg);
  auto records = gen_ratio_records(f.world, 16, 6, 6, 31);
  TemplateSet empty;
  ThroughputResult r = throughput_bench(model, records, f.vocab, f.chat,
                                        empty, MaskMode::Vit, 10, 2, 2);
  CHECK(r.timed_steps == 10);
  CHECK(r.steps_per_s > 0.0);
  CHECK(r.samples_per_s == doctest::Approx(r.steps_per_s * 2).epsilon(1e-9));
}
