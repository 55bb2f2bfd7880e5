#include "l2t/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include <json.hpp>

#include "l2t/kernels.hpp"

namespace l2t {

namespace {

constexpr char kCheckpointMagic[] = "L2TCKPT1\n";

struct SlotSpan {
  int begin = -1;
  int count = 0;
};

SlotSpan find_slots(std::span<const int> ids) {
  SlotSpan span;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] != Vocab::kImageSlot) continue;
    if (span.begin < 0) {
      span.begin = static_cast<int>(i);
      span.count = 1;
    } else if (static_cast<int>(i) == span.begin + span.count) {
      ++span.count;
    } else {
      raise(Err::InvalidArgument, "image slots must be contiguous");
    }
  }
  return span;
}

}  // namespace

void MllmConfig::validate() const {
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0)
    raise(Err::InvalidArgument, "model dimensions must be positive");
  if (d_model % n_heads != 0)
    raise(Err::InvalidArgument, "d_model must divide by n_heads");
  if (n_visual_tokens < 1)
    raise(Err::InvalidArgument, "need at least one visual token");
  if (vocab_size < Vocab::kNumSpecials)
    raise(Err::InvalidArgument, "vocab_size too small");
  if (connector_layers != 1 && connector_layers != 2)
    raise(Err::InvalidArgument, "connector_layers must be 1 or 2");
}

TinyMllm::TinyMllm(MllmConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  build_params();
}

int TinyMllm::add_param(const std::string& name, ParamGroup group,
                        std::vector<int> shape) {
  params_.push_back(Tensor::zeros(std::move(shape)));
  infos_.push_back({name, group});
  return static_cast<int>(params_.size()) - 1;
}

void TinyMllm::build_params() {
  const MllmConfig& c = cfg_;
  add_param("g.proj", ParamGroup::VisionEncoder,
            {c.feature_dim, c.n_visual_tokens * c.d_enc});
  if (c.connector_layers == 2) {
    add_param("h.fc1.w", ParamGroup::Connector, {c.d_enc, c.d_model});
    add_param("h.fc1.b", ParamGroup::Connector, {c.d_model});
    add_param("h.fc2.w", ParamGroup::Connector, {c.d_model, c.d_model});
    add_param("h.fc2.b", ParamGroup::Connector, {c.d_model});
  } else {
    add_param("h.fc1.w", ParamGroup::Connector, {c.d_enc, c.d_model});
    add_param("h.fc1.b", ParamGroup::Connector, {c.d_model});
  }
  add_param("f.embed", ParamGroup::Decoder, {c.vocab_size, c.d_model});
  add_param("f.pos", ParamGroup::Decoder, {c.max_seq_len, c.d_model});
  for (int l = 0; l < c.n_layers; ++l) {
    std::string p = "f.layer" + std::to_string(l) + ".";
    add_param(p + "ln1.g", ParamGroup::Decoder, {c.d_model});
    add_param(p + "ln1.b", ParamGroup::Decoder, {c.d_model});
    add_param(p + "wq", ParamGroup::Decoder, {c.d_model, c.d_model});
    add_param(p + "bq", ParamGroup::Decoder, {c.d_model});
    add_param(p + "wk", ParamGroup::Decoder, {c.d_model, c.d_model});
    add_param(p + "bk", ParamGroup::Decoder, {c.d_model});
    add_param(p + "wv", ParamGroup::Decoder, {c.d_model, c.d_model});
    add_param(p + "bv", ParamGroup::Decoder, {c.d_model});
    add_param(p + "wo", ParamGroup::Decoder, {c.d_model, c.d_model});
    add_param(p + "bo", ParamGroup::Decoder, {c.d_model});
    add_param(p + "ln2.g", ParamGroup::Decoder, {c.d_model});
    add_param(p + "ln2.b", ParamGroup::Decoder, {c.d_model});
    add_param(p + "fc1.w", ParamGroup::Decoder, {c.d_model, c.d_ff});
    add_param(p + "fc1.b", ParamGroup::Decoder, {c.d_ff});
    add_param(p + "fc2.w", ParamGroup::Decoder, {c.d_ff, c.d_model});
    add_param(p + "fc2.b", ParamGroup::Decoder, {c.d_model});
  }
  add_param("f.lnf.g", ParamGroup::Decoder, {c.d_model});
  add_param("f.lnf.b", ParamGroup::Decoder, {c.d_model});
  add_param("f.head.w", ParamGroup::Decoder, {c.d_model, c.vocab_size});
  add_param("f.head.b", ParamGroup::Decoder, {c.vocab_size});

  std::mt19937_64 rng(mix_seed(c.seed, 0xC0FFEE));
  std::normal_distribution<double> init(0.0, 0.02);
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& t = params_[i];
    const std::string& name = infos_[i].name;
    bool is_gain = name.size() > 2 && name.compare(name.size() - 2, 2, ".g") == 0 &&
                   name.find("ln") != std::string::npos;
    bool is_bias = !is_gain && t.shape.size() == 1;
    if (infos_[i].group == ParamGroup::VisionEncoder) {
      init_projection(t, rng);
    } else if (is_gain) {
      std::fill(t.data.begin(), t.data.end(), 1.0);
    } else if (is_bias) {
      // zeros
    } else {
      for (double& v : t.data) v = init(rng);
    }
  }
}

// Patch-style frozen featurizer: when the feature vector factors into one
// block per visual token, every block goes through the same seeded random
// basis (one token per grid cell). Otherwise a dense random projection.
void TinyMllm::init_projection(Tensor& t, std::mt19937_64& rng) {
  const MllmConfig& c = cfg_;
  const int n_cols = c.n_visual_tokens * c.d_enc;
  if (c.patch_projection && c.feature_dim % c.n_visual_tokens == 0) {
    const int block = c.feature_dim / c.n_visual_tokens;
    std::normal_distribution<double> dist(0.0,
                                          1.0 / std::sqrt(double(block)));
    std::vector<double> basis(static_cast<size_t>(block) * c.d_enc);
    for (double& v : basis) v = dist(rng);
    std::fill(t.data.begin(), t.data.end(), 0.0);
    for (int tok = 0; tok < c.n_visual_tokens; ++tok) {
      for (int r = 0; r < block; ++r) {
        double* row = t.data.data() +
                      static_cast<size_t>(tok * block + r) * n_cols +
                      static_cast<size_t>(tok) * c.d_enc;
        const double* src = basis.data() + static_cast<size_t>(r) * c.d_enc;
        std::copy(src, src + c.d_enc, row);
      }
    }
  } else {
    std::normal_distribution<double> dist(
        0.0, 1.0 / std::sqrt(double(c.feature_dim)));
    for (double& v : t.data) v = dist(rng);
  }
}

int TinyMllm::index_of(const std::string& name) const {
  for (size_t i = 0; i < infos_.size(); ++i)
    if (infos_[i].name == name) return static_cast<int>(i);
  raise(Err::InvalidId, "no parameter named " + name);
}

bool TinyMllm::trainable(int i) const {
  switch (infos_[i].group) {
    case ParamGroup::VisionEncoder: return false;  // frozen for life
    case ParamGroup::Connector: return connector_trainable_;
    case ParamGroup::Decoder: return decoder_trainable_;
  }
  return false;
}

void TinyMllm::set_trainable(ParamGroup g, bool on) {
  switch (g) {
    case ParamGroup::VisionEncoder:
      if (on) raise(Err::InvalidArgument, "the feature projection stays frozen");
      break;
    case ParamGroup::Connector: connector_trainable_ = on; break;
    case ParamGroup::Decoder: decoder_trainable_ = on; break;
  }
}

size_t TinyMllm::param_count(bool trainable_only) const {
  size_t n = 0;
  for (int i = 0; i < n_params(); ++i) {
    if (trainable_only && !trainable(i)) continue;
    n += params_[i].numel();
  }
  return n;
}

Tensor TinyMllm::encode_image(std::span<const double> feature) const {
  if (static_cast<int>(feature.size()) != cfg_.feature_dim)
    raise(Err::DimMismatch, "feature dim " + std::to_string(feature.size()) +
                                " vs config " + std::to_string(cfg_.feature_dim));
  const auto& K = kern::active();
  const Tensor& proj = params_[0];
  const int N = cfg_.n_visual_tokens;
  std::vector<double> enc(static_cast<size_t>(N) * cfg_.d_enc);
  K.gemm(enc.data(), feature.data(), proj.data.data(), 1, cfg_.feature_dim,
         N * cfg_.d_enc);

  const Tensor& w1 = params_[index_of("h.fc1.w")];
  const Tensor& b1 = params_[index_of("h.fc1.b")];
  std::vector<double> h1(static_cast<size_t>(N) * cfg_.d_model);
  K.gemm(h1.data(), enc.data(), w1.data.data(), N, cfg_.d_enc, cfg_.d_model);
  for (int r = 0; r < N; ++r)
    K.add(h1.data() + static_cast<size_t>(r) * cfg_.d_model,
          h1.data() + static_cast<size_t>(r) * cfg_.d_model, b1.data.data(),
          cfg_.d_model);
  if (cfg_.connector_layers == 1)
    return Tensor({N, cfg_.d_model}, std::move(h1));

  for (double& v : h1) v = gelu_scalar(v);
  const Tensor& w2 = params_[index_of("h.fc2.w")];
  const Tensor& b2 = params_[index_of("h.fc2.b")];
  std::vector<double> h2(static_cast<size_t>(N) * cfg_.d_model);
  K.gemm(h2.data(), h1.data(), w2.data.data(), N, cfg_.d_model, cfg_.d_model);
  for (int r = 0; r < N; ++r)
    K.add(h2.data() + static_cast<size_t>(r) * cfg_.d_model,
          h2.data() + static_cast<size_t>(r) * cfg_.d_model, b2.data.data(),
          cfg_.d_model);
  return Tensor({N, cfg_.d_model}, std::move(h2));
}

TinyMllm::Forward TinyMllm::forward(std::span<const int> ids,
                                    std::span<const double> feature) const {
  const int S = static_cast<int>(ids.size());
  if (S < 1) raise(Err::InvalidArgument, "empty sequence");
  if (S > cfg_.max_seq_len)
    raise(Err::SequenceTooLong, std::to_string(S) + " tokens exceed max " +
                                    std::to_string(cfg_.max_seq_len));
  SlotSpan slots = find_slots(ids);
  const bool has_image = !feature.empty();
  if (!has_image && slots.begin >= 0)
    raise(Err::InvalidArgument, "image-slot tokens but no image given");
  if (has_image && slots.begin < 0)
    raise(Err::InvalidArgument, "image given but no slot tokens in ids");
  if (has_image && slots.count != cfg_.n_visual_tokens)
    raise(Err::DimMismatch, "slot count does not match n_visual_tokens");

  Forward fwd;
  Graph& g = fwd.graph;
  fwd.param_leaf.assign(params_.size(), -1);
  auto leaf_of = [&](int idx) {
    if (fwd.param_leaf[idx] < 0) {
      Tensor t = params_[idx];
      t.requires_grad = trainable(idx);
      fwd.param_leaf[idx] = g.leaf(std::move(t));
    }
    return fwd.param_leaf[idx];
  };
  auto linear = [&](NodeId x, const std::string& w, const std::string& b) {
    return g.add_bias(g.matmul(x, leaf_of(index_of(w))),
                      leaf_of(index_of(b)));
  };

  NodeId x0;
  if (has_image && slots.begin >= 0) {
    // visual path: feature -> frozen projection -> connector
    Tensor feat({1, cfg_.feature_dim},
                std::vector<double>(feature.begin(), feature.end()));
    NodeId fv = g.leaf(std::move(feat));
    NodeId enc = g.reshape(g.matmul(fv, leaf_of(0)),
                           {cfg_.n_visual_tokens, cfg_.d_enc});
    NodeId hv = linear(enc, "h.fc1.w", "h.fc1.b");
    if (cfg_.connector_layers == 2)
      hv = linear(g.gelu(hv), "h.fc2.w", "h.fc2.b");

    std::vector<int> pre_ids(ids.begin(), ids.begin() + slots.begin);
    std::vector<int> post_ids(ids.begin() + slots.begin + slots.count,
                              ids.end());
    NodeId emb = leaf_of(index_of("f.embed"));
    NodeId e_pre = g.embedding_lookup(emb, pre_ids);
    NodeId e_post = g.embedding_lookup(emb, post_ids);
    x0 = g.concat_rows(g.concat_rows(e_pre, hv), e_post);
  } else {
    std::vector<int> all_ids(ids.begin(), ids.end());
    x0 = g.embedding_lookup(leaf_of(index_of("f.embed")), all_ids);
  }

  NodeId pos = g.slice_rows(leaf_of(index_of("f.pos")), 0, S);
  NodeId x = g.add(x0, pos);

  for (int l = 0; l < cfg_.n_layers; ++l) {
    std::string p = "f.layer" + std::to_string(l) + ".";
    NodeId a_in = g.layer_norm(x, leaf_of(index_of(p + "ln1.g")),
                               leaf_of(index_of(p + "ln1.b")));
    NodeId q = linear(a_in, p + "wq", p + "bq");
    NodeId k = linear(a_in, p + "wk", p + "bk");
    NodeId v = linear(a_in, p + "wv", p + "bv");
    NodeId attn = g.causal_self_attention(q, k, v, cfg_.n_heads);
    fwd.attention.push_back(attn);
    x = g.add(x, linear(attn, p + "wo", p + "bo"));
    NodeId m_in = g.layer_norm(x, leaf_of(index_of(p + "ln2.g")),
                               leaf_of(index_of(p + "ln2.b")));
    NodeId mid = g.gelu(linear(m_in, p + "fc1.w", p + "fc1.b"));
    x = g.add(x, linear(mid, p + "fc2.w", p + "fc2.b"));
  }

  NodeId xf = g.layer_norm(x, leaf_of(index_of("f.lnf.g")),
                           leaf_of(index_of("f.lnf.b")));
  fwd.logits = linear(xf, "f.head.w", "f.head.b");
  return fwd;
}

std::vector<int> TinyMllm::generate(std::span<const int> prompt_ids,
                                    std::span<const double> feature,
                                    const GenerateConfig& gen) const {
  if (gen.beam_width < 1)
    raise(Err::InvalidArgument, "beam_width must be at least 1");
  if (gen.max_new_tokens < 1) return {};

  auto banned = [](int id) {
    return id == Vocab::kBos || id == Vocab::kPad || id == Vocab::kImageSlot;
  };

  // Log-softmax of the last logits row for one candidate sequence.
  auto next_log_probs = [&](const std::vector<int>& ids) {
    Forward fwd = forward(ids, feature);
    const Tensor& logits = fwd.graph.value(fwd.logits);
    int V = logits.cols();
    int last = logits.rows() - 1;
    std::vector<double> lp(V);
    const double* row = logits.data.data() + static_cast<size_t>(last) * V;
    double mx = row[0];
    for (int i = 1; i < V; ++i) mx = std::max(mx, row[i]);
    double z = 0.0;
    for (int i = 0; i < V; ++i) z += std::exp(row[i] - mx);
    double logz = mx + std::log(z);
    for (int i = 0; i < V; ++i) lp[i] = row[i] - logz;
    return lp;
  };

  const int room =
      cfg_.max_seq_len - static_cast<int>(prompt_ids.size());
  if (room < 1)
    raise(Err::SequenceTooLong, "no room to generate past the prompt");
  const int max_new = std::min(gen.max_new_tokens, room);

  if (gen.strategy == GenerateConfig::Strategy::Greedy ||
      gen.beam_width == 1) {
    std::vector<int> ids(prompt_ids.begin(), prompt_ids.end());
    std::vector<int> out;
    for (int step = 0; step < max_new; ++step) {
      std::vector<double> lp = next_log_probs(ids);
      int best = -1;
      for (int v = 0; v < static_cast<int>(lp.size()); ++v) {
        if (banned(v)) continue;
        if (best < 0 || lp[v] > lp[best]) best = v;  // ties keep lowest id
      }
      out.push_back(best);
      ids.push_back(best);
      if (best == Vocab::kEos) break;
    }
    return out;
  }

  struct Beam {
    std::vector<int> tokens;  // generated only
    double logp = 0.0;
    bool done = false;
    double score() const {
      return tokens.empty() ? logp : logp / static_cast<double>(tokens.size());
    }
  };
  std::vector<Beam> beams{Beam{}};
  std::vector<Beam> finished;
  std::vector<int> work(prompt_ids.begin(), prompt_ids.end());

  for (int step = 0; step < max_new; ++step) {
    std::vector<Beam> candidates;
    for (const Beam& b : beams) {
      if (b.done) continue;
      work.resize(prompt_ids.size());
      work.insert(work.end(), b.tokens.begin(), b.tokens.end());
      std::vector<double> lp = next_log_probs(work);
      for (int v = 0; v < static_cast<int>(lp.size()); ++v) {
        if (banned(v)) continue;
        Beam nb = b;
        nb.tokens.push_back(v);
        nb.logp += lp[v];
        nb.done = v == Vocab::kEos;
        candidates.push_back(std::move(nb));
      }
    }
    if (candidates.empty()) break;
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Beam& a, const Beam& b) {
                       if (a.logp != b.logp) return a.logp > b.logp;
                       return a.tokens.back() < b.tokens.back();
                     });
    beams.clear();
    int taken = 0;
    for (Beam& c : candidates) {
      if (taken >= gen.beam_width) break;
      ++taken;
      if (c.done)
        finished.push_back(std::move(c));
      else
        beams.push_back(std::move(c));
    }
    if (beams.empty()) break;
  }
  for (const Beam& b : beams) finished.push_back(b);
  if (finished.empty()) return {};
  std::stable_sort(finished.begin(), finished.end(),
                   [](const Beam& a, const Beam& b) {
                     return a.score() > b.score();
                   });
  return finished.front().tokens;
}

void TinyMllm::save(const std::string& path) const {
  nlohmann::ordered_json header;
  header["schema_version"] = 1;
  header["config"] = {
      {"d_model", cfg_.d_model},
      {"n_layers", cfg_.n_layers},
      {"n_heads", cfg_.n_heads},
      {"d_ff", cfg_.d_ff},
      {"vocab_size", cfg_.vocab_size},
      {"n_visual_tokens", cfg_.n_visual_tokens},
      {"feature_dim", cfg_.feature_dim},
      {"d_enc", cfg_.d_enc},
      {"connector_layers", cfg_.connector_layers},
      {"patch_projection", cfg_.patch_projection},
      {"max_seq_len", cfg_.max_seq_len},
      {"seed", cfg_.seed},
  };
  header["pretrained"] = pretrained_;
  nlohmann::ordered_json plist = nlohmann::ordered_json::array();
  for (int i = 0; i < n_params(); ++i) {
    plist.push_back({{"name", infos_[i].name},
                     {"group", static_cast<int>(infos_[i].group)},
                     {"shape", params_[i].shape}});
  }
  header["params"] = std::move(plist);
  std::string head = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) raise(Err::IoError, "cannot write " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
  uint64_t hlen = head.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (const Tensor& t : params_)
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  if (!out) raise(Err::IoError, "short write to " + path);
}

TinyMllm TinyMllm::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(Err::IoError, "cannot open " + path);
  char magic[sizeof(kCheckpointMagic) - 1];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    raise(Err::MalformedLine, "not a checkpoint file: " + path);
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string head(hlen, '\0');
  in.read(head.data(), static_cast<std::streamsize>(hlen));
  if (!in) raise(Err::MalformedLine, "truncated checkpoint header");
  nlohmann::json header = nlohmann::json::parse(head);

  MllmConfig cfg;
  const auto& jc = header.at("config");
  cfg.d_model = jc.at("d_model");
  cfg.n_layers = jc.at("n_layers");
  cfg.n_heads = jc.at("n_heads");
  cfg.d_ff = jc.at("d_ff");
  cfg.vocab_size = jc.at("vocab_size");
  cfg.n_visual_tokens = jc.at("n_visual_tokens");
  cfg.feature_dim = jc.at("feature_dim");
  cfg.d_enc = jc.at("d_enc");
  cfg.connector_layers = jc.at("connector_layers");
  cfg.patch_projection = jc.value("patch_projection", true);
  cfg.max_seq_len = jc.at("max_seq_len");
  cfg.seed = jc.at("seed");

  TinyMllm model(cfg);
  model.pretrained_ = header.value("pretrained", false);
  const auto& plist = header.at("params");
  if (plist.size() != model.params_.size())
    raise(Err::MalformedLine, "checkpoint parameter list mismatch");
  for (int i = 0; i < model.n_params(); ++i) {
    if (plist[i].at("name") != model.infos_[i].name)
      raise(Err::MalformedLine, "checkpoint parameter order mismatch");
    Tensor& t = model.params_[i];
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  if (!in) raise(Err::MalformedLine, "truncated checkpoint payload");
  return model;
}

uint64_t TinyMllm::params_fingerprint() const {
  uint64_t h = 1469598103934665603ull;
  for (const Tensor& t : params_)
    h = fnv1a64(t.data.data(), t.data.size() * sizeof(double), h);
  return h;
}

CeInputs ce_inputs(const SerializedSample& s, const LossMask& mask) {
  const size_t L = s.ids.size();
  CeInputs out;
  out.targets.resize(L, 0);
  out.mask.resize(L, 0);
  for (size_t t = 0; t + 1 < L; ++t) {
    out.targets[t] = s.ids[t + 1];
    out.mask[t] = mask.supervised[t];
  }
  return out;
}

}  // namespace l2t
