#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "l2t/autodiff.hpp"
#include "l2t/conversation.hpp"

namespace l2t {

struct MllmConfig {
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = 0;
  int n_visual_tokens = 9;
  int feature_dim = 369;
  int d_enc = 64;
  int connector_layers = 2;  // 1 = single linear, 2 = MLP with GELU
  // true: one shared random basis per grid-cell block (patch style);
  // false: one dense random mixture of the whole feature vector.
  bool patch_projection = true;
  int max_seq_len = 256;
  uint64_t seed = 0;

  void validate() const;
};

enum class ParamGroup : uint8_t { VisionEncoder, Connector, Decoder };

struct ParamInfo {
  std::string name;
  ParamGroup group;
};

struct GenerateConfig {
  enum class Strategy { Greedy, Beam };
  Strategy strategy = Strategy::Greedy;
  int beam_width = 5;
  int max_new_tokens = 512;
};

// Frozen random feature projection, trainable connector, embeddings and a
// causal decoder. The projection weights never train; freeze flags control
// connector/decoder trainability per stage.
class TinyMllm {
 public:
  explicit TinyMllm(MllmConfig cfg);

  const MllmConfig& config() const { return cfg_; }
  int n_params() const { return static_cast<int>(params_.size()); }
  const Tensor& param(int i) const { return params_[i]; }
  Tensor& mutable_param(int i) { return params_[i]; }
  const ParamInfo& info(int i) const { return infos_[i]; }
  bool trainable(int i) const;
  void set_trainable(ParamGroup g, bool on);
  size_t param_count(bool trainable_only = false) const;

  bool pretrained() const { return pretrained_; }
  void mark_pretrained() { pretrained_ = true; }

  // h(g(feature)): visual tokens [N x d_model], no graph involved.
  Tensor encode_image(std::span<const double> feature) const;

  struct Forward {
    Graph graph;
    NodeId logits = -1;              // [S x V], one row per sequence position
    std::vector<NodeId> attention;   // one attention node per layer
    std::vector<NodeId> param_leaf;  // leaf id per param index (-1 unused)
  };

  // Teacher-forced forward over serialized ids. Logits cover every position
  // (visual rows included) so the target right after the image block stays
  // supervisable and generation can continue an image-tailed prompt. An
  // empty feature span means text-only; ids must then contain no image-slot
  // tokens.
  Forward forward(std::span<const int> ids,
                  std::span<const double> feature = {}) const;

  // Continues from prompt_ids. Greedy breaks ties toward the lowest token
  // id; beam search is length-normalized. Stops at EOS or max_new_tokens.
  std::vector<int> generate(std::span<const int> prompt_ids,
                            std::span<const double> feature,
                            const GenerateConfig& gen) const;

  void save(const std::string& path) const;
  static TinyMllm load(const std::string& path);

  uint64_t params_fingerprint() const;

 private:
  TinyMllm() = default;
  void build_params();
  void init_projection(Tensor& t, std::mt19937_64& rng);
  int add_param(const std::string& name, ParamGroup group,
                std::vector<int> shape);
  int index_of(const std::string& name) const;

  MllmConfig cfg_;
  std::vector<Tensor> params_;
  std::vector<ParamInfo> infos_;
  bool connector_trainable_ = true;
  bool decoder_trainable_ = true;
  bool pretrained_ = false;
};

// Next-token targets and supervision flags aligned with the logits rows.
struct CeInputs {
  std::vector<int> targets;
  std::vector<uint8_t> mask;
};
CeInputs ce_inputs(const SerializedSample& s, const LossMask& mask);

}  // namespace l2t
