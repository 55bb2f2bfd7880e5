#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "l2t/dataset.hpp"

namespace l2t {

// Grid-world images: G x G cells, each empty or (object, color, size).
// The feature vector is a per-cell one-hot stack
// [object | color | size(2) | occupied], so the grid reconstructs exactly.
struct SynthWorldConfig {
  int grid = 3;
  std::vector<std::string> objects;
  std::vector<std::string> colors;
  double cell_empty_prob = 0.5;
  double unanswerable_prob = 0.05;  // qa questions about absent objects

  static SynthWorldConfig standard();

  int cell_feature_dim() const {
    return static_cast<int>(objects.size() + colors.size()) + 3;
  }
  int feature_dim() const { return grid * grid * cell_feature_dim(); }
};

struct GridCell {
  int object = -1;
  int color = -1;
  int size = -1;  // 0 small, 1 big
  bool empty() const { return object < 0; }
};

struct SynthImage {
  int grid = 3;
  std::vector<GridCell> cells;  // row-major, grid*grid entries

  bool any_occupied() const;
};

std::vector<double> encode_feature(const SynthImage& img,
                                   const SynthWorldConfig& cfg);
SynthImage decode_feature(std::span<const double> feature,
                          const SynthWorldConfig& cfg);

// A parsed question against one image.
struct Query {
  TaskKind kind = TaskKind::Qa;
  int object = -1;              // qa / presence / choice
  int row = -1, col = -1;       // referring
  std::vector<int> options;     // choice: color index per letter
};

// Exact grid lookup; color questions about absent objects answer
// "unanswerable", presence questions answer "yes"/"no".
std::string oracle_answer(const SynthImage& img, const Query& q,
                          const SynthWorldConfig& cfg);

struct TaskMix {
  double qa = 0.55;
  double presence = 0.15;
  double choice = 0.10;
  double referring = 0.10;
  double caption = 0.10;

  double total() const { return qa + presence + choice + referring + caption; }
};

struct ShortcutConfig {
  enum class Channel { Phrasing, AnswerPrior };
  double leak_prob = 0.0;
  Channel channel = Channel::Phrasing;
};

// Question phrasings per closed-answer kind; phrasing index k maps onto
// answer class k when the leak fires.
const std::vector<std::string>& qa_phrasings();        // "{}" = object slot
const std::vector<std::string>& presence_phrasings();
const std::vector<std::string>& choice_phrasings();
const std::vector<std::string>& caption_prompts();     // pretrain prompt list

// Task-template sentences appended to generated instructions.
std::string task_template_sentence(TaskKind kind);

struct GeneratedSplit {
  std::vector<DatasetRecord> train;
  std::vector<DatasetRecord> test;
};

// Reproducible given (cfg, n, mix, shortcut, seed): record i derives its own
// rng from mix_seed(seed, i). split_frac of the records become train.
GeneratedSplit gen_dataset(const SynthWorldConfig& cfg, int n,
                           const TaskMix& mix, const ShortcutConfig& shortcut,
                           uint64_t seed, double split_frac);

// Caption pairs with instructions drawn from the fixed prompt list.
std::vector<DatasetRecord> gen_pretrain_pairs(const SynthWorldConfig& cfg,
                                              int n, uint64_t seed);

// Filler records with exact instruction/response content lengths, for
// throughput sweeps over length ratios.
std::vector<DatasetRecord> gen_ratio_records(const SynthWorldConfig& cfg,
                                             int n, int len_instr,
                                             int len_resp, uint64_t seed);

}  // namespace l2t
