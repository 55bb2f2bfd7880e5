#include "l2t/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace l2t {

namespace {

std::string fill_object(const std::string& pattern, const std::string& word) {
  auto pos = pattern.find("{}");
  if (pos == std::string::npos) return pattern;
  std::string out = pattern;
  out.replace(pos, 2, word);
  return out;
}

const char* kSizeWords[2] = {"small", "big"};

std::string cell_phrase(const GridCell& cell, const SynthWorldConfig& cfg) {
  return std::string("a ") + kSizeWords[cell.size] + " " +
         cfg.colors[cell.color] + " " + cfg.objects[cell.object];
}

const std::vector<std::string>& region_formats() {
  static const std::vector<std::string> f = {
      "row {R} column {C}.",
      "the region at row {R} column {C}.",
      "cell row {R} column {C}.",
      "grid cell at row {R} column {C}.",
  };
  return f;
}

std::string fill_region(const std::string& pattern, int row, int col) {
  std::string out = pattern;
  auto rp = out.find("{R}");
  out.replace(rp, 3, std::to_string(row + 1));
  auto cp = out.find("{C}");
  out.replace(cp, 3, std::to_string(col + 1));
  return out;
}

}  // namespace

SynthWorldConfig SynthWorldConfig::standard() {
  SynthWorldConfig cfg;
  cfg.objects = {"ball", "box",  "cat",  "dog",  "tree",  "car",
                 "cup",  "hat",  "key",  "pen",  "book",  "bird",
                 "fish", "star", "ring", "shoe", "lamp",  "drum",
                 "bell", "kite", "coin", "fork", "sock",  "vase",
                 "rope", "cake", "leaf", "nail", "chair", "clock"};
  cfg.colors = {"red",    "blue",   "green", "yellow",
                "purple", "orange", "black", "white"};
  return cfg;
}

bool SynthImage::any_occupied() const {
  for (const GridCell& c : cells)
    if (!c.empty()) return true;
  return false;
}

std::vector<double> encode_feature(const SynthImage& img,
                                   const SynthWorldConfig& cfg) {
  const int fc = cfg.cell_feature_dim();
  const int n_obj = static_cast<int>(cfg.objects.size());
  const int n_col = static_cast<int>(cfg.colors.size());
  std::vector<double> feat(static_cast<size_t>(img.grid) * img.grid * fc, 0.0);
  for (size_t i = 0; i < img.cells.size(); ++i) {
    const GridCell& c = img.cells[i];
    if (c.empty()) continue;
    double* base = feat.data() + i * fc;
    base[c.object] = 1.0;
    base[n_obj + c.color] = 1.0;
    base[n_obj + n_col + c.size] = 1.0;
    base[n_obj + n_col + 2] = 1.0;  // occupied flag
  }
  return feat;
}

SynthImage decode_feature(std::span<const double> feature,
                          const SynthWorldConfig& cfg) {
  const int fc = cfg.cell_feature_dim();
  const int n_obj = static_cast<int>(cfg.objects.size());
  const int n_col = static_cast<int>(cfg.colors.size());
  if (feature.size() != static_cast<size_t>(cfg.feature_dim()))
    raise(Err::DimMismatch, "feature size does not match config");
  SynthImage img;
  img.grid = cfg.grid;
  img.cells.assign(static_cast<size_t>(cfg.grid) * cfg.grid, GridCell{});
  for (size_t i = 0; i < img.cells.size(); ++i) {
    const double* base = feature.data() + i * fc;
    if (base[n_obj + n_col + 2] == 0.0) continue;
    GridCell c;
    for (int o = 0; o < n_obj; ++o)
      if (base[o] == 1.0) c.object = o;
    for (int k = 0; k < n_col; ++k)
      if (base[n_obj + k] == 1.0) c.color = k;
    c.size = base[n_obj + n_col + 1] == 1.0 ? 1 : 0;
    img.cells[i] = c;
  }
  return img;
}

// Phrasing variants are telegraphic: the object comes first and the variant
// marker after it, so a left-to-right model can predict the marker from the
// image once the object is known, and the content stays short relative to
// the response.
const std::vector<std::string>& qa_phrasings() {
  static const std::vector<std::string> p = {
      "{} color?", "{} shade?", "{} hue?",   "{} tone?", "{} tint?",
      "{} colour?", "{} coloring?", "{} paint?", "{} look?",
  };
  return p;
}

const std::vector<std::string>& presence_phrasings() {
  static const std::vector<std::string> p = {
      "{} here, right?",
      "{} here, correct?",
  };
  return p;
}

const std::vector<std::string>& choice_phrasings() {
  static const std::vector<std::string> p = {
      "{} option?",
      "{} choice?",
      "{} pick?",
      "{} slot?",
  };
  return p;
}

const std::vector<std::string>& caption_prompts() {
  static const std::vector<std::string> p = {
      "Describe the image.",
      "What is in the image?",
      "Give a brief description of the image.",
      "List the objects in the image.",
  };
  return p;
}

std::string task_template_sentence(TaskKind kind) {
  switch (kind) {
    case TaskKind::Qa:
      return "Answer the question using a single word or phrase.";
    case TaskKind::Choice:
      return "Answer with the option's letter from the given choices "
             "directly.";
    case TaskKind::Presence:
      return "Please answer yes or no.";
    case TaskKind::Referring:
      return "Please provide a short description for this region:";
    case TaskKind::Caption:
      return "";  // caption prompts are themselves templates
  }
  return "";
}

std::string oracle_answer(const SynthImage& img, const Query& q,
                          const SynthWorldConfig& cfg) {
  auto first_cell_with = [&](int object) -> const GridCell* {
    for (const GridCell& c : img.cells)
      if (!c.empty() && c.object == object) return &c;
    return nullptr;
  };
  switch (q.kind) {
    case TaskKind::Qa: {
      const GridCell* c = first_cell_with(q.object);
      if (c == nullptr) return "unanswerable";
      return cfg.colors[c->color];
    }
    case TaskKind::Presence:
      return first_cell_with(q.object) != nullptr ? "yes" : "no";
    case TaskKind::Choice: {
      const GridCell* c = first_cell_with(q.object);
      if (c == nullptr) return "unanswerable";
      for (size_t i = 0; i < q.options.size(); ++i)
        if (q.options[i] == c->color)
          return std::string(1, static_cast<char>('A' + i));
      return "unanswerable";
    }
    case TaskKind::Referring: {
      if (q.row < 0 || q.row >= img.grid || q.col < 0 || q.col >= img.grid)
        raise(Err::InvalidArgument, "region outside the grid");
      const GridCell& c = img.cells[static_cast<size_t>(q.row) * img.grid +
                                    q.col];
      if (c.empty()) return "unanswerable";
      return cell_phrase(c, cfg);
    }
    case TaskKind::Caption: {
      std::string caption;
      for (const GridCell& c : img.cells) {
        if (c.empty()) continue;
        if (!caption.empty()) caption += ", ";
        caption += cell_phrase(c, cfg);
      }
      caption += ".";
      return caption;
    }
  }
  return "unanswerable";
}

namespace {

using Rng = std::mt19937_64;

int rand_int(Rng& rng, int lo, int hi) {  // inclusive bounds
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

double rand_real(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

SynthImage random_grid(Rng& rng, const SynthWorldConfig& cfg) {
  SynthImage img;
  img.grid = cfg.grid;
  img.cells.assign(static_cast<size_t>(cfg.grid) * cfg.grid, GridCell{});
  for (GridCell& c : img.cells) {
    if (rand_real(rng) < cfg.cell_empty_prob) continue;
    c.object = rand_int(rng, 0, static_cast<int>(cfg.objects.size()) - 1);
    c.color = rand_int(rng, 0, static_cast<int>(cfg.colors.size()) - 1);
    c.size = rand_int(rng, 0, 1);
  }
  if (!img.any_occupied()) {
    GridCell& c = img.cells[rand_int(rng, 0, cfg.grid * cfg.grid - 1)];
    c.object = rand_int(rng, 0, static_cast<int>(cfg.objects.size()) - 1);
    c.color = rand_int(rng, 0, static_cast<int>(cfg.colors.size()) - 1);
    c.size = rand_int(rng, 0, 1);
  }
  return img;
}

bool object_present(const SynthImage& img, int object) {
  for (const GridCell& c : img.cells)
    if (!c.empty() && c.object == object) return true;
  return false;
}

int pick_absent_object(Rng& rng, const SynthImage& img,
                       const SynthWorldConfig& cfg) {
  std::vector<int> absent;
  for (int o = 0; o < static_cast<int>(cfg.objects.size()); ++o)
    if (!object_present(img, o)) absent.push_back(o);
  return absent[rand_int(rng, 0, static_cast<int>(absent.size()) - 1)];
}

// Overwrites one random cell so that `object` appears exactly once with the
// given color; other cells never carry it.
void plant_object(Rng& rng, SynthImage& img, int object, int color) {
  for (GridCell& c : img.cells)
    if (!c.empty() && c.object == object) c = GridCell{};
  int idx = rand_int(rng, 0, static_cast<int>(img.cells.size()) - 1);
  GridCell& c = img.cells[idx];
  c.object = object;
  c.color = color;
  c.size = rand_int(rng, 0, 1);
}

std::vector<std::string> gt_from_grid(const SynthImage& img,
                                      const SynthWorldConfig& cfg) {
  std::vector<std::string> gt;
  for (const GridCell& c : img.cells) {
    if (c.empty()) continue;
    const std::string& w = cfg.objects[c.object];
    if (std::find(gt.begin(), gt.end(), w) == gt.end()) gt.push_back(w);
  }
  return gt;
}

TaskKind draw_kind(Rng& rng, const TaskMix& mix) {
  double total = mix.total();
  double x = rand_real(rng) * total;
  if ((x -= mix.qa) < 0) return TaskKind::Qa;
  if ((x -= mix.presence) < 0) return TaskKind::Presence;
  if ((x -= mix.choice) < 0) return TaskKind::Choice;
  if ((x -= mix.referring) < 0) return TaskKind::Referring;
  return TaskKind::Caption;
}

DatasetRecord gen_record(const SynthWorldConfig& cfg, const TaskMix& mix,
                         const ShortcutConfig& shortcut, uint64_t seed,
                         int index) {
  Rng rng(mix_seed(seed, static_cast<uint64_t>(index)));
  DatasetRecord rec;
  TaskKind kind = draw_kind(rng, mix);
  const int n_colors = static_cast<int>(cfg.colors.size());
  const bool phrasing_leak =
      shortcut.channel == ShortcutConfig::Channel::Phrasing &&
      rand_real(rng) < shortcut.leak_prob;
  const bool prior_leak =
      shortcut.channel == ShortcutConfig::Channel::AnswerPrior &&
      rand_real(rng) < shortcut.leak_prob;

  SynthImage img = random_grid(rng, cfg);
  Query q;
  q.kind = kind;
  std::string instruction;
  std::string answer;
  int phrasing = -1;

  switch (kind) {
    case TaskKind::Qa: {
      const auto& phr = qa_phrasings();
      const bool has_unans = cfg.unanswerable_prob > 0.0;
      const int n_classes = n_colors + (has_unans ? 1 : 0);
      int cls = (has_unans && rand_real(rng) < cfg.unanswerable_prob)
                    ? n_colors
                    : rand_int(rng, 0, n_colors - 1);
      if (prior_leak) cls = 0;
      if (cls < n_colors) {
        q.object = pick_absent_object(rng, img, cfg);
        plant_object(rng, img, q.object, cls);
        answer = cfg.colors[cls];
      } else {
        q.object = pick_absent_object(rng, img, cfg);
        answer = "unanswerable";
      }
      phrasing = phrasing_leak ? cls
                               : rand_int(rng, 0, n_classes - 1);
      // Context sentence grounding one distractor cell. It never describes
      // the asked object, so it cannot answer the question; it makes the
      // instruction image-verifiable the way GPT-style conversation data is.
      std::string context;
      std::vector<int> others;
      for (int ci = 0; ci < static_cast<int>(img.cells.size()); ++ci)
        if (!img.cells[ci].empty() && img.cells[ci].object != q.object)
          others.push_back(ci);
      if (!others.empty()) {
        int ci = others[rand_int(rng, 0, static_cast<int>(others.size()) - 1)];
        context = cell_phrase(img.cells[ci], cfg) + " at row " +
                  std::to_string(ci / img.grid + 1) + " column " +
                  std::to_string(ci % img.grid + 1) + ". ";
      }
      instruction = context +
                    fill_object(phr[phrasing], cfg.objects[q.object]) + " " +
                    task_template_sentence(kind);
      break;
    }
    case TaskKind::Presence: {
      const auto& phr = presence_phrasings();
      int cls = prior_leak ? 0 : rand_int(rng, 0, 1);  // 0 = yes, 1 = no
      if (cls == 0) {
        q.object = pick_absent_object(rng, img, cfg);
        plant_object(rng, img, q.object, rand_int(rng, 0, n_colors - 1));
        answer = "yes";
      } else {
        q.object = pick_absent_object(rng, img, cfg);
        answer = "no";
      }
      phrasing = phrasing_leak ? cls : rand_int(rng, 0, 1);
      instruction = fill_object(phr[phrasing], cfg.objects[q.object]) + " " +
                    task_template_sentence(kind);
      break;
    }
    case TaskKind::Choice: {
      const auto& phr = choice_phrasings();
      int correct_color = rand_int(rng, 0, n_colors - 1);
      q.object = pick_absent_object(rng, img, cfg);
      plant_object(rng, img, q.object, correct_color);
      int letter = prior_leak ? 0 : rand_int(rng, 0, 3);
      std::vector<int> others;
      for (int c = 0; c < n_colors; ++c)
        if (c != correct_color) others.push_back(c);
      std::shuffle(others.begin(), others.end(), rng);
      q.options.assign(4, -1);
      q.options[letter] = correct_color;
      int oi = 0;
      for (int slot = 0; slot < 4; ++slot)
        if (q.options[slot] < 0) q.options[slot] = others[oi++];
      answer = std::string(1, static_cast<char>('A' + letter));
      phrasing = phrasing_leak ? letter : rand_int(rng, 0, 3);
      std::string options_text;
      for (int slot = 0; slot < 4; ++slot) {
        if (slot) options_text += " ";
        options_text += std::string(1, static_cast<char>('A' + slot)) + ") " +
                        cfg.colors[q.options[slot]];
      }
      instruction = fill_object(phr[phrasing], cfg.objects[q.object]) + " " +
                    options_text + ". " + task_template_sentence(kind);
      break;
    }
    case TaskKind::Referring: {
      std::vector<int> occupied;
      for (int i = 0; i < static_cast<int>(img.cells.size()); ++i)
        if (!img.cells[i].empty()) occupied.push_back(i);
      int cell = occupied[rand_int(rng, 0, static_cast<int>(occupied.size()) - 1)];
      q.row = cell / img.grid;
      q.col = cell % img.grid;
      answer = oracle_answer(img, q, cfg);
      const auto& formats = region_formats();
      int fmt = rand_int(rng, 0, static_cast<int>(formats.size()) - 1);
      instruction = task_template_sentence(kind) + " " +
                    fill_region(formats[fmt], q.row, q.col);
      break;
    }
    case TaskKind::Caption: {
      const auto& prompts = caption_prompts();
      instruction = prompts[rand_int(rng, 0, static_cast<int>(prompts.size()) - 1)];
      answer = oracle_answer(img, q, cfg);
      break;
    }
  }

  char idbuf[32];
  std::snprintf(idbuf, sizeof(idbuf), "img_%08d", index);
  rec.sample.image_id = idbuf;
  rec.sample.kind = kind;
  rec.sample.turns.push_back({instruction, answer});
  rec.feature = encode_feature(img, cfg);
  rec.gt_objects = gt_from_grid(img, cfg);
  rec.phrasing_id = phrasing;
  rec.answer = answer;
  return rec;
}

}  // namespace

GeneratedSplit gen_dataset(const SynthWorldConfig& cfg, int n,
                           const TaskMix& mix, const ShortcutConfig& shortcut,
                           uint64_t seed, double split_frac) {
  if (n <= 0) raise(Err::InvalidArgument, "n must be positive");
  if (std::abs(mix.total() - 1.0) > 1e-9)
    raise(Err::InvalidArgument, "task mix weights must sum to 1");
  if (split_frac <= 0.0 || split_frac > 1.0)
    raise(Err::InvalidArgument, "split_frac must be in (0, 1]");
  GeneratedSplit out;
  int n_train = static_cast<int>(std::lround(split_frac * n));
  n_train = std::clamp(n_train, 0, n);
  for (int i = 0; i < n; ++i) {
    DatasetRecord rec = gen_record(cfg, mix, shortcut, seed, i);
    if (i < n_train)
      out.train.push_back(std::move(rec));
    else
      out.test.push_back(std::move(rec));
  }
  return out;
}

std::vector<DatasetRecord> gen_pretrain_pairs(const SynthWorldConfig& cfg,
                                              int n, uint64_t seed) {
  if (n <= 0) raise(Err::InvalidArgument, "n must be positive");
  std::vector<DatasetRecord> out;
  out.reserve(n);
  const auto& prompts = caption_prompts();
  for (int i = 0; i < n; ++i) {
    Rng rng(mix_seed(seed ^ 0x70726574ull, static_cast<uint64_t>(i)));
    SynthImage img = random_grid(rng, cfg);
    Query q;
    q.kind = TaskKind::Caption;
    DatasetRecord rec;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "pre_%08d", i);
    rec.sample.image_id = idbuf;
    rec.sample.kind = TaskKind::Caption;
    std::string caption = oracle_answer(img, q, cfg);
    rec.sample.turns.push_back(
        {prompts[rand_int(rng, 0, static_cast<int>(prompts.size()) - 1)],
         caption});
    rec.feature = encode_feature(img, cfg);
    rec.gt_objects = gt_from_grid(img, cfg);
    rec.answer = caption;
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<DatasetRecord> gen_ratio_records(const SynthWorldConfig& cfg,
                                             int n, int len_instr,
                                             int len_resp, uint64_t seed) {
  if (len_instr < 1 || len_resp < 1)
    raise(Err::InvalidArgument, "lengths must be positive");
  std::vector<std::string> pool = cfg.objects;
  pool.insert(pool.end(), cfg.colors.begin(), cfg.colors.end());
  std::vector<DatasetRecord> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    Rng rng(mix_seed(seed ^ 0x726174696full, static_cast<uint64_t>(i)));
    SynthImage img = random_grid(rng, cfg);
    auto words = [&](int count) {
      std::string text;
      for (int w = 0; w < count; ++w) {
        if (w) text += " ";
        text += pool[rand_int(rng, 0, static_cast<int>(pool.size()) - 1)];
      }
      return text;
    };
    DatasetRecord rec;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "ratio_%08d", i);
    rec.sample.image_id = idbuf;
    rec.sample.kind = TaskKind::Qa;
    rec.sample.turns.push_back({words(len_instr), words(len_resp)});
    rec.feature = encode_feature(img, cfg);
    rec.gt_objects = gt_from_grid(img, cfg);
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace l2t
