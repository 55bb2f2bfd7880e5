#pragma once

#include <span>
#include <string>
#include <vector>

#include "l2t/common.hpp"

namespace l2t {

struct TemplateEntry {
  std::string text;                     // normalized full template
  std::vector<std::string> sentences;   // its sentence decomposition
  int64_t count = 0;                    // per-sample corpus frequency
};

// High-frequency boilerplate sentences mined from instruction corpora, plus
// the fixed conversation-structure strings. Matching is exact on normalized
// sentences; no entry is a substring of another.
struct TemplateSet {
  std::vector<TemplateEntry> task_templates;
  std::vector<std::string> system_templates;

  bool empty() const { return task_templates.empty(); }
  // Longest template whose sentence sequence matches at position i, or null.
  const TemplateEntry* match_at(std::span<const std::string> sentences,
                                size_t i) const;
  void add(std::string text, int64_t count);
  // Drops entries that are substrings of another entry, then orders longest
  // (in sentences) first so matching is maximal-munch.
  void finalize();
};

// Splits on . ? ! : keeping the terminator; collapses internal whitespace and
// drops empty fragments.
std::vector<std::string> split_sentences(const std::string& text);

// A sentence is a template iff it occurs in more than theta * |corpus|
// samples (each sample counts a sentence once).
TemplateSet mine_templates(std::span<const std::string> instructions,
                           double theta);

void save_templates(const TemplateSet& set, const std::string& path);
TemplateSet load_templates(const std::string& path);

}  // namespace l2t
