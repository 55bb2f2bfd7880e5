#include "l2t/templates.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace l2t {

namespace {

std::string collapse_ws(const std::string& s) {
  std::string out;
  bool pending_space = false;
  for (unsigned char ch : s) {
    if (std::isspace(ch)) {
      if (!out.empty()) pending_space = true;
    } else {
      if (pending_space) {
        out.push_back(' ');
        pending_space = false;
      }
      out.push_back(static_cast<char>(ch));
    }
  }
  return out;
}

bool is_terminator(char c) {
  return c == '.' || c == '?' || c == '!' || c == ':';
}

}  // namespace

std::vector<std::string> split_sentences(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    cur.push_back(ch);
    if (is_terminator(ch)) {
      std::string s = collapse_ws(cur);
      // Drop the space a collapse may leave before the terminator.
      if (s.size() >= 2 && s[s.size() - 2] == ' ') s.erase(s.size() - 2, 1);
      bool bare_terminator = s.size() == 1 && is_terminator(s[0]);
      if (!s.empty() && !bare_terminator) out.push_back(s);
      cur.clear();
    }
  }
  std::string tail = collapse_ws(cur);
  if (!tail.empty()) out.push_back(tail);
  return out;
}

const TemplateEntry* TemplateSet::match_at(
    std::span<const std::string> sentences, size_t i) const {
  for (const TemplateEntry& e : task_templates) {
    if (i + e.sentences.size() > sentences.size()) continue;
    bool ok = true;
    for (size_t k = 0; k < e.sentences.size(); ++k) {
      if (sentences[i + k] != e.sentences[k]) {
        ok = false;
        break;
      }
    }
    if (ok) return &e;
  }
  return nullptr;
}

void TemplateSet::add(std::string text, int64_t count) {
  TemplateEntry e;
  e.text = collapse_ws(text);
  e.sentences = split_sentences(e.text);
  e.count = count;
  for (auto& existing : task_templates) {
    if (existing.text == e.text) {
      existing.count = std::max(existing.count, count);
      return;
    }
  }
  task_templates.push_back(std::move(e));
}

void TemplateSet::finalize() {
  // No template may be a substring of another; the longer one wins.
  std::vector<TemplateEntry> kept;
  for (const auto& e : task_templates) {
    bool shadowed = false;
    for (const auto& other : task_templates) {
      if (&other == &e) continue;
      if (other.text.size() > e.text.size() &&
          other.text.find(e.text) != std::string::npos) {
        shadowed = true;
        break;
      }
    }
    if (!shadowed) kept.push_back(e);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.sentences.size() != b.sentences.size())
      return a.sentences.size() > b.sentences.size();
    return a.text < b.text;
  });
  task_templates = std::move(kept);
}

TemplateSet mine_templates(std::span<const std::string> instructions,
                           double theta) {
  if (instructions.empty()) raise(Err::EmptyCorpus, "empty instruction corpus");
  if (theta <= 0.0 || theta >= 1.0)
    raise(Err::InvalidArgument, "theta must be in (0, 1)");
  std::map<std::string, int64_t> counts;
  for (const std::string& instr : instructions) {
    std::set<std::string> seen;  // once per sample
    for (const std::string& s : split_sentences(instr)) seen.insert(s);
    for (const std::string& s : seen) ++counts[s];
  }
  const int64_t n = static_cast<int64_t>(instructions.size());
  const int64_t threshold = static_cast<int64_t>(theta * n) + 1;
  TemplateSet set;
  for (const auto& [sentence, count] : counts) {
    if (count >= threshold) set.add(sentence, count);
  }
  set.finalize();
  return set;
}

void save_templates(const TemplateSet& set, const std::string& path) {
  std::ostringstream ss;
  for (const TemplateEntry& e : set.task_templates) {
    ss << "# count=" << e.count << "\n" << e.text << "\n";
  }
  write_text_file(path, ss.str());
}

TemplateSet load_templates(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(Err::IoError, "cannot open " + path);
  TemplateSet set;
  std::string line;
  int64_t pending_count = 0;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      auto pos = line.find("count=");
      pending_count = 0;
      if (pos != std::string::npos) {
        try {
          pending_count = std::stoll(line.substr(pos + 6));
        } catch (const std::exception&) {
          raise(Err::MalformedLine,
                path + ":" + std::to_string(lineno) + ": bad count");
        }
      }
      continue;
    }
    set.add(line, pending_count);
    pending_count = 0;
  }
  set.finalize();
  return set;
}

}  // namespace l2t
