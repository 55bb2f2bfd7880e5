#include "l2t/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

namespace l2t {

namespace {

const char* kSpecialSigils[Vocab::kNumSpecials] = {"<bos>", "<eos>", "<pad>",
                                                   "<image>", "<unk>"};

bool is_special_sigil(const std::string& tok) {
  for (const char* s : kSpecialSigils)
    if (tok == s) return true;
  return false;
}

}  // namespace

int Vocab::id_of(const std::string& tok) const {
  auto it = token_to_id.find(tok);
  return it == token_to_id.end() ? kUnk : it->second;
}

const std::string& Vocab::token_of(int id) const {
  if (id < 0 || id >= size())
    raise(Err::InvalidId, "token id " + std::to_string(id));
  return id_to_token[id];
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char ch : text) {
    if (std::isalnum(ch)) {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    } else {
      if (!cur.empty()) {
        out.push_back(cur);
        cur.clear();
      }
      if (!std::isspace(ch)) out.push_back(std::string(1, static_cast<char>(ch)));
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::string normalize_text(const std::string& text) {
  std::string out;
  for (const std::string& w : split_words(text)) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

Vocab build_vocab(std::span<const std::string> corpus_lines, int max_size) {
  if (max_size < Vocab::kNumSpecials + 1)
    raise(Err::InvalidArgument, "max_size must be at least 6");
  std::map<std::string, int64_t> counts;
  for (const std::string& line : corpus_lines) {
    for (const std::string& tok : split_words(line)) {
      if (is_special_sigil(tok)) continue;  // reserved forms never enter
      ++counts[tok];
    }
  }
  if (counts.empty()) raise(Err::EmptyCorpus, "no tokens in corpus");

  std::vector<std::pair<std::string, int64_t>> ranked(counts.begin(),
                                                      counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocab v;
  for (const char* s : kSpecialSigils) v.id_to_token.push_back(s);
  size_t keep = static_cast<size_t>(max_size - Vocab::kNumSpecials);
  for (size_t i = 0; i < ranked.size() && i < keep; ++i)
    v.id_to_token.push_back(ranked[i].first);
  for (int i = 0; i < v.size(); ++i) v.token_to_id[v.id_to_token[i]] = i;
  return v;
}

std::vector<int> encode(const Vocab& v, const std::string& text) {
  std::vector<int> out;
  for (const std::string& tok : split_words(text)) out.push_back(v.id_of(tok));
  return out;
}

std::string decode(const Vocab& v, std::span<const int> ids) {
  std::string out;
  for (int id : ids) {
    if (!out.empty()) out.push_back(' ');
    out += v.token_of(id);
  }
  return out;
}

void save_vocab(const Vocab& v, const std::string& path) {
  std::ostringstream ss;
  for (const std::string& tok : v.id_to_token) ss << tok << "\n";
  write_text_file(path, ss.str());
}

Vocab load_vocab(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(Err::IoError, "cannot open " + path);
  Vocab v;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    v.id_to_token.push_back(line);
  }
  if (v.size() < Vocab::kNumSpecials)
    raise(Err::MalformedLine, "vocab file too short: " + path);
  for (int i = 0; i < Vocab::kNumSpecials; ++i)
    if (v.id_to_token[i] != kSpecialSigils[i])
      raise(Err::MalformedLine, "vocab specials out of order in " + path);
  for (int i = 0; i < v.size(); ++i) v.token_to_id[v.id_to_token[i]] = i;
  return v;
}

}  // namespace l2t
