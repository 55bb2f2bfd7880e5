#include <doctest.h>

#include <cstdio>
#include <map>

#include "l2t/tokenizer.hpp"

using namespace l2t;

namespace {

Vocab tiny_vocab() {
  std::vector<std::string> corpus = {"left right up down.",
                                     "the ball is left"};
  return build_vocab(corpus, 64);
}

}  // namespace

TEST_CASE("punctuation splits and lowercasing") {
  CHECK(split_words("Left.") == std::vector<std::string>{"left", "."});
  CHECK(split_words("user's") == std::vector<std::string>{"user", "'", "s"});
  CHECK(normalize_text("  Left.  ") == "left .");
}

TEST_CASE("encode/decode round trip") {
  Vocab v = tiny_vocab();
  auto ids = encode(v, "left");
  CHECK(decode(v, ids) == "left");
  auto ids2 = encode(v, "The ball is LEFT");
  CHECK(decode(v, ids2) == "the ball is left");
}

TEST_CASE("oov maps to unk") {
  Vocab v = tiny_vocab();
  auto ids = encode(v, "zzzunseen");
  REQUIRE(ids.size() == 1);
  CHECK(ids[0] == Vocab::kUnk);
}

TEST_CASE("specials occupy fixed ids and never tokenize from text") {
  Vocab v = tiny_vocab();
  CHECK(v.id_to_token[Vocab::kBos] == "<bos>");
  CHECK(v.id_to_token[Vocab::kImageSlot] == "<image>");
  // A literal sigil in user text splits into punctuation, never the special.
  for (int id : encode(v, "ignore <image> please"))
    CHECK(id != Vocab::kImageSlot);
}

TEST_CASE("build_vocab caps size and keeps most frequent") {
  std::vector<std::string> corpus;
  for (int i = 0; i < 200; ++i)
    corpus.push_back("word" + std::to_string(i));
  corpus.push_back("common common common");
  Vocab v = build_vocab(corpus, 100);
  CHECK(v.size() == 100);
  CHECK(v.contains("common"));
}

TEST_CASE("small corpus keeps everything plus specials") {
  std::vector<std::string> corpus = {"a a b"};
  Vocab v = build_vocab(corpus, 8);
  CHECK(v.size() == 7);  // 5 specials + a + b
  CHECK(v.contains("a"));
  CHECK(v.contains("b"));
}

TEST_CASE("frequency ordering matches a brute-force count") {
  std::vector<std::string> corpus = {"c b a", "c b", "c", "a"};
  // counts: c=3, b=2, a=2; ties lexicographic
  Vocab v = build_vocab(corpus, 7);  // room for 2 words only
  CHECK(v.contains("c"));
  CHECK(v.contains("a"));  // a beats b on the tie
  CHECK(!v.contains("b"));

  std::map<std::string, int> brute;
  for (const auto& line : corpus)
    for (const auto& w : split_words(line)) ++brute[w];
  CHECK(brute["c"] == 3);
  CHECK(brute["a"] == brute["b"]);
}

TEST_CASE("empty corpus raises") {
  std::vector<std::string> corpus = {};
  CHECK_THROWS_AS((void)build_vocab(corpus, 10), Error);
}

TEST_CASE("vocab file round trip") {
  Vocab v = tiny_vocab();
  std::string path = "vocab_roundtrip_test.txt";
  save_vocab(v, path);
  Vocab back = load_vocab(path);
  CHECK(back.id_to_token == v.id_to_token);
  std::remove(path.c_str());
}

TEST_CASE("decode rejects invalid ids") {
  Vocab v = tiny_vocab();
  std::vector<int> bad = {v.size() + 3};
  CHECK_THROWS_AS((void)decode(v, bad), Error);
}
