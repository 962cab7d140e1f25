#include "doctest.h"

#include "rm/babi.hpp"
#include "rm/tensor.hpp"

#include <fstream>
#include <sstream>
#include <string>

using namespace rm;

namespace {

const std::string kSample = std::string(RM_TEST_DATA_DIR) + "/babi_sample.txt";

std::size_t tab_lines(const std::string& path) {
  std::ifstream in(path);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += line.find('\t') != std::string::npos;
  return n;
}

std::vector<BabiStory> parse_text(const std::string& text) {
  std::istringstream in(text);
  return parse_babi(in, "inline");
}

}  // namespace

TEST_CASE("tokenize_babi: lowercase words without punctuation") {
  CHECK(tokenize_babi("Where is Mary? ") == Tokens{"where", "is", "mary"});
  CHECK(tokenize_babi("John went to the hallway.") == Tokens{"john", "went", "to", "the", "hallway"});
  CHECK(tokenize_babi("  ").empty());
}

TEST_CASE("parse_babi: sample file has one record per question line") {
  const auto stories = parse_babi_file(kSample);
  std::size_t questions = 0;
  for (const auto& s : stories) questions += s.questions.size();
  CHECK(stories.size() == 6);
  CHECK(questions == 19);
  CHECK(questions == tab_lines(kSample));
  CHECK(babi_records(stories).size() == questions);
  CHECK(babi_vocabulary(stories).size() == 78);

  const auto& q = stories[0].questions[0];
  CHECK(q.question == Tokens{"where", "is", "mary"});
  CHECK(q.answer == "bathroom");
  CHECK(q.support == std::vector<int>{1});
  CHECK(q.context == 2);
}

TEST_CASE("parse_babi: serializing and parsing again keeps every token") {
  const auto stories = parse_babi_file(kSample);
  const auto again = parse_text(serialize_babi(stories));
  REQUIRE(again.size() == stories.size());
  for (std::size_t i = 0; i < stories.size(); ++i) {
    CHECK(story_token_counts(again[i]) == story_token_counts(stories[i]));
    CHECK(again[i].questions.size() == stories[i].questions.size());
  }
  CHECK(serialize_babi(again) == serialize_babi(stories));
}

TEST_CASE("babi_records: questions see only earlier statements, long ones are split") {
  const auto stories = parse_text(
      "1 a b c d e f g.\n"
      "2 h i.\n"
      "3 where q?\tx\t1\n"
      "4 j k.\n"
      "5 where r?\ty\t2 4\n");
  const auto records = babi_records(stories, 3);
  REQUIRE(records.size() == 2);
  CHECK(records[0].segments.size() == 4);  // 7 tokens in 3 segments plus one
  CHECK(records[0].segments[0] == Tokens{"a", "b", "c"});
  CHECK(records[0].segments[2] == Tokens{"g"});
  CHECK(records[0].support_segments == std::vector<std::size_t>{0, 1, 2});
  CHECK(records[1].segments.size() == 5);
  CHECK(records[1].support_segments == std::vector<std::size_t>{3, 4});
  CHECK_THROWS_AS(babi_records(stories, 0), ConfigError);
}

TEST_CASE("parse_babi: malformed input names the line") {
  auto fails_at = [](const std::string& text, const std::string& where) {
    try {
      parse_text(text);
    } catch (const DataError& e) {
      return std::string(e.what()).find(where) != std::string::npos;
    }
    return false;
  };
  CHECK(fails_at("1 ok.\nno number\n", "inline:2"));
  CHECK(fails_at("1 ok.\n3 skipped.\n", "inline:2"));
  CHECK(fails_at("1 ok.\n2 where?\tx\n", "inline:2"));
  CHECK(fails_at("1 ok.\n2 where?\tx\t7\n", "inline:2"));
  CHECK(fails_at("1 ok.\n2 where?\tx\tone\n", "inline:2"));
  CHECK(fails_at("2 orphan.\n", "inline:1"));
  CHECK_THROWS_AS(parse_babi_file("/nonexistent/qa1.txt"), DataError);
}

TEST_CASE("parse_babi: multi-word answers and CRLF line endings") {
  const auto stories = parse_text("1 go north.\r\n2 go west.\r\n3 How do you go?\tn,w\t1 2\r\n");
  REQUIRE(stories.size() == 1);
  CHECK(stories[0].questions[0].answer == "n,w");
  const auto counts = story_token_counts(stories[0]);
  CHECK(counts.at("n") == 1);
  CHECK(counts.at("w") == 1);
  CHECK(counts.at("go") == 3);
}
