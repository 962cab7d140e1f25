#pragma once

#include <cstddef>
#include <istream>
#include <map>
#include <string>
#include <vector>

namespace rm {

using Tokens = std::vector<std::string>;

/// Lowercases and drops punctuation; splits on whitespace.
Tokens tokenize_babi(const std::string& text);

struct BabiQuestion {
  Tokens question;
  std::string answer;        ///< as written, e.g. "bathroom" or "n,w"
  std::vector<int> support;  ///< line numbers of the supporting statements
  int line_number = 0;       ///< number printed at the start of the line
  std::size_t context = 0;   ///< statements seen before the question
};

struct BabiStatement {
  Tokens tokens;
  int line_number = 0;
};

struct BabiStory {
  std::vector<BabiStatement> statements;
  std::vector<BabiQuestion> questions;
};

/// One question with the segments it may read. Statements longer than
/// `max_segment` tokens are split over consecutive segments.
struct BabiRecord {
  std::size_t story = 0;
  std::vector<Tokens> segments;
  Tokens question;
  std::string answer;
  std::vector<std::size_t> support_segments;  ///< indices into `segments`
};

/// Parses bAbI text: numbered lines, questions carry a tab-separated answer
/// and supporting line ids, and a number of 1 starts a new story. Throws
/// DataError naming the line for anything malformed.
std::vector<BabiStory> parse_babi(std::istream& in, const std::string& source = "<input>");
std::vector<BabiStory> parse_babi_file(const std::string& path);

std::vector<BabiRecord> babi_records(const std::vector<BabiStory>& stories, std::size_t max_segment = 15);

/// Word ids in sorted order over statements, questions and answers.
std::map<std::string, int> babi_vocabulary(const std::vector<BabiStory>& stories);

/// Writes stories back in bAbI layout (tokens joined by spaces, original
/// numbering). Parsing the result yields the same stories.
std::string serialize_babi(const std::vector<BabiStory>& stories);

/// Multiset of every token in a story (statements, questions, answers split on commas).
std::map<std::string, int> story_token_counts(const BabiStory& story);

}  // namespace rm
