#include "rm/babi.hpp"

#include "rm/tensor.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

namespace rm {

Tokens tokenize_babi(const std::string& text) {
  Tokens out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else if (!std::ispunct(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

std::vector<BabiStory> parse_babi(std::istream& in, const std::string& source) {
  std::vector<BabiStory> stories;
  std::string line;
  std::size_t lineno = 0;
  int last = 0;
  auto fail = [&](const std::string& what) { throw DataError(source + ":" + std::to_string(lineno) + ": " + what); };

  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;

    std::size_t pos = 0;
    while (pos < line.size() && std::isdigit(static_cast<unsigned char>(line[pos]))) ++pos;
    if (pos == 0 || pos >= line.size() || line[pos] != ' ') fail("expected a line number followed by a space");
    int number = 0;
    try {
      number = std::stoi(line.substr(0, pos));
    } catch (const std::exception&) {
      fail("line number out of range");
    }
    if (number == 1) {
      stories.emplace_back();
    } else if (stories.empty() || number != last + 1) {
      fail("line number " + std::to_string(number) + " does not follow " + std::to_string(last));
    }
    last = number;
    auto& story = stories.back();

    std::vector<std::string> fields;
    std::stringstream rest(line.substr(pos + 1));
    for (std::string f; std::getline(rest, f, '\t');) fields.push_back(f);
    if (fields.empty()) fail("empty line body");

    if (fields.size() == 1) {
      BabiStatement st{tokenize_babi(fields[0]), number};
      if (st.tokens.empty()) fail("statement without words");
      story.statements.push_back(std::move(st));
      continue;
    }
    if (fields.size() != 3) fail("question lines need a question, an answer and supporting ids separated by tabs");
    BabiQuestion q;
    q.question = tokenize_babi(fields[0]);
    q.answer = lower(trim(fields[1]));
    q.line_number = number;
    q.context = story.statements.size();
    if (q.question.empty()) fail("question without words");
    if (q.answer.empty()) fail("question without an answer");
    std::stringstream ids(fields[2]);
    for (std::string id; ids >> id;) {
      int s = 0;
      try {
        std::size_t used = 0;
        s = std::stoi(id, &used);
        if (used != id.size()) throw std::invalid_argument(id);
      } catch (const std::exception&) {
        fail("supporting id '" + id + "' is not a number");
      }
      const bool known = std::any_of(story.statements.begin(), story.statements.end(),
                                     [s](const BabiStatement& st) { return st.line_number == s; });
      if (!known) fail("supporting id " + std::to_string(s) + " is not an earlier statement");
      q.support.push_back(s);
    }
    story.questions.push_back(std::move(q));
  }
  return stories;
}

std::vector<BabiStory> parse_babi_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return parse_babi(in, path);
}

std::vector<BabiRecord> babi_records(const std::vector<BabiStory>& stories, std::size_t max_segment) {
  if (max_segment == 0) throw ConfigError("babi: segment length must be positive");
  std::vector<BabiRecord> out;
  for (std::size_t s = 0; s < stories.size(); ++s) {
    const auto& story = stories[s];
    std::vector<Tokens> segments;
    std::vector<std::pair<std::size_t, std::size_t>> span;  // per statement: first segment, count
    for (const auto& st : story.statements) {
      const std::size_t first = segments.size();
      for (std::size_t b = 0; b < st.tokens.size(); b += max_segment) {
        const auto e = std::min(st.tokens.size(), b + max_segment);
        segments.emplace_back(st.tokens.begin() + static_cast<std::ptrdiff_t>(b),
                              st.tokens.begin() + static_cast<std::ptrdiff_t>(e));
      }
      span.emplace_back(first, segments.size() - first);
    }
    for (const auto& q : story.questions) {
      BabiRecord r;
      r.story = s;
      const std::size_t visible = q.context ? span[q.context - 1].first + span[q.context - 1].second : 0;
      r.segments.assign(segments.begin(), segments.begin() + static_cast<std::ptrdiff_t>(visible));
      r.question = q.question;
      r.answer = q.answer;
      for (int id : q.support)
        for (std::size_t i = 0; i < story.statements.size(); ++i)
          if (story.statements[i].line_number == id)
            for (std::size_t k = 0; k < span[i].second; ++k) r.support_segments.push_back(span[i].first + k);
      out.push_back(std::move(r));
    }
  }
  return out;
}

std::map<std::string, int> babi_vocabulary(const std::vector<BabiStory>& stories) {
  std::set<std::string> words;
  for (const auto& story : stories)
    for (const auto& [w, n] : story_token_counts(story)) words.insert(w);
  std::map<std::string, int> vocab;
  int id = 0;
  for (const auto& w : words) vocab.emplace(w, id++);
  return vocab;
}

std::string serialize_babi(const std::vector<BabiStory>& stories) {
  auto join = [](const Tokens& t) {
    std::string s;
    for (std::size_t i = 0; i < t.size(); ++i) s += (i ? " " : "") + t[i];
    return s;
  };
  std::ostringstream out;
  for (const auto& story : stories) {
    std::map<int, std::string> lines;
    for (const auto& st : story.statements) lines[st.line_number] = join(st.tokens);
    for (const auto& q : story.questions) {
      std::string ids;
      for (std::size_t i = 0; i < q.support.size(); ++i) ids += (i ? " " : "") + std::to_string(q.support[i]);
      lines[q.line_number] = join(q.question) + "\t" + q.answer + "\t" + ids;
    }
    for (const auto& [n, text] : lines) out << n << ' ' << text << '\n';
  }
  return out.str();
}

std::map<std::string, int> story_token_counts(const BabiStory& story) {
  std::map<std::string, int> counts;
  for (const auto& st : story.statements)
    for (const auto& t : st.tokens) ++counts[t];
  for (const auto& q : story.questions) {
    for (const auto& t : q.question) ++counts[t];
    std::stringstream parts(q.answer);
    for (std::string a; std::getline(parts, a, ',');)
      if (!a.empty()) ++counts[a];
  }
  return counts;
}

}  // namespace rm
