#include "doctest.h"

#include "rm/synthetic.hpp"
#include "rm/tensor.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace rm;
namespace fs = std::filesystem;

namespace {

SyntheticConfig small_task() {
  SyntheticConfig s;
  s.facts = 40;
  s.stream_length = 30;
  s.queries = 4;
  s.answers = 3;
  s.evidence_length = 2;
  s.samples_per_chain = 10;
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Independent scan: every start position where any same-query evidence occurs.
int occurrences(const Sample& s, const std::vector<LogicChain>& chains) {
  int n = 0;
  for (const auto& c : chains) {
    if (c.query != s.query) continue;
    for (std::size_t i = 0; i + c.evidence.size() <= s.stream.size(); ++i) {
      bool eq = true;
      for (std::size_t k = 0; k < c.evidence.size() && eq; ++k) eq = s.stream[i + k] == c.evidence[k];
      n += eq;
    }
  }
  return n;
}

}  // namespace

TEST_CASE("build_logic_chains: one chain per query-answer pair, evidence from the query's group") {
  SyntheticConfig full_scale;
  Rng rng(1);
  CHECK(build_logic_chains(full_scale, rng).size() == 1200);
  CHECK(full_scale.chain_count() * static_cast<std::size_t>(full_scale.samples_per_chain) == 480000);

  SyntheticConfig one = small_task();
  one.queries = 1;
  one.answers = 1;
  Rng r1(2);
  CHECK(build_logic_chains(one, r1).size() == 1);

  const auto cfg = small_task();
  Rng r2(3);
  GroupAssignment groups;
  const auto chains = build_logic_chains(cfg, r2, groups);
  REQUIRE(chains.size() == 12);
  std::set<std::vector<int>> seen;
  for (const auto& c : chains) {
    CHECK(c.evidence.size() == 2);
    const int g = groups.query_group[static_cast<std::size_t>(c.query)];
    for (int f : c.evidence) CHECK(groups.fact_group[static_cast<std::size_t>(f)] == g);
    CHECK(seen.insert(c.evidence).second);  // distinct within and across queries of one group
  }
  for (const auto& m : groups.members) CHECK(m.size() == 2);
}

TEST_CASE("generate_sample: stream length, bucket by half, one evidence occurrence") {
  const auto cfg = small_task();
  Rng rng(4);
  const auto chains = build_logic_chains(cfg, rng);
  int early = 0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const auto& c = chains[static_cast<std::size_t>(i) % chains.size()];
    Rng r = Rng(5).fork({static_cast<std::uint64_t>(i)});
    const auto s = generate_sample(c, chains, cfg, r);
    REQUIRE(s.stream.size() == 30);
    REQUIRE(occurrences(s, chains) == 1);
    REQUIRE(verify_sample(s, chains));
    CHECK((s.bucket == Bucket::Early) == (s.evidence_start + 2 <= 15));
    early += s.bucket == Bucket::Early;
  }
  CHECK(std::abs(early / static_cast<double>(draws) - 0.5) < 0.05);

  Sample fixed;
  fixed.evidence_start = 0;
  SyntheticConfig full_scale;
  full_scale.evidence_length = 5;
  Rng r3(6);
  const auto pc = build_logic_chains(full_scale, r3);
  Rng r4(7);
  auto s = generate_sample(pc[0], pc, full_scale, r4);
  CHECK(s.stream.size() == 200);
  CHECK((s.evidence_start < 100) == (s.bucket == Bucket::Early));
}

TEST_CASE("verify_sample: rejects a spliced rival evidence and a wrong bucket") {
  const auto cfg = small_task();
  Rng rng(8);
  const auto chains = build_logic_chains(cfg, rng);
  Rng r(9);
  auto s = generate_sample(chains[0], chains, cfg, r);
  CHECK(verify_sample(s, chains));

  const auto& rival = chains[1];
  REQUIRE(rival.query == s.query);
  auto spliced = s;
  const std::size_t at = s.evidence_start < 15 ? 20 : 2;
  std::copy(rival.evidence.begin(), rival.evidence.end(), spliced.stream.begin() + static_cast<std::ptrdiff_t>(at));
  CHECK_FALSE(verify_sample(spliced, chains));

  auto wrong = s;
  wrong.bucket = s.bucket == Bucket::Early ? Bucket::Later : Bucket::Early;
  CHECK_FALSE(verify_sample(wrong, chains));
}

TEST_CASE("generate_dataset: split sizes and byte-identical regeneration") {
  auto one = small_task();
  one.queries = 1;
  one.answers = 1;
  const auto d1 = generate_dataset(one);
  CHECK(d1.train.size() == 8);
  CHECK(d1.val.size() == 1);
  CHECK(d1.test.size() == 1);

  auto tiny = small_task();
  tiny.queries = 2;
  tiny.answers = 2;
  const auto d = generate_dataset(tiny);
  CHECK(d.total() == 40);

  const auto base = fs::temp_directory_path() / "rm_test_synthetic";
  fs::remove_all(base);
  write_dataset(d, (base / "a").string());
  write_dataset(generate_dataset(tiny), (base / "b").string());
  for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"})
    CHECK(slurp(base / "a" / f) == slurp(base / "b" / f));

  const auto back = read_dataset((base / "a").string());
  CHECK(back.total() == 40);
  CHECK(back.train.front().stream == d.train.front().stream);
  CHECK(back.chains.size() == d.chains.size());

  auto other = tiny;
  other.seed = 1;
  write_dataset(generate_dataset(other), (base / "c").string());
  CHECK(slurp(base / "a" / "train.jsonl") != slurp(base / "c" / "train.jsonl"));
  fs::remove_all(base);
}

TEST_CASE("samples round-trip through JSON lines") {
  Sample s;
  s.stream = {3, 1, 4, 1, 5};
  s.query = 2;
  s.answer = 1;
  s.evidence_start = 3;
  s.bucket = Bucket::Later;
  const auto back = sample_from_json(sample_to_json(s));
  CHECK(back.stream == s.stream);
  CHECK(back.query == 2);
  CHECK(back.answer == 1);
  CHECK(back.evidence_start == 3);
  CHECK(back.bucket == Bucket::Later);
  CHECK_THROWS_AS(sample_from_json("{\"stream\": 3}"), DataError);
}

TEST_CASE("config validation and parsing") {
  auto bad = small_task();
  bad.facts = 41;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = small_task();
  bad.evidence_length = 16;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = small_task();
  bad.answers = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  const auto parsed = synthetic_config_from_json(nlohmann::json::parse(R"({"facts": 40, "seed": 9})"));
  CHECK(parsed.facts == 40);
  CHECK(parsed.seed == 9);
  CHECK(parsed.stream_length == 200);
  CHECK_THROWS_AS(synthetic_config_from_json(nlohmann::json::parse(R"({"facts": "many"})")), ConfigError);
  CHECK_THROWS_AS(synthetic_config_from_json(nlohmann::json::parse(R"({"fact": 40})")), ConfigError);

  // Too few distinct evidences for the answers of one query.
  auto cramped = small_task();
  cramped.answers = 5;
  Rng rng(1);
  CHECK_THROWS_AS(build_logic_chains(cramped, rng), ConfigError);
}
