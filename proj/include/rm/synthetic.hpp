#pragma once

#include "rm/rng.hpp"

#include "json.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace rm {

/// Logic-chain benchmark parameters. Defaults are the full-scale setting.
struct SyntheticConfig {
  int facts = 400;            ///< fact vocabulary size
  int stream_length = 200;    ///< facts per stream
  int queries = 40;           ///< query types
  int answers = 30;           ///< answer types per query
  int evidence_length = 5;    ///< contiguous facts per evidence
  int groups = 20;
  int samples_per_chain = 400;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  int half() const { return stream_length / 2; }
  int group_size() const { return facts / groups; }
  std::size_t chain_count() const { return static_cast<std::size_t>(queries) * static_cast<std::size_t>(answers); }
};

nlohmann::ordered_json to_json(const SyntheticConfig& c);
/// Reads the fields present in `j` over the defaults; throws ConfigError
/// naming the first field with a wrong type.
SyntheticConfig synthetic_config_from_json(const nlohmann::json& j);

struct LogicChain {
  int query = 0;
  int answer = 0;
  std::vector<int> evidence;
};

enum class Bucket { Early, Later };

const char* to_string(Bucket b);
Bucket bucket_from_string(const std::string& s);

struct Sample {
  std::vector<int> stream;
  int query = 0;
  int answer = 0;
  int evidence_start = 0;
  Bucket bucket = Bucket::Early;
};

/// Group membership used by the generator: facts and queries are each
/// permuted and dealt round-robin into `groups` groups.
struct GroupAssignment {
  std::vector<int> fact_group;   ///< group of each fact
  std::vector<int> query_group;  ///< group of each query
  std::vector<std::vector<int>> members;  ///< facts in each group, ascending
};

GroupAssignment assign_groups(const SyntheticConfig& config, Rng& rng);

/// R_q * R_a chains ordered by (query, answer). Within a query the evidences
/// are pairwise distinct; each is an ordered draw of R_c facts (with
/// replacement) from the query's group.
std::vector<LogicChain> build_logic_chains(const SyntheticConfig& config, Rng& rng);
std::vector<LogicChain> build_logic_chains(const SyntheticConfig& config, Rng& rng, GroupAssignment& groups);

/// Places `chain`'s evidence inside one half of a uniform filler stream and
/// repairs accidental occurrences of any same-query evidence. Throws
/// DataError if 100 repair rounds do not suffice.
Sample generate_sample(const LogicChain& chain, const std::vector<LogicChain>& chains, const SyntheticConfig& config,
                       Rng& rng);

/// Exhaustive check that the stream contains exactly one contiguous evidence
/// of the sample's query, namely its own chain's at evidence_start, and that
/// the bucket matches the half it lies in.
bool verify_sample(const Sample& sample, const std::vector<LogicChain>& chains);

struct Dataset {
  SyntheticConfig config;
  std::vector<LogicChain> chains;
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<Sample> test;

  std::size_t total() const { return train.size() + val.size() + test.size(); }
};

/// samples_per_chain samples per chain split 80/10/10 within each chain with
/// early and later samples interleaved before assignment. Deterministic in
/// config.seed; sample j of chain c draws from Rng(seed).fork({c, j}).
Dataset generate_dataset(const SyntheticConfig& config);

/// Writes train/val/test.jsonl and manifest.json into `dir` (created if needed).
void write_dataset(const Dataset& data, const std::string& dir);
Dataset read_dataset(const std::string& dir);

std::string sample_to_json(const Sample& s);
Sample sample_from_json(const std::string& line);
std::vector<Sample> read_samples(const std::string& path);

}  // namespace rm
