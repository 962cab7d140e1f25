#include "rm/synthetic.hpp"

#include "rm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

namespace rm {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

template <typename T>
void read_int(const json& j, const char* key, T& out, const std::string& scope) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_number_integer()) throw ConfigError(scope + "." + key + ": expected an integer");
  out = v.get<T>();
}

}  // namespace

void SyntheticConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string("synthetic.") + name + ": must be positive");
  };
  positive(facts, "facts");
  positive(stream_length, "stream_length");
  positive(queries, "queries");
  positive(answers, "answers");
  positive(evidence_length, "evidence_length");
  positive(groups, "groups");
  positive(samples_per_chain, "samples_per_chain");
  if (facts % groups != 0)
    throw ConfigError("synthetic.facts: " + std::to_string(facts) + " facts do not split evenly into " +
                      std::to_string(groups) + " groups");
  if (evidence_length > stream_length / 2)
    throw ConfigError("synthetic.evidence_length: must be at most half the stream length");
}

ojson to_json(const SyntheticConfig& c) {
  return ojson{{"facts", c.facts},
               {"stream_length", c.stream_length},
               {"queries", c.queries},
               {"answers", c.answers},
               {"evidence_length", c.evidence_length},
               {"groups", c.groups},
               {"samples_per_chain", c.samples_per_chain},
               {"seed", c.seed}};
}

SyntheticConfig synthetic_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("synthetic: expected an object");
  static const std::set<std::string> known{"facts",  "stream_length",     "queries", "answers", "evidence_length",
                                           "groups", "samples_per_chain", "seed"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError("synthetic." + k + ": unknown field");
  SyntheticConfig c;
  read_int(j, "facts", c.facts, "synthetic");
  read_int(j, "stream_length", c.stream_length, "synthetic");
  read_int(j, "queries", c.queries, "synthetic");
  read_int(j, "answers", c.answers, "synthetic");
  read_int(j, "evidence_length", c.evidence_length, "synthetic");
  read_int(j, "groups", c.groups, "synthetic");
  read_int(j, "samples_per_chain", c.samples_per_chain, "synthetic");
  read_int(j, "seed", c.seed, "synthetic");
  return c;
}

const char* to_string(Bucket b) { return b == Bucket::Early ? "early" : "later"; }

Bucket bucket_from_string(const std::string& s) {
  if (s == "early") return Bucket::Early;
  if (s == "later") return Bucket::Later;
  throw DataError("unknown bucket '" + s + "'");
}

// ---------------------------------------------------------------------------

GroupAssignment assign_groups(const SyntheticConfig& config, Rng& rng) {
  config.validate();
  GroupAssignment g;
  g.fact_group.assign(static_cast<std::size_t>(config.facts), 0);
  g.query_group.assign(static_cast<std::size_t>(config.queries), 0);
  g.members.assign(static_cast<std::size_t>(config.groups), {});

  std::vector<int> facts(static_cast<std::size_t>(config.facts));
  for (int i = 0; i < config.facts; ++i) facts[static_cast<std::size_t>(i)] = i;
  rng.shuffle(facts);
  for (std::size_t i = 0; i < facts.size(); ++i) {
    const int grp = static_cast<int>(i % static_cast<std::size_t>(config.groups));
    g.fact_group[static_cast<std::size_t>(facts[i])] = grp;
    g.members[static_cast<std::size_t>(grp)].push_back(facts[i]);
  }
  for (auto& m : g.members) std::sort(m.begin(), m.end());

  std::vector<int> queries(static_cast<std::size_t>(config.queries));
  for (int i = 0; i < config.queries; ++i) queries[static_cast<std::size_t>(i)] = i;
  rng.shuffle(queries);
  for (std::size_t i = 0; i < queries.size(); ++i)
    g.query_group[static_cast<std::size_t>(queries[i])] = static_cast<int>(i % static_cast<std::size_t>(config.groups));
  return g;
}

std::vector<LogicChain> build_logic_chains(const SyntheticConfig& config, Rng& rng) {
  GroupAssignment unused;
  return build_logic_chains(config, rng, unused);
}

std::vector<LogicChain> build_logic_chains(const SyntheticConfig& config, Rng& rng, GroupAssignment& groups) {
  groups = assign_groups(config, rng);
  const double space = std::pow(static_cast<double>(config.group_size()), config.evidence_length);
  if (space < static_cast<double>(config.answers))
    throw ConfigError("synthetic: a group of " + std::to_string(config.group_size()) + " facts yields only " +
                      std::to_string(static_cast<long long>(space)) + " distinct evidences of length " +
                      std::to_string(config.evidence_length) + ", fewer than " + std::to_string(config.answers) +
                      " answers");

  std::vector<LogicChain> chains;
  chains.reserve(config.chain_count());
  for (int q = 0; q < config.queries; ++q) {
    const auto& pool = groups.members[static_cast<std::size_t>(groups.query_group[static_cast<std::size_t>(q)])];
    std::set<std::vector<int>> used;
    for (int a = 0; a < config.answers; ++a) {
      std::vector<int> ev(static_cast<std::size_t>(config.evidence_length));
      do {
        for (auto& f : ev) f = pool[static_cast<std::size_t>(rng.uniform_int(pool.size()))];
      } while (!used.insert(ev).second);
      chains.push_back(LogicChain{q, a, std::move(ev)});
    }
  }
  return chains;
}

namespace {

bool matches_at(const std::vector<int>& stream, std::size_t pos, const std::vector<int>& ev) {
  if (pos + ev.size() > stream.size()) return false;
  return std::equal(ev.begin(), ev.end(), stream.begin() + static_cast<std::ptrdiff_t>(pos));
}

}  // namespace

Sample generate_sample(const LogicChain& chain, const std::vector<LogicChain>& chains, const SyntheticConfig& config,
                       Rng& rng) {
  const int len = config.stream_length;
  const int rc = config.evidence_length;
  const int half = config.half();
  if (static_cast<int>(chain.evidence.size()) != rc) throw ConfigError("generate_sample: chain/config mismatch");

  Sample s;
  s.query = chain.query;
  s.answer = chain.answer;
  s.stream.resize(static_cast<std::size_t>(len));
  for (auto& f : s.stream) f = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(config.facts)));

  // Valid starts keep the evidence inside [0, half) or [half, len).
  const int early_slots = half - rc + 1;
  const int later_slots = len - half - rc + 1;
  const auto pick = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(early_slots + later_slots)));
  s.evidence_start = pick < early_slots ? pick : half + (pick - early_slots);
  s.bucket = s.evidence_start < half ? Bucket::Early : Bucket::Later;
  std::copy(chain.evidence.begin(), chain.evidence.end(), s.stream.begin() + s.evidence_start);

  std::vector<const LogicChain*> rivals;
  for (const auto& c : chains)
    if (c.query == chain.query) rivals.push_back(&c);

  const auto own_begin = static_cast<std::size_t>(s.evidence_start);
  const auto own_end = own_begin + static_cast<std::size_t>(rc);
  for (int round = 0; round < 100; ++round) {
    std::vector<std::size_t> dirty;
    for (std::size_t pos = 0; pos + static_cast<std::size_t>(rc) <= s.stream.size(); ++pos)
      for (const auto* c : rivals) {
        if (pos == own_begin && c->answer == chain.answer) continue;
        if (!matches_at(s.stream, pos, c->evidence)) continue;
        for (std::size_t i = pos; i < pos + static_cast<std::size_t>(rc); ++i)
          if (i < own_begin || i >= own_end) dirty.push_back(i);
      }
    if (dirty.empty()) return s;
    for (auto i : dirty) s.stream[i] = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(config.facts)));
  }
  throw DataError("generate_sample: could not make the answer unique for chain (query " +
                  std::to_string(chain.query) + ", answer " + std::to_string(chain.answer) + ") after 100 repairs");
}

bool verify_sample(const Sample& sample, const std::vector<LogicChain>& chains) {
  const LogicChain* own = nullptr;
  for (const auto& c : chains)
    if (c.query == sample.query && c.answer == sample.answer) own = &c;
  if (!own) return false;
  const int n = static_cast<int>(sample.stream.size());
  const int rc = static_cast<int>(own->evidence.size());
  if (sample.evidence_start < 0 || sample.evidence_start + rc > n) return false;

  int occurrences = 0;
  bool own_found = false;
  for (int start = 0; start + rc <= n; ++start) {
    for (const auto& c : chains) {
      if (c.query != sample.query) continue;
      bool hit = true;
      for (int i = 0; i < rc && hit; ++i) hit = sample.stream[static_cast<std::size_t>(start + i)] == c.evidence[static_cast<std::size_t>(i)];
      if (!hit) continue;
      ++occurrences;
      if (start == sample.evidence_start && c.answer == sample.answer) own_found = true;
    }
  }
  const int half = n / 2;
  const bool in_first = sample.evidence_start + rc <= half;
  const bool in_second = sample.evidence_start >= half;
  const bool bucket_ok = (sample.bucket == Bucket::Early && in_first) || (sample.bucket == Bucket::Later && in_second);
  return own_found && occurrences == 1 && bucket_ok;
}

// ---------------------------------------------------------------------------

Dataset generate_dataset(const SyntheticConfig& config) {
  config.validate();
  Dataset d;
  d.config = config;
  const Rng root(config.seed);
  Rng chain_rng = root.fork({0xC4A15ULL});
  d.chains = build_logic_chains(config, chain_rng);

  const auto n = static_cast<std::size_t>(config.samples_per_chain);
  const std::size_t held = static_cast<std::size_t>(std::floor(static_cast<double>(n) / 10.0 + 0.5));
  for (std::size_t c = 0; c < d.chains.size(); ++c) {
    std::vector<Sample> early, later;
    for (std::size_t j = 0; j < n; ++j) {
      Rng r = root.fork({static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(j)});
      auto s = generate_sample(d.chains[c], d.chains, config, r);
      (s.bucket == Bucket::Early ? early : later).push_back(std::move(s));
    }
    // Interleave buckets so the cumulative assignment below stratifies them.
    std::vector<Sample> order;
    for (std::size_t i = 0; i < std::max(early.size(), later.size()); ++i) {
      if (i < early.size()) order.push_back(std::move(early[i]));
      if (i < later.size()) order.push_back(std::move(later[i]));
    }
    // Held-out positions are evenly spaced and alternate buckets; dealing them
    // val, test, test, val (phase shifted per chain) puts both buckets in both.
    const std::size_t slots = 2 * held;
    std::size_t k = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
      const auto target = static_cast<std::size_t>(
          std::floor(static_cast<double>((i + 1) * slots) / static_cast<double>(n) + 0.5));
      if (k < target) {
        const auto phase = (k + 2 * c) % 4;
        (phase == 0 || phase == 3 ? d.val : d.test).push_back(std::move(order[i]));
        ++k;
      } else {
        d.train.push_back(std::move(order[i]));
      }
    }
  }
  return d;
}

std::string sample_to_json(const Sample& s) {
  ojson j{{"stream", s.stream},
          {"query", s.query},
          {"answer", s.answer},
          {"evidence_start", s.evidence_start},
          {"bucket", to_string(s.bucket)}};
  return j.dump();
}

Sample sample_from_json(const std::string& line) {
  try {
    const auto j = json::parse(line);
    Sample s;
    s.stream = j.at("stream").get<std::vector<int>>();
    s.query = j.at("query").get<int>();
    s.answer = j.at("answer").get<int>();
    s.evidence_start = j.at("evidence_start").get<int>();
    s.bucket = bucket_from_string(j.at("bucket").get<std::string>());
    return s;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed sample record: ") + e.what());
  }
}

std::vector<Sample> read_samples(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open '" + path + "'");
  std::vector<Sample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(sample_from_json(line));
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

namespace {

void write_lines(const std::string& path, const std::vector<Sample>& samples) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write '" + path + "'");
  for (const auto& s : samples) f << sample_to_json(s) << '\n';
  if (!f) throw DataError("write failed for '" + path + "'");
}

}  // namespace

void write_dataset(const Dataset& data, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory '" + dir + "': " + ec.message());
  write_lines(dir + "/train.jsonl", data.train);
  write_lines(dir + "/val.jsonl", data.val);
  write_lines(dir + "/test.jsonl", data.test);

  ojson manifest;
  manifest["config"] = to_json(data.config);
  manifest["rng"] = Rng::kAlgorithm;
  manifest["counts"] = ojson{{"chains", data.chains.size()},
                             {"train", data.train.size()},
                             {"val", data.val.size()},
                             {"test", data.test.size()}};
  manifest["chains"] = ojson::array();
  for (const auto& c : data.chains)
    manifest["chains"].push_back(ojson{{"query", c.query}, {"answer", c.answer}, {"evidence", c.evidence}});
  const std::string path = dir + "/manifest.json";
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write '" + path + "'");
  f << manifest.dump(1) << '\n';
}

Dataset read_dataset(const std::string& dir) {
  const std::string path = dir + "/manifest.json";
  std::ifstream f(path);
  if (!f) throw DataError("cannot open '" + path + "' (run `rm gen` first)");
  Dataset d;
  try {
    const auto manifest = json::parse(f);
    d.config = synthetic_config_from_json(manifest.at("config"));
    for (const auto& c : manifest.at("chains"))
      d.chains.push_back(
          LogicChain{c.at("query").get<int>(), c.at("answer").get<int>(), c.at("evidence").get<std::vector<int>>()});
  } catch (const json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  d.train = read_samples(dir + "/train.jsonl");
  d.val = read_samples(dir + "/val.jsonl");
  d.test = read_samples(dir + "/test.jsonl");
  return d;
}

}  // namespace rm
