#include "rm/rehearsal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

namespace rm {

void RehearsalConfig::validate() const {
  if (fragments <= 0 || fragments % 2 != 0)
    throw ConfigError("rehearsal.fragments: B must be a positive even number, got " + std::to_string(fragments));
  if (negatives == 0)
    throw ConfigError("rehearsal.negatives: 0 sampled negatives; use -1 for all-vocabulary scoring");
  if (negatives < -1) throw ConfigError("rehearsal.negatives: must be -1 or positive");
}

int fragment_count(std::size_t stream_length, Index segment) {
  if (segment <= 0) throw ConfigError("segment length must be positive");
  return static_cast<int>((static_cast<Index>(stream_length) + segment - 1) / segment);
}

std::vector<int> fragment_items(const std::vector<int>& stream, Index segment, int c) {
  const int count = fragment_count(stream.size(), segment);
  if (c < 0 || c >= count)
    throw ShapeError("fragment " + std::to_string(c) + " outside a stream of " + std::to_string(count) + " fragments");
  std::vector<int> items(static_cast<std::size_t>(segment), kPadToken);
  const auto begin = static_cast<std::size_t>(c * segment);
  for (std::size_t i = 0; i < items.size() && begin + i < stream.size(); ++i) items[i] = stream[begin + i];
  return items;
}

MaskedFragment mask_fragment(const std::vector<int>& items, Rng& rng) {
  if (items.size() < 2) throw ConfigError("mask_fragment: fragments need at least 2 positions");
  std::vector<int> valid;
  for (std::size_t i = 0; i < items.size(); ++i)
    if (items[i] != kPadToken) valid.push_back(static_cast<int>(i) + 1);
  if (valid.empty()) throw DataError("mask_fragment: fragment has no items");

  MaskedFragment f;
  f.tokens.reserve(items.size() + 1);
  f.tokens.push_back(kClsToken);
  f.tokens.insert(f.tokens.end(), items.begin(), items.end());

  const std::size_t masked = std::max<std::size_t>(1, valid.size() / 2);
  rng.shuffle(valid);
  f.mask_positions.assign(valid.begin(), valid.begin() + static_cast<std::ptrdiff_t>(masked));
  std::sort(f.mask_positions.begin(), f.mask_positions.end());
  for (int pos : f.mask_positions) {
    f.targets.push_back(f.tokens[static_cast<std::size_t>(pos)]);
    f.tokens[static_cast<std::size_t>(pos)] = kMaskToken;
  }
  return f;
}

MaskedFragment corrupt_fragment(const MaskedFragment& positive, const std::vector<int>& pool, Rng& rng) {
  if (pool.empty()) throw DataError("corrupt_fragment: empty replacement pool");
  MaskedFragment neg = positive;
  neg.polarity = Polarity::Negative;
  std::vector<int> unmasked;
  for (std::size_t i = 1; i < positive.tokens.size(); ++i) {
    const int t = positive.tokens[i];
    if (t != kPadToken && t != kMaskToken) unmasked.push_back(static_cast<int>(i));
  }
  rng.shuffle(unmasked);
  const std::size_t replace = (unmasked.size() + 1) / 2;
  for (std::size_t r = 0; r < replace; ++r) {
    auto& slot = neg.tokens[static_cast<std::size_t>(unmasked[r])];
    const int original = slot;
    int drawn = original;
    for (int attempt = 0; attempt < 256 && drawn == original; ++attempt)
      drawn = pool[static_cast<std::size_t>(rng.uniform_int(pool.size()))];
    if (drawn == original)
      throw DataError("corrupt_fragment: pool offers no replacement for item " + std::to_string(original));
    slot = drawn;
  }
  return neg;
}

std::vector<std::vector<Index>> sample_negatives(const MaskedFragment& f, int count, Index vocab, Rng& rng) {
  if (count <= 0) throw ConfigError("sample_negatives: count must be positive");
  if (count > vocab - 1)
    throw ConfigError("rehearsal.negatives: " + std::to_string(count) + " negatives exceed the vocabulary of " +
                      std::to_string(vocab));
  std::vector<std::vector<Index>> out;
  for (int target : f.targets) {
    std::vector<Index> c{target};
    std::unordered_set<Index> seen{target};
    while (static_cast<int>(c.size()) <= count) {
      const auto id = static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(vocab)));
      if (seen.insert(id).second) c.push_back(id);
    }
    out.push_back(std::move(c));
  }
  return out;
}

FragmentBatch build_fragment_batch(const std::vector<const std::vector<int>*>& streams,
                                   const std::vector<std::vector<int>>& selections, Index segment,
                                   const RehearsalConfig& cfg, Index vocab, Rng& rng) {
  cfg.validate();
  if (selections.size() != streams.size()) throw ShapeError("build_fragment_batch: one selection per stream required");
  FragmentBatch batch;
  std::vector<int> vocabulary;
  if (streams.size() == 1) {
    vocabulary.resize(static_cast<std::size_t>(vocab));
    std::iota(vocabulary.begin(), vocabulary.end(), 0);
  }
  for (std::size_t g = 0; g < streams.size(); ++g) {
    std::vector<int> pool;
    if (streams.size() == 1) {
      pool = vocabulary;
    } else {
      for (std::size_t h = 0; h < streams.size(); ++h)
        if (h != g)
          for (int t : *streams[h])
            if (t != kPadToken) pool.push_back(t);
    }
    for (int c : selections[g]) {
      auto pos = mask_fragment(fragment_items(*streams[g], segment, c), rng);
      auto neg = corrupt_fragment(pos, pool, rng);
      if (!cfg.all_vocabulary()) {
        auto cand = sample_negatives(pos, cfg.negatives, vocab, rng);
        batch.candidates.insert(batch.candidates.end(), cand.begin(), cand.end());
      }
      batch.positive.push_back(std::move(pos));
      batch.negative.push_back(std::move(neg));
      batch.owner.push_back(static_cast<Index>(g));
    }
  }
  return batch;
}

template <typename S>
Var<S> embed_tokens(const Binder<S>& p, const ModelConfig& cfg, const std::vector<int>& tokens) {
  std::vector<Index> rows(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int t = tokens[i];
    if (t == kPadToken)
      rows[i] = -1;
    else if (t == kClsToken)
      rows[i] = cfg.items;
    else if (t == kMaskToken)
      rows[i] = cfg.items + 1;
    else if (t >= 0 && t < cfg.items)
      rows[i] = t;
    else
      throw DataError("embed_tokens: id " + std::to_string(t) + " outside vocabulary of " + std::to_string(cfg.items));
  }
  auto table = concat_rows<S>({p("embed.items"), p("embed.cls"), p("embed.mask")});
  return std::sqrt(static_cast<S>(cfg.width)) * gather_rows(table, rows);
}

template <typename S>
Var<S> decode_fragments(const Binder<S>& p, const ModelConfig& cfg, const std::vector<const MaskedFragment*>& fragments,
                        Var<S> memory, const std::vector<Index>& memory_group, std::vector<Matrix<S>>* cross_weights) {
  if (fragments.empty()) throw ShapeError("decode_fragments: no fragments");
  if (memory_group.size() != fragments.size()) throw ShapeError("decode_fragments: one memory group per fragment");
  const Index len = cfg.segment + 1;
  std::vector<int> tokens;
  tokens.reserve(fragments.size() * static_cast<std::size_t>(len));
  for (const auto* f : fragments) {
    if (static_cast<Index>(f->tokens.size()) != len)
      throw ShapeError("decode_fragments: fragment of " + std::to_string(f->tokens.size()) + " tokens, expected " +
                       std::to_string(len));
    tokens.insert(tokens.end(), f->tokens.begin(), f->tokens.end());
  }
  std::vector<unsigned char> key_mask(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) key_mask[i] = tokens[i] != kPadToken;
  auto x = embed_tokens(p, cfg, tokens);
  return transformer_decoder(p, "decoder", cfg.decoder_shape(), x, len, memory, cfg.slots, memory_group, key_mask,
                             cross_weights);
}

template <typename S>
Var<S> recollection_loss(const Binder<S>& p, Var<S> decoded, const std::vector<const MaskedFragment*>& fragments,
                         const std::vector<std::vector<Index>>* candidates) {
  if (fragments.empty()) throw ShapeError("recollection_loss: no fragments");
  const auto len = static_cast<Index>(fragments.front()->tokens.size());
  if (decoded.rows() < len * static_cast<Index>(fragments.size()))
    throw ShapeError("recollection_loss: decoded rows do not cover the fragments");
  std::vector<Index> rows;
  std::vector<Index> targets;
  std::vector<S> weights;
  const S per_fragment = S(1) / static_cast<S>(fragments.size());
  for (std::size_t f = 0; f < fragments.size(); ++f) {
    const auto& frag = *fragments[f];
    if (frag.mask_positions.empty()) throw ShapeError("recollection_loss: fragment without masked items");
    const S w = per_fragment / static_cast<S>(frag.mask_positions.size());
    for (std::size_t i = 0; i < frag.mask_positions.size(); ++i) {
      rows.push_back(static_cast<Index>(f) * len + frag.mask_positions[i]);
      targets.push_back(frag.targets[i]);
      weights.push_back(w);
    }
  }
  if (candidates && candidates->size() != rows.size())
    throw ShapeError("recollection_loss: " + std::to_string(candidates->size()) + " candidate lists for " +
                     std::to_string(rows.size()) + " masked items");
  auto scores = matmul_nt(gather_rows(decoded, rows), p("embed.items"));
  return cross_entropy(scores, targets, weights, candidates);
}

template <typename S>
Var<S> score_familiarity(const Binder<S>& p, Var<S> cls) {
  return sigmoid(linear(p, "familiarity", cls));
}

template <typename S>
Var<S> familiarity_loss(Var<S> s_pos, Var<S> s_neg) {
  if (s_pos.rows() != s_neg.rows() || s_pos.cols() != 1 || s_neg.cols() != 1)
    throw ShapeError("familiarity_loss: expected paired score columns, got " + shape_string(s_pos.value()) + " and " +
                     shape_string(s_neg.value()));
  const auto n = static_cast<std::size_t>(s_pos.rows());
  std::vector<S> labels(2 * n, S(0));
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n), S(1));
  std::vector<S> weights(2 * n, S(1) / static_cast<S>(n));
  return binary_cross_entropy(concat_rows<S>({s_pos, s_neg}), labels, weights);
}

template <typename S>
Var<S> cls_rows(Var<S> decoded, Index fragment_tokens) {
  std::vector<Index> rows(static_cast<std::size_t>(decoded.rows() / fragment_tokens));
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<Index>(i) * fragment_tokens;
  return gather_rows(decoded, rows);
}

#define RM_INSTANTIATE(S)                                                                                          \
  template Var<S> embed_tokens(const Binder<S>&, const ModelConfig&, const std::vector<int>&);                     \
  template Var<S> decode_fragments(const Binder<S>&, const ModelConfig&, const std::vector<const MaskedFragment*>&, \
                                   Var<S>, const std::vector<Index>&, std::vector<Matrix<S>>*);                    \
  template Var<S> recollection_loss(const Binder<S>&, Var<S>, const std::vector<const MaskedFragment*>&,           \
                                    const std::vector<std::vector<Index>>*);                                       \
  template Var<S> score_familiarity(const Binder<S>&, Var<S>);                                                     \
  template Var<S> familiarity_loss(Var<S>, Var<S>);                                                                \
  template Var<S> cls_rows(Var<S>, Index);

RM_INSTANTIATE(float)
RM_INSTANTIATE(double)

#undef RM_INSTANTIATE

}  // namespace rm
