#pragma once

#include "rm/model.hpp"

#include <vector>

namespace rm {

enum class Polarity { Positive, Negative };

/// A rehearsal fragment as fed to the decoder: [cls] followed by N positions.
struct MaskedFragment {
  std::vector<int> tokens;          ///< N + 1 ids, tokens[0] == kClsToken
  std::vector<int> mask_positions;  ///< ascending, within [1, N]
  std::vector<int> targets;         ///< original ids at mask_positions
  Polarity polarity = Polarity::Positive;
};

struct RehearsalConfig {
  int fragments = 6;   ///< B, split evenly between the two halves of a stream
  int negatives = -1;  ///< J negatives per masked item; -1 scores against the whole vocabulary

  void validate() const;
  bool all_vocabulary() const { return negatives < 0; }
};

/// Number of length-N fragments covering a stream: ceil(len / N).
int fragment_count(std::size_t stream_length, Index segment);

/// Items of fragment `c`, padded with kPadToken to N entries.
std::vector<int> fragment_items(const std::vector<int>& stream, Index segment, int c);

/// Masks floor(n/2) uniformly chosen positions among the n valid items and
/// prepends [cls]. Throws ConfigError when the fragment is shorter than 2.
MaskedFragment mask_fragment(const std::vector<int>& items, Rng& rng);

/// Replaces ceil(u/2) of the u unmasked valid items with pool ids that differ
/// from the item they replace. Mask positions and targets are kept.
MaskedFragment corrupt_fragment(const MaskedFragment& positive, const std::vector<int>& pool, Rng& rng);

/// For every masked item: the target followed by J distinct ids drawn from
/// [0, vocab) other than the target.
std::vector<std::vector<Index>> sample_negatives(const MaskedFragment& f, int count, Index vocab, Rng& rng);

/// Positive/negative fragment pairs for a batch of streams.
struct FragmentBatch {
  std::vector<MaskedFragment> positive;
  std::vector<MaskedFragment> negative;  ///< negative[i] is derived from positive[i]
  std::vector<Index> owner;              ///< stream index of each pair
  std::vector<std::vector<Index>> candidates;  ///< per masked item of `positive`; empty with all-vocabulary scoring

  std::size_t size() const { return positive.size(); }
};

/// Builds the rehearsal inputs of a batch. selections[g] lists the fragment
/// indices of stream g. Corruption draws replacements from the items of the
/// other streams in the batch (the whole vocabulary for a single stream).
FragmentBatch build_fragment_batch(const std::vector<const std::vector<int>*>& streams,
                                   const std::vector<std::vector<int>>& selections, Index segment,
                                   const RehearsalConfig& cfg, Index vocab, Rng& rng);

/// Token embeddings scaled by sqrt(d): items from embed.items, [cls] and [mask] from their own
/// rows, pads as zero rows.
template <typename S>
Var<S> embed_tokens(const Binder<S>& p, const ModelConfig& cfg, const std::vector<int>& tokens);

/// Runs the memory-conditioned decoder over fragments (each N + 1 tokens).
/// Fragment i reads memory group memory_group[i] of `memory` (G*K x d).
/// Returns ((N + 1) * fragments x d); row i*(N+1) is r_cls of fragment i.
template <typename S>
Var<S> decode_fragments(const Binder<S>& p, const ModelConfig& cfg, const std::vector<const MaskedFragment*>& fragments,
                        Var<S> memory, const std::vector<Index>& memory_group,
                        std::vector<Matrix<S>>* cross_weights = nullptr);

/// Contrastive recollection loss averaged over fragments. Each masked item
/// scores r . y for the target and its negatives with y tied to embed.items;
/// per fragment the item losses are averaged over the masked count.
/// `fragments` are the first fragments decoded into `decoded`.
template <typename S>
Var<S> recollection_loss(const Binder<S>& p, Var<S> decoded, const std::vector<const MaskedFragment*>& fragments,
                         const std::vector<std::vector<Index>>* candidates = nullptr);

/// s = sigmoid(r_cls W + b) for every row of `cls_rows`; an (F x 1) column.
template <typename S>
Var<S> score_familiarity(const Binder<S>& p, Var<S> cls_rows);

/// Mean over pairs of -log(s_pos) - log(1 - s_neg). This is binary
/// cross-entropy with the negative term's sign corrected so that minimizing
/// it pushes negative scores towards zero.
template <typename S>
Var<S> familiarity_loss(Var<S> s_pos, Var<S> s_neg);

/// Rows r_cls of every decoded fragment.
template <typename S>
Var<S> cls_rows(Var<S> decoded, Index fragment_tokens);

}  // namespace rm
