#pragma once

#include "rm/layers.hpp"
#include "rm/params.hpp"

#include "json.hpp"

namespace rm {

/// Token ids understood by the student. Non-negative ids are facts/items.
inline constexpr int kPadToken = -1;
inline constexpr int kMaskToken = -2;
inline constexpr int kClsToken = -3;

/// Dimensions of the student (memory machine, rehearsal decoder, reasoner).
/// The feature width is shared: d_x = d_model.
struct ModelConfig {
  Index width = 128;        ///< d_x = d_model
  Index slots = 20;         ///< K
  Index segment = 10;       ///< N, items per segment / fragment
  Index heads = 4;
  Index encoder_layers = 3;
  Index decoder_layers = 3;
  Index hops = 2;
  Index items = 400;        ///< item vocabulary (R_f for the synthetic task)
  Index queries = 40;       ///< R_q
  Index answers = 30;       ///< R_a

  void validate() const;
  TransformerShape encoder_shape() const { return {width, heads, encoder_layers}; }
  TransformerShape decoder_shape() const { return {width, heads, decoder_layers}; }
};

nlohmann::ordered_json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});

/// Registers every student parameter: item embeddings with [cls]/[mask]
/// rows, encoder, learned initial memory, slot alignment, slot GRU, rehearsal
/// decoder, familiarity head and reasoner.
ParameterStore make_student_params(const ModelConfig& cfg, std::uint64_t seed);

/// Registers the teacher (history sampler) parameters. All names start with
/// "teacher." and none are shared with the student.
ParameterStore make_teacher_params(const ModelConfig& cfg, std::uint64_t seed);

}  // namespace rm
