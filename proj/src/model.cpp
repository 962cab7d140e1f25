#include "rm/model.hpp"

#include <set>

namespace rm {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

void ModelConfig::validate() const {
  auto positive = [](Index v, const char* name) {
    if (v <= 0) throw ConfigError(std::string("model.") + name + ": must be positive");
  };
  positive(width, "width");
  positive(slots, "slots");
  positive(segment, "segment");
  positive(heads, "heads");
  // Zero encoder layers writes position-coded item embeddings directly.
  if (encoder_layers < 0) throw ConfigError("model.encoder_layers: must be nonnegative");
  positive(decoder_layers, "decoder_layers");
  positive(hops, "hops");
  positive(items, "items");
  positive(queries, "queries");
  positive(answers, "answers");
  if (width % heads != 0)
    throw ConfigError("model.heads: " + std::to_string(heads) + " heads do not divide width " + std::to_string(width));
}

ojson to_json(const ModelConfig& c) {
  return ojson{{"width", c.width},          {"slots", c.slots},
               {"segment", c.segment},      {"heads", c.heads},
               {"encoder_layers", c.encoder_layers}, {"decoder_layers", c.decoder_layers},
               {"hops", c.hops},            {"items", c.items},
               {"queries", c.queries},      {"answers", c.answers}};
}

ModelConfig model_config_from_json(const json& j, ModelConfig c) {
  if (!j.is_object()) throw ConfigError("model: expected an object");
  static const std::set<std::string> known{"width", "slots", "segment", "heads", "encoder_layers",
                                           "decoder_layers", "hops", "items", "queries", "answers"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError("model." + k + ": unknown field");
  auto read = [&j](const char* key, Index& out) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_number_integer()) throw ConfigError(std::string("model.") + key + ": expected an integer");
    out = j.at(key).get<Index>();
  };
  read("width", c.width);
  read("slots", c.slots);
  read("segment", c.segment);
  read("heads", c.heads);
  read("encoder_layers", c.encoder_layers);
  read("decoder_layers", c.decoder_layers);
  read("hops", c.hops);
  read("items", c.items);
  read("queries", c.queries);
  read("answers", c.answers);
  return c;
}

ParameterStore make_student_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParameterStore s;
  Rng rng = Rng(seed).fork({0x5717DE47ULL});
  const Index d = cfg.width;

  s.add("embed.items", cfg.items, d, Init::Glorot, rng);
  s.add("embed.cls", 1, d, Init::Glorot, rng);
  s.add("embed.mask", 1, d, Init::Glorot, rng);

  add_encoder(s, "encoder", cfg.encoder_shape(), rng);

  s.add("memory.init", cfg.slots, d, Init::Glorot, rng);
  s.add("align.w1", d, d, Init::Glorot, rng);
  s.add("align.w2", d, d, Init::Glorot, rng);
  s.add("align.b", 1, d, Init::Zeros, rng);
  s.add("align.w", 1, d, Init::Glorot, rng);
  add_gru(s, "gru", d, d, rng);

  add_decoder(s, "decoder", cfg.decoder_shape(), rng);
  add_linear(s, "familiarity", d, 1, rng);

  s.add("reason.query", cfg.queries, d, Init::Glorot, rng);
  s.add("reason.hop.w1", d, d, Init::Glorot, rng);
  s.add("reason.hop.w2", d, d, Init::Glorot, rng);
  s.add("reason.hop.b", 1, d, Init::Zeros, rng);
  s.add("reason.hop.w", 1, d, Init::Glorot, rng);
  s.add("reason.hop.wq", 2 * d, d, Init::Glorot, rng);
  // The answer head starts at zero so untrained predictions sit at chance.
  s.add("reason.head.w", d, cfg.answers, Init::Zeros, rng);
  s.add("reason.head.b", 1, cfg.answers, Init::Zeros, rng);
  return s;
}

ParameterStore make_teacher_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParameterStore s;
  Rng rng = Rng(seed).fork({0x7EAC4E2ULL});
  const Index d = cfg.width;
  s.add("teacher.items", cfg.items, d, Init::Glorot, rng);
  s.add("teacher.query", cfg.queries, d, Init::Glorot, rng);
  s.add("teacher.attn.w1", d, d, Init::Glorot, rng);
  s.add("teacher.attn.w2", d, d, Init::Glorot, rng);
  s.add("teacher.attn.b", 1, d, Init::Zeros, rng);
  s.add("teacher.attn.w", 1, d, Init::Glorot, rng);
  add_linear(s, "teacher.head", 2 * d, cfg.answers, rng);
  return s;
}

}  // namespace rm
