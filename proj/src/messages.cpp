#include "fedcausal/messages.hpp"

#include "fedcausal/errors.hpp"

namespace fedcausal {

const std::vector<MessageFieldSchema>& message_schema_registry() {
  static const std::vector<MessageFieldSchema> registry = {
      {"HELLO", {"kind", "source_id", "version", "n_records", "dim_x", "dim_u", "moments"}},
      {"PARAMS", {"kind", "round", "round_seed", "segments"}},
      {"GRAD", {"kind", "round", "source_id", "segments", "objective"}},
      {"DEDUP_DIGESTS", {"kind", "source_id", "digests"}},
      {"DEDUP_DROPS", {"kind", "drop_indices"}},
      {"STOP", {"kind"}},
  };
  return registry;
}

std::vector<std::uint8_t> encode_frame(const nlohmann::json& msg) {
  const std::string body = msg.dump();
  if (body.size() > 0xffffffffull) throw ProtocolError("frame too large");
  const std::uint32_t len = static_cast<std::uint32_t>(body.size());
  std::vector<std::uint8_t> out(4 + body.size());
  out[0] = static_cast<std::uint8_t>((len >> 24) & 0xff);
  out[1] = static_cast<std::uint8_t>((len >> 16) & 0xff);
  out[2] = static_cast<std::uint8_t>((len >> 8) & 0xff);
  out[3] = static_cast<std::uint8_t>(len & 0xff);
  std::copy(body.begin(), body.end(), out.begin() + 4);
  return out;
}

nlohmann::json decode_frame(const std::vector<std::uint8_t>& frame) {
  if (frame.size() < 4) throw ProtocolError("short frame");
  const std::uint32_t len = (static_cast<std::uint32_t>(frame[0]) << 24) |
                            (static_cast<std::uint32_t>(frame[1]) << 16) |
                            (static_cast<std::uint32_t>(frame[2]) << 8) |
                            static_cast<std::uint32_t>(frame[3]);
  if (frame.size() != 4 + static_cast<std::size_t>(len)) throw ProtocolError("frame length mismatch");
  try {
    return nlohmann::json::parse(frame.begin() + 4, frame.end());
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("bad frame body: ") + e.what());
  }
}

nlohmann::json params_to_json(const ParameterVector& params) {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& seg : params.segments()) {
    segs.push_back({{"name", seg.name},
                    {"shape", seg.shape},
                    {"values", seg.values},
                    {"partition", seg.partition},
                    {"trainable", seg.trainable}});
  }
  return segs;
}

ParameterVector params_from_json(const nlohmann::json& j) {
  ParameterVector out;
  for (const auto& s : j) {
    ParamSegment seg;
    seg.name = s.at("name").get<std::string>();
    seg.shape = s.at("shape").get<std::vector<int>>();
    seg.values = s.at("values").get<std::vector<double>>();
    seg.partition = s.at("partition").get<std::string>();
    seg.trainable = s.at("trainable").get<bool>();
    out.add(std::move(seg));
  }
  return out;
}

nlohmann::json to_json(const HelloMsg& m) {
  return {{"kind", "HELLO"},       {"source_id", m.source_id}, {"version", m.version},
          {"n_records", m.info.n_records}, {"dim_x", m.info.dim_x}, {"dim_u", m.info.dim_u},
          {"moments", m.info.moments}};
}

nlohmann::json to_json(const ParamsMsg& m) {
  return {{"kind", "PARAMS"},
          {"round", m.round},
          {"round_seed", m.round_seed},
          {"segments", params_to_json(m.params)}};
}

nlohmann::json to_json(const GradMsg& m) {
  return {{"kind", "GRAD"},
          {"round", m.round},
          {"source_id", m.source_id},
          {"segments", params_to_json(m.segments)},
          {"objective", m.objective}};
}

nlohmann::json to_json(const DedupDigestsMsg& m) {
  return {{"kind", "DEDUP_DIGESTS"}, {"source_id", m.source_id}, {"digests", m.digests}};
}

nlohmann::json to_json(const DedupDropsMsg& m) {
  return {{"kind", "DEDUP_DROPS"}, {"drop_indices", m.drop_indices}};
}

nlohmann::json stop_message() { return {{"kind", "STOP"}}; }

std::string kind_of(const nlohmann::json& msg) {
  if (!msg.contains("kind")) throw ProtocolError("message without kind");
  return msg.at("kind").get<std::string>();
}

HelloMsg hello_from_json(const nlohmann::json& j) {
  HelloMsg m;
  m.source_id = j.at("source_id").get<int>();
  m.version = j.at("version").get<int>();
  m.info.source_id = m.source_id;
  m.info.n_records = j.at("n_records").get<int>();
  m.info.dim_x = j.at("dim_x").get<int>();
  m.info.dim_u = j.at("dim_u").get<int>();
  m.info.moments = j.at("moments").get<std::vector<double>>();
  return m;
}

ParamsMsg params_msg_from_json(const nlohmann::json& j) {
  ParamsMsg m;
  m.round = j.at("round").get<int>();
  m.round_seed = j.at("round_seed").get<std::uint64_t>();
  m.params = params_from_json(j.at("segments"));
  return m;
}

GradMsg grad_from_json(const nlohmann::json& j) {
  GradMsg m;
  m.round = j.at("round").get<int>();
  m.source_id = j.at("source_id").get<int>();
  m.segments = params_from_json(j.at("segments"));
  m.objective = j.at("objective").get<double>();
  return m;
}

DedupDigestsMsg dedup_digests_from_json(const nlohmann::json& j) {
  DedupDigestsMsg m;
  m.source_id = j.at("source_id").get<int>();
  m.digests = j.at("digests").get<std::vector<std::string>>();
  return m;
}

DedupDropsMsg dedup_drops_from_json(const nlohmann::json& j) {
  DedupDropsMsg m;
  m.drop_indices = j.at("drop_indices").get<std::vector<int>>();
  return m;
}

}  // namespace fedcausal
