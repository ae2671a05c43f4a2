#pragma once

// Wire protocol: length-prefixed frames (4-byte big-endian length + JSON
// body). Message kinds: HELLO, PARAMS, GRAD, DEDUP_DIGESTS, DEDUP_DROPS,
// STOP. No message kind carries record-level fields; the registry below is
// the schema of record for that invariant.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedcausal/params.hpp"

namespace fedcausal {

constexpr int kProtocolVersion = 1;

struct MessageFieldSchema {
  std::string kind;
  std::vector<std::string> fields;
};

const std::vector<MessageFieldSchema>& message_schema_registry();

// --- frame codec ---
std::vector<std::uint8_t> encode_frame(const nlohmann::json& msg);
nlohmann::json decode_frame(const std::vector<std::uint8_t>& frame);

// --- parameter (de)serialization ---
nlohmann::json params_to_json(const ParameterVector& params);
ParameterVector params_from_json(const nlohmann::json& j);

// --- typed messages ---
struct HelloMsg {
  int source_id = 0;
  int version = kProtocolVersion;
  SourceInfo info;
};

struct ParamsMsg {
  int round = 0;
  std::uint64_t round_seed = 0;
  ParameterVector params;
};

struct GradMsg {
  int round = 0;
  int source_id = 0;
  ParameterVector segments;
  double objective = 0.0;
};

struct DedupDigestsMsg {
  int source_id = 0;
  std::vector<std::string> digests;  // 64-char hex, 32 bytes each
};

struct DedupDropsMsg {
  std::vector<int> drop_indices;
};

nlohmann::json to_json(const HelloMsg& m);
nlohmann::json to_json(const ParamsMsg& m);
nlohmann::json to_json(const GradMsg& m);
nlohmann::json to_json(const DedupDigestsMsg& m);
nlohmann::json to_json(const DedupDropsMsg& m);
nlohmann::json stop_message();

std::string kind_of(const nlohmann::json& msg);
HelloMsg hello_from_json(const nlohmann::json& j);
ParamsMsg params_msg_from_json(const nlohmann::json& j);
GradMsg grad_from_json(const nlohmann::json& j);
DedupDigestsMsg dedup_digests_from_json(const nlohmann::json& j);
DedupDropsMsg dedup_drops_from_json(const nlohmann::json& j);

}  // namespace fedcausal
