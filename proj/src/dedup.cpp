#include <openssl/sha.h>

#include <algorithm>

#include "fedcausal/federation.hpp"
#include "fedcausal/rng.hpp"

namespace fedcausal {

std::string key_digest(const std::string& salt, const std::string& key) {
  const std::string payload = salt + "\x1f" + key;
  unsigned char out[SHA256_DIGEST_LENGTH];
  SHA256(reinterpret_cast<const unsigned char*>(payload.data()), payload.size(), out);
  static const char* hex = "0123456789abcdef";
  std::string encoded(64, '0');
  for (int i = 0; i < SHA256_DIGEST_LENGTH; ++i) {
    encoded[2 * i] = hex[out[i] >> 4];
    encoded[2 * i + 1] = hex[out[i] & 0xf];
  }
  return encoded;
}

std::vector<std::string> shard_digests(const SourceDataset& shard, const std::string& salt) {
  std::vector<std::string> out;
  out.reserve(shard.size());
  for (const Record& rec : shard.records()) out.push_back(key_digest(salt, rec.pk));
  return out;
}

std::map<int, std::vector<int>> dedup_decide(
    const std::map<int, std::vector<std::string>>& per_source_digests, int keep_limit,
    std::uint64_t seed) {
  if (keep_limit < 1) throw ConfigError("dedup: keep_limit must be >= 1");
  // digest -> (source_id -> record indices)
  std::map<std::string, std::map<int, std::vector<int>>> where;
  for (const auto& [sid, digests] : per_source_digests)
    for (std::size_t i = 0; i < digests.size(); ++i)
      where[digests[i]][sid].push_back(static_cast<int>(i));

  Rng rng(seed);
  std::map<int, std::vector<int>> drops;
  for (const auto& [digest, holders] : where) {
    if (static_cast<int>(holders.size()) <= keep_limit) continue;
    std::vector<int> ids;
    for (const auto& [sid, idx] : holders) ids.push_back(sid);
    rng.shuffle(ids);
    // ids[0..keep_limit) retain the record; everyone else drops it.
    for (std::size_t k = keep_limit; k < ids.size(); ++k) {
      const auto& idx = holders.at(ids[k]);
      auto& list = drops[ids[k]];
      list.insert(list.end(), idx.begin(), idx.end());
    }
  }
  for (auto& [sid, list] : drops) std::sort(list.begin(), list.end());
  return drops;
}

}  // namespace fedcausal
