#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ee/bytes.hpp"
#include "ee/model.hpp"

namespace ee {

struct ShardPlan {
  std::size_t n_shards = 0;
  // Inclusive layer ranges, contiguous and in order.
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  // shard -> node id
  std::vector<std::size_t> placement;

  void validate(const ModelConfig& config) const;
};

// Balanced split; earlier shards take the remainder. Shard i starts on node i.
ShardPlan plan_shards(const ModelConfig& config, std::size_t n);

// Wire frame. Token frames carry ids as f64 with width 1; activation frames
// carry the residual stream with width d_model; the frame back to the client
// has shard_index == n_shards and carries last-position logits.
struct ActivationFrame {
  std::uint64_t request_id = 0;
  std::uint16_t shard_index = 0;
  std::uint32_t seq_len = 0;
  std::uint32_t width = 0;
  std::vector<double> payload;

  friend bool operator==(const ActivationFrame&, const ActivationFrame&) = default;
};

inline constexpr std::uint8_t kFrameVersion = 1;
inline constexpr std::size_t kFrameHeaderSize = 4 + 1 + 8 + 2 + 4 + 4;

Bytes encode_frame(const ActivationFrame& frame);
// Truncation, bad magic or version -> format error; CRC mismatch -> integrity.
ActivationFrame decode_frame(std::span<const std::uint8_t> bytes);

struct NodeFailure {
  std::size_t node = 0;
  std::size_t step = 0;  // decode step at which the node crashes on receipt
};

struct FrameCorruption {
  std::size_t step = 0;
  std::size_t hop = 0;  // 0 = client -> first shard
  std::size_t bit = 0;  // payload bit to flip
};

struct BrokerConfig {
  std::uint64_t seed = 0;
  double latency_min_ms = 1.0;
  double latency_max_ms = 5.0;
  double failure_timeout_ms = 50.0;
  // Nodes beyond the plan's placement are spares, taken in id order.
  std::size_t n_nodes = 0;
  std::vector<NodeFailure> failures;
  std::optional<FrameCorruption> corruption;
};

inline constexpr int kClientNode = -1;

struct TranscriptEntry {
  std::string kind;  // "frame" or "reassign"
  std::size_t step = 0;
  int from = kClientNode;
  int to = kClientNode;
  double t_send_ms = 0.0;
  double t_recv_ms = 0.0;
  // frame entries
  std::uint64_t request_id = 0;
  std::uint16_t shard_index = 0;
  std::uint32_t seq_len = 0;
  std::uint32_t width = 0;
  std::uint64_t payload_hash = 0;
  Bytes frame;  // kept in memory for the audit, hashed on disk
  // reassign entries
  std::size_t shard = 0;
};

struct Transcript {
  ShardPlan plan;
  std::vector<TranscriptEntry> entries;

  // One JSON object per line; payloads appear only as hashes.
  std::string to_jsonl() const;
  std::uint64_t hash() const;
  void save(const std::filesystem::path& path) const;
};

struct PipelineResult {
  TokenSeq output;
  Transcript transcript;
  std::size_t reassignments = 0;
  double virtual_ms = 0.0;
};

// Greedy decoding through the shard pipeline, one full pass per new token.
// Output is bit-identical to greedy_decode on the same ciphertext model.
PipelineResult run_pipeline(const ModelBundle& enc_model, const ShardPlan& plan,
                            const BrokerConfig& broker, const TokenSeq& prompt, std::size_t n_new);

struct PlaintextContext {
  TokenSeq prompt;
  TokenSeq output;  // generated continuation only
  const ModelBundle* model = nullptr;
};

struct AuditResult {
  bool pass = true;
  std::vector<std::size_t> offending_entries;
  std::vector<std::string> findings;
  std::vector<std::string> warnings;
};

// Flags token frames containing the plaintext prompt or output as a
// contiguous run, a first token frame equal to the plaintext prompt, and
// activation or logit frames equal to their plaintext counterparts.
AuditResult audit_blindness(const Transcript& transcript, const PlaintextContext& ctx);

nlohmann::json to_json(const AuditResult& audit);

}  // namespace ee
