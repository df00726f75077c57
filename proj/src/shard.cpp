#include "ee/shard.hpp"

#include <algorithm>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <thread>

#include "ee/error.hpp"
#include "ee/ops.hpp"
#include "ee/rng.hpp"

namespace ee {

namespace {

using nlohmann::json;

constexpr char kFrameMagic[4] = {'E', 'E', 'F', 'R'};

// Unbounded FIFO between one producer side and one consumer.
template <typename T>
class Channel {
 public:
  void push(T v) {
    {
      std::lock_guard lock(mu_);
      q_.push_back(std::move(v));
    }
    cv_.notify_one();
  }

  T pop() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !q_.empty(); });
    T v = std::move(q_.front());
    q_.pop_front();
    return v;
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<T> q_;
};

struct Job {
  bool stop = false;
  std::size_t step = 0;
  Bytes frame;
};

struct Reply {
  enum class Status { kOk, kCrashed, kError };
  Status status = Status::kOk;
  Bytes frame;
  ErrorKind kind = ErrorKind::kPipeline;
  std::string message;
};

std::span<const std::uint8_t> payload_bytes(std::span<const std::uint8_t> frame) {
  if (frame.size() < kFrameHeaderSize + 4) return {};
  return frame.subspan(kFrameHeaderSize, frame.size() - kFrameHeaderSize - 4);
}

ActivationFrame token_frame(std::uint64_t request_id, const std::vector<std::uint32_t>& ids) {
  ActivationFrame f{request_id, 0, static_cast<std::uint32_t>(ids.size()), 1, {}};
  f.payload.assign(ids.begin(), ids.end());
  return f;
}

std::vector<std::uint32_t> frame_ids(const ActivationFrame& f) {
  if (f.width != 1) throw Error(ErrorKind::kProtocol, "token frame must have width 1");
  std::vector<std::uint32_t> ids;
  for (double v : f.payload) {
    if (!(v >= 0.0 && v < 4294967296.0) || v != static_cast<double>(static_cast<std::uint32_t>(v))) {
      throw Error(ErrorKind::kProtocol, "token frame carries a non-integer id");
    }
    ids.push_back(static_cast<std::uint32_t>(v));
  }
  return ids;
}

// One shard's work: token frame or hidden state in, hidden state or logits out.
ActivationFrame run_shard(const ModelBundle& model, const ShardPlan& plan, const ActivationFrame& in) {
  const std::size_t k = in.shard_index;
  if (k >= plan.n_shards) {
    throw Error(ErrorKind::kProtocol, "frame addressed to shard " + std::to_string(k) + " of " +
                                          std::to_string(plan.n_shards));
  }
  Tensor2 x;
  if (k == 0) {
    x = embed(model, TokenSeq{frame_ids(in), Domain::kCiphertext});
  } else {
    x = Tensor2(in.seq_len, in.width, in.payload);
  }
  const auto [first, last] = plan.ranges[k];
  run_layers(model, x, first, last + 1);

  ActivationFrame out{in.request_id, static_cast<std::uint16_t>(k + 1), 0, 0, {}};
  if (k + 1 == plan.n_shards) {
    const Tensor2 logits = last_position_logits(model, x);
    out.seq_len = 1;
    out.width = static_cast<std::uint32_t>(logits.cols());
    out.payload.assign(logits.values().begin(), logits.values().end());
  } else {
    out.seq_len = static_cast<std::uint32_t>(x.rows());
    out.width = static_cast<std::uint32_t>(x.cols());
    out.payload.assign(x.values().begin(), x.values().end());
  }
  return out;
}

void node_main(std::size_t node, const ModelBundle& model, const ShardPlan& plan,
               const std::vector<NodeFailure>& failures, Channel<Job>& inbox, Channel<Reply>& broker) {
  for (;;) {
    Job job = inbox.pop();
    if (job.stop) return;
    const bool crash = std::any_of(failures.begin(), failures.end(), [&](const NodeFailure& f) {
      return f.node == node && f.step == job.step;
    });
    if (crash) {
      broker.push(Reply{Reply::Status::kCrashed, {}, ErrorKind::kPipeline, "node crashed"});
      return;
    }
    try {
      const ActivationFrame in = decode_frame(job.frame);
      broker.push(Reply{Reply::Status::kOk, encode_frame(run_shard(model, plan, in)), ErrorKind::kPipeline, {}});
    } catch (const Error& e) {
      broker.push(Reply{Reply::Status::kError, {}, e.kind(), e.what()});
    } catch (const std::exception& e) {
      broker.push(Reply{Reply::Status::kError, {}, ErrorKind::kPipeline, e.what()});
    }
  }
}

// Owns the node threads; stops and joins them on every exit path.
class NodePool {
 public:
  NodePool(std::size_t n, const ModelBundle& model, const ShardPlan& plan,
           const std::vector<NodeFailure>& failures)
      : inboxes_(n) {
    for (std::size_t i = 0; i < n; ++i) {
      threads_.emplace_back(node_main, i, std::cref(model), std::cref(plan), std::cref(failures),
                            std::ref(inboxes_[i]), std::ref(replies_));
    }
  }
  ~NodePool() {
    for (auto& inbox : inboxes_) inbox.push(Job{true, 0, {}});
    for (auto& t : threads_) t.join();
  }
  NodePool(const NodePool&) = delete;
  NodePool& operator=(const NodePool&) = delete;

  Reply call(std::size_t node, std::size_t step, Bytes frame) {
    inboxes_[node].push(Job{false, step, std::move(frame)});
    return replies_.pop();
  }

 private:
  std::deque<Channel<Job>> inboxes_;
  Channel<Reply> replies_;
  std::vector<std::thread> threads_;
};

std::string node_name(int node) { return node == kClientNode ? "client" : "node" + std::to_string(node); }

bool contains_run(const std::vector<std::uint32_t>& hay, const std::vector<std::uint32_t>& needle) {
  if (needle.empty()) return false;
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

}  // namespace

void ShardPlan::validate(const ModelConfig& config) const {
  if (n_shards == 0 || ranges.size() != n_shards || placement.size() != n_shards) {
    throw Error(ErrorKind::kConfig, "shard plan sizes disagree");
  }
  std::size_t next = 0;
  for (const auto& [first, last] : ranges) {
    if (first != next || last < first) throw Error(ErrorKind::kConfig, "shard ranges are not contiguous");
    next = last + 1;
  }
  if (next != config.n_layers) {
    throw Error(ErrorKind::kConfig, "shard ranges cover " + std::to_string(next) + " of " +
                                        std::to_string(config.n_layers) + " layers");
  }
  std::vector<std::size_t> nodes = placement;
  std::sort(nodes.begin(), nodes.end());
  if (std::adjacent_find(nodes.begin(), nodes.end()) != nodes.end()) {
    throw Error(ErrorKind::kConfig, "two shards placed on one node");
  }
}

ShardPlan plan_shards(const ModelConfig& config, std::size_t n) {
  if (n == 0 || n > config.n_layers) {
    throw Error(ErrorKind::kConfig, "cannot split " + std::to_string(config.n_layers) + " layers into " +
                                        std::to_string(n) + " shards");
  }
  ShardPlan plan;
  plan.n_shards = n;
  const std::size_t base = config.n_layers / n, extra = config.n_layers % n;
  std::size_t first = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = base + (i < extra ? 1 : 0);
    plan.ranges.emplace_back(first, first + len - 1);
    plan.placement.push_back(i);
    first += len;
  }
  return plan;
}

Bytes encode_frame(const ActivationFrame& f) {
  if (f.payload.size() != static_cast<std::size_t>(f.seq_len) * f.width) {
    throw Error(ErrorKind::kShape, "frame payload has " + std::to_string(f.payload.size()) +
                                       " values, header says " + std::to_string(f.seq_len) + " x " +
                                       std::to_string(f.width));
  }
  ByteWriter w;
  w.put_text(std::string_view(kFrameMagic, 4));
  w.put_u8(kFrameVersion);
  w.put_u64(f.request_id);
  w.put_u16(f.shard_index);
  w.put_u32(f.seq_len);
  w.put_u32(f.width);
  for (double v : f.payload) w.put_f64(v);
  w.put_u32(crc32(w.bytes()));
  return std::move(w).take();
}

ActivationFrame decode_frame(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.get_bytes(4);
  if (!std::equal(magic.begin(), magic.end(), kFrameMagic)) throw FormatError("bad frame magic", 0);
  const std::uint8_t version = r.get_u8();
  if (version != kFrameVersion) {
    throw FormatError("unsupported frame version " + std::to_string(version), 4);
  }
  ActivationFrame f;
  f.request_id = r.get_u64();
  f.shard_index = r.get_u16();
  f.seq_len = r.get_u32();
  f.width = r.get_u32();
  const std::uint64_t n = static_cast<std::uint64_t>(f.seq_len) * f.width;
  if (r.remaining() != n * 8 + 4) {
    throw FormatError("frame body is " + std::to_string(r.remaining()) + " bytes, header implies " +
                          std::to_string(n * 8 + 4),
                      r.offset());
  }
  f.payload.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) f.payload.push_back(r.get_f64());
  const std::size_t body_end = r.offset();
  const std::uint32_t stored = r.get_u32();
  if (stored != crc32(bytes.first(body_end))) {
    throw Error(ErrorKind::kIntegrity, "frame checksum mismatch");
  }
  return f;
}

PipelineResult run_pipeline(const ModelBundle& model, const ShardPlan& plan, const BrokerConfig& broker,
                            const TokenSeq& prompt, std::size_t n_new) {
  if (model.domain() != Domain::kCiphertext) {
    throw Error(ErrorKind::kDomain, "shard pipeline serves ciphertext models only");
  }
  if (prompt.domain != Domain::kCiphertext) {
    throw Error(ErrorKind::kDomain, "shard pipeline expects a ciphertext prompt");
  }
  if (prompt.size() == 0) throw Error(ErrorKind::kShape, "empty prompt");
  plan.validate(model.config());
  if (broker.latency_min_ms < 0.0 || broker.latency_max_ms < broker.latency_min_ms) {
    throw Error(ErrorKind::kConfig, "bad latency range");
  }

  const std::size_t n_nodes = std::max(broker.n_nodes, plan.n_shards);
  for (auto id : plan.placement) {
    if (id >= n_nodes) throw Error(ErrorKind::kConfig, "shard placed on unknown node " + std::to_string(id));
  }

  PipelineResult result;
  result.transcript.plan = plan;
  ShardPlan live = plan;
  std::vector<bool> alive(n_nodes, true);
  Rng latency(mix_seed(broker.seed, 0x6c6174));
  const std::uint64_t request_id = mix_seed(broker.seed, fnv1a64(encode_frame(token_frame(0, prompt.ids))));
  double clock = 0.0;
  bool corrupted = false;

  NodePool pool(n_nodes, model, plan, broker.failures);
  std::vector<std::uint32_t> seq = prompt.ids;

  auto record = [&](std::size_t step, int from, int to, const Bytes& frame) -> TranscriptEntry& {
    TranscriptEntry e;
    e.kind = "frame";
    e.step = step;
    e.from = from;
    e.to = to;
    e.t_send_ms = clock;
    clock += broker.latency_min_ms + (broker.latency_max_ms - broker.latency_min_ms) * latency.uniform();
    e.t_recv_ms = clock;
    ByteReader r(frame);
    r.get_bytes(5);
    e.request_id = r.get_u64();
    e.shard_index = r.get_u16();
    e.seq_len = r.get_u32();
    e.width = r.get_u32();
    e.payload_hash = fnv1a64(payload_bytes(frame));
    e.frame = frame;
    result.transcript.entries.push_back(std::move(e));
    return result.transcript.entries.back();
  };

  for (std::size_t step = 0; step < n_new; ++step) {
    Bytes frame = encode_frame(token_frame(request_id, seq));
    int from = kClientNode;
    std::size_t shard = 0;
    for (;;) {
      const int to = shard == plan.n_shards ? kClientNode : static_cast<int>(live.placement[shard]);
      if (broker.corruption && !corrupted && broker.corruption->step == step && broker.corruption->hop == shard) {
        const std::size_t byte = kFrameHeaderSize + broker.corruption->bit / 8;
        if (byte + 4 >= frame.size()) throw Error(ErrorKind::kConfig, "corruption bit outside payload");
        frame[byte] ^= static_cast<std::uint8_t>(1u << (broker.corruption->bit % 8));
        corrupted = true;
      }
      record(step, from, to, frame);

      if (to == kClientNode) {
        const ActivationFrame logits = decode_frame(frame);
        seq.push_back(static_cast<std::uint32_t>(argmax(logits.payload)));
        break;
      }

      Reply reply = pool.call(static_cast<std::size_t>(to), step, frame);
      if (reply.status == Reply::Status::kCrashed) {
        alive[static_cast<std::size_t>(to)] = false;
        clock += broker.failure_timeout_ms;
        std::optional<std::size_t> spare;
        for (std::size_t id = 0; id < n_nodes && !spare; ++id) {
          if (alive[id] && std::find(live.placement.begin(), live.placement.end(), id) == live.placement.end()) {
            spare = id;
          }
        }
        if (!spare) {
          throw Error(ErrorKind::kPipeline, node_name(to) + " crashed at step " + std::to_string(step) +
                                                " and no spare node is available for shard " +
                                                std::to_string(shard));
        }
        TranscriptEntry e;
        e.kind = "reassign";
        e.step = step;
        e.from = to;
        e.to = static_cast<int>(*spare);
        e.t_send_ms = e.t_recv_ms = clock;
        e.shard = shard;
        result.transcript.entries.push_back(std::move(e));
        live.placement[shard] = *spare;
        ++result.reassignments;
        continue;  // resend the same frame to the replacement
      }
      if (reply.status == Reply::Status::kError) {
        throw Error(reply.kind, node_name(to) + " failed on shard " + std::to_string(shard) + ": " + reply.message);
      }
      frame = std::move(reply.frame);
      from = to;
      ++shard;
    }
  }

  result.output = TokenSeq{std::move(seq), Domain::kCiphertext};
  result.virtual_ms = clock;
  return result;
}

std::string Transcript::to_jsonl() const {
  std::string out;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    json j = {{"i", i},
              {"kind", e.kind},
              {"step", e.step},
              {"from", node_name(e.from)},
              {"to", node_name(e.to)},
              {"t_send_ms", e.t_send_ms},
              {"t_recv_ms", e.t_recv_ms}};
    if (e.kind == "frame") {
      j["request_id"] = hex64(e.request_id);
      j["shard_index"] = e.shard_index;
      j["seq_len"] = e.seq_len;
      j["width"] = e.width;
      j["frame_bytes"] = e.frame.size();
      j["payload_fnv"] = hex64(e.payload_hash);
    } else {
      j["shard"] = e.shard;
    }
    out += j.dump() + "\n";
  }
  return out;
}

std::uint64_t Transcript::hash() const { return fnv1a64(to_jsonl()); }

void Transcript::save(const std::filesystem::path& path) const { write_text(path, to_jsonl()); }

AuditResult audit_blindness(const Transcript& transcript, const PlaintextContext& ctx) {
  AuditResult audit;
  auto flag = [&](std::size_t i, std::string what) {
    audit.pass = false;
    if (audit.offending_entries.empty() || audit.offending_entries.back() != i) audit.offending_entries.push_back(i);
    audit.findings.push_back("entry " + std::to_string(i) + ": " + std::move(what));
  };

  if (transcript.entries.empty()) {
    audit.warnings.push_back("empty transcript: nothing to audit");
    return audit;
  }
  if (ctx.model == nullptr) audit.warnings.push_back("no plaintext model: activation frames not compared");

  const std::size_t n_shards = transcript.plan.n_shards;
  bool first_token_frame = true;
  for (std::size_t i = 0; i < transcript.entries.size(); ++i) {
    const auto& e = transcript.entries[i];
    if (e.kind != "frame") continue;
    ActivationFrame f;
    try {
      f = decode_frame(e.frame);
    } catch (const Error& err) {
      audit.warnings.push_back("entry " + std::to_string(i) + " does not decode: " + err.what());
      continue;
    }

    if (f.shard_index == 0) {
      std::vector<std::uint32_t> ids;
      try {
        ids = frame_ids(f);
      } catch (const Error&) {
        audit.warnings.push_back("entry " + std::to_string(i) + " is not a token frame");
        continue;
      }
      if (first_token_frame && ids == ctx.prompt.ids) flag(i, "first-shard input equals the plaintext prompt");
      first_token_frame = false;
      if (contains_run(ids, ctx.prompt.ids)) flag(i, "token frame contains the plaintext prompt");
      if (contains_run(ids, ctx.output.ids)) flag(i, "token frame contains the plaintext output");
      continue;
    }

    if (ctx.model == nullptr || e.step > ctx.output.size() || f.shard_index > n_shards) continue;
    // Plaintext counterpart of this frame at the same step and boundary.
    std::vector<std::uint32_t> plain = ctx.prompt.ids;
    plain.insert(plain.end(), ctx.output.ids.begin(), ctx.output.ids.begin() + static_cast<std::ptrdiff_t>(e.step));
    Tensor2 x = embed(*ctx.model, TokenSeq{plain, Domain::kPlaintext});
    run_layers(*ctx.model, x, 0, transcript.plan.ranges[f.shard_index - 1].second + 1);
    if (f.shard_index == n_shards) x = last_position_logits(*ctx.model, x);
    const auto expect = x.values();
    if (f.payload.size() == expect.size() && std::equal(f.payload.begin(), f.payload.end(), expect.begin())) {
      flag(i, f.shard_index == n_shards ? "logit frame equals plaintext logits"
                                        : "activation frame equals plaintext activations");
    }
  }
  return audit;
}

json to_json(const AuditResult& a) {
  return {{"pass", a.pass}, {"offending_entries", a.offending_entries}, {"findings", a.findings},
          {"warnings", a.warnings}};
}

}  // namespace ee
