#include "ee/key.hpp"

#include <cmath>

#include "ee/error.hpp"
#include "ee/rng.hpp"

namespace ee {

namespace {

using nlohmann::json;

constexpr std::string_view kKeyMagic = "EEKEY001";

void require_size(const PermTable& p, std::size_t n, const std::string& what) {
  if (p.size() != n) {
    throw Error(ErrorKind::kPairing, what + " has size " + std::to_string(p.size()) +
                                         ", expected " + std::to_string(n));
  }
}

template <typename Fn>
void for_each_table(const EEKey& key, Fn&& fn) {
  fn(key.vocab_perm);
  fn(key.resid_perm);
  for (std::size_t l = 0; l < key.ffn_perms.size(); ++l) {
    fn(key.ffn_perms[l]);
    for (const auto& p : key.qk_perms[l]) fn(p);
    for (const auto& p : key.v_perms[l]) fn(p);
  }
}

Bytes table_payload(const EEKey& key) {
  ByteWriter w;
  for_each_table(key, [&](const PermTable& p) {
    for (auto v : p.map()) w.put_u32(v);
  });
  return std::move(w).take();
}

EEKey make_key(const ModelConfig& config, std::uint64_t seed, bool identity) {
  config.validate();
  Rng rng(seed);
  auto draw = [&](std::size_t n) {
    return identity ? PermTable::identity(n) : PermTable(rng.permutation(n));
  };
  EEKey key;
  key.seed = identity ? 0 : seed;
  key.identity = identity;
  key.model_fingerprint = config.fingerprint();
  key.vocab_perm = draw(config.vocab_size);
  key.resid_perm = draw(config.d_model);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    key.ffn_perms.push_back(draw(config.d_ff));
    std::vector<PermTable> qk, v;
    for (std::size_t h = 0; h < config.n_heads; ++h) qk.push_back(draw(config.d_head()));
    for (std::size_t h = 0; h < config.n_heads; ++h) v.push_back(draw(config.d_head()));
    key.qk_perms.push_back(std::move(qk));
    key.v_perms.push_back(std::move(v));
  }
  return key;
}

void check_pairing(const EEKey& key, const ModelBundle& model) {
  key.check_matches(model.config());
  if (model.domain() == Domain::kCiphertext && model.key_id() != key.key_id()) {
    throw Error(ErrorKind::kPairing, "ciphertext model was produced by key " +
                                         hex64(model.key_id()) + ", not " + hex64(key.key_id()));
  }
}

}  // namespace

std::uint64_t EEKey::key_id() const { return fnv1a64(table_payload(*this)); }

void EEKey::check_matches(const ModelConfig& config) const {
  if (model_fingerprint != config.fingerprint()) {
    throw Error(ErrorKind::kPairing, "key fingerprint " + hex64(model_fingerprint) +
                                         " does not match model config " +
                                         hex64(config.fingerprint()));
  }
  require_size(vocab_perm, config.vocab_size, "vocab_perm");
  require_size(resid_perm, config.d_model, "resid_perm");
  if (ffn_perms.size() != config.n_layers || qk_perms.size() != config.n_layers ||
      v_perms.size() != config.n_layers) {
    throw Error(ErrorKind::kPairing, "key layer count does not match config");
  }
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    require_size(ffn_perms[l], config.d_ff, "ffn_perm");
    if (qk_perms[l].size() != config.n_heads || v_perms[l].size() != config.n_heads) {
      throw Error(ErrorKind::kPairing, "key head count does not match config");
    }
    for (const auto& p : qk_perms[l]) require_size(p, config.d_head(), "qk_perm");
    for (const auto& p : v_perms[l]) require_size(p, config.d_head(), "v_perm");
  }
}

EEKey keygen(const ModelConfig& config, std::uint64_t seed) { return make_key(config, seed, false); }

EEKey identity_key(const ModelConfig& config) { return make_key(config, 0, true); }

TokenSeq encrypt_tokens(const EEKey& key, const TokenSeq& plain) {
  if (plain.domain != Domain::kPlaintext) {
    throw Error(ErrorKind::kDomain, "encrypt_tokens expects plaintext tokens");
  }
  return {key.vocab_perm.apply(plain.ids), Domain::kCiphertext};
}

TokenSeq decrypt_tokens(const EEKey& key, const TokenSeq& cipher) {
  if (cipher.domain != Domain::kCiphertext) {
    throw Error(ErrorKind::kDomain, "decrypt_tokens expects ciphertext tokens");
  }
  return {key.vocab_perm.inverse().apply(cipher.ids), Domain::kPlaintext};
}

ModelBundle encrypt_model(const EEKey& key, const ModelBundle& plain) {
  if (plain.domain() != Domain::kPlaintext) {
    throw Error(ErrorKind::kDomain, "model is already in the ciphertext domain");
  }
  const ModelConfig& cfg = plain.config();
  key.check_matches(cfg);

  const PermTable none;
  const PermTable& vocab = key.vocab_perm;
  const PermTable& resid = key.resid_perm;
  std::map<std::string, Tensor2> out;
  auto put = [&](const std::string& name, const PermTable& rows, const PermTable& cols) {
    out.emplace(name, permute_axes(plain.tensor(name), rows, cols));
  };
  auto put_norm = [&](const std::string& prefix) {
    put(prefix + ".gain", none, resid);
    if (cfg.norm == NormKind::kLayerNorm) put(prefix + ".bias", none, resid);
  };

  put("tok_emb", vocab, resid);
  put("pos_emb", none, resid);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const PermTable qk = block_diagonal(key.qk_perms[l]);
    const PermTable v = block_diagonal(key.v_perms[l]);
    const PermTable& ffn = key.ffn_perms[l];
    put_norm(layer_tensor(l, "ln1"));
    put(layer_tensor(l, "attn.wq"), qk, resid);
    put(layer_tensor(l, "attn.bq"), none, qk);
    put(layer_tensor(l, "attn.wk"), qk, resid);
    put(layer_tensor(l, "attn.bk"), none, qk);
    put(layer_tensor(l, "attn.wv"), v, resid);
    put(layer_tensor(l, "attn.bv"), none, v);
    put(layer_tensor(l, "attn.wo"), resid, v);
    put(layer_tensor(l, "attn.bo"), none, resid);
    put_norm(layer_tensor(l, "ln2"));
    put(layer_tensor(l, "ffn.w1"), ffn, resid);
    put(layer_tensor(l, "ffn.b1"), none, ffn);
    put(layer_tensor(l, "ffn.w2"), resid, ffn);
    put(layer_tensor(l, "ffn.b2"), none, resid);
  }
  put_norm("final_norm");
  put("lm_head.weight", vocab, resid);
  put("lm_head.bias", none, vocab);
  return ModelBundle(cfg, Domain::kCiphertext, std::move(out), key.key_id());
}

Tensor2 decrypt_logits(const EEKey& key, const Tensor2& logits) {
  if (logits.cols() != key.vocab_perm.size()) {
    throw Error(ErrorKind::kShape, "logits " + logits.shape_string() + " vs vocabulary of " +
                                       std::to_string(key.vocab_perm.size()));
  }
  return permute_axes(logits, PermTable(), key.vocab_perm.inverse());
}

EquivarianceReport verify_equivariance(const ModelBundle& plain, const EEKey& key,
                                       std::span<const TokenSeq> prompts, std::size_t n_new,
                                       double tol) {
  check_pairing(key, plain);
  const ModelBundle cipher = encrypt_model(key, plain);
  EquivarianceReport report;
  report.n_prompts = prompts.size();
  report.token_match = true;
  report.recoverability_ok = true;
  for (const auto& prompt : prompts) {
    const TokenSeq enc = encrypt_tokens(key, prompt);
    if (decrypt_tokens(key, enc) != prompt) report.recoverability_ok = false;

    const Tensor2 vi = forward(plain, prompt);
    const Tensor2 ee = decrypt_logits(key, forward(cipher, enc));
    for (std::size_t i = 0; i < vi.size(); ++i) {
      report.max_abs_logit_diff =
          std::max(report.max_abs_logit_diff, std::abs(vi.values()[i] - ee.values()[i]));
    }
    if (n_new > 0) {
      const TokenSeq vi_out = greedy_decode(plain, prompt, n_new);
      const TokenSeq ee_out = decrypt_tokens(key, greedy_decode(cipher, enc, n_new));
      if (vi_out != ee_out) report.token_match = false;
    }
  }
  report.within_tolerance = report.max_abs_logit_diff <= tol;
  return report;
}

Bytes encode_key(const EEKey& key) {
  const std::size_t n_layers = key.ffn_perms.size();
  const std::size_t n_heads = n_layers ? key.qk_perms[0].size() : 0;
  const json header = {
      {"version", key.version},
      {"seed", hex64(key.seed)},
      {"model_fingerprint", hex64(key.model_fingerprint)},
      {"identity", key.identity},
      {"vocab_size", key.vocab_perm.size()},
      {"d_model", key.resid_perm.size()},
      {"n_layers", n_layers},
      {"n_heads", n_heads},
      {"d_head", n_heads ? key.qk_perms[0][0].size() : 0},
      {"d_ff", n_layers ? key.ffn_perms[0].size() : 0},
  };
  const std::string text = header.dump();
  const Bytes tables = table_payload(key);

  ByteWriter out;
  out.put_text(kKeyMagic);
  out.put_u32(static_cast<std::uint32_t>(text.size()));
  out.put_text(text);
  out.put_bytes(tables);
  out.put_u32(crc32(tables));
  return std::move(out).take();
}

EEKey decode_key(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  const auto magic = in.get_bytes(kKeyMagic.size());
  if (!std::equal(magic.begin(), magic.end(), kKeyMagic.begin())) {
    throw FormatError("bad key magic", 0);
  }
  const std::uint32_t header_len = in.get_u32();
  const std::size_t header_at = in.offset();
  const auto header_bytes = in.get_bytes(header_len);
  json header;
  try {
    header = json::parse(header_bytes.begin(), header_bytes.end());
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed key header: ") + e.what(), header_at);
  }

  EEKey key;
  std::size_t vocab, d_model, n_layers, n_heads, d_head, d_ff;
  try {
    key.version = header.at("version").get<std::uint32_t>();
    if (key.version != kKeyFormatVersion) {
      throw Error(ErrorKind::kVersion, "unsupported key format version " +
                                           std::to_string(key.version));
    }
    key.seed = parse_hex64(header.at("seed").get<std::string>());
    key.model_fingerprint = parse_hex64(header.at("model_fingerprint").get<std::string>());
    key.identity = header.at("identity").get<bool>();
    vocab = header.at("vocab_size").get<std::size_t>();
    d_model = header.at("d_model").get<std::size_t>();
    n_layers = header.at("n_layers").get<std::size_t>();
    n_heads = header.at("n_heads").get<std::size_t>();
    d_head = header.at("d_head").get<std::size_t>();
    d_ff = header.at("d_ff").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("incomplete key header: ") + e.what(), header_at);
  }

  const std::size_t n_indices = vocab + d_model + n_layers * (d_ff + 2 * n_heads * d_head);
  const std::size_t tables_at = in.offset();
  if (in.remaining() != n_indices * 4 + 4) {
    throw FormatError("key payload length does not match header table sizes", tables_at);
  }
  const auto tables = in.get_bytes(n_indices * 4);
  const std::uint32_t stored_crc = in.get_u32();
  if (crc32(tables) != stored_crc) {
    throw Error(ErrorKind::kIntegrity, "key table checksum mismatch");
  }

  ByteReader tr(tables);
  auto read_table = [&](std::size_t n) {
    std::vector<std::uint32_t> map(n);
    for (auto& v : map) v = tr.get_u32();
    if (!is_bijection(map)) throw Error(ErrorKind::kIntegrity, "key table is not a bijection");
    return PermTable(std::move(map));
  };
  key.vocab_perm = read_table(vocab);
  key.resid_perm = read_table(d_model);
  for (std::size_t l = 0; l < n_layers; ++l) {
    key.ffn_perms.push_back(read_table(d_ff));
    std::vector<PermTable> qk, v;
    for (std::size_t h = 0; h < n_heads; ++h) qk.push_back(read_table(d_head));
    for (std::size_t h = 0; h < n_heads; ++h) v.push_back(read_table(d_head));
    key.qk_perms.push_back(std::move(qk));
    key.v_perms.push_back(std::move(v));
  }
  return key;
}

void save_key(const EEKey& key, const std::filesystem::path& path) {
  write_file(path, encode_key(key));
}

EEKey load_key(const std::filesystem::path& path) { return decode_key(read_file(path)); }

}  // namespace ee
