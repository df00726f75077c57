#include "ee/model.hpp"

#include <cmath>
#include <limits>

#include "ee/error.hpp"
#include "ee/rng.hpp"

namespace ee {

namespace {

using nlohmann::json;

constexpr std::string_view kModelMagic = "EEMODEL1";
constexpr double kInitStd = 0.02;

std::span<const double> vec(const ModelBundle& m, const std::string& name) {
  return m.tensor(name).values();
}

Tensor2 normalize(const ModelBundle& m, const Tensor2& x, const std::string& prefix) {
  const auto& cfg = m.config();
  if (cfg.norm == NormKind::kLayerNorm) {
    return layer_norm(x, vec(m, prefix + ".gain"), vec(m, prefix + ".bias"), cfg.norm_eps);
  }
  return rms_norm(x, vec(m, prefix + ".gain"), cfg.norm_eps);
}

// Causal multi-head attention over already-projected q, k, v (seq x d_model).
Tensor2 causal_attention(const Tensor2& q, const Tensor2& k, const Tensor2& v,
                         std::size_t n_heads) {
  const std::size_t seq = q.rows();
  const std::size_t d_head = q.cols() / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_head));
  constexpr double kMasked = -std::numeric_limits<double>::infinity();

  Tensor2 out(seq, q.cols());
  Tensor2 scores(seq, seq);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t base = h * d_head;
    for (std::size_t i = 0; i < seq; ++i) {
      for (std::size_t j = 0; j < seq; ++j) {
        if (j > i) {
          scores(i, j) = kMasked;
          continue;
        }
        double acc = 0.0;
        for (std::size_t c = 0; c < d_head; ++c) acc += q(i, base + c) * k(j, base + c);
        scores(i, j) = acc * scale;
      }
    }
    const Tensor2 weights = softmax_rows(scores);
    for (std::size_t i = 0; i < seq; ++i) {
      for (std::size_t c = 0; c < d_head; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j <= i; ++j) acc += weights(i, j) * v(j, base + c);
        out(i, base + c) = acc;
      }
    }
  }
  return out;
}

void check_tokens(const ModelBundle& model, const TokenSeq& tokens) {
  if (tokens.domain != model.domain()) {
    throw Error(ErrorKind::kDomain, std::string(domain_name(tokens.domain)) +
                                        " tokens given to a " +
                                        std::string(domain_name(model.domain())) + " model");
  }
  const auto& cfg = model.config();
  if (tokens.size() > cfg.max_seq_len) {
    throw Error(ErrorKind::kShape, "sequence length " + std::to_string(tokens.size()) +
                                       " exceeds max_seq_len " +
                                       std::to_string(cfg.max_seq_len));
  }
  for (auto id : tokens.ids) {
    if (id >= cfg.vocab_size) {
      throw Error(ErrorKind::kRange, "token id " + std::to_string(id) +
                                         " outside vocabulary of " +
                                         std::to_string(cfg.vocab_size));
    }
  }
}

}  // namespace

std::string_view domain_name(Domain d) {
  return d == Domain::kPlaintext ? "plaintext" : "ciphertext";
}

Domain parse_domain(std::string_view name) {
  if (name == "plaintext") return Domain::kPlaintext;
  if (name == "ciphertext") return Domain::kCiphertext;
  throw Error(ErrorKind::kFormat, "unknown domain tag '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::kConfig, what); };
  if (vocab_size < 2) fail("vocab_size must be at least 2");
  if (d_model == 0) fail("d_model must be positive");
  if (n_heads == 0) fail("n_heads must be positive");
  if (d_model % n_heads != 0) {
    fail("n_heads (" + std::to_string(n_heads) + ") does not divide d_model (" +
         std::to_string(d_model) + ")");
  }
  if (n_layers == 0) fail("n_layers must be positive");
  if (d_ff == 0) fail("d_ff must be positive");
  if (max_seq_len == 0) fail("max_seq_len must be at least 1");
  if (pos_kind != "learned-absolute") fail("unsupported pos_kind '" + pos_kind + "'");
  if (!(norm_eps >= 0.0) || !std::isfinite(norm_eps)) fail("norm_eps must be finite and >= 0");
}

std::uint64_t ModelConfig::fingerprint() const {
  json j = *this;
  return fnv1a64(j.dump());
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"vocab_size", c.vocab_size},
           {"d_model", c.d_model},
           {"n_layers", c.n_layers},
           {"n_heads", c.n_heads},
           {"d_head", c.d_head()},
           {"d_ff", c.d_ff},
           {"max_seq_len", c.max_seq_len},
           {"norm", c.norm == NormKind::kLayerNorm ? "layernorm" : "rmsnorm"},
           {"act", std::string(activation_name(c.act))},
           {"pos_kind", c.pos_kind},
           {"norm_eps", c.norm_eps}};
}

void from_json(const json& j, ModelConfig& c) {
  try {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    const std::string norm = j.value("norm", "layernorm");
    if (norm == "layernorm") {
      c.norm = NormKind::kLayerNorm;
    } else if (norm == "rmsnorm") {
      c.norm = NormKind::kRmsNorm;
    } else {
      throw Error(ErrorKind::kConfig, "unknown norm kind '" + norm + "'");
    }
    c.act = parse_activation(j.value("act", "gelu"));
    c.pos_kind = j.value("pos_kind", "learned-absolute");
    c.norm_eps = j.value("norm_eps", c.norm == NormKind::kLayerNorm ? kLayerNormEps : kRmsNormEps);
    if (j.contains("d_head") && c.n_heads != 0 &&
        j.at("d_head").get<std::size_t>() * c.n_heads != c.d_model) {
      throw Error(ErrorKind::kConfig, "d_head x n_heads must equal d_model");
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("model config: ") + e.what());
  }
}

std::string layer_tensor(std::size_t layer, std::string_view suffix) {
  return "layers." + std::to_string(layer) + "." + std::string(suffix);
}

std::vector<TensorSpec> tensor_layout(const ModelConfig& c) {
  const bool offsets = c.norm == NormKind::kLayerNorm;
  std::vector<TensorSpec> out;
  auto norm = [&](const std::string& prefix) {
    out.push_back({prefix + ".gain", 1, c.d_model});
    if (offsets) out.push_back({prefix + ".bias", 1, c.d_model});
  };
  out.push_back({"tok_emb", c.vocab_size, c.d_model});
  out.push_back({"pos_emb", c.max_seq_len, c.d_model});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    norm(layer_tensor(l, "ln1"));
    for (const char* p : {"q", "k", "v", "o"}) {
      out.push_back({layer_tensor(l, std::string("attn.w") + p), c.d_model, c.d_model});
      out.push_back({layer_tensor(l, std::string("attn.b") + p), 1, c.d_model});
    }
    norm(layer_tensor(l, "ln2"));
    out.push_back({layer_tensor(l, "ffn.w1"), c.d_ff, c.d_model});
    out.push_back({layer_tensor(l, "ffn.b1"), 1, c.d_ff});
    out.push_back({layer_tensor(l, "ffn.w2"), c.d_model, c.d_ff});
    out.push_back({layer_tensor(l, "ffn.b2"), 1, c.d_model});
  }
  norm("final_norm");
  out.push_back({"lm_head.weight", c.vocab_size, c.d_model});
  out.push_back({"lm_head.bias", 1, c.vocab_size});
  return out;
}

ModelBundle::ModelBundle(ModelConfig config, Domain domain,
                         std::map<std::string, Tensor2> tensors, std::uint64_t key_id)
    : config_(std::move(config)), domain_(domain), key_id_(key_id), tensors_(std::move(tensors)) {
  validate();
}

const Tensor2& ModelBundle::tensor(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Error(ErrorKind::kIntegrity, "missing tensor '" + name + "'");
  return it->second;
}

void ModelBundle::validate() const {
  config_.validate();
  const auto layout = tensor_layout(config_);
  if (layout.size() != tensors_.size()) {
    throw Error(ErrorKind::kIntegrity, "expected " + std::to_string(layout.size()) +
                                           " tensors, found " +
                                           std::to_string(tensors_.size()));
  }
  for (const auto& spec : layout) {
    const Tensor2& t = tensor(spec.name);
    if (t.rows() != spec.rows || t.cols() != spec.cols) {
      throw Error(ErrorKind::kIntegrity, "tensor '" + spec.name + "' has shape " +
                                             t.shape_string() + ", config implies (" +
                                             std::to_string(spec.rows) + "x" +
                                             std::to_string(spec.cols) + ")");
    }
  }
}

ModelBundle init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  std::map<std::string, Tensor2> tensors;
  for (const auto& spec : tensor_layout(config)) {
    Tensor2 t(spec.rows, spec.cols);
    if (spec.name.ends_with(".gain")) {
      for (double& v : t.values()) v = 1.0;
    } else if (spec.name.find("norm") != std::string::npos || spec.name.find(".ln") != std::string::npos) {
      // norm offsets stay zero
    } else {
      for (double& v : t.values()) v = kInitStd * rng.normal();
    }
    tensors.emplace(spec.name, std::move(t));
  }
  return ModelBundle(config, Domain::kPlaintext, std::move(tensors));
}

Tensor2 embed(const ModelBundle& model, const TokenSeq& tokens) {
  check_tokens(model, tokens);
  const Tensor2& tok = model.tensor("tok_emb");
  const Tensor2& pos = model.tensor("pos_emb");
  Tensor2 x(tokens.size(), model.config().d_model);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto e = tok.row(tokens.ids[t]);
    const auto p = pos.row(t);
    auto dst = x.row(t);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] = e[c] + p[c];
  }
  return x;
}

void run_layers(const ModelBundle& model, Tensor2& x, std::size_t first, std::size_t end) {
  const auto& cfg = model.config();
  if (first > end || end > cfg.n_layers) {
    throw Error(ErrorKind::kShape, "layer range [" + std::to_string(first) + ", " +
                                       std::to_string(end) + ") outside " +
                                       std::to_string(cfg.n_layers) + " layers");
  }
  if (x.cols() != cfg.d_model) {
    throw Error(ErrorKind::kShape, "hidden state " + x.shape_string() +
                                       " does not match d_model " + std::to_string(cfg.d_model));
  }
  for (std::size_t l = first; l < end; ++l) {
    auto w = [&](std::string_view suffix) -> const Tensor2& {
      return model.tensor(layer_tensor(l, suffix));
    };
    const Tensor2 h = normalize(model, x, layer_tensor(l, "ln1"));
    const Tensor2 q = linear(h, w("attn.wq"), w("attn.bq"));
    const Tensor2 k = linear(h, w("attn.wk"), w("attn.bk"));
    const Tensor2 v = linear(h, w("attn.wv"), w("attn.bv"));
    const Tensor2 mixed = causal_attention(q, k, v, cfg.n_heads);
    add_inplace(x, linear(mixed, w("attn.wo"), w("attn.bo")));

    const Tensor2 h2 = normalize(model, x, layer_tensor(l, "ln2"));
    const Tensor2 inner = activate(cfg.act, linear(h2, w("ffn.w1"), w("ffn.b1")));
    add_inplace(x, linear(inner, w("ffn.w2"), w("ffn.b2")));
  }
}

Tensor2 lm_logits(const ModelBundle& model, const Tensor2& hidden) {
  const Tensor2 h = normalize(model, hidden, "final_norm");
  return linear(h, model.tensor("lm_head.weight"), model.tensor("lm_head.bias"));
}

Tensor2 last_position_logits(const ModelBundle& model, const Tensor2& hidden) {
  if (hidden.rows() == 0) throw Error(ErrorKind::kShape, "empty hidden state");
  const auto last = hidden.row(hidden.rows() - 1);
  return lm_logits(model, Tensor2(1, hidden.cols(), std::vector<double>(last.begin(), last.end())));
}

Tensor2 forward(const ModelBundle& model, const TokenSeq& tokens) {
  Tensor2 x = embed(model, tokens);
  run_layers(model, x, 0, model.config().n_layers);
  return lm_logits(model, x);
}

TokenSeq greedy_decode(const ModelBundle& model, const TokenSeq& prompt, std::size_t n_new) {
  check_tokens(model, prompt);
  TokenSeq seq = prompt;
  for (std::size_t step = 0; step < n_new; ++step) {
    Tensor2 x = embed(model, seq);
    run_layers(model, x, 0, model.config().n_layers);
    const Tensor2 logits = last_position_logits(model, x);
    seq.ids.push_back(static_cast<std::uint32_t>(argmax(logits.row(0))));
  }
  return seq;
}

double max_probability(std::span<const double> logits) {
  const Tensor2 probs =
      softmax_rows(Tensor2(1, logits.size(), std::vector<double>(logits.begin(), logits.end())));
  return probs.values()[argmax(probs.row(0))];
}

double first_token_confidence(const ModelBundle& model, const TokenSeq& prompt) {
  if (prompt.size() == 0) throw Error(ErrorKind::kShape, "empty prompt");
  Tensor2 x = embed(model, prompt);
  run_layers(model, x, 0, model.config().n_layers);
  return max_probability(last_position_logits(model, x).row(0));
}

Bytes encode_model(const ModelBundle& model) {
  model.validate();
  json directory = json::array();
  ByteWriter payload;
  for (const auto& spec : tensor_layout(model.config())) {
    const Tensor2& t = model.tensor(spec.name);
    const std::size_t offset = payload.size();
    ByteWriter block;
    for (double v : t.values()) block.put_f64(v);
    directory.push_back({{"name", spec.name},
                         {"shape", {t.rows(), t.cols()}},
                         {"offset", offset},
                         {"length", block.size()},
                         {"crc32", crc32(block.bytes())}});
    payload.put_bytes(block.bytes());
  }
  const json header = {{"config", model.config()},
                       {"domain", domain_name(model.domain())},
                       {"key_id", hex64(model.key_id())},
                       {"tensors", directory}};
  const std::string text = header.dump();

  ByteWriter out;
  out.put_text(kModelMagic);
  out.put_u32(static_cast<std::uint32_t>(text.size()));
  out.put_text(text);
  out.put_bytes(payload.bytes());
  return std::move(out).take();
}

ModelBundle decode_model(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  const auto magic = in.get_bytes(kModelMagic.size());
  if (!std::equal(magic.begin(), magic.end(), kModelMagic.begin())) {
    throw FormatError("bad model magic", 0);
  }
  const std::uint32_t header_len = in.get_u32();
  const std::size_t header_at = in.offset();
  const auto header_bytes = in.get_bytes(header_len);
  json header;
  try {
    header = json::parse(header_bytes.begin(), header_bytes.end());
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed model header: ") + e.what(), header_at);
  }

  ModelConfig config;
  Domain domain;
  std::uint64_t key_id;
  json directory;
  try {
    config = header.at("config").get<ModelConfig>();
    domain = parse_domain(header.at("domain").get<std::string>());
    key_id = parse_hex64(header.at("key_id").get<std::string>());
    directory = header.at("tensors");
  } catch (const json::exception& e) {
    throw FormatError(std::string("incomplete model header: ") + e.what(), header_at);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kConfig) throw Error(ErrorKind::kIntegrity, e.what());
    throw;
  }
  try {
    config.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::kIntegrity, e.what());
  }

  const std::size_t payload_at = in.offset();
  const auto payload = bytes.subspan(payload_at);
  const auto layout = tensor_layout(config);
  if (!directory.is_array() || directory.size() != layout.size()) {
    throw Error(ErrorKind::kIntegrity, "tensor directory does not match config");
  }

  std::map<std::string, Tensor2> tensors;
  std::size_t expected_offset = 0;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& spec = layout[i];
    const json& entry = directory[i];
    std::string name;
    std::size_t rows, cols, offset, length;
    std::uint32_t crc;
    try {
      name = entry.at("name").get<std::string>();
      rows = entry.at("shape").at(0).get<std::size_t>();
      cols = entry.at("shape").at(1).get<std::size_t>();
      offset = entry.at("offset").get<std::size_t>();
      length = entry.at("length").get<std::size_t>();
      crc = entry.at("crc32").get<std::uint32_t>();
    } catch (const json::exception& e) {
      throw FormatError(std::string("bad tensor directory entry: ") + e.what(), header_at);
    }
    if (name != spec.name || rows != spec.rows || cols != spec.cols) {
      throw Error(ErrorKind::kIntegrity,
                  "tensor '" + name + "' (" + std::to_string(rows) + "x" + std::to_string(cols) +
                      ") disagrees with config, which implies '" + spec.name + "' (" +
                      std::to_string(spec.rows) + "x" + std::to_string(spec.cols) + ")");
    }
    if (length != rows * cols * sizeof(double) || offset != expected_offset) {
      throw Error(ErrorKind::kIntegrity, "tensor '" + name + "' has inconsistent extent");
    }
    if (offset + length > payload.size()) {
      throw FormatError("truncated payload for tensor '" + name + "'",
                        payload_at + payload.size());
    }
    const auto block = payload.subspan(offset, length);
    if (crc32(block) != crc) {
      throw Error(ErrorKind::kIntegrity, "CRC mismatch in tensor '" + name + "'");
    }
    ByteReader br(block);
    std::vector<double> data(rows * cols);
    for (double& v : data) v = br.get_f64();
    tensors.emplace(name, Tensor2(rows, cols, std::move(data)));
    expected_offset += length;
  }
  if (expected_offset != payload.size()) {
    throw FormatError("trailing bytes after tensor payload", payload_at + expected_offset);
  }
  return ModelBundle(config, domain, std::move(tensors), key_id);
}

void save_model(const ModelBundle& model, const std::filesystem::path& path) {
  write_file(path, encode_model(model));
}

ModelBundle load_model(const std::filesystem::path& path) { return decode_model(read_file(path)); }

}  // namespace ee
