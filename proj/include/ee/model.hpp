#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "ee/bytes.hpp"
#include "ee/ops.hpp"
#include "ee/tensor.hpp"

namespace ee {

enum class Domain { kPlaintext, kCiphertext };

std::string_view domain_name(Domain d);
Domain parse_domain(std::string_view name);

enum class NormKind { kLayerNorm, kRmsNorm };

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 0;
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t d_ff = 0;
  std::size_t max_seq_len = 0;
  NormKind norm = NormKind::kLayerNorm;
  Activation act = Activation::kGelu;
  // Only learned absolute positions are supported.
  std::string pos_kind = "learned-absolute";
  double norm_eps = kLayerNormEps;

  std::size_t d_head() const { return n_heads == 0 ? 0 : d_model / n_heads; }

  // Throws a configuration error naming the violated invariant.
  void validate() const;
  // Stable 64-bit hash of every field.
  std::uint64_t fingerprint() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct TokenSeq {
  std::vector<std::uint32_t> ids;
  Domain domain = Domain::kPlaintext;

  std::size_t size() const { return ids.size(); }
  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

// Decoder-only transformer weights tagged with the domain they live in.
// Ciphertext bundles also record the id of the key that produced them.
class ModelBundle {
 public:
  ModelBundle() = default;
  ModelBundle(ModelConfig config, Domain domain, std::map<std::string, Tensor2> tensors,
              std::uint64_t key_id = 0);

  const ModelConfig& config() const { return config_; }
  Domain domain() const { return domain_; }
  std::uint64_t key_id() const { return key_id_; }

  const Tensor2& tensor(const std::string& name) const;
  const std::map<std::string, Tensor2>& tensors() const { return tensors_; }

  // Checks that exactly the tensors implied by the config are present.
  void validate() const;

  friend bool operator==(const ModelBundle&, const ModelBundle&) = default;

 private:
  ModelConfig config_;
  Domain domain_ = Domain::kPlaintext;
  std::uint64_t key_id_ = 0;
  std::map<std::string, Tensor2> tensors_;
};

// Canonical tensor names and shapes, in initialization order.
struct TensorSpec {
  std::string name;
  std::size_t rows;
  std::size_t cols;
};
std::vector<TensorSpec> tensor_layout(const ModelConfig& config);

std::string layer_tensor(std::size_t layer, std::string_view suffix);

ModelBundle init_model(const ModelConfig& config, std::uint64_t seed);

// The forward pass split at layer boundaries so shards can run pieces of it.
// Composing embed -> run_layers(0, n_layers) -> lm_logits is bit-identical to
// forward().
Tensor2 embed(const ModelBundle& model, const TokenSeq& tokens);
void run_layers(const ModelBundle& model, Tensor2& hidden, std::size_t first, std::size_t end);
// Final norm + lm_head applied to the selected rows of the residual stream.
Tensor2 lm_logits(const ModelBundle& model, const Tensor2& hidden);
Tensor2 last_position_logits(const ModelBundle& model, const Tensor2& hidden);

Tensor2 forward(const ModelBundle& model, const TokenSeq& tokens);
TokenSeq greedy_decode(const ModelBundle& model, const TokenSeq& prompt, std::size_t n_new);
double first_token_confidence(const ModelBundle& model, const TokenSeq& prompt);

// Highest softmax probability of a logit row.
double max_probability(std::span<const double> logits);

Bytes encode_model(const ModelBundle& model);
ModelBundle decode_model(std::span<const std::uint8_t> bytes);
void save_model(const ModelBundle& model, const std::filesystem::path& path);
ModelBundle load_model(const std::filesystem::path& path);

}  // namespace ee
