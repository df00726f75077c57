#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "ee/model.hpp"
#include "ee/tensor.hpp"

namespace ee {

inline constexpr std::uint32_t kKeyFormatVersion = 1;

// The permutation bundle that maps a plaintext model and its traffic into the
// ciphertext domain. One residual permutation is shared by every layer because
// residual additions mix all residual-stream interfaces.
struct EEKey {
  std::uint32_t version = kKeyFormatVersion;
  PermTable vocab_perm;
  PermTable resid_perm;
  std::vector<PermTable> ffn_perms;               // [layer], over d_ff
  std::vector<std::vector<PermTable>> qk_perms;   // [layer][head], over d_head
  std::vector<std::vector<PermTable>> v_perms;    // [layer][head], over d_head
  std::uint64_t seed = 0;
  std::uint64_t model_fingerprint = 0;
  bool identity = false;

  // Hash of the permutation tables; ciphertext models record it.
  std::uint64_t key_id() const;
  // Structural check against a config: sizes, counts, fingerprint.
  void check_matches(const ModelConfig& config) const;

  friend bool operator==(const EEKey&, const EEKey&) = default;
};

EEKey keygen(const ModelConfig& config, std::uint64_t seed);
EEKey identity_key(const ModelConfig& config);

TokenSeq encrypt_tokens(const EEKey& key, const TokenSeq& plain);
TokenSeq decrypt_tokens(const EEKey& key, const TokenSeq& cipher);

ModelBundle encrypt_model(const EEKey& key, const ModelBundle& plain);

// Un-permutes the vocabulary axis of ciphertext logits.
Tensor2 decrypt_logits(const EEKey& key, const Tensor2& logits);

// Runs the plaintext and ciphertext pipelines on every prompt and compares.
struct EquivarianceReport {
  std::size_t n_prompts = 0;
  double max_abs_logit_diff = 0.0;
  bool within_tolerance = false;
  bool token_match = false;
  bool recoverability_ok = false;
};

EquivarianceReport verify_equivariance(const ModelBundle& plain, const EEKey& key,
                                       std::span<const TokenSeq> prompts, std::size_t n_new,
                                       double tol);

Bytes encode_key(const EEKey& key);
EEKey decode_key(std::span<const std::uint8_t> bytes);
void save_key(const EEKey& key, const std::filesystem::path& path);
EEKey load_key(const std::filesystem::path& path);

}  // namespace ee
