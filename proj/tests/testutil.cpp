#include "testutil.hpp"

#include <unistd.h>

namespace ee::testing {

Tensor2 random_tensor(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
  Tensor2 t(rows, cols);
  for (double& v : t.values()) v = scale * (2.0 * rng.uniform() - 1.0);
  return t;
}

PermTable random_perm(Rng& rng, std::size_t n) { return PermTable(rng.permutation(n)); }

TokenSeq random_prompt(Rng& rng, std::size_t vocab, std::size_t len, Domain domain) {
  TokenSeq s;
  s.domain = domain;
  for (std::size_t i = 0; i < len; ++i) s.ids.push_back(static_cast<std::uint32_t>(rng.below(vocab)));
  return s;
}

ModelConfig reference_config() {
  ModelConfig c;
  c.vocab_size = 128;
  c.d_model = 32;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_ff = 64;
  c.max_seq_len = 64;
  return c;
}

ModelConfig tiny_config(NormKind norm, Activation act) {
  ModelConfig c;
  c.vocab_size = 11;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 12;
  c.max_seq_len = 16;
  c.norm = norm;
  c.act = act;
  c.norm_eps = norm == NormKind::kLayerNorm ? kLayerNormEps : kRmsNormEps;
  return c;
}

TempDir::TempDir(const std::string& tag) {
  root_ = std::filesystem::temp_directory_path() /
          ("ee_" + tag + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(root_);
  std::filesystem::create_directories(root_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(root_, ec);
}

}  // namespace ee::testing
