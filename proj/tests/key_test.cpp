#include <cmath>

#include <gtest/gtest.h>

#include "ee/error.hpp"
#include "ee/key.hpp"
#include "testutil.hpp"

namespace ee {
namespace {

using testing::random_prompt;
using testing::reference_config;
using testing::tiny_config;

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an ee::Error";
  return ErrorKind::kUsage;
}

EEKey with_vocab(const ModelConfig& c, std::vector<std::uint32_t> map) {
  EEKey key = identity_key(c);
  key.vocab_perm = PermTable(std::move(map));
  return key;
}

double max_abs_diff(const Tensor2& a, const Tensor2& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.values()[i] - b.values()[i]));
  return d;
}

ModelConfig five_token_config() {
  ModelConfig c = tiny_config();
  c.vocab_size = 5;
  return c;
}

TEST(KeygenTest, DeterministicPerSeed) {
  const ModelConfig c = reference_config();
  EXPECT_EQ(keygen(c, 17), keygen(c, 17));
  EXPECT_NE(keygen(c, 17).vocab_perm, keygen(c, 18).vocab_perm);
}

TEST(KeygenTest, TableCountsMatchConfig) {
  const ModelConfig c = reference_config();
  const EEKey key = keygen(c, 3);
  EXPECT_NO_THROW(key.check_matches(c));
  ASSERT_EQ(key.ffn_perms.size(), c.n_layers);
  ASSERT_EQ(key.qk_perms[1].size(), c.n_heads);
  EXPECT_EQ(key.v_perms[0][3].size(), c.d_head());
  EXPECT_FALSE(key.vocab_perm.is_identity());
  EXPECT_FALSE(key.resid_perm.is_identity());
}

TEST(KeygenTest, IdentityModeIsIdentityOnModel) {
  const ModelConfig c = tiny_config();
  const ModelBundle m = init_model(c, 1);
  const ModelBundle enc = encrypt_model(identity_key(c), m);
  EXPECT_EQ(enc.domain(), Domain::kCiphertext);
  EXPECT_EQ(enc.tensors(), m.tensors());
}

TEST(TokenCipherTest, DirectTableLookup) {
  const EEKey key = with_vocab(five_token_config(), {2, 0, 1, 4, 3});
  const TokenSeq enc = encrypt_tokens(key, TokenSeq{{0, 3}, Domain::kPlaintext});
  EXPECT_EQ(enc, (TokenSeq{{2, 4}, Domain::kCiphertext}));
  EXPECT_EQ(decrypt_tokens(key, TokenSeq{{2, 4}, Domain::kCiphertext}),
            (TokenSeq{{0, 3}, Domain::kPlaintext}));
}

TEST(TokenCipherTest, IdentityKeyLeavesIdsAlone) {
  const ModelConfig c = tiny_config();
  EXPECT_EQ(encrypt_tokens(identity_key(c), TokenSeq{{7, 7, 7}, Domain::kPlaintext}).ids,
            (std::vector<std::uint32_t>{7, 7, 7}));
}

TEST(TokenCipherTest, RoundTripProperty) {
  const ModelConfig c = reference_config();
  const EEKey key = keygen(c, 99);
  Rng rng(100);
  for (int trial = 0; trial < 10000; ++trial) {
    const TokenSeq p = random_prompt(rng, c.vocab_size, 1 + rng.below(24));
    ASSERT_EQ(decrypt_tokens(key, encrypt_tokens(key, p)), p);
  }
}

TEST(TokenCipherTest, WrongDomainAndRangeErrors) {
  const ModelConfig c = five_token_config();
  const EEKey key = keygen(c, 1);
  EXPECT_EQ(kind_of([&] { encrypt_tokens(key, TokenSeq{{1}, Domain::kCiphertext}); }),
            ErrorKind::kDomain);
  EXPECT_EQ(kind_of([&] { decrypt_tokens(key, TokenSeq{{1}, Domain::kPlaintext}); }),
            ErrorKind::kDomain);
  EXPECT_EQ(kind_of([&] { encrypt_tokens(key, TokenSeq{{5}, Domain::kPlaintext}); }),
            ErrorKind::kRange);
}

TEST(EncryptModelTest, RandomKeyIsEquivariantForEveryArchitecture) {
  Rng rng(31);
  for (auto norm : {NormKind::kLayerNorm, NormKind::kRmsNorm}) {
    for (auto act : {Activation::kRelu, Activation::kGelu, Activation::kSilu}) {
      const ModelConfig c = tiny_config(norm, act);
      const ModelBundle m = init_model(c, 8);
      const EEKey key = keygen(c, 6);
      const ModelBundle enc = encrypt_model(key, m);
      for (int trial = 0; trial < 5; ++trial) {
        const TokenSeq p = random_prompt(rng, c.vocab_size, 1 + rng.below(c.max_seq_len));
        const Tensor2 ee = decrypt_logits(key, forward(enc, encrypt_tokens(key, p)));
        EXPECT_LE(max_abs_diff(ee, forward(m, p)), 1e-9);
      }
    }
  }
}

TEST(EncryptModelTest, ScaledWeightsStayEquivariant) {
  // Larger weights make attention sharp and activations large; the mapping is
  // still exact up to summation order.
  const ModelConfig c = tiny_config(NormKind::kRmsNorm, Activation::kGelu);
  const ModelBundle base = init_model(c, 8);
  auto tensors = base.tensors();
  for (auto& [name, t] : tensors) {
    if (name.ends_with(".gain")) continue;
    for (double& v : t.values()) v *= 50.0;
  }
  const ModelBundle m(c, Domain::kPlaintext, tensors);
  const EEKey key = keygen(c, 1);
  const TokenSeq p{{1, 4, 9, 2, 2, 0}, Domain::kPlaintext};
  const Tensor2 vi = forward(m, p);
  const Tensor2 ee = decrypt_logits(key, forward(encrypt_model(key, m), encrypt_tokens(key, p)));
  EXPECT_LE(max_abs_diff(ee, vi), 1e-9);
}

TEST(EncryptModelTest, PreservesShapesAndHidesEmbedding) {
  const ModelConfig c = reference_config();
  const ModelBundle m = init_model(c, 42);
  const ModelBundle enc = encrypt_model(keygen(c, 5), m);
  ASSERT_EQ(enc.tensors().size(), m.tensors().size());
  for (const auto& [name, t] : m.tensors()) {
    EXPECT_EQ(enc.tensor(name).rows(), t.rows());
    EXPECT_EQ(enc.tensor(name).cols(), t.cols());
  }
  EXPECT_NE(enc.tensor("tok_emb"), m.tensor("tok_emb"));
  // No embedding row survives in its original coordinate order.
  const auto& e = m.tensor("tok_emb");
  const auto& ep = enc.tensor("tok_emb");
  for (std::size_t i = 0; i < e.rows(); ++i) {
    for (std::size_t j = 0; j < ep.rows(); ++j) {
      EXPECT_FALSE(std::equal(e.row(i).begin(), e.row(i).end(), ep.row(j).begin()));
    }
  }
}

TEST(EncryptModelTest, Guards) {
  const ModelConfig c = tiny_config();
  const ModelBundle m = init_model(c, 2);
  const EEKey key = keygen(c, 2);
  const ModelBundle enc = encrypt_model(key, m);
  EXPECT_EQ(kind_of([&] { encrypt_model(key, enc); }), ErrorKind::kDomain);
  const EEKey other = keygen(reference_config(), 2);
  EXPECT_EQ(kind_of([&] { encrypt_model(other, m); }), ErrorKind::kPairing);
  EXPECT_EQ(enc.key_id(), key.key_id());
}

TEST(DecryptLogitsTest, IdentityAndOneHot) {
  const ModelConfig c = five_token_config();
  const Tensor2 logits(1, 5, {0.1, 0.2, 0.3, 0.4, 0.5});
  EXPECT_EQ(decrypt_logits(identity_key(c), logits), logits);

  const EEKey key = with_vocab(c, {2, 0, 1, 4, 3});
  for (std::uint32_t e = 0; e < 5; ++e) {
    Tensor2 one_hot(1, 5);
    one_hot(0, e) = 1.0;
    const Tensor2 dec = decrypt_logits(key, one_hot);
    const std::uint32_t plain = key.vocab_perm.inverse()[e];
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(dec(0, j), j == plain ? 1.0 : 0.0);
  }
  EXPECT_EQ(kind_of([&] { decrypt_logits(key, Tensor2(1, 4)); }), ErrorKind::kShape);
}

TEST(DecryptLogitsTest, ArgmaxMapsThroughInverse) {
  Rng rng(4);
  const ModelConfig c = reference_config();
  const EEKey key = keygen(c, 4);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor2 enc = testing::random_tensor(rng, 1, c.vocab_size);
    EXPECT_EQ(argmax(decrypt_logits(key, enc).row(0)),
              key.vocab_perm.inverse()[argmax(enc.row(0))]);
  }
}

TEST(VerifyEquivarianceTest, IdentityKeyIsExact) {
  const ModelConfig c = tiny_config();
  const ModelBundle m = init_model(c, 2);
  Rng rng(1);
  std::vector<TokenSeq> prompts;
  for (int i = 0; i < 5; ++i) prompts.push_back(random_prompt(rng, c.vocab_size, 5));
  const auto r = verify_equivariance(m, identity_key(c), prompts, 3, 0.0);
  EXPECT_EQ(r.max_abs_logit_diff, 0.0);
  EXPECT_TRUE(r.token_match);
  EXPECT_TRUE(r.recoverability_ok);
  EXPECT_TRUE(r.within_tolerance);
}

TEST(VerifyEquivarianceTest, RandomKeyMatchesTokens) {
  const ModelConfig c = reference_config();
  const ModelBundle m = init_model(c, 42);
  Rng rng(2);
  std::vector<TokenSeq> prompts;
  for (int i = 0; i < 20; ++i) prompts.push_back(random_prompt(rng, c.vocab_size, 8));
  const auto r = verify_equivariance(m, keygen(c, 77), prompts, 4, 1e-9);
  EXPECT_EQ(r.n_prompts, 20u);
  EXPECT_TRUE(r.token_match);
  EXPECT_TRUE(r.within_tolerance) << r.max_abs_logit_diff;
}

TEST(VerifyEquivarianceTest, MismatchedKeyIsPairingError) {
  const ModelBundle m = init_model(tiny_config(), 2);
  const std::vector<TokenSeq> prompts{{{1, 2}, Domain::kPlaintext}};
  EXPECT_EQ(kind_of([&] { verify_equivariance(m, keygen(reference_config(), 1), prompts, 1, 1e-9); }),
            ErrorKind::kPairing);
}

class KeyFileTest : public ::testing::Test {
 protected:
  testing::TempDir dir_{"keyfile"};
};

TEST_F(KeyFileTest, RoundTrip) {
  const EEKey key = keygen(reference_config(), 123);
  save_key(key, dir_.path("k.eekey"));
  EXPECT_EQ(load_key(dir_.path("k.eekey")), key);
  const EEKey id = identity_key(tiny_config());
  EXPECT_EQ(decode_key(encode_key(id)), id);
}

TEST_F(KeyFileTest, FlippedPayloadByteIsIntegrityError) {
  Bytes b = encode_key(keygen(tiny_config(), 3));
  b[b.size() - 10] ^= 0x01;
  EXPECT_EQ(kind_of([&] { decode_key(b); }), ErrorKind::kIntegrity);
}

TEST_F(KeyFileTest, BumpedVersionIsVersionError) {
  const Bytes b = encode_key(keygen(tiny_config(), 3));
  ByteReader r(b);
  r.get_bytes(8);
  const std::uint32_t len = r.get_u32();
  auto header = nlohmann::json::parse(b.begin() + 12, b.begin() + 12 + len);
  header["version"] = kKeyFormatVersion + 1;
  const std::string text = header.dump();
  ByteWriter w;
  w.put_text("EEKEY001");
  w.put_u32(static_cast<std::uint32_t>(text.size()));
  w.put_text(text);
  w.put_bytes(std::span(b).subspan(12 + len));
  EXPECT_EQ(kind_of([&] { decode_key(w.bytes()); }), ErrorKind::kVersion);
}

TEST_F(KeyFileTest, TruncatedIsFormatError) {
  Bytes b = encode_key(keygen(tiny_config(), 3));
  b.resize(b.size() - 7);
  EXPECT_EQ(kind_of([&] { decode_key(b); }), ErrorKind::kFormat);
}

}  // namespace
}  // namespace ee
