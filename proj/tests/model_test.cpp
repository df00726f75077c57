#include <cmath>
#include <fstream>

#include <gtest/gtest.h>

#include "ee/error.hpp"
#include "ee/model.hpp"
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

ModelBundle with_tensor(const ModelBundle& m, const std::string& name, Tensor2 t) {
  auto tensors = m.tensors();
  tensors[name] = std::move(t);
  return ModelBundle(m.config(), m.domain(), std::move(tensors), m.key_id());
}

TEST(ModelConfigTest, RejectsIndivisibleHeads) {
  ModelConfig c = reference_config();
  c.n_heads = 3;
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::kConfig);
  EXPECT_EQ(kind_of([&] { init_model(c, 1); }), ErrorKind::kConfig);
}

TEST(ModelConfigTest, RejectsDegenerateSizes) {
  ModelConfig c = reference_config();
  c.vocab_size = 1;
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::kConfig);
  c = reference_config();
  c.max_seq_len = 0;
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::kConfig);
}

TEST(ModelConfigTest, JsonRoundTripAndFingerprint) {
  const ModelConfig c = tiny_config(NormKind::kRmsNorm, Activation::kSilu);
  const nlohmann::json j = c;
  EXPECT_EQ(j.get<ModelConfig>(), c);
  ModelConfig other = c;
  other.d_ff += 1;
  EXPECT_NE(c.fingerprint(), other.fingerprint());
}

TEST(InitModelTest, SameSeedIsByteIdentical) {
  const ModelConfig c = tiny_config();
  EXPECT_EQ(encode_model(init_model(c, 42)), encode_model(init_model(c, 42)));
}

TEST(InitModelTest, DifferentSeedsDiffer) {
  const ModelConfig c = tiny_config();
  const auto a = init_model(c, 1).tensor("tok_emb");
  const auto b = init_model(c, 2).tensor("tok_emb");
  Bytes ba, bb;
  for (double v : a.values()) { ByteWriter w; w.put_f64(v); ba.insert(ba.end(), w.bytes().begin(), w.bytes().end()); }
  for (double v : b.values()) { ByteWriter w; w.put_f64(v); bb.insert(bb.end(), w.bytes().begin(), w.bytes().end()); }
  EXPECT_NE(crc32(ba), crc32(bb));
}

TEST(InitModelTest, NormParametersStartAtIdentity) {
  const ModelBundle m = init_model(tiny_config(), 3);
  for (double v : m.tensor("layers.1.ln2.gain").values()) EXPECT_EQ(v, 1.0);
  for (double v : m.tensor("final_norm.bias").values()) EXPECT_EQ(v, 0.0);
  double sq = 0.0;
  const auto& e = m.tensor("tok_emb");
  for (double v : e.values()) sq += v * v;
  EXPECT_NEAR(std::sqrt(sq / e.size()), 0.02, 0.006);
}

TEST(ForwardTest, ShapeAndFiniteness) {
  Rng rng(1);
  for (auto norm : {NormKind::kLayerNorm, NormKind::kRmsNorm}) {
    for (auto act : {Activation::kRelu, Activation::kGelu, Activation::kSilu}) {
      const ModelConfig c = tiny_config(norm, act);
      const ModelBundle m = init_model(c, 5);
      const TokenSeq p = random_prompt(rng, c.vocab_size, 7);
      const Tensor2 logits = forward(m, p);
      ASSERT_EQ(logits.rows(), 7u);
      ASSERT_EQ(logits.cols(), c.vocab_size);
      for (double v : logits.values()) EXPECT_TRUE(std::isfinite(v));
    }
  }
}

TEST(ForwardTest, ZeroLmHeadGivesUniformOutput) {
  const ModelConfig c = tiny_config();
  ModelBundle m = init_model(c, 5);
  m = with_tensor(m, "lm_head.weight", Tensor2(c.vocab_size, c.d_model));
  m = with_tensor(m, "lm_head.bias", Tensor2(1, c.vocab_size));
  const TokenSeq p{{1, 2, 3}, Domain::kPlaintext};
  const Tensor2 logits = forward(m, p);
  for (double v : logits.values()) EXPECT_EQ(v, 0.0);
  EXPECT_DOUBLE_EQ(first_token_confidence(m, p), 1.0 / static_cast<double>(c.vocab_size));
}

// Frozen from the reference run of (reference_config, seed 42, prompt [1,2,3]).
TEST(ForwardTest, GoldenLogits) {
  const ModelBundle m = init_model(reference_config(), 42);
  const Tensor2 logits = forward(m, TokenSeq{{1, 2, 3}, Domain::kPlaintext});
  double sum = 0.0, abs_sum = 0.0;
  for (double v : logits.values()) {
    sum += v;
    abs_sum += std::abs(v);
  }
  EXPECT_NEAR(sum, -0.5072567042419982, 1e-12);
  EXPECT_NEAR(abs_sum, 34.287548807638238, 1e-12);
  EXPECT_NEAR(logits(2, 0), -0.026292435514711877, 1e-14);
  EXPECT_NEAR(logits(0, 127), -0.042452524209017177, 1e-14);
}

TEST(ForwardTest, DeterministicAcrossCalls) {
  const ModelBundle m = init_model(tiny_config(), 9);
  const TokenSeq p{{3, 1, 4, 1, 5}, Domain::kPlaintext};
  EXPECT_EQ(forward(m, p), forward(m, p));
}

TEST(ForwardTest, CausalityProperty) {
  Rng rng(77);
  const ModelConfig c = tiny_config();
  const ModelBundle m = init_model(c, 21);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t len = 2 + rng.below(c.max_seq_len - 1);
    TokenSeq p = random_prompt(rng, c.vocab_size, len);
    const Tensor2 before = forward(m, p);
    const std::size_t t = rng.below(len - 1);
    for (std::size_t k = t + 1; k < len; ++k) {
      p.ids[k] = static_cast<std::uint32_t>(rng.below(c.vocab_size));
    }
    const Tensor2 after = forward(m, p);
    for (std::size_t i = 0; i <= t; ++i) {
      for (std::size_t j = 0; j < c.vocab_size; ++j) ASSERT_EQ(before(i, j), after(i, j));
    }
  }
}

TEST(ForwardTest, DomainMismatchAlwaysErrors) {
  const ModelBundle m = init_model(tiny_config(), 9);
  const TokenSeq cipher{{1, 2}, Domain::kCiphertext};
  EXPECT_EQ(kind_of([&] { forward(m, cipher); }), ErrorKind::kDomain);
  EXPECT_EQ(kind_of([&] { greedy_decode(m, cipher, 0); }), ErrorKind::kDomain);
  EXPECT_EQ(kind_of([&] { first_token_confidence(m, cipher); }), ErrorKind::kDomain);
}

TEST(ForwardTest, OverlengthAndOutOfRange) {
  const ModelConfig c = tiny_config();
  const ModelBundle m = init_model(c, 9);
  TokenSeq too_long{std::vector<std::uint32_t>(c.max_seq_len + 1, 0), Domain::kPlaintext};
  EXPECT_EQ(kind_of([&] { forward(m, too_long); }), ErrorKind::kShape);
  TokenSeq bad{{static_cast<std::uint32_t>(c.vocab_size)}, Domain::kPlaintext};
  EXPECT_EQ(kind_of([&] { forward(m, bad); }), ErrorKind::kRange);
}

TEST(ForwardTest, SplitPipelineMatchesForward) {
  const ModelBundle m = init_model(tiny_config(), 4);
  const TokenSeq p{{0, 5, 9, 2}, Domain::kPlaintext};
  Tensor2 x = embed(m, p);
  run_layers(m, x, 0, 1);
  run_layers(m, x, 1, 2);
  EXPECT_EQ(lm_logits(m, x), forward(m, p));
}

TEST(GreedyDecodeTest, ZeroNewTokensEchoesPrompt) {
  const ModelBundle m = init_model(tiny_config(), 4);
  const TokenSeq p{{0, 5, 9}, Domain::kPlaintext};
  EXPECT_EQ(greedy_decode(m, p, 0), p);
}

TEST(GreedyDecodeTest, DeterministicAndInRange) {
  Rng rng(8);
  const ModelConfig c = tiny_config();
  const ModelBundle m = init_model(c, 4);
  for (int trial = 0; trial < 10; ++trial) {
    const TokenSeq p = random_prompt(rng, c.vocab_size, 3);
    const TokenSeq a = greedy_decode(m, p, 6);
    EXPECT_EQ(a, greedy_decode(m, p, 6));
    EXPECT_EQ(a.size(), 9u);
    EXPECT_EQ(a.domain, Domain::kPlaintext);
    for (auto id : a.ids) EXPECT_LT(id, c.vocab_size);
  }
}

TEST(GreedyDecodeTest, AppendsArgmaxOfLastPosition) {
  const ModelBundle m = init_model(tiny_config(), 4);
  const TokenSeq p{{2, 7}, Domain::kPlaintext};
  const Tensor2 logits = forward(m, p);
  const TokenSeq out = greedy_decode(m, p, 1);
  EXPECT_EQ(out.ids.back(), argmax(logits.row(1)));
}

TEST(ConfidenceTest, InUnitIntervalAndDeterministic) {
  const ModelBundle m = init_model(tiny_config(), 4);
  const TokenSeq p{{2, 7, 1}, Domain::kPlaintext};
  const double c = first_token_confidence(m, p);
  EXPECT_GT(c, 0.0);
  EXPECT_LE(c, 1.0);
  EXPECT_EQ(c, first_token_confidence(m, p));
}

class ContainerTest : public ::testing::Test {
 protected:
  testing::TempDir dir_{"container"};
};

TEST_F(ContainerTest, SaveLoadIsBitExact) {
  const ModelBundle m = init_model(tiny_config(NormKind::kRmsNorm, Activation::kRelu), 12);
  save_model(m, dir_.path("m.eem"));
  const ModelBundle back = load_model(dir_.path("m.eem"));
  EXPECT_EQ(back, m);
  EXPECT_EQ(encode_model(back), read_file(dir_.path("m.eem")));
}

TEST_F(ContainerTest, LayoutStartsWithMagicAndHeaderLength) {
  const Bytes b = encode_model(init_model(tiny_config(), 12));
  EXPECT_EQ(std::string(b.begin(), b.begin() + 8), "EEMODEL1");
  ByteReader r(b);
  r.get_bytes(8);
  const std::uint32_t len = r.get_u32();
  const auto header = nlohmann::json::parse(b.begin() + 12, b.begin() + 12 + len);
  EXPECT_EQ(header.at("domain"), "plaintext");
  EXPECT_EQ(header.at("tensors").at(0).at("name"), "tok_emb");
}

TEST_F(ContainerTest, TruncatedFileIsFormatError) {
  Bytes b = encode_model(init_model(tiny_config(), 12));
  b.resize(b.size() - 5);
  try {
    decode_model(b);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_GT(e.offset(), 12u);
  }
  Bytes tiny(b.begin(), b.begin() + 6);
  EXPECT_EQ(kind_of([&] { decode_model(tiny); }), ErrorKind::kFormat);
}

TEST_F(ContainerTest, EditedVocabSizeIsIntegrityError) {
  const Bytes b = encode_model(init_model(tiny_config(), 12));
  ByteReader r(b);
  r.get_bytes(8);
  const std::uint32_t len = r.get_u32();
  auto header = nlohmann::json::parse(b.begin() + 12, b.begin() + 12 + len);
  header["config"]["vocab_size"] = 12;
  const std::string text = header.dump();
  ByteWriter w;
  w.put_text("EEMODEL1");
  w.put_u32(static_cast<std::uint32_t>(text.size()));
  w.put_text(text);
  w.put_bytes(std::span(b).subspan(12 + len));
  EXPECT_EQ(kind_of([&] { decode_model(w.bytes()); }), ErrorKind::kIntegrity);
}

TEST_F(ContainerTest, FlippedPayloadByteIsIntegrityError) {
  Bytes b = encode_model(init_model(tiny_config(), 12));
  b[b.size() - 3] ^= 0x10;
  EXPECT_EQ(kind_of([&] { decode_model(b); }), ErrorKind::kIntegrity);
}

TEST_F(ContainerTest, BadMagicIsFormatError) {
  Bytes b = encode_model(init_model(tiny_config(), 12));
  b[0] = 'X';
  EXPECT_EQ(kind_of([&] { decode_model(b); }), ErrorKind::kFormat);
}

}  // namespace
}  // namespace ee
