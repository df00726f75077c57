#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "ee/judge.hpp"
#include "ee/model.hpp"
#include "ee/rng.hpp"
#include "ee/tensor.hpp"

namespace ee {

// Observed ciphertext traffic: (input ids, generated output ids) per request.
struct TranscriptPair {
  std::vector<std::uint32_t> input;
  std::vector<std::uint32_t> output;

  friend bool operator==(const TranscriptPair&, const TranscriptPair&) = default;
};

struct TranscriptCorpus {
  std::vector<TranscriptPair> pairs;
  std::size_t vocab_size = 0;

  void validate() const;
};

// JSON Lines, one {"input_ids": [...], "output_ids": [...]} per line.
TranscriptCorpus load_corpus(const std::filesystem::path& path, std::size_t vocab_size);
void save_corpus(const TranscriptCorpus& corpus, const std::filesystem::path& path);

// Runs greedy decoding on each prompt and records (prompt, continuation).
TranscriptCorpus make_greedy_corpus(const ModelBundle& model, std::span<const TokenSeq> prompts,
                                    std::size_t n_new);

// Synthetic plaintext prompts with Zipf-distributed token frequencies, a
// stand-in for natural-language token statistics.
std::vector<TokenSeq> zipf_prompts(Rng& rng, std::size_t vocab, std::size_t count,
                                   std::size_t len, double exponent = 1.1);

// Sparse conditional distributions: rows[a][b] = P(b | a).
struct BigramTable {
  std::size_t vocab_size = 0;
  std::map<std::uint32_t, std::map<std::uint32_t, double>> rows;
};

// Token statistics over input ‖ output of every pair, in the ids given.
std::vector<double> unigram_distribution(const TranscriptCorpus& corpus);
BigramTable bigram_distribution(const TranscriptCorpus& corpus);

// A corpus decoded by a candidate perm (candidate maps ciphertext -> plaintext).
TranscriptCorpus apply_candidate(const PermTable& perm, const TranscriptCorpus& corpus);

// Plaintext-domain greedy inference f, memoized on the prompt. Thread-safe.
class GreedyOracle {
 public:
  explicit GreedyOracle(ModelBundle plain_model, std::size_t cache_limit = 1 << 18);

  // True iff the greedy continuation of `prompt` begins with `expected`.
  // Decoding stops at the first divergence.
  bool continues_with(const std::vector<std::uint32_t>& prompt,
                      std::span<const std::uint32_t> expected);

  std::vector<std::uint32_t> continuation(const std::vector<std::uint32_t>& prompt,
                                          std::size_t n_new);

  const ModelBundle& model() const { return model_; }
  std::size_t model_calls() const;

 private:
  struct VecHash {
    std::size_t operator()(const std::vector<std::uint32_t>& v) const;
  };

  std::uint32_t next_token(const std::vector<std::uint32_t>& prompt,
                           const std::vector<std::uint32_t>& generated) const;

  ModelBundle model_;
  std::size_t cache_limit_;
  mutable std::mutex mu_;
  std::unordered_map<std::vector<std::uint32_t>, std::vector<std::uint32_t>, VecHash> cache_;
  std::size_t calls_ = 0;
};

struct LossWeights {
  double unigram = 0.0;
  double bigram = 0.0;
  double consistency = 0.0;
  double judge = 0.0;
};

struct AttackConfig {
  TranscriptCorpus corpus;
  std::optional<std::vector<double>> ref_unigram;
  std::optional<BigramTable> ref_bigram;
  std::shared_ptr<GreedyOracle> oracle;
  std::shared_ptr<Judge> judge;
  // 0 means every pair is rated.
  std::size_t judge_sample = 0;
  LossWeights weights;
  std::uint64_t seed = 0;
  std::size_t budget = 0;

  // Throws a configuration error for missing components or bad references.
  void validate() const;
};

struct LossBreakdown {
  double unigram = 0.0;
  double bigram = 0.0;
  double consistency = 0.0;
  double judge = 0.0;
  double total = 0.0;
};

double unigram_loss(const PermTable& perm, const TranscriptCorpus& corpus,
                    const std::optional<std::vector<double>>& ref);
double bigram_loss(const PermTable& perm, const TranscriptCorpus& corpus,
                   const std::optional<BigramTable>& ref);
double consistency_penalty(const PermTable& perm, const TranscriptCorpus& corpus,
                           GreedyOracle* oracle);
double judge_loss(const PermTable& perm, const TranscriptCorpus& corpus, Judge* judge,
                  std::size_t sample = 0, std::uint64_t seed = 0);

LossBreakdown total_loss(const PermTable& perm, const AttackConfig& cfg);

// Precomputed corpus statistics so repeated evaluations stay O(|V| + pairs).
class Objective {
 public:
  explicit Objective(const AttackConfig& cfg);

  LossBreakdown evaluate(const PermTable& perm) const;
  std::size_t vocab_size() const { return cfg_.corpus.vocab_size; }

 private:
  const AttackConfig& cfg_;
  std::vector<double> token_freq_;                          // per ciphertext id
  std::map<std::uint32_t, std::map<std::uint32_t, double>> pair_counts_;
  std::map<std::uint32_t, double> context_totals_;
  double bigram_total_ = 0.0;
  std::vector<std::size_t> judged_pairs_;
};

enum class StopReason { kExhaustive, kSampled, kLocalOptimum, kBudget };

struct TracePoint {
  std::size_t eval_index;
  double loss;
};

struct AttackState {
  std::string method;
  PermTable perm;
  LossBreakdown loss;
  std::size_t evals_used = 0;
  std::size_t budget = 0;
  std::uint64_t seed = 0;
  StopReason stop = StopReason::kBudget;
  std::vector<TracePoint> trace;
};

inline constexpr std::size_t kBruteForceMaxVocab = 9;

AttackState brute_force(const AttackConfig& cfg);
AttackState random_sampling(const AttackConfig& cfg, std::size_t draws);
// `start` seeds the first restart; later restarts draw seeded random starts.
AttackState hill_climb(const AttackConfig& cfg, std::size_t restarts,
                       const std::optional<PermTable>& start = std::nullopt);

// Fraction of corpus token occurrences the candidate decodes correctly.
double recovery_rate(const PermTable& candidate, const PermTable& truth,
                     const TranscriptCorpus& corpus);

nlohmann::json to_json(const AttackState& state);
std::string_view stop_reason_name(StopReason r);

}  // namespace ee
