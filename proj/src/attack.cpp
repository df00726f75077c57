#include "ee/attack.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ee/error.hpp"

namespace ee {

namespace {

using nlohmann::json;

std::vector<std::uint32_t> joined(const TranscriptPair& p) {
  std::vector<std::uint32_t> seq = p.input;
  seq.insert(seq.end(), p.output.begin(), p.output.end());
  return seq;
}

void check_perm(const PermTable& perm, const TranscriptCorpus& corpus) {
  if (perm.size() != corpus.vocab_size) {
    throw Error(ErrorKind::kShape, "candidate permutation has size " +
                                       std::to_string(perm.size()) + ", vocabulary is " +
                                       std::to_string(corpus.vocab_size));
  }
}

std::vector<std::size_t> judged_pairs(std::size_t n_pairs, std::size_t sample, std::uint64_t seed) {
  std::vector<std::size_t> idx(n_pairs);
  std::iota(idx.begin(), idx.end(), 0);
  if (sample == 0 || sample >= n_pairs) return idx;
  Rng rng(mix_seed(seed, 0x6a756467));
  const auto order = rng.permutation(n_pairs);
  idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(sample));
  std::sort(idx.begin(), idx.end());
  return idx;
}

double judge_mean(const PermTable& perm, const TranscriptCorpus& corpus, Judge& judge,
                  std::span<const std::size_t> pairs) {
  double sum = 0.0;
  for (auto i : pairs) {
    const auto in = perm.apply(corpus.pairs[i].input);
    const auto out = perm.apply(corpus.pairs[i].output);
    const int rating = judge.rate(in, out);
    if (rating < 0 || rating > 10) {
      throw Error(ErrorKind::kProtocol, "judge rating " + std::to_string(rating) + " outside 0..10");
    }
    sum += (10.0 - rating) / 10.0;
  }
  return pairs.empty() ? 0.0 : sum / static_cast<double>(pairs.size());
}

double consistency_with(const PermTable& perm, const TranscriptCorpus& corpus, GreedyOracle& oracle) {
  std::size_t mismatched = 0;
  for (const auto& pair : corpus.pairs) {
    const auto expected = perm.apply(pair.output);
    if (!oracle.continues_with(perm.apply(pair.input), expected)) ++mismatched;
  }
  return static_cast<double>(mismatched) / static_cast<double>(corpus.pairs.size());
}

bool better(const LossBreakdown& a, const PermTable& pa, const LossBreakdown& b, const PermTable& pb) {
  if (a.total != b.total) return a.total < b.total;
  return pa < pb;
}

}  // namespace

void TranscriptCorpus::validate() const {
  if (pairs.empty()) throw Error(ErrorKind::kConfig, "corpus has no pairs");
  if (vocab_size < 2) throw Error(ErrorKind::kConfig, "corpus vocabulary must be at least 2");
  for (const auto& p : pairs) {
    for (const auto* seq : {&p.input, &p.output}) {
      for (auto id : *seq) {
        if (id >= vocab_size) {
          throw Error(ErrorKind::kRange, "corpus token " + std::to_string(id) +
                                             " outside vocabulary of " + std::to_string(vocab_size));
        }
      }
    }
  }
}

TranscriptCorpus load_corpus(const std::filesystem::path& path, std::size_t vocab_size) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open corpus " + path.string());
  TranscriptCorpus corpus;
  corpus.vocab_size = vocab_size;
  std::string line;
  std::size_t line_no = 0;
  std::size_t offset = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t line_at = offset;
    offset += line.size() + 1;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      corpus.pairs.push_back({j.at("input_ids").get<std::vector<std::uint32_t>>(),
                              j.at("output_ids").get<std::vector<std::uint32_t>>()});
    } catch (const json::exception& e) {
      throw FormatError("corpus line " + std::to_string(line_no) + ": " + e.what(), line_at);
    }
  }
  corpus.validate();
  return corpus;
}

void save_corpus(const TranscriptCorpus& corpus, const std::filesystem::path& path) {
  std::ostringstream out;
  for (const auto& p : corpus.pairs) {
    out << json{{"input_ids", p.input}, {"output_ids", p.output}}.dump() << '\n';
  }
  write_text(path, out.str());
}

TranscriptCorpus make_greedy_corpus(const ModelBundle& model, std::span<const TokenSeq> prompts,
                                    std::size_t n_new) {
  TranscriptCorpus corpus;
  corpus.vocab_size = model.config().vocab_size;
  for (const auto& prompt : prompts) {
    const TokenSeq full = greedy_decode(model, prompt, n_new);
    corpus.pairs.push_back({prompt.ids, std::vector<std::uint32_t>(full.ids.begin() + static_cast<std::ptrdiff_t>(prompt.size()), full.ids.end())});
  }
  return corpus;
}

std::vector<TokenSeq> zipf_prompts(Rng& rng, std::size_t vocab, std::size_t count, std::size_t len,
                                   double exponent) {
  std::vector<double> cdf(vocab);
  double acc = 0.0;
  for (std::size_t k = 0; k < vocab; ++k) {
    acc += 1.0 / std::pow(static_cast<double>(k + 1), exponent);
    cdf[k] = acc;
  }
  std::vector<TokenSeq> out;
  for (std::size_t i = 0; i < count; ++i) {
    TokenSeq s;
    for (std::size_t t = 0; t < len; ++t) {
      const double u = rng.uniform() * acc;
      const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
      s.ids.push_back(static_cast<std::uint32_t>(std::min<std::size_t>(it - cdf.begin(), vocab - 1)));
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<double> unigram_distribution(const TranscriptCorpus& corpus) {
  std::vector<double> dist(corpus.vocab_size, 0.0);
  double total = 0.0;
  for (const auto& p : corpus.pairs) {
    for (auto id : joined(p)) {
      dist.at(id) += 1.0;
      total += 1.0;
    }
  }
  if (total > 0.0) {
    for (double& v : dist) v /= total;
  }
  return dist;
}

BigramTable bigram_distribution(const TranscriptCorpus& corpus) {
  BigramTable table;
  table.vocab_size = corpus.vocab_size;
  for (const auto& p : corpus.pairs) {
    const auto seq = joined(p);
    for (std::size_t i = 1; i < seq.size(); ++i) table.rows[seq[i - 1]][seq[i]] += 1.0;
  }
  for (auto& [ctx, row] : table.rows) {
    double total = 0.0;
    for (const auto& [_, n] : row) total += n;
    for (auto& [_, n] : row) n /= total;
  }
  return table;
}

TranscriptCorpus apply_candidate(const PermTable& perm, const TranscriptCorpus& corpus) {
  check_perm(perm, corpus);
  TranscriptCorpus out;
  out.vocab_size = corpus.vocab_size;
  for (const auto& p : corpus.pairs) out.pairs.push_back({perm.apply(p.input), perm.apply(p.output)});
  return out;
}

std::size_t GreedyOracle::VecHash::operator()(const std::vector<std::uint32_t>& v) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto x : v) h = mix_seed(h, x);
  return static_cast<std::size_t>(h);
}

GreedyOracle::GreedyOracle(ModelBundle plain_model, std::size_t cache_limit)
    : model_(std::move(plain_model)), cache_limit_(cache_limit) {
  if (model_.domain() != Domain::kPlaintext) {
    throw Error(ErrorKind::kDomain, "the consistency oracle wraps a plaintext-domain model");
  }
}

std::uint32_t GreedyOracle::next_token(const std::vector<std::uint32_t>& prompt,
                                       const std::vector<std::uint32_t>& generated) const {
  TokenSeq seq{prompt, Domain::kPlaintext};
  seq.ids.insert(seq.ids.end(), generated.begin(), generated.end());
  Tensor2 x = embed(model_, seq);
  run_layers(model_, x, 0, model_.config().n_layers);
  return static_cast<std::uint32_t>(argmax(last_position_logits(model_, x).row(0)));
}

bool GreedyOracle::continues_with(const std::vector<std::uint32_t>& prompt,
                                  std::span<const std::uint32_t> expected) {
  std::vector<std::uint32_t> generated;
  {
    std::lock_guard lock(mu_);
    if (auto it = cache_.find(prompt); it != cache_.end()) generated = it->second;
  }
  bool extended = false;
  bool match = true;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (i == generated.size()) {
      generated.push_back(next_token(prompt, generated));
      extended = true;
      std::lock_guard lock(mu_);
      ++calls_;
    }
    if (generated[i] != expected[i]) {
      match = false;
      break;
    }
  }
  if (extended) {
    std::lock_guard lock(mu_);
    if (cache_.size() >= cache_limit_) cache_.clear();
    auto& slot = cache_[prompt];
    if (slot.size() < generated.size()) slot = std::move(generated);
  }
  return match;
}

std::vector<std::uint32_t> GreedyOracle::continuation(const std::vector<std::uint32_t>& prompt,
                                                      std::size_t n_new) {
  std::vector<std::uint32_t> generated;
  for (std::size_t i = 0; i < n_new; ++i) generated.push_back(next_token(prompt, generated));
  return generated;
}

std::size_t GreedyOracle::model_calls() const {
  std::lock_guard lock(mu_);
  return calls_;
}

void AttackConfig::validate() const {
  corpus.validate();
  const auto& w = weights;
  for (double v : {w.unigram, w.bigram, w.consistency, w.judge}) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw Error(ErrorKind::kConfig, "loss weights must be finite and non-negative");
    }
  }
  if (w.unigram == 0.0 && w.bigram == 0.0 && w.consistency == 0.0 && w.judge == 0.0) {
    throw Error(ErrorKind::kConfig, "at least one loss component must be enabled");
  }
  if (w.unigram > 0.0) {
    if (!ref_unigram) throw Error(ErrorKind::kConfig, "unigram loss enabled without a reference");
    if (ref_unigram->size() != corpus.vocab_size) {
      throw Error(ErrorKind::kConfig, "reference unigram has the wrong vocabulary size");
    }
    const double sum = std::accumulate(ref_unigram->begin(), ref_unigram->end(), 0.0);
    if (std::abs(sum - 1.0) > 1e-9) {
      throw Error(ErrorKind::kConfig, "reference unigram does not sum to 1");
    }
  }
  if (w.bigram > 0.0) {
    if (!ref_bigram) throw Error(ErrorKind::kConfig, "bigram loss enabled without a reference");
    for (const auto& [ctx, row] : ref_bigram->rows) {
      double sum = 0.0;
      for (const auto& [_, p] : row) sum += p;
      if (std::abs(sum - 1.0) > 1e-9) {
        throw Error(ErrorKind::kConfig, "reference bigram row " + std::to_string(ctx) +
                                            " does not sum to 1");
      }
    }
  }
  if (w.consistency > 0.0 && !oracle) {
    throw Error(ErrorKind::kConfig, "consistency penalty enabled without an oracle model");
  }
  if (oracle && oracle->model().config().vocab_size != corpus.vocab_size) {
    throw Error(ErrorKind::kConfig, "oracle vocabulary does not match corpus");
  }
  if (w.judge > 0.0 && !judge) throw Error(ErrorKind::kConfig, "judge loss enabled without a judge");
}

double unigram_loss(const PermTable& perm, const TranscriptCorpus& corpus,
                    const std::optional<std::vector<double>>& ref) {
  if (!ref) throw Error(ErrorKind::kConfig, "unigram loss needs a reference distribution");
  AttackConfig cfg;
  cfg.corpus = corpus;
  cfg.ref_unigram = ref;
  cfg.weights.unigram = 1.0;
  check_perm(perm, corpus);
  return Objective(cfg).evaluate(perm).unigram;
}

double bigram_loss(const PermTable& perm, const TranscriptCorpus& corpus,
                   const std::optional<BigramTable>& ref) {
  if (!ref) throw Error(ErrorKind::kConfig, "bigram loss needs a reference table");
  AttackConfig cfg;
  cfg.corpus = corpus;
  cfg.ref_bigram = ref;
  cfg.weights.bigram = 1.0;
  check_perm(perm, corpus);
  return Objective(cfg).evaluate(perm).bigram;
}

double consistency_penalty(const PermTable& perm, const TranscriptCorpus& corpus,
                           GreedyOracle* oracle) {
  if (oracle == nullptr) throw Error(ErrorKind::kConfig, "consistency penalty needs an oracle model");
  corpus.validate();
  check_perm(perm, corpus);
  return consistency_with(perm, corpus, *oracle);
}

double judge_loss(const PermTable& perm, const TranscriptCorpus& corpus, Judge* judge,
                  std::size_t sample, std::uint64_t seed) {
  if (judge == nullptr) throw Error(ErrorKind::kConfig, "judge loss needs a judge");
  corpus.validate();
  check_perm(perm, corpus);
  return judge_mean(perm, corpus, *judge, judged_pairs(corpus.pairs.size(), sample, seed));
}

LossBreakdown total_loss(const PermTable& perm, const AttackConfig& cfg) {
  return Objective(cfg).evaluate(perm);
}

Objective::Objective(const AttackConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  const auto& corpus = cfg.corpus;
  token_freq_.assign(corpus.vocab_size, 0.0);
  double tokens = 0.0;
  for (const auto& p : corpus.pairs) {
    const auto seq = joined(p);
    for (std::size_t i = 0; i < seq.size(); ++i) {
      token_freq_[seq[i]] += 1.0;
      tokens += 1.0;
      if (i > 0) {
        pair_counts_[seq[i - 1]][seq[i]] += 1.0;
        context_totals_[seq[i - 1]] += 1.0;
        bigram_total_ += 1.0;
      }
    }
  }
  if (tokens > 0.0) {
    for (double& f : token_freq_) f /= tokens;
  }
  judged_pairs_ = judged_pairs(corpus.pairs.size(), cfg.judge_sample, cfg.seed);
}

LossBreakdown Objective::evaluate(const PermTable& perm) const {
  check_perm(perm, cfg_.corpus);
  const LossWeights& w = cfg_.weights;
  LossBreakdown out;

  if (w.unigram > 0.0) {
    // perm is a bijection, so every plaintext id is hit by exactly one
    // ciphertext id and the L1 sum runs over ciphertext ids.
    const auto& ref = *cfg_.ref_unigram;
    double l1 = 0.0;
    for (std::size_t c = 0; c < token_freq_.size(); ++c) l1 += std::abs(token_freq_[c] - ref[perm[c]]);
    out.unigram = l1;
  }

  if (w.bigram > 0.0 && bigram_total_ > 0.0) {
    const auto& ref = cfg_.ref_bigram->rows;
    double weighted = 0.0;
    for (const auto& [ctx, row] : pair_counts_) {
      const double n_ctx = context_totals_.at(ctx);
      const auto ref_it = ref.find(perm[ctx]);
      double l1 = 0.0;
      double ref_covered = 0.0;
      for (const auto& [next, n] : row) {
        double r = 0.0;
        if (ref_it != ref.end()) {
          if (auto it = ref_it->second.find(perm[next]); it != ref_it->second.end()) r = it->second;
        }
        l1 += std::abs(n / n_ctx - r);
        ref_covered += r;
      }
      // Reference mass on successors never observed after this context.
      if (ref_it != ref.end()) {
        double ref_total = 0.0;
        for (const auto& [_, p] : ref_it->second) ref_total += p;
        l1 += std::max(0.0, ref_total - ref_covered);
      }
      weighted += n_ctx * l1;
    }
    out.bigram = weighted / bigram_total_;
  }

  if (w.consistency > 0.0) out.consistency = consistency_with(perm, cfg_.corpus, *cfg_.oracle);
  if (w.judge > 0.0) out.judge = judge_mean(perm, cfg_.corpus, *cfg_.judge, judged_pairs_);

  out.total = w.unigram * out.unigram + w.bigram * out.bigram + w.consistency * out.consistency +
              w.judge * out.judge;
  return out;
}

AttackState brute_force(const AttackConfig& cfg) {
  const std::size_t n = cfg.corpus.vocab_size;
  if (n > kBruteForceMaxVocab) {
    double count = 1.0;
    for (std::size_t k = 2; k <= n; ++k) count *= static_cast<double>(k);
    std::ostringstream msg;
    msg << "brute force over |V| = " << n << " means |V|! = " << count
        << " candidates; refusing above |V| = " << kBruteForceMaxVocab;
    throw Error(ErrorKind::kRefusal, msg.str());
  }
  const Objective objective(cfg);
  std::vector<std::uint32_t> map(n);
  std::iota(map.begin(), map.end(), 0u);

  AttackState state;
  state.method = "brute";
  state.seed = cfg.seed;
  state.stop = StopReason::kExhaustive;
  // Lexicographic enumeration with strict improvement keeps the smallest map
  // among ties.
  do {
    PermTable candidate(map);
    const LossBreakdown loss = objective.evaluate(candidate);
    ++state.evals_used;
    if (state.evals_used == 1 || loss.total < state.loss.total) {
      state.perm = std::move(candidate);
      state.loss = loss;
      state.trace.push_back({state.evals_used, loss.total});
    }
  } while (std::next_permutation(map.begin(), map.end()));
  state.budget = state.evals_used;
  return state;
}

AttackState random_sampling(const AttackConfig& cfg, std::size_t draws) {
  if (draws == 0) throw Error(ErrorKind::kPrecondition, "random sampling needs M >= 1");
  const Objective objective(cfg);
  Rng rng(cfg.seed);
  AttackState state;
  state.method = "random";
  state.seed = cfg.seed;
  state.budget = draws;
  state.stop = StopReason::kSampled;
  for (std::size_t m = 0; m < draws; ++m) {
    PermTable candidate(rng.permutation(objective.vocab_size()));
    const LossBreakdown loss = objective.evaluate(candidate);
    ++state.evals_used;
    if (m == 0 || loss.total < state.loss.total) {
      state.perm = std::move(candidate);
      state.loss = loss;
      state.trace.push_back({state.evals_used, loss.total});
    }
  }
  return state;
}

AttackState hill_climb(const AttackConfig& cfg, std::size_t restarts,
                       const std::optional<PermTable>& start) {
  if (cfg.budget == 0) throw Error(ErrorKind::kPrecondition, "hill climbing needs a budget >= 1");
  if (restarts == 0) throw Error(ErrorKind::kPrecondition, "hill climbing needs at least one restart");
  const Objective objective(cfg);
  const std::size_t n = objective.vocab_size();
  if (start && start->size() != n) {
    throw Error(ErrorKind::kShape, "start permutation does not match vocabulary");
  }

  std::vector<std::pair<std::uint32_t, std::uint32_t>> swaps;
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::uint32_t j = i + 1; j < n; ++j) swaps.emplace_back(i, j);
  }

  std::size_t evals = 0;
  std::optional<AttackState> best;
  for (std::size_t r = 0; r < restarts; ++r) {
    const std::size_t share = cfg.budget / restarts + (r < cfg.budget % restarts ? 1 : 0);
    if (share == 0) continue;
    Rng rng(mix_seed(cfg.seed, r));
    PermTable current = (r == 0 && start) ? *start : PermTable(rng.permutation(n));

    AttackState run;
    run.method = "hill";
    run.seed = cfg.seed;
    run.loss = objective.evaluate(current);
    std::size_t used = 1;
    run.trace.push_back({evals + used, run.loss.total});

    bool out_of_budget = false;
    bool certified = false;
    while (!out_of_budget && !certified) {
      // One sweep: every transposition in random order until one improves.
      for (std::size_t k = swaps.size(); k > 1; --k) {
        std::swap(swaps[k - 1], swaps[static_cast<std::size_t>(rng.below(k))]);
      }
      bool improved = false;
      for (const auto& [a, b] : swaps) {
        if (used >= share) {
          out_of_budget = true;
          break;
        }
        current.swap_images(a, b);
        const LossBreakdown loss = objective.evaluate(current);
        ++used;
        if (loss.total < run.loss.total) {
          run.loss = loss;
          run.trace.push_back({evals + used, loss.total});
          improved = true;
          break;
        }
        current.swap_images(a, b);
      }
      if (!improved && !out_of_budget) certified = true;
    }
    run.perm = current;
    run.stop = certified ? StopReason::kLocalOptimum : StopReason::kBudget;
    evals += used;
    if (!best || better(run.loss, run.perm, best->loss, best->perm)) best = std::move(run);
  }

  best->evals_used = evals;
  best->budget = cfg.budget;
  return *best;
}

double recovery_rate(const PermTable& candidate, const PermTable& truth, const TranscriptCorpus& corpus) {
  check_perm(candidate, corpus);
  check_perm(truth, corpus);
  std::size_t total = 0, correct = 0;
  for (const auto& p : corpus.pairs) {
    for (auto id : joined(p)) {
      ++total;
      if (candidate[id] == truth[id]) ++correct;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

std::string_view stop_reason_name(StopReason r) {
  switch (r) {
    case StopReason::kExhaustive: return "exhaustive";
    case StopReason::kSampled: return "sampled";
    case StopReason::kLocalOptimum: return "local_optimum";
    case StopReason::kBudget: return "budget_exhausted";
  }
  return "unknown";
}

json to_json(const AttackState& s) {
  json trace = json::array();
  for (const auto& t : s.trace) trace.push_back({t.eval_index, t.loss});
  return json{{"method", s.method},
              {"perm", s.perm.map()},
              {"loss",
               {{"total", s.loss.total},
                {"unigram", s.loss.unigram},
                {"bigram", s.loss.bigram},
                {"consistency", s.loss.consistency},
                {"judge", s.loss.judge}}},
              {"evals_used", s.evals_used},
              {"budget", s.budget},
              {"seed", s.seed},
              {"stop_reason", stop_reason_name(s.stop)},
              {"trace", trace}};
}

}  // namespace ee
