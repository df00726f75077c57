#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ee {

// Rates a decoded (input, output) pair on a 0..10 coherence scale.
class Judge {
 public:
  virtual ~Judge() = default;
  virtual int rate(std::span<const std::uint32_t> input, std::span<const std::uint32_t> output) = 0;
};

// Deterministic offline judge: the rating is a seeded hash of the pair, or a
// fixed value when one is given.
class StubJudge : public Judge {
 public:
  explicit StubJudge(std::uint64_t seed, std::optional<int> fixed_rating = std::nullopt);
  int rate(std::span<const std::uint32_t> input, std::span<const std::uint32_t> output) override;

 private:
  std::uint64_t seed_;
  std::optional<int> fixed_;
};

// Chat-completion style endpoint. The reply's first message content must
// contain an integer rating 0..10.
class HttpJudge : public Judge {
 public:
  struct Options {
    std::chrono::milliseconds timeout{5000};
    int max_retries = 2;
    std::string model = "ee-judge";
  };

  explicit HttpJudge(std::string url);
  HttpJudge(std::string url, Options options);
  int rate(std::span<const std::uint32_t> input, std::span<const std::uint32_t> output) override;

  static std::string request_body(const std::string& model, std::span<const std::uint32_t> input,
                                  std::span<const std::uint32_t> output);
  // Throws a protocol error when no rating can be extracted.
  static int parse_rating(const std::string& response_body);

 private:
  std::string host_;
  std::string path_;
  Options options_;
};

inline constexpr const char* kJudgeRubric =
    "You are grading a model response. Score how coherent and correct the response is "
    "for the given input on a scale from 0 (nonsense) to 10 (fully coherent and correct). "
    "Answer with a single integer.";

// HttpJudge when EE_JUDGE_URL is set, otherwise a StubJudge with `seed`.
std::shared_ptr<Judge> judge_from_environment(std::uint64_t seed);

}  // namespace ee
