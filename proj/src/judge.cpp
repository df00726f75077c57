#include "ee/judge.hpp"

#include <cctype>
#include <cstdlib>
#include <sstream>

#include "httplib.h"
#include "json.hpp"

#include "ee/bytes.hpp"
#include "ee/error.hpp"
#include "ee/rng.hpp"

namespace ee {

namespace {

using nlohmann::json;

std::string ids_text(std::span<const std::uint32_t> ids) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < ids.size(); ++i) out << (i ? ", " : "") << ids[i];
  out << ']';
  return out.str();
}

}  // namespace

StubJudge::StubJudge(std::uint64_t seed, std::optional<int> fixed_rating)
    : seed_(seed), fixed_(fixed_rating) {
  if (fixed_ && (*fixed_ < 0 || *fixed_ > 10)) {
    throw Error(ErrorKind::kConfig, "stub rating must be in 0..10");
  }
}

int StubJudge::rate(std::span<const std::uint32_t> input, std::span<const std::uint32_t> output) {
  if (fixed_) return *fixed_;
  ByteWriter w;
  w.put_u64(seed_);
  w.put_u32(static_cast<std::uint32_t>(input.size()));
  for (auto id : input) w.put_u32(id);
  for (auto id : output) w.put_u32(id);
  return static_cast<int>(mix_seed(fnv1a64(w.bytes()), seed_) % 11);
}

HttpJudge::HttpJudge(std::string url) : HttpJudge(std::move(url), Options{}) {}

HttpJudge::HttpJudge(std::string url, Options options) : options_(options) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw Error(ErrorKind::kConfig, "judge URL '" + url + "' has no scheme");
  }
  const auto path_start = url.find('/', scheme_end + 3);
  host_ = url.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/v1/chat/completions" : url.substr(path_start);
}

std::string HttpJudge::request_body(const std::string& model, std::span<const std::uint32_t> input,
                                    std::span<const std::uint32_t> output) {
  const json body = {
      {"model", model},
      {"temperature", 0},
      {"messages",
       json::array({{{"role", "system"}, {"content", kJudgeRubric}},
                    {{"role", "user"},
                     {"content", "Input tokens: " + ids_text(input) +
                                     "\nResponse tokens: " + ids_text(output)}}})}};
  return body.dump();
}

int HttpJudge::parse_rating(const std::string& response_body) {
  std::string content;
  try {
    const json reply = json::parse(response_body);
    content = reply.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kProtocol, std::string("malformed judge response: ") + e.what());
  }
  for (std::size_t i = 0; i < content.size(); ++i) {
    if (!std::isdigit(static_cast<unsigned char>(content[i]))) continue;
    std::size_t j = i;
    while (j < content.size() && std::isdigit(static_cast<unsigned char>(content[j]))) ++j;
    const int rating = std::atoi(content.substr(i, std::min<std::size_t>(j - i, 3)).c_str());
    if (j - i > 2 || rating > 10) break;
    return rating;
  }
  throw Error(ErrorKind::kProtocol, "judge response carries no rating in 0..10: '" + content + "'");
}

int HttpJudge::rate(std::span<const std::uint32_t> input, std::span<const std::uint32_t> output) {
  httplib::Client client(host_);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(options_.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(options_.timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());

  const std::string body = request_body(options_.model, input, output);
  std::string last_error;
  for (int attempt = 0; attempt <= options_.max_retries; ++attempt) {
    auto res = client.Post(path_, body, "application/json");
    if (!res) {
      last_error = "judge endpoint " + host_ + path_ + " unreachable: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500 || res->status == 429) {
      last_error = "judge endpoint returned HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) {
      throw Error(ErrorKind::kProtocol, "judge endpoint returned HTTP " + std::to_string(res->status));
    }
    return parse_rating(res->body);
  }
  throw RemoteError(last_error, options_.max_retries);
}

std::shared_ptr<Judge> judge_from_environment(std::uint64_t seed) {
  const char* url = std::getenv("EE_JUDGE_URL");
  if (url != nullptr && *url != '\0') return std::make_shared<HttpJudge>(url);
  return std::make_shared<StubJudge>(seed);
}

}  // namespace ee
