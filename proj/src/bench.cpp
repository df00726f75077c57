#include "ee/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "ee/bytes.hpp"
#include "ee/error.hpp"

namespace ee {

namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

void check_arms(const ModelBundle& vi, const ModelBundle& ee, const EEKey& key) {
  if (vi.domain() != Domain::kPlaintext) {
    throw Error(ErrorKind::kDomain, "VI arm must be a plaintext model");
  }
  if (ee.domain() != Domain::kCiphertext) {
    throw Error(ErrorKind::kDomain, "EE arm must be a ciphertext model");
  }
  if (!(vi.config() == ee.config())) {
    throw Error(ErrorKind::kPairing, "VI and EE models have different configs");
  }
  key.check_matches(vi.config());
  if (ee.key_id() != key.key_id()) {
    throw Error(ErrorKind::kPairing, "EE model was encrypted with key " + hex64(ee.key_id()) +
                                         ", not " + hex64(key.key_id()));
  }
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string secs(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

std::vector<TokenSeq> load_prompts(const std::filesystem::path& path, std::size_t vocab_size) {
  const Bytes raw = read_file(path);
  const std::string text(raw.begin(), raw.end());
  std::vector<TokenSeq> prompts;
  std::size_t start = 0, line_no = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(start, end - start);
    ++line_no;
    if (line.find_first_not_of(" \t\r") != std::string::npos) {
      TokenSeq p;
      try {
        p.ids = json::parse(line).at("input_ids").get<std::vector<std::uint32_t>>();
      } catch (const json::exception& e) {
        throw FormatError("prompt line " + std::to_string(line_no) + ": " + e.what(), start);
      }
      if (p.ids.empty()) throw FormatError("prompt line " + std::to_string(line_no) + " is empty", start);
      for (auto id : p.ids) {
        if (id >= vocab_size) {
          throw Error(ErrorKind::kRange, "prompt line " + std::to_string(line_no) + ": token " +
                                             std::to_string(id) + " outside vocabulary " +
                                             std::to_string(vocab_size));
        }
      }
      prompts.push_back(std::move(p));
    }
    start = end + 1;
  }
  if (prompts.empty()) throw FormatError("prompt corpus has no prompts", 0);
  return prompts;
}

void save_prompts(std::span<const TokenSeq> prompts, const std::filesystem::path& path) {
  std::string out;
  for (const auto& p : prompts) out += json{{"input_ids", p.ids}}.dump() + "\n";
  write_text(path, out);
}

FidelityScore fidelity_score(std::span<const double> vi, std::span<const double> ee) {
  if (vi.size() != ee.size()) {
    throw Error(ErrorKind::kShape, "fidelity: " + std::to_string(vi.size()) + " VI scores vs " +
                                       std::to_string(ee.size()) + " EE scores");
  }
  if (vi.empty()) throw Error(ErrorKind::kDomain, "fidelity of an empty score list");
  FidelityScore out;
  double sum = 0.0;
  for (std::size_t i = 0; i < vi.size(); ++i) {
    if (!(vi[i] >= 0.0 && vi[i] <= 1.0 && ee[i] >= 0.0 && ee[i] <= 1.0)) {
      throw Error(ErrorKind::kDomain, "confidence score outside [0, 1] at index " + std::to_string(i));
    }
    const double hi = std::max(vi[i], ee[i]);
    if (hi == 0.0) {
      ++out.skipped_zero_pairs;
      continue;
    }
    sum += std::abs(ee[i] - vi[i]) / hi;
  }
  out.value = 1.0 - sum / static_cast<double>(vi.size());
  return out;
}

double fidelity(std::span<const double> vi, std::span<const double> ee) {
  return fidelity_score(vi, ee).value;
}

FidelityReport run_fidelity_suite(const ModelBundle& model_vi, const ModelBundle& model_ee,
                                  const EEKey& key, std::span<const TokenSeq> prompts) {
  check_arms(model_vi, model_ee, key);
  FidelityReport r;
  for (const auto& p : prompts) {
    r.scores_vi.push_back(first_token_confidence(model_vi, p));
    if (p.size() == 0) throw Error(ErrorKind::kShape, "empty prompt");
    Tensor2 x = embed(model_ee, encrypt_tokens(key, p));
    run_layers(model_ee, x, 0, model_ee.config().n_layers);
    const Tensor2 plain_logits = decrypt_logits(key, last_position_logits(model_ee, x));
    r.scores_ee.push_back(max_probability(plain_logits.row(0)));
  }
  r.n = prompts.size();
  const FidelityScore s = fidelity_score(r.scores_vi, r.scores_ee);
  r.fidelity = s.value;
  r.skipped_zero_pairs = s.skipped_zero_pairs;
  return r;
}

double median(std::vector<double> v) {
  if (v.empty()) throw Error(ErrorKind::kDomain, "median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

LatencyReport measure_latency(const ModelBundle& model_vi, const ModelBundle& model_ee,
                              const EEKey& key, std::span<const TokenSeq> prompts,
                              std::size_t n_new, std::size_t repeats) {
  if (repeats < 3) {
    throw Error(ErrorKind::kPrecondition, "latency needs at least 3 repeats, got " + std::to_string(repeats));
  }
  if (prompts.empty()) throw Error(ErrorKind::kPrecondition, "latency needs at least one prompt");
  check_arms(model_vi, model_ee, key);

  std::size_t sink = 0;
  auto time_vi = [&](const TokenSeq& p) {
    const auto t0 = Clock::now();
    sink += greedy_decode(model_vi, p, n_new).ids.back();
    return seconds_since(t0);
  };
  auto time_ee = [&](const TokenSeq& p) {
    const auto t0 = Clock::now();
    const TokenSeq out = decrypt_tokens(key, greedy_decode(model_ee, encrypt_tokens(key, p), n_new));
    sink += out.ids.back();
    return seconds_since(t0);
  };

  // Warm both arms once so neither pays first-touch costs.
  for (const auto& p : prompts) time_vi(p), time_ee(p);

  LatencyReport r;
  r.repeats = repeats;
  r.batch_size = prompts.size();
  std::vector<double> deltas;
  for (std::size_t i = 0; i < repeats; ++i) {
    // Arms alternate per prompt, and the leading arm alternates too, so slow
    // scheduler phases land on both arms alike.
    double vi = 0.0, ee = 0.0;
    for (std::size_t j = 0; j < prompts.size(); ++j) {
      if ((i + j) % 2 == 0) {
        vi += time_vi(prompts[j]);
        ee += time_ee(prompts[j]);
      } else {
        ee += time_ee(prompts[j]);
        vi += time_vi(prompts[j]);
      }
    }
    r.vi_samples.push_back(vi);
    r.ee_samples.push_back(ee);
    deltas.push_back((ee - vi) / vi * 100.0);
  }
  if (sink == static_cast<std::size_t>(-1)) std::fputc(' ', stderr);  // keep the work observable

  r.vi_seconds = median(r.vi_samples);
  r.ee_seconds = median(r.ee_samples);
  r.delta_t_pct = (r.ee_seconds - r.vi_seconds) / r.vi_seconds * 100.0;
  double mean = 0.0;
  for (double d : deltas) mean += d;
  mean /= static_cast<double>(deltas.size());
  double var = 0.0;
  for (double d : deltas) var += (d - mean) * (d - mean);
  r.delta_t_std_pct = std::sqrt(var / static_cast<double>(deltas.size() - 1));
  return r;
}

json to_json(const BenchRow& row) {
  const auto& f = row.fidelity;
  const auto& l = row.latency;
  return {{"model", row.model},
          {"fidelity",
           {{"n", f.n},
            {"fidelity", f.fidelity},
            {"skipped_zero_pairs", f.skipped_zero_pairs},
            {"scores_vi", f.scores_vi},
            {"scores_ee", f.scores_ee}}},
          {"latency",
           {{"vi_seconds", l.vi_seconds},
            {"ee_seconds", l.ee_seconds},
            {"delta_t_pct", l.delta_t_pct},
            {"delta_t_std_pct", l.delta_t_std_pct},
            {"repeats", l.repeats},
            {"batch_size", l.batch_size},
            {"vi_samples", l.vi_samples},
            {"ee_samples", l.ee_samples}}}};
}

BenchRow bench_row_from_json(const json& j) {
  try {
    BenchRow row;
    row.model = j.at("model").get<std::string>();
    const auto& f = j.at("fidelity");
    row.fidelity.n = f.at("n").get<std::size_t>();
    row.fidelity.fidelity = f.at("fidelity").get<double>();
    row.fidelity.skipped_zero_pairs = f.at("skipped_zero_pairs").get<std::size_t>();
    row.fidelity.scores_vi = f.at("scores_vi").get<std::vector<double>>();
    row.fidelity.scores_ee = f.at("scores_ee").get<std::vector<double>>();
    const auto& l = j.at("latency");
    row.latency.vi_seconds = l.at("vi_seconds").get<double>();
    row.latency.ee_seconds = l.at("ee_seconds").get<double>();
    row.latency.delta_t_pct = l.at("delta_t_pct").get<double>();
    row.latency.delta_t_std_pct = l.at("delta_t_std_pct").get<double>();
    row.latency.repeats = l.at("repeats").get<std::size_t>();
    row.latency.batch_size = l.at("batch_size").get<std::size_t>();
    row.latency.vi_samples = l.at("vi_samples").get<std::vector<double>>();
    row.latency.ee_samples = l.at("ee_samples").get<std::vector<double>>();
    return row;
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad report row: ") + e.what(), 0);
  }
}

std::string report_table(std::span<const BenchRow> rows) {
  std::string out =
      "| Model | VI(s) | EE(s) | ΔT(%) | Fid(%) | ΔT Std(%) |\n"
      "|---|---:|---:|---:|---:|---:|\n";
  for (const auto& r : rows) {
    out += "| " + r.model + " | " + secs(r.latency.vi_seconds) + " | " + secs(r.latency.ee_seconds) +
           " | " + pct(r.latency.delta_t_pct) + " | " + pct(r.fidelity.fidelity * 100.0) + " | " +
           pct(r.latency.delta_t_std_pct) + " |\n";
  }
  return out;
}

void emit_report(std::span<const BenchRow> rows, const std::filesystem::path& dir,
                 const std::string& name) {
  json j = {{"rows", json::array()}};
  for (const auto& r : rows) j["rows"].push_back(to_json(r));
  write_text(dir / (name + ".report.json"), j.dump(2) + "\n");
  write_text(dir / (name + ".report.md"), report_table(rows));
}

std::vector<BenchRow> load_report(const std::filesystem::path& json_path) {
  const Bytes raw = read_file(json_path);
  json j;
  try {
    j = json::parse(raw.begin(), raw.end());
  } catch (const json::exception& e) {
    throw FormatError(std::string("report is not JSON: ") + e.what(), 0);
  }
  std::vector<BenchRow> rows;
  if (!j.contains("rows") || !j["rows"].is_array()) throw FormatError("report has no rows array", 0);
  for (const auto& r : j["rows"]) rows.push_back(bench_row_from_json(r));
  return rows;
}

}  // namespace ee
