#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "ee/key.hpp"
#include "ee/model.hpp"

namespace ee {

// Prompt corpus: JSON Lines, one {"input_ids": [...]} per line. Other keys
// are ignored, so transcript corpora load as prompt corpora too.
std::vector<TokenSeq> load_prompts(const std::filesystem::path& path, std::size_t vocab_size);
void save_prompts(std::span<const TokenSeq> prompts, const std::filesystem::path& path);

struct FidelityReport {
  std::size_t n = 0;
  std::vector<double> scores_vi;
  std::vector<double> scores_ee;
  double fidelity = 0.0;
  std::size_t skipped_zero_pairs = 0;
};

struct FidelityScore {
  double value = 0.0;
  std::size_t skipped_zero_pairs = 0;
};

// 1 - mean(|ee - vi| / max(ee, vi)). A pair where both scores are 0 adds 0
// to the sum and is counted.
FidelityScore fidelity_score(std::span<const double> scores_vi, std::span<const double> scores_ee);
double fidelity(std::span<const double> scores_vi, std::span<const double> scores_ee);

// Per prompt: VI confidence from the plaintext model, EE confidence from the
// ciphertext model's decrypted logits.
FidelityReport run_fidelity_suite(const ModelBundle& model_vi, const ModelBundle& model_ee,
                                  const EEKey& key, std::span<const TokenSeq> prompts);

struct LatencyReport {
  double vi_seconds = 0.0;  // median
  double ee_seconds = 0.0;  // median
  double delta_t_pct = 0.0;
  double delta_t_std_pct = 0.0;
  std::size_t repeats = 0;
  std::size_t batch_size = 0;
  std::vector<double> vi_samples;
  std::vector<double> ee_samples;
};

// Wall clock of the full pipeline per arm: decode only for VI, encrypt tokens
// -> decode -> decrypt tokens for EE. Arms alternate prompt by prompt.
LatencyReport measure_latency(const ModelBundle& model_vi, const ModelBundle& model_ee,
                              const EEKey& key, std::span<const TokenSeq> prompts,
                              std::size_t n_new, std::size_t repeats);

struct BenchRow {
  std::string model;
  FidelityReport fidelity;
  LatencyReport latency;
};

nlohmann::json to_json(const BenchRow& row);
BenchRow bench_row_from_json(const nlohmann::json& j);

// Markdown table in the VI(s) / EE(s) / ΔT(%) / Fid(%) / ΔT Std(%) layout.
std::string report_table(std::span<const BenchRow> rows);

// Writes <dir>/<name>.report.json and <dir>/<name>.report.md.
void emit_report(std::span<const BenchRow> rows, const std::filesystem::path& dir,
                 const std::string& name);
std::vector<BenchRow> load_report(const std::filesystem::path& json_path);

double median(std::vector<double> values);

}  // namespace ee
