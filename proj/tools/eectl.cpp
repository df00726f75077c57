// eectl: command-line front end for the equivariant-encryption toolkit.
//
// Every subcommand accepts --config <file.json> whose keys are long option
// names; flags given on the command line win. The fully resolved parameters
// are written next to the primary output as <output>.run.json.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <system_error>

#include "CLI11.hpp"
#include "json.hpp"

#include "ee/attack.hpp"
#include "ee/bench.hpp"
#include "ee/error.hpp"
#include "ee/judge.hpp"
#include "ee/key.hpp"
#include "ee/model.hpp"
#include "ee/shard.hpp"

namespace {

using nlohmann::json;
using ee::Error;
using ee::ErrorKind;

std::string scalar_text(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number()) return v.dump();
  throw Error(ErrorKind::kUsage, "config value " + v.dump() + " is not a scalar");
}

// Fills options not given on the command line from a JSON object.
void apply_config(CLI::App& sub, const std::string& path) {
  const ee::Bytes raw = ee::read_file(path);
  json cfg;
  try {
    cfg = json::parse(raw.begin(), raw.end());
  } catch (const json::exception& e) {
    throw ee::FormatError("config " + path + ": " + e.what(), 0);
  }
  if (!cfg.is_object()) throw Error(ErrorKind::kUsage, "config " + path + " must be a JSON object");
  for (const auto& [key, value] : cfg.items()) {
    if (key == "subcommand" || key == "config") continue;
    CLI::Option* opt = sub.get_option_no_throw("--" + key);
    if (opt == nullptr) throw Error(ErrorKind::kUsage, "config key '" + key + "' is not an option of " + sub.get_name());
    if (opt->count() > 0 || value.is_null()) continue;
    if (value.is_array()) {
      std::vector<std::string> items;
      for (const auto& v : value) items.push_back(scalar_text(v));
      opt->add_result(items);
    } else if (value.is_boolean() && opt->get_expected_max() == 0) {
      if (!value.get<bool>()) continue;
      opt->add_result("true");
    } else {
      opt->add_result(scalar_text(value));
    }
    opt->run_callback();
  }
}

json typed(const std::string& s) {
  if (s.empty()) return s;
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used == s.size()) return v;
    const double d = std::stod(s, &used);
    if (used == s.size()) return d;
  } catch (const std::exception&) {
  }
  return s;
}

json resolved_config(const CLI::App& sub) {
  json out = {{"subcommand", sub.get_name()}};
  for (const CLI::Option* opt : sub.get_options()) {
    if (opt->get_lnames().empty()) continue;
    const std::string& key = opt->get_lnames().front();
    if (key == "help" || key == "config") continue;
    if (opt->get_expected_max() == 0) {
      out[key] = opt->count() > 0;
      continue;
    }
    std::vector<std::string> values = opt->results();
    if (values.empty() && !opt->get_default_str().empty()) values = {opt->get_default_str()};
    if (opt->get_expected_max() > 1) {
      json arr = json::array();
      for (const auto& v : values) arr.push_back(typed(v));
      out[key] = arr;
    } else {
      out[key] = values.empty() ? json(nullptr) : typed(values.front());
    }
  }
  return out;
}

void record_run(const CLI::App& sub, const std::string& anchor) {
  ee::write_text(anchor + ".run.json", resolved_config(sub).dump(2) + "\n");
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create directory " + dir + ": " + ec.message());
}

void require(const std::string& value, const std::string& flag) {
  if (value.empty()) throw Error(ErrorKind::kUsage, "missing required option --" + flag);
}

std::string ids_line(const std::vector<std::uint32_t>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) out += (i ? " " : "") + std::to_string(ids[i]);
  return out;
}

// ---- init-model ----

struct InitModelArgs {
  std::string model_config, out;
  std::size_t vocab = 128, d_model = 32, layers = 2, heads = 4, d_ff = 64, max_seq = 64;
  std::string norm = "layernorm", act = "gelu";
  std::uint64_t seed = 42;
};

ee::ModelConfig model_config_from(const InitModelArgs& a) {
  if (!a.model_config.empty()) {
    const ee::Bytes raw = ee::read_file(a.model_config);
    try {
      return json::parse(raw.begin(), raw.end()).get<ee::ModelConfig>();
    } catch (const json::exception& e) {
      throw ee::FormatError("model config " + a.model_config + ": " + e.what(), 0);
    }
  }
  return json{{"vocab_size", a.vocab}, {"d_model", a.d_model}, {"n_layers", a.layers},
              {"n_heads", a.heads},    {"d_ff", a.d_ff},       {"max_seq_len", a.max_seq},
              {"norm", a.norm},        {"act", a.act}}
      .get<ee::ModelConfig>();
}

void add_model_shape(CLI::App* sub, InitModelArgs& a) {
  sub->add_option("--model-config", a.model_config, "Model config JSON (overrides shape flags)");
  sub->add_option("--vocab", a.vocab, "Vocabulary size");
  sub->add_option("--d-model", a.d_model, "Residual width");
  sub->add_option("--layers", a.layers, "Decoder layers");
  sub->add_option("--heads", a.heads, "Attention heads");
  sub->add_option("--d-ff", a.d_ff, "Feed-forward width");
  sub->add_option("--max-seq", a.max_seq, "Maximum sequence length");
  sub->add_option("--norm", a.norm, "layernorm | rmsnorm");
  sub->add_option("--act", a.act, "relu | gelu | silu");
}

// ---- attack ----

struct AttackArgs {
  std::string method, corpus, oracle_model, ref_corpus, truth_key, out;
  std::size_t vocab = 0, budget = 1000, draws = 0, restarts = 1, judge_sample = 0;
  double lambda_unigram = 0.0, lambda_bigram = 0.0, lambda_consistency = 1.0, lambda_judge = 0.0;
  std::uint64_t seed = 0;
};

json run_attack(const AttackArgs& a) {
  require(a.method, "method");
  require(a.corpus, "corpus");
  std::optional<ee::ModelBundle> oracle_model;
  std::size_t vocab = a.vocab;
  if (!a.oracle_model.empty()) {
    oracle_model = ee::load_model(a.oracle_model);
    if (oracle_model->domain() != ee::Domain::kPlaintext) {
      throw Error(ErrorKind::kDomain, "oracle model must be plaintext");
    }
    if (vocab != 0 && vocab != oracle_model->config().vocab_size) {
      throw Error(ErrorKind::kConfig, "--vocab disagrees with the oracle model");
    }
    vocab = oracle_model->config().vocab_size;
  }
  if (vocab == 0) throw Error(ErrorKind::kUsage, "give --vocab or --oracle-model");

  ee::AttackConfig cfg;
  cfg.corpus = ee::load_corpus(a.corpus, vocab);
  cfg.weights = {a.lambda_unigram, a.lambda_bigram, a.lambda_consistency, a.lambda_judge};
  cfg.seed = a.seed;
  cfg.budget = a.budget;
  cfg.judge_sample = a.judge_sample;
  if (oracle_model) cfg.oracle = std::make_shared<ee::GreedyOracle>(*oracle_model);
  if (!a.ref_corpus.empty()) {
    ee::TranscriptCorpus ref{{}, vocab};
    for (auto& p : ee::load_prompts(a.ref_corpus, vocab)) ref.pairs.push_back({std::move(p.ids), {}});
    cfg.ref_unigram = ee::unigram_distribution(ref);
    cfg.ref_bigram = ee::bigram_distribution(ref);
  }
  if (a.lambda_judge > 0.0) cfg.judge = ee::judge_from_environment(a.seed);

  ee::AttackState state;
  if (a.method == "brute") {
    state = ee::brute_force(cfg);
  } else if (a.method == "random") {
    state = ee::random_sampling(cfg, a.draws == 0 ? a.budget : a.draws);
  } else if (a.method == "hill") {
    state = ee::hill_climb(cfg, a.restarts);
  } else {
    throw Error(ErrorKind::kUsage, "unknown attack method '" + a.method + "'");
  }
  json out = ee::to_json(state);
  if (!a.truth_key.empty()) {
    const ee::EEKey key = ee::load_key(a.truth_key);
    const ee::PermTable truth = key.vocab_perm.inverse();
    out["recovered"] = state.perm == truth;
    out["recovery_rate"] = ee::recovery_rate(state.perm, truth, cfg.corpus);
  }
  return out;
}

// ---- shard-sim ----

struct ShardArgs {
  std::string model, key, plain_model, out_dir;
  std::vector<std::uint32_t> prompt;
  std::vector<std::string> fail;
  std::size_t n_new = 8, shards = 1, nodes = 0;
  std::uint64_t seed = 0;
  double lat_min = 1.0, lat_max = 5.0;
};

std::vector<ee::NodeFailure> parse_failures(const std::vector<std::string>& specs) {
  std::vector<ee::NodeFailure> out;
  for (const auto& s : specs) {
    const auto colon = s.find(':');
    try {
      if (colon == std::string::npos) throw std::invalid_argument(s);
      out.push_back({std::stoul(s.substr(0, colon)), std::stoul(s.substr(colon + 1))});
    } catch (const std::exception&) {
      throw Error(ErrorKind::kUsage, "--fail expects NODE:STEP, got '" + s + "'");
    }
  }
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"Equivariant encryption toolkit: keys, encrypted models, inference, attacks, shards"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  std::string config_path;

  auto with_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON file with option values; flags override it");
    return sub;
  };

  // init-model
  InitModelArgs im;
  auto* init = with_config(app.add_subcommand("init-model", "Create a seeded toy model"));
  add_model_shape(init, im);
  init->add_option("--seed", im.seed, "Weight seed");
  init->add_option("--out", im.out, "Output .eem path");

  // keygen
  InitModelArgs kg;
  std::string kg_model;
  bool kg_identity = false;
  auto* keygen = with_config(app.add_subcommand("keygen", "Generate a permutation key for a model config"));
  keygen->add_option("--model-config", kg.model_config, "Model config JSON");
  keygen->add_option("--model", kg_model, "Take the config from this .eem model");
  keygen->add_option("--seed", kg.seed, "Key seed");
  keygen->add_flag("--identity", kg_identity, "Emit the identity key");
  keygen->add_option("--out", kg.out, "Output .eekey path");

  // encrypt-model
  std::string em_model, em_key, em_out;
  auto* encrypt = with_config(app.add_subcommand("encrypt-model", "Transform a plaintext model with a key"));
  encrypt->add_option("--model", em_model, "Plaintext .eem");
  encrypt->add_option("--key", em_key, ".eekey");
  encrypt->add_option("--out", em_out, "Output ciphertext .eem");

  // infer
  std::string if_model, if_key, if_out;
  std::vector<std::uint32_t> if_prompt;
  std::size_t if_new = 8;
  auto* infer = with_config(app.add_subcommand("infer", "Greedy decoding; with a key runs encrypt -> decode -> decrypt"));
  infer->add_option("--model", if_model, ".eem model");
  infer->add_option("--key", if_key, "Key for a ciphertext model");
  infer->add_option("--prompt", if_prompt, "Plaintext prompt ids")->expected(1, -1);
  infer->add_option("--n-new", if_new, "Tokens to generate");
  infer->add_option("--out", if_out, "Also write ids here");

  // fidelity
  std::string fd_vi, fd_ee, fd_key, fd_corpus, fd_out_dir = ".", fd_name = "bench";
  std::size_t fd_repeats = 3, fd_new = 8, fd_latency_prompts = 20;
  auto* fid = with_config(app.add_subcommand("fidelity", "Fidelity and latency report, VI vs EE"));
  fid->add_option("--vi-model", fd_vi, "Plaintext .eem");
  fid->add_option("--ee-model", fd_ee, "Ciphertext .eem");
  fid->add_option("--key", fd_key, ".eekey used for the EE model");
  fid->add_option("--corpus", fd_corpus, "Prompt corpus (JSON Lines)");
  fid->add_option("--repeats", fd_repeats, "Latency repeats (0 skips latency)");
  fid->add_option("--n-new", fd_new, "Decode length for latency");
  fid->add_option("--latency-prompts", fd_latency_prompts, "Prompts used for latency");
  fid->add_option("--out-dir", fd_out_dir, "Report directory");
  fid->add_option("--name", fd_name, "Report name and table row label");

  // attack
  AttackArgs at;
  auto* attack = with_config(app.add_subcommand("attack", "Recover the vocabulary permutation from a transcript corpus"));
  attack->add_option("--method", at.method, "brute | random | hill");
  attack->add_option("--corpus", at.corpus, "Ciphertext transcript corpus (JSON Lines)");
  attack->add_option("--oracle-model", at.oracle_model, "Plaintext model for the consistency penalty");
  attack->add_option("--ref-corpus", at.ref_corpus, "Plaintext prompts for reference statistics");
  attack->add_option("--vocab", at.vocab, "Vocabulary size when no oracle model is given");
  attack->add_option("--lambda-unigram", at.lambda_unigram);
  attack->add_option("--lambda-bigram", at.lambda_bigram);
  attack->add_option("--lambda-consistency", at.lambda_consistency);
  attack->add_option("--lambda-judge", at.lambda_judge, "Judge weight; EE_JUDGE_URL selects a remote judge");
  attack->add_option("--judge-sample", at.judge_sample, "Pairs rated per evaluation (0 = all)");
  attack->add_option("--budget", at.budget, "Loss evaluations");
  attack->add_option("--draws", at.draws, "Random-sampling draws (default: budget)");
  attack->add_option("--restarts", at.restarts, "Hill-climbing restarts");
  attack->add_option("--seed", at.seed);
  attack->add_option("--truth-key", at.truth_key, "Key to score the recovered permutation against");
  attack->add_option("--out", at.out, "Result JSON path");

  // shard-sim
  ShardArgs sh;
  auto* shard = with_config(app.add_subcommand("shard-sim", "Run a ciphertext model through simulated shard nodes"));
  shard->add_option("--model", sh.model, "Ciphertext .eem");
  shard->add_option("--key", sh.key, "Key: prompt is plaintext and output is decrypted");
  shard->add_option("--plain-model", sh.plain_model, "Plaintext model, enables the activation audit");
  shard->add_option("--prompt", sh.prompt, "Prompt ids")->expected(1, -1);
  shard->add_option("--n-new", sh.n_new);
  shard->add_option("--shards", sh.shards);
  shard->add_option("--nodes", sh.nodes, "Total nodes including spares (default: shards)");
  shard->add_option("--seed", sh.seed, "Broker seed");
  shard->add_option("--fail", sh.fail, "Crash NODE:STEP (repeatable)")->expected(0, -1);
  shard->add_option("--lat-min", sh.lat_min, "Per-hop latency floor (ms, virtual)");
  shard->add_option("--lat-max", sh.lat_max, "Per-hop latency ceiling (ms, virtual)");
  shard->add_option("--out-dir", sh.out_dir, "Directory for transcript.jsonl and result.json");

  // gen-corpus
  std::string gc_model, gc_key, gc_out, gc_dist = "zipf";
  std::size_t gc_vocab = 0, gc_count = 30, gc_len = 4, gc_new = 4;
  std::uint64_t gc_seed = 0;
  auto* gen = with_config(app.add_subcommand("gen-corpus", "Sample prompts, optionally with ciphertext greedy transcripts"));
  gen->add_option("--vocab", gc_vocab, "Vocabulary size (default: from --model)");
  gen->add_option("--count", gc_count);
  gen->add_option("--len", gc_len, "Prompt length");
  gen->add_option("--dist", gc_dist, "zipf | uniform");
  gen->add_option("--seed", gc_seed);
  gen->add_option("--model", gc_model, "Ciphertext model: emit (input, output) transcripts");
  gen->add_option("--key", gc_key, "Key that encrypts the sampled prompts");
  gen->add_option("--n-new", gc_new, "Transcript continuation length");
  gen->add_option("--out", gc_out, "Output JSON Lines path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : ee::exit_code(ErrorKind::kUsage);
  }

  CLI::App* sub = app.get_subcommands().front();
  if (!config_path.empty()) apply_config(*sub, config_path);

  if (sub == init) {
    require(im.out, "out");
    ee::save_model(ee::init_model(model_config_from(im), im.seed), im.out);
    record_run(*sub, im.out);
  } else if (sub == keygen) {
    require(kg.out, "out");
    if (kg.model_config.empty() && kg_model.empty()) {
      throw Error(ErrorKind::kUsage, "keygen needs --model-config or --model");
    }
    const ee::ModelConfig cfg = kg_model.empty() ? model_config_from(kg) : ee::load_model(kg_model).config();
    ee::save_key(kg_identity ? ee::identity_key(cfg) : ee::keygen(cfg, kg.seed), kg.out);
    record_run(*sub, kg.out);
  } else if (sub == encrypt) {
    require(em_model, "model");
    require(em_key, "key");
    require(em_out, "out");
    ee::save_model(ee::encrypt_model(ee::load_key(em_key), ee::load_model(em_model)), em_out);
    record_run(*sub, em_out);
  } else if (sub == infer) {
    require(if_model, "model");
    if (if_prompt.empty()) throw Error(ErrorKind::kUsage, "missing required option --prompt");
    const ee::ModelBundle model = ee::load_model(if_model);
    const ee::TokenSeq prompt{if_prompt, ee::Domain::kPlaintext};
    ee::TokenSeq out;
    if (if_key.empty()) {
      out = ee::greedy_decode(model, prompt, if_new);
    } else {
      const ee::EEKey key = ee::load_key(if_key);
      if (model.domain() != ee::Domain::kCiphertext) {
        throw Error(ErrorKind::kDomain, "a key was given but the model is plaintext");
      }
      if (model.key_id() != key.key_id()) throw Error(ErrorKind::kPairing, "model was encrypted with another key");
      out = ee::decrypt_tokens(key, ee::greedy_decode(model, ee::encrypt_tokens(key, prompt), if_new));
    }
    std::cout << ids_line(out.ids) << "\n";
    if (!if_out.empty()) {
      ee::write_text(if_out, ids_line(out.ids) + "\n");
      record_run(*sub, if_out);
    }
  } else if (sub == fid) {
    require(fd_vi, "vi-model");
    require(fd_ee, "ee-model");
    require(fd_key, "key");
    require(fd_corpus, "corpus");
    const ee::ModelBundle vi = ee::load_model(fd_vi);
    const ee::ModelBundle enc = ee::load_model(fd_ee);
    const ee::EEKey key = ee::load_key(fd_key);
    const auto prompts = ee::load_prompts(fd_corpus, vi.config().vocab_size);
    ee::BenchRow row;
    row.model = fd_name;
    row.fidelity = ee::run_fidelity_suite(vi, enc, key, prompts);
    if (fd_repeats > 0) {
      const std::size_t n = std::min(fd_latency_prompts, prompts.size());
      row.latency = ee::measure_latency(vi, enc, key, std::span(prompts).first(n), fd_new, fd_repeats);
    }
    const std::vector<ee::BenchRow> rows{row};
    ensure_dir(fd_out_dir);
    ee::emit_report(rows, fd_out_dir, fd_name);
    record_run(*sub, (std::filesystem::path(fd_out_dir) / fd_name).string());
    std::cout << ee::report_table(rows);
  } else if (sub == attack) {
    require(at.out, "out");
    const json result = run_attack(at);
    ee::write_text(at.out, result.dump(2) + "\n");
    record_run(*sub, at.out);
    std::cout << "method=" << result["method"].get<std::string>() << " loss=" << result["loss"]["total"]
              << " evals=" << result["evals_used"] << " stop=" << result["stop_reason"].get<std::string>() << "\n";
  } else if (sub == shard) {
    require(sh.model, "model");
    require(sh.out_dir, "out-dir");
    if (sh.prompt.empty()) throw Error(ErrorKind::kUsage, "missing required option --prompt");
    const ee::ModelBundle model = ee::load_model(sh.model);
    std::optional<ee::EEKey> key;
    if (!sh.key.empty()) key = ee::load_key(sh.key);
    const ee::TokenSeq plain_prompt{sh.prompt, ee::Domain::kPlaintext};
    const ee::TokenSeq cipher_prompt =
        key ? ee::encrypt_tokens(*key, plain_prompt) : ee::TokenSeq{sh.prompt, ee::Domain::kCiphertext};
    ee::BrokerConfig broker;
    broker.seed = sh.seed;
    broker.latency_min_ms = sh.lat_min;
    broker.latency_max_ms = sh.lat_max;
    broker.n_nodes = sh.nodes;
    broker.failures = parse_failures(sh.fail);
    const ee::PipelineResult r =
        ee::run_pipeline(model, ee::plan_shards(model.config(), sh.shards), broker, cipher_prompt, sh.n_new);

    ensure_dir(sh.out_dir);
    const std::filesystem::path dir(sh.out_dir);
    r.transcript.save(dir / "transcript.jsonl");
    json result = {{"output_cipher", r.output.ids},
                   {"reassignments", r.reassignments},
                   {"virtual_ms", r.virtual_ms},
                   {"transcript_hash", ee::hex64(r.transcript.hash())},
                   {"frames", r.transcript.entries.size()}};
    std::vector<std::uint32_t> shown = r.output.ids;
    if (key) {
      const ee::TokenSeq plain_out = ee::decrypt_tokens(*key, r.output);
      shown = plain_out.ids;
      result["output_plain"] = plain_out.ids;
      std::optional<ee::ModelBundle> plain_model;
      if (!sh.plain_model.empty()) plain_model = ee::load_model(sh.plain_model);
      ee::PlaintextContext ctx{plain_prompt,
                               {std::vector<std::uint32_t>(plain_out.ids.begin() + static_cast<std::ptrdiff_t>(plain_prompt.size()),
                                                           plain_out.ids.end()),
                                ee::Domain::kPlaintext},
                               plain_model ? &*plain_model : nullptr};
      const ee::AuditResult audit = ee::audit_blindness(r.transcript, ctx);
      result["audit"] = ee::to_json(audit);
      std::cerr << "audit: " << (audit.pass ? "pass" : "FAIL") << "\n";
    }
    ee::write_text(dir / "result.json", result.dump(2) + "\n");
    record_run(*sub, (dir / "result").string());
    std::cout << ids_line(shown) << "\n";
  } else if (sub == gen) {
    require(gc_out, "out");
    std::optional<ee::ModelBundle> model;
    if (!gc_model.empty()) model = ee::load_model(gc_model);
    const std::size_t vocab = gc_vocab != 0 ? gc_vocab : model ? model->config().vocab_size : 0;
    if (vocab == 0) throw Error(ErrorKind::kUsage, "give --vocab or --model");
    ee::Rng rng(gc_seed);
    std::vector<ee::TokenSeq> prompts;
    if (gc_dist == "zipf") {
      prompts = ee::zipf_prompts(rng, vocab, gc_count, gc_len);
    } else if (gc_dist == "uniform") {
      for (std::size_t i = 0; i < gc_count; ++i) {
        ee::TokenSeq p;
        for (std::size_t t = 0; t < gc_len; ++t) p.ids.push_back(static_cast<std::uint32_t>(rng.below(vocab)));
        prompts.push_back(std::move(p));
      }
    } else {
      throw Error(ErrorKind::kUsage, "unknown --dist '" + gc_dist + "'");
    }
    if (model) {
      if (gc_key.empty()) throw Error(ErrorKind::kUsage, "transcript generation needs --key");
      const ee::EEKey key = ee::load_key(gc_key);
      for (auto& p : prompts) p = ee::encrypt_tokens(key, p);
      ee::save_corpus(ee::make_greedy_corpus(*model, prompts, gc_new), gc_out);
    } else {
      ee::save_prompts(prompts, gc_out);
    }
    record_run(*sub, gc_out);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::cerr << "eectl: " << e.what() << "\n";
    return ee::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "eectl: " << e.what() << "\n";
    return 1;
  }
}
