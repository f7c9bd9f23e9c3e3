#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ats.hpp"
#include "catalog.hpp"
#include "decode_eval.hpp"
#include "token_trie.hpp"
#include "toy_model.hpp"

namespace msl {

enum class LossKind { Lml, Msl };
enum class TemperatureMode { Fixed, Ats };

struct RunConfig {
  std::uint64_t seed = 42;

  int n_franchises = 10;
  int items_per_franchise = 10;
  TitleShape title;
  InteractionConfig interactions = [] {
    InteractionConfig c;
    c.affinity = 0.95;
    return c;
  }();
  std::string data_dir;  // load vocab/catalog/interactions JSONL from here instead of generating

  int d = 32;
  double init_scale = 0.1;
  std::string optimizer = "adam";  // adam | sgd
  double lr = 3e-3;

  LossKind loss = LossKind::Msl;
  TemperatureMode temperature = TemperatureMode::Fixed;
  double tau = 1.0;
  AtsConfig ats;
  bool alpha = false;

  int epochs = 6;
  int batch_size = 64;
  int beam_size = 10;
  bool length_normalize = false;

  std::string outdir = "runs";
  std::string run_id = "run";
  std::string checkpoint;  // input checkpoint for eval / diag-weights / diag-gaussfit
  std::string eval_split = "test";
  std::vector<double> tau_grid{0.5, 1.0, 2.0, 3.0, 4.0, 5.0};
  std::vector<int> bench_sizes{100, 1000, 10000};
  int compare_seeds = 3;
  int workers = 1;  // parallel runs in sweep/compare; 1 is the serial deterministic mode
  bool write_files = true;
};

nlohmann::json config_to_json(const RunConfig& c);
// Missing keys keep their defaults; unknown keys are rejected.
RunConfig config_from_json(const nlohmann::json& j, RunConfig base = {});
void validate_config(const RunConfig& c);

struct Example {
  int user_id = 0;
  TokenSeq prompt;
  ItemId target = 0;
  ValidMask mask;
};

struct Dataset {
  ItemCatalog catalog;
  InteractionSet interactions;
  TokenTrie trie;
  double avt = 0.0;  // over training response positions
  double trie_build_seconds = 0.0;
  std::vector<Example> train, valid, test;

  const TokenSeq& target_sequence(const Example& ex) const { return catalog.sequence(ex.target); }
  const std::vector<Example>& split(Split s) const;
};

Dataset make_dataset(const RunConfig& cfg);

struct StepRow {
  std::int64_t step = 0;
  int epoch = 0;
  double loss = 0.0;
  double l1 = 0.0;
  double l2 = 0.0;
  double grad_norm_l1 = 0.0;
  double grad_norm_l2 = 0.0;
  double grad_norm_lml = 0.0;  // only filled when gradient diagnostics are on
  double mean_w_lml = 0.0;
  double mean_w_msl = 0.0;
  double tau = 1.0;
};

struct EvalRow {
  int epoch = 0;
  Split split = Split::Valid;
  MetricsReport metrics;
};

struct TauTrace {
  double min = 0.0, max = 0.0, mean = 0.0, last = 0.0;
  std::size_t fallbacks = 0;
};

struct RunRecord {
  RunConfig config;
  std::vector<StepRow> steps;
  std::vector<EvalRow> evals;
  int best_epoch = 0;
  MetricsReport test;  // at the best validation epoch
  TauTrace tau_trace;
  double corpus_avt = 0.0;
  double trie_seconds = 0.0, train_seconds = 0.0, eval_seconds = 0.0;
  std::string run_dir;
  ModelParams best_params;
  ModelParams final_params;
  // Per step, ||(grad L1 + grad L2) - grad LML|| / ||grad LML||; gradient diagnostics only.
  std::vector<double> additivity;
};

struct TrainOptions {
  bool gradient_diagnostics = false;  // also backpropagate LML separately for the additivity audit
  // Optimize L2 only (masked softmax at tau = 1), overriding the configured loss.
  bool optimize_l2 = false;
};

// Full train/eval cycle; writes the run directory when cfg.write_files.
RunRecord train_run(const RunConfig& cfg, const TrainOptions& opts = {});
RunRecord train_run(const RunConfig& cfg, const Dataset& data, const TrainOptions& opts = {});

MetricsReport evaluate(const ModelParams& model, const Dataset& data, Split split, const RunConfig& cfg,
                       std::vector<std::pair<int, RankedList>>* predictions = nullptr);

// Command entry points; each returns a JSON summary and writes its files
// under <outdir>/<run_id>/.
nlohmann::json cmd_gen_data(const RunConfig& cfg);
nlohmann::json cmd_build_trie(const RunConfig& cfg);
nlohmann::json cmd_train(const RunConfig& cfg);
nlohmann::json cmd_eval(const RunConfig& cfg);
nlohmann::json cmd_diag_gradnorms(const RunConfig& cfg);
nlohmann::json cmd_diag_l2curves(const RunConfig& cfg);
nlohmann::json cmd_diag_weights(const RunConfig& cfg);
nlohmann::json cmd_diag_gaussfit(const RunConfig& cfg);
nlohmann::json cmd_sweep_temperature(const RunConfig& cfg);
nlohmann::json cmd_bench_trie(const RunConfig& cfg);
nlohmann::json cmd_compare(const RunConfig& cfg);

// Dispatches by CLI subcommand name.
nlohmann::json run_command(const std::string& command, const RunConfig& cfg);
const std::vector<std::string>& command_names();

}  // namespace msl
