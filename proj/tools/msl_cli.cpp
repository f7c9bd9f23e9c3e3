// Command-line front end. Talks to the library only through msl/msl.h.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "msl/msl.h"

namespace {

enum class Kind { Int, UInt, Double, Bool, String, DoubleList, IntList };

struct Flag {
  const char* name;
  const char* key;
  Kind kind;
  const char* help;
};

const Flag kFlags[] = {
    {"--seed", "seed", Kind::UInt, "root seed"},
    {"--n-franchises", "n_franchises", Kind::Int, "number of franchises in the synthetic catalog"},
    {"--items-per-franchise", "items_per_franchise", Kind::Int, "items per franchise"},
    {"--shared-prefix-len", "shared_prefix_len", Kind::Int, "leading title tokens shared inside a franchise"},
    {"--suffix-min", "suffix_min", Kind::Int, "minimum item-specific title words"},
    {"--suffix-max", "suffix_max", Kind::Int, "maximum item-specific title words"},
    {"--suffix-pool", "suffix_pool", Kind::Int, "size of the item word pool"},
    {"--distractor-tokens", "distractor_tokens", Kind::Int, "vocabulary tokens never used in titles"},
    {"--n-users", "n_users", Kind::Int, "number of users"},
    {"--history-min", "history_min", Kind::Int, "minimum history length"},
    {"--history-max", "history_max", Kind::Int, "maximum history length"},
    {"--affinity", "affinity", Kind::Double, "probability of drawing from the preferred franchise"},
    {"--popularity-skew", "popularity_skew", Kind::Double, "Zipf exponent inside a franchise"},
    {"--data-dir", "data_dir", Kind::String, "load vocab/catalog/interactions JSONL from this directory"},
    {"--d", "d", Kind::Int, "embedding width"},
    {"--init-scale", "init_scale", Kind::Double, "uniform init half-width"},
    {"--optimizer", "optimizer", Kind::String, "adam | sgd"},
    {"--lr", "lr", Kind::Double, "learning rate"},
    {"--loss", "loss", Kind::String, "lml | msl"},
    {"--temperature", "temperature", Kind::String, "fixed | ats"},
    {"--tau", "tau", Kind::Double, "fixed temperature"},
    {"--eta", "eta", Kind::Double, "ATS target probability"},
    {"--ats-smoothing", "ats_smoothing", Kind::Double, "ATS EMA factor in (0,1]"},
    {"--tau-min", "tau_min", Kind::Double, "lower temperature clamp"},
    {"--tau-max", "tau_max", Kind::Double, "upper temperature clamp"},
    {"--ats-branch", "ats_branch", Kind::String, "minus | plus root"},
    {"--alpha", "alpha", Kind::Bool, "scale negatives by |Z|/|Z_valid|"},
    {"--epochs", "epochs", Kind::Int, "training epochs"},
    {"--batch-size", "batch_size", Kind::Int, "examples per step"},
    {"--beam-size", "beam_size", Kind::Int, "beam width"},
    {"--length-normalize", "length_normalize", Kind::Bool, "length-normalized beam scores"},
    {"--outdir", "outdir", Kind::String, "output root"},
    {"--run-id", "run_id", Kind::String, "run directory name under outdir"},
    {"--checkpoint", "checkpoint", Kind::String, "input checkpoint"},
    {"--eval-split", "eval_split", Kind::String, "train | valid | test"},
    {"--tau-grid", "tau_grid", Kind::DoubleList, "comma-separated temperatures"},
    {"--bench-sizes", "bench_sizes", Kind::IntList, "comma-separated catalog sizes"},
    {"--compare-seeds", "compare_seeds", Kind::Int, "seeds per variant in compare"},
    {"--workers", "workers", Kind::Int, "parallel runs in sweep/compare"},
};

nlohmann::json convert(Kind kind, const std::string& raw) {
  auto split = [](const std::string& s) {
    std::vector<std::string> parts;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) parts.push_back(item);
    return parts;
  };
  switch (kind) {
    case Kind::Int: return std::stoi(raw);
    case Kind::UInt: return std::stoull(raw);
    case Kind::Double: return std::stod(raw);
    case Kind::Bool: return raw == "true" || raw == "1" || raw == "on";
    case Kind::String: return raw;
    case Kind::DoubleList: {
      nlohmann::json a = nlohmann::json::array();
      for (const auto& p : split(raw)) a.push_back(std::stod(p));
      return a;
    }
    case Kind::IntList: {
      nlohmann::json a = nlohmann::json::array();
      for (const auto& p : split(raw)) a.push_back(std::stoi(p));
      return a;
    }
  }
  return nullptr;
}

int exit_code(msl_status s) {
  if (s == MSL_OK) return 0;
  if (s == MSL_ERR_NUMERIC) return 2;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked softmax loss toolkit: data generation, training, diagnostics and benchmarks"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "JSON RunConfig; flags override its values");
  std::vector<std::string> values(std::size(kFlags));
  std::vector<CLI::Option*> options;
  for (std::size_t i = 0; i < std::size(kFlags); ++i) {
    const Flag& f = kFlags[i];
    options.push_back(app.add_option(f.name, values[i], f.help));
  }

  const char* commands[][2] = {
      {"gen-data", "write vocab/catalog/interactions JSONL"},
      {"build-trie", "build the item trie and dump it"},
      {"train", "train and evaluate one configuration"},
      {"eval", "evaluate a checkpoint with constrained beam search"},
      {"diag-gradnorms", "per-step gradient norms of the two LML components"},
      {"diag-l2curves", "L2 under LML training vs direct L2 training"},
      {"diag-weights", "per-token weight distribution for one batch"},
      {"diag-gaussfit", "Gaussian fit of valid-token logits"},
      {"sweep-temp", "fixed-temperature grid plus the adaptive schedule"},
      {"bench-trie", "trie construction timing"},
      {"compare", "ablation table over loss variants and seeds"},
  };
  for (const auto& c : commands) app.add_subcommand(c[0], c[1])->fallthrough();

  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();

  nlohmann::json cfg = nlohmann::json::object();
  try {
    if (!config_path.empty()) {
      std::ifstream is(config_path);
      if (!is) {
        std::cerr << "error: cannot read config " << config_path << "\n";
        return 1;
      }
      cfg = nlohmann::json::parse(is);
    }
    for (std::size_t i = 0; i < options.size(); ++i)
      if (options[i]->count() > 0) cfg[kFlags[i].key] = convert(kFlags[i].kind, values[i]);
  } catch (const std::exception& e) {
    std::cerr << "error: bad configuration: " << e.what() << "\n";
    return 1;
  }

  char* summary = nullptr;
  msl_status st = msl_run(command.c_str(), cfg.dump().c_str(), &summary);
  if (st != MSL_OK) {
    std::cerr << "error (" << msl_status_name(st) << "): " << msl_last_error() << "\n";
    return exit_code(st);
  }
  std::cout << summary << "\n";
  msl_string_free(summary);
  return 0;
}
