#include "harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <numeric>
#include <sstream>
#include <thread>

#include "losses.hpp"

namespace msl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kSchemaVersion = 1;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const char* loss_name(LossKind k) { return k == LossKind::Lml ? "lml" : "msl"; }
const char* temperature_name(TemperatureMode m) { return m == TemperatureMode::Fixed ? "fixed" : "ats"; }

LossKind parse_loss(const std::string& s) {
  if (s == "lml") return LossKind::Lml;
  if (s == "msl") return LossKind::Msl;
  fail(ErrorCode::Config, "loss must be 'lml' or 'msl', got '" + s + "'");
}

TemperatureMode parse_temperature(const std::string& s) {
  if (s == "fixed") return TemperatureMode::Fixed;
  if (s == "ats") return TemperatureMode::Ats;
  fail(ErrorCode::Config, "temperature must be 'fixed' or 'ats', got '" + s + "'");
}

std::string fmt(double v) { return format_double(v); }

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  require(static_cast<bool>(os), ErrorCode::Io, "cannot write " + p.string());
  os << text;
}

fs::path prepare_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  require(!ec, ErrorCode::Io, "cannot create " + p.string() + ": " + ec.message());
  return p;
}

fs::path run_dir(const RunConfig& c) { return fs::path(c.outdir) / c.run_id; }

// Runs fn(i) for i in [0, n) on up to `workers` threads; results keep index order.
template <typename T>
std::vector<T> parallel_map(std::size_t n, int workers, const std::function<T(std::size_t)>& fn) {
  std::vector<T> out(n);
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  std::size_t next = 0;
  std::mutex mu;
  std::exception_ptr err;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= n || err) return;
        i = next++;
      }
      try {
        out[i] = fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!err) err = std::current_exception();
      }
    }
  };
  std::vector<std::thread> threads;
  for (int w = 0; w < std::min<int>(workers, static_cast<int>(n)); ++w) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (err) std::rethrow_exception(err);
  return out;
}

}  // namespace

json config_to_json(const RunConfig& c) {
  return json{
      {"schema_version", kSchemaVersion},
      {"seed", c.seed},
      {"n_franchises", c.n_franchises},
      {"items_per_franchise", c.items_per_franchise},
      {"shared_prefix_len", c.title.shared_prefix_len},
      {"suffix_min", c.title.suffix_min},
      {"suffix_max", c.title.suffix_max},
      {"suffix_pool", c.title.suffix_pool},
      {"distractor_tokens", c.title.distractor_tokens},
      {"n_users", c.interactions.n_users},
      {"history_min", c.interactions.history_min},
      {"history_max", c.interactions.history_max},
      {"affinity", c.interactions.affinity},
      {"popularity_skew", c.interactions.popularity_skew},
      {"data_dir", c.data_dir},
      {"d", c.d},
      {"init_scale", c.init_scale},
      {"optimizer", c.optimizer},
      {"lr", c.lr},
      {"loss", loss_name(c.loss)},
      {"temperature", temperature_name(c.temperature)},
      {"tau", c.tau},
      {"eta", c.ats.eta},
      {"ats_smoothing", c.ats.smoothing},
      {"tau_min", c.ats.bounds.min},
      {"tau_max", c.ats.bounds.max},
      {"ats_branch", branch_name(c.ats.branch)},
      {"alpha", c.alpha},
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"beam_size", c.beam_size},
      {"length_normalize", c.length_normalize},
      {"outdir", c.outdir},
      {"run_id", c.run_id},
      {"checkpoint", c.checkpoint},
      {"eval_split", c.eval_split},
      {"tau_grid", c.tau_grid},
      {"bench_sizes", c.bench_sizes},
      {"compare_seeds", c.compare_seeds},
      {"workers", c.workers},
      {"write_files", c.write_files},
  };
}

RunConfig config_from_json(const json& j, RunConfig c) {
  require(j.is_object(), ErrorCode::Config, "config must be a JSON object");
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      const json& v = it.value();
      if (k == "schema_version") {
        require(v.get<int>() == kSchemaVersion, ErrorCode::Config, "unsupported config schema_version");
      } else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "n_franchises") c.n_franchises = v.get<int>();
      else if (k == "items_per_franchise") c.items_per_franchise = v.get<int>();
      else if (k == "shared_prefix_len") c.title.shared_prefix_len = v.get<int>();
      else if (k == "suffix_min") c.title.suffix_min = v.get<int>();
      else if (k == "suffix_max") c.title.suffix_max = v.get<int>();
      else if (k == "suffix_pool") c.title.suffix_pool = v.get<int>();
      else if (k == "distractor_tokens") c.title.distractor_tokens = v.get<int>();
      else if (k == "n_users") c.interactions.n_users = v.get<int>();
      else if (k == "history_min") c.interactions.history_min = v.get<int>();
      else if (k == "history_max") c.interactions.history_max = v.get<int>();
      else if (k == "affinity") c.interactions.affinity = v.get<double>();
      else if (k == "popularity_skew") c.interactions.popularity_skew = v.get<double>();
      else if (k == "data_dir") c.data_dir = v.get<std::string>();
      else if (k == "d") c.d = v.get<int>();
      else if (k == "init_scale") c.init_scale = v.get<double>();
      else if (k == "optimizer") c.optimizer = v.get<std::string>();
      else if (k == "lr") c.lr = v.get<double>();
      else if (k == "loss") c.loss = parse_loss(v.get<std::string>());
      else if (k == "temperature") c.temperature = parse_temperature(v.get<std::string>());
      else if (k == "tau") c.tau = v.get<double>();
      else if (k == "eta") c.ats.eta = v.get<double>();
      else if (k == "ats_smoothing") c.ats.smoothing = v.get<double>();
      else if (k == "tau_min") c.ats.bounds.min = v.get<double>();
      else if (k == "tau_max") c.ats.bounds.max = v.get<double>();
      else if (k == "ats_branch") c.ats.branch = parse_branch(v.get<std::string>());
      else if (k == "alpha") c.alpha = v.get<bool>();
      else if (k == "epochs") c.epochs = v.get<int>();
      else if (k == "batch_size") c.batch_size = v.get<int>();
      else if (k == "beam_size") c.beam_size = v.get<int>();
      else if (k == "length_normalize") c.length_normalize = v.get<bool>();
      else if (k == "outdir") c.outdir = v.get<std::string>();
      else if (k == "run_id") c.run_id = v.get<std::string>();
      else if (k == "checkpoint") c.checkpoint = v.get<std::string>();
      else if (k == "eval_split") c.eval_split = v.get<std::string>();
      else if (k == "tau_grid") c.tau_grid = v.get<std::vector<double>>();
      else if (k == "bench_sizes") c.bench_sizes = v.get<std::vector<int>>();
      else if (k == "compare_seeds") c.compare_seeds = v.get<int>();
      else if (k == "workers") c.workers = v.get<int>();
      else if (k == "write_files") c.write_files = v.get<bool>();
      else fail(ErrorCode::Config, "unknown config key '" + k + "'");
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::Config, std::string("bad config value: ") + e.what());
  } catch (const Error& e) {
    fail(ErrorCode::Config, e.what());
  }
  return c;
}

void validate_config(const RunConfig& c) {
  auto check = [](bool ok, const std::string& what) { require(ok, ErrorCode::Config, what); };
  check(c.n_franchises >= 1 && c.items_per_franchise >= 1, "catalog dimensions must be >= 1");
  check(c.d >= 1, "d must be >= 1");
  check(c.init_scale >= 0.0, "init_scale must be >= 0");
  check(c.optimizer == "adam" || c.optimizer == "sgd", "optimizer must be 'adam' or 'sgd'");
  check(c.lr > 0.0, "lr must be > 0");
  check(c.tau > 0.0, "tau must be > 0");
  check(c.ats.eta > 0.0 && c.ats.eta < 1.0, "eta must lie in (0,1)");
  check(c.ats.smoothing > 0.0 && c.ats.smoothing <= 1.0, "ats_smoothing must lie in (0,1]");
  check(c.ats.bounds.min > 0.0 && c.ats.bounds.max > c.ats.bounds.min, "need 0 < tau_min < tau_max");
  check(c.epochs >= 0, "epochs must be >= 0");
  check(c.batch_size >= 1, "batch_size must be >= 1");
  check(c.beam_size >= 1, "beam_size must be >= 1");
  check(c.compare_seeds >= 1, "compare_seeds must be >= 1");
  check(!c.run_id.empty(), "run_id must be non-empty");
  check(c.eval_split == "train" || c.eval_split == "valid" || c.eval_split == "test", "eval_split must be train|valid|test");
  for (double t : c.tau_grid) check(t > 0.0, "tau_grid entries must be > 0");
  for (int s : c.bench_sizes) check(s >= 0, "bench_sizes entries must be >= 0");
}

const std::vector<Example>& Dataset::split(Split s) const {
  switch (s) {
    case Split::Train: return train;
    case Split::Valid: return valid;
    case Split::Test: return test;
  }
  return test;
}

Dataset make_dataset(const RunConfig& cfg) {
  Dataset data;
  if (!cfg.data_dir.empty()) {
    fs::path dir(cfg.data_dir);
    std::ifstream vs(dir / "vocab.jsonl"), cs(dir / "catalog.jsonl"), is(dir / "interactions.jsonl");
    require(vs && cs && is, ErrorCode::Io, "data_dir must contain vocab.jsonl, catalog.jsonl, interactions.jsonl");
    Vocab vocab = read_vocab(vs);
    data.catalog = read_catalog(cs, vocab, cfg.items_per_franchise);
    data.interactions = read_interactions(is, data.catalog);
  } else {
    data.catalog = gen_catalog(stream_seed(cfg.seed, "catalog"), cfg.n_franchises, cfg.items_per_franchise, cfg.title);
    data.interactions = gen_interactions(stream_seed(cfg.seed, "interactions"), data.catalog, cfg.interactions);
  }
  auto t0 = std::chrono::steady_clock::now();
  data.trie = TokenTrie::build(data.catalog.sequences(), Vocab::kEnd);
  data.trie_build_seconds = seconds_since(t0);

  const std::size_t vocab_size = data.catalog.vocab().size();
  std::vector<TokenSeq> train_targets;
  for (const auto& r : data.interactions.records) {
    Example ex;
    ex.user_id = r.user_id;
    ex.prompt = build_prompt(r.history, data.catalog);
    ex.target = r.target;
    ex.mask = masks_for_target(data.trie, data.catalog.sequence(r.target), vocab_size);
    if (r.split == Split::Train) train_targets.push_back(data.catalog.sequence(r.target));
    (r.split == Split::Train ? data.train : r.split == Split::Valid ? data.valid : data.test).push_back(std::move(ex));
  }
  data.avt = average_valid_tokens(data.trie, train_targets);
  return data;
}

MetricsReport evaluate(const ModelParams& model, const Dataset& data, Split split, const RunConfig& cfg,
                       std::vector<std::pair<int, RankedList>>* predictions) {
  MetricsReport rep;
  BeamOptions opt{static_cast<std::size_t>(cfg.beam_size), cfg.length_normalize};
  for (const auto& ex : data.split(split)) {
    auto ranked = constrained_beam_search(model, data.trie, ex.prompt, opt);
    rep.add(ranked, ex.target);
    if (predictions) predictions->emplace_back(ex.user_id, std::move(ranked));
  }
  rep.finalize();
  return rep;
}

namespace {

// Mean per-token losses of a split at the given parameters.
TokenLoss split_losses(const ModelParams& model, const Dataset& data, Split split, double tau) {
  LossBreakdown all;
  for (const auto& ex : data.split(split)) {
    const TokenSeq& y = data.target_sequence(ex);
    TokenSeq ctx = ex.prompt;
    LogitsSeq rows;
    for (TokenId tok : y) {
      rows.push_back(forward(model, ctx).values);
      ctx.push_back(tok);
    }
    for (const auto& t : loss_breakdown(rows, y, ex.mask, tau).tokens) all.add(t);
  }
  all.finalize();
  return all.mean;
}

struct PendingToken {
  const Example* ex;
  std::size_t t;
  std::vector<double> h;
  std::vector<double> logits;
};

class Trainer {
 public:
  Trainer(const RunConfig& cfg, const Dataset& data, const TrainOptions& opts)
      : cfg_(cfg),
        data_(data),
        opts_(opts),
        params_(init_params(stream_seed(cfg.seed, "init"), cfg.d, static_cast<int>(data.catalog.vocab().size()),
                            cfg.init_scale)),
        state_(make_optimizer_state(params_)),
        g_obj_(params_.d, params_.vocab),
        g_l1_(params_.d, params_.vocab),
        g_l2_(params_.d, params_.vocab),
        g_lml_(params_.d, params_.vocab) {
    all_ids_.resize(static_cast<std::size_t>(params_.vocab));
    std::iota(all_ids_.begin(), all_ids_.end(), 0);
    if (cfg.temperature == TemperatureMode::Ats && !opts.optimize_l2) schedule_.emplace(cfg.ats, std::max(1.0, data.avt));
  }

  const ModelParams& params() const { return params_; }
  const OptimizerState& state() const { return state_; }
  const std::optional<AtsSchedule>& schedule() const { return schedule_; }

  StepRow step(std::span<const Example* const> batch, int epoch) {
    pending_.clear();
    for (const Example* ex : batch) {
      const TokenSeq& y = data_.target_sequence(*ex);
      TokenSeq ctx = ex->prompt;
      for (std::size_t t = 0; t < y.size(); ++t) {
        PendingToken p{ex, t, encode(params_, ctx), std::vector<double>(static_cast<std::size_t>(params_.vocab))};
        logits_full(params_, p.h, p.logits);
        pending_.push_back(std::move(p));
        ctx.push_back(y[t]);
      }
    }

    double tau = cfg_.tau;
    if (opts_.optimize_l2) {
      tau = 1.0;
    } else if (schedule_) {
      std::vector<TokenInstance> inst;
      for (const auto& p : pending_)
        inst.push_back({p.logits, p.ex->mask.valid[p.t], data_.target_sequence(*p.ex)[p.t]});
      tau = schedule_->step(estimate_stats(inst)).tau;
    }

    g_obj_.set_zero();
    g_l1_.set_zero();
    g_l2_.set_zero();
    if (opts_.gradient_diagnostics) g_lml_.set_zero();
    StepRow row;
    row.step = state_.step + 1;
    row.epoch = epoch;
    row.tau = tau;
    std::vector<double> grad(static_cast<std::size_t>(params_.vocab));
    for (const auto& p : pending_) {
      const TokenSeq& y = data_.target_sequence(*p.ex);
      const TokenId target = y[p.t];
      const auto& valid = p.ex->mask.valid[p.t];
      TokenSeq ctx = p.ex->prompt;
      ctx.insert(ctx.end(), y.begin(), y.begin() + static_cast<std::ptrdiff_t>(p.t));

      auto split = decompose_token(p.logits, valid, target);
      double loss;
      if (opts_.optimize_l2) {
        loss = split.l2;
        msl_grad(p.logits, valid, target, 1.0, 1.0, grad);
      } else if (cfg_.loss == LossKind::Lml) {
        loss = tau == 1.0 ? split.l1 + split.l2 : msl_token(p.logits, all_ids_, target, tau);
        lml_grad(p.logits, target, tau, grad);
      } else {
        const double alpha = cfg_.alpha ? negative_coefficient(p.logits.size(), valid.size()) : 1.0;
        loss = msl_token(p.logits, valid, target, tau, alpha);
        msl_grad(p.logits, valid, target, tau, alpha, grad);
      }
      if (!std::isfinite(loss)) fail(ErrorCode::NumericAbort, "non-finite loss at step " + std::to_string(row.step));
      backward_with_encoding(params_, ctx, p.h, grad, g_obj_);

      l1_grad(p.logits, valid, grad);
      backward_with_encoding(params_, ctx, p.h, grad, g_l1_);
      msl_grad(p.logits, valid, target, 1.0, 1.0, grad);
      backward_with_encoding(params_, ctx, p.h, grad, g_l2_);
      if (opts_.gradient_diagnostics) {
        lml_grad(p.logits, target, 1.0, grad);
        backward_with_encoding(params_, ctx, p.h, grad, g_lml_);
      }

      row.loss += loss;
      row.l1 += split.l1;
      row.l2 += split.l2;
      row.mean_w_lml += token_weight_full(p.logits, target, 1.0);
      row.mean_w_msl += token_weight(p.logits, valid, target, tau);
    }
    const double n = static_cast<double>(pending_.size());
    row.loss /= n;
    row.l1 /= n;
    row.l2 /= n;
    row.mean_w_lml /= n;
    row.mean_w_msl /= n;
    row.grad_norm_l1 = std::sqrt(g_l1_.squared_norm()) / n;
    row.grad_norm_l2 = std::sqrt(g_l2_.squared_norm()) / n;
    if (opts_.gradient_diagnostics) {
      row.grad_norm_lml = std::sqrt(g_lml_.squared_norm()) / n;
      // ||(g1 + g2) - g_lml|| relative to ||g_lml||, kept in the diagnostic record.
      ParamGradients sum = g_l1_;
      sum.add_scaled(g_l2_, 1.0);
      sum.add_scaled(g_lml_, -1.0);
      const double denom = std::sqrt(g_lml_.squared_norm());
      last_additivity_ = denom > 0.0 ? std::sqrt(sum.squared_norm()) / denom : std::sqrt(sum.squared_norm());
    }

    g_obj_.scale(1.0 / n);
    if (!g_obj_.all_finite()) fail(ErrorCode::NumericAbort, "non-finite gradient at step " + std::to_string(row.step));
    if (cfg_.optimizer == "sgd") {
      sgd_step(params_, g_obj_, cfg_.lr);
      ++state_.step;
    } else {
      adam_step(params_, g_obj_, state_, cfg_.lr);
    }
    return row;
  }

  double last_additivity() const { return last_additivity_; }

 private:
  const RunConfig& cfg_;
  const Dataset& data_;
  TrainOptions opts_;
  ModelParams params_;
  OptimizerState state_;
  ParamGradients g_obj_, g_l1_, g_l2_, g_lml_;
  std::vector<TokenId> all_ids_;
  std::optional<AtsSchedule> schedule_;
  std::vector<PendingToken> pending_;
  double last_additivity_ = 0.0;
};

std::string metrics_csv(const std::vector<StepRow>& rows) {
  std::ostringstream os;
  os << "step,epoch,loss,l1,l2,grad_norm_l1,grad_norm_l2,mean_w_lml,mean_w_msl,tau\n";
  for (const auto& r : rows)
    os << r.step << ',' << r.epoch << ',' << fmt(r.loss) << ',' << fmt(r.l1) << ',' << fmt(r.l2) << ','
       << fmt(r.grad_norm_l1) << ',' << fmt(r.grad_norm_l2) << ',' << fmt(r.mean_w_lml) << ',' << fmt(r.mean_w_msl)
       << ',' << fmt(r.tau) << '\n';
  return os.str();
}

std::string eval_csv(const std::vector<EvalRow>& rows) {
  std::ostringstream os;
  os << "epoch,split,ndcg@5,ndcg@10,hr@5,hr@10\n";
  for (const auto& r : rows)
    os << r.epoch << ',' << split_name(r.split) << ',' << fmt(r.metrics.ndcg5) << ',' << fmt(r.metrics.ndcg10) << ','
       << fmt(r.metrics.hr5) << ',' << fmt(r.metrics.hr10) << '\n';
  return os.str();
}

std::string predictions_jsonl(const std::vector<std::pair<int, RankedList>>& preds) {
  std::ostringstream os;
  for (const auto& [user, list] : preds) {
    os << "{\"user_id\":" << user << ",\"ranked\":[";
    for (std::size_t i = 0; i < list.items.size(); ++i) os << (i ? "," : "") << list.items[i];
    os << "],\"scores\":[";
    for (std::size_t i = 0; i < list.scores.size(); ++i) os << (i ? "," : "") << fmt(list.scores[i]);
    os << "]}\n";
  }
  return os.str();
}

json metrics_json(const MetricsReport& m) {
  return json{{"ndcg@5", m.ndcg5}, {"ndcg@10", m.ndcg10}, {"hr@5", m.hr5}, {"hr@10", m.hr10}, {"users", m.users}};
}

json timings_json(const RunRecord& r) {
  return json{{"trie_build_seconds", r.trie_seconds}, {"train_seconds", r.train_seconds}, {"eval_seconds", r.eval_seconds}};
}

}  // namespace

RunRecord train_run(const RunConfig& cfg, const TrainOptions& opts) {
  validate_config(cfg);
  Dataset data = make_dataset(cfg);
  return train_run(cfg, data, opts);
}

RunRecord train_run(const RunConfig& cfg, const Dataset& data, const TrainOptions& opts) {
  validate_config(cfg);
  require(!data.train.empty() || cfg.epochs == 0, ErrorCode::Config, "training split is empty");
  RunRecord rec;
  rec.config = cfg;
  rec.corpus_avt = data.avt;
  rec.trie_seconds = data.trie_build_seconds;
  fs::path dir;
  if (cfg.write_files) {
    dir = prepare_dir(run_dir(cfg));
    rec.run_dir = dir.string();
    write_text(dir / "config.json", config_to_json(cfg).dump(2) + "\n");
  }

  Trainer trainer(cfg, data, opts);
  ModelParams best = trainer.params();
  OptimizerState best_state = trainer.state();
  double best_ndcg5 = -1.0;
  double eval_seconds = 0.0, train_seconds = 0.0;

  auto eval_epoch = [&](int epoch) {
    auto t0 = std::chrono::steady_clock::now();
    auto m = evaluate(trainer.params(), data, Split::Valid, cfg);
    eval_seconds += seconds_since(t0);
    rec.evals.push_back({epoch, Split::Valid, m});
    if (m.ndcg5 > best_ndcg5) {
      best_ndcg5 = m.ndcg5;
      best = trainer.params();
      best_state = trainer.state();
      rec.best_epoch = epoch;
    }
  };

  auto abort_run = [&](const Error& e, const ModelParams& last_good, const OptimizerState& last_state) {
    if (cfg.write_files) {
      save_checkpoint_file((dir / "last_good.ckpt").string(), last_good, last_state);
      write_text(dir / "metrics.csv", metrics_csv(rec.steps));
      write_text(dir / "eval.csv", eval_csv(rec.evals));
      write_text(dir / "abort.json", json{{"error", e.what()}, {"step", last_state.step}}.dump(2) + "\n");
    }
    throw e;
  };

  eval_epoch(0);
  std::vector<const Example*> order;
  for (const auto& ex : data.train) order.push_back(&ex);
  Rng batch_rng(stream_seed(cfg.seed, "batching"));
  std::vector<double> taus;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), batch_rng);
    auto t0 = std::chrono::steady_clock::now();
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      ModelParams last_good = trainer.params();
      OptimizerState last_state = trainer.state();
      try {
        auto row = trainer.step(std::span<const Example* const>(order.data() + start, end - start), epoch);
        taus.push_back(row.tau);
        rec.steps.push_back(row);
        if (opts.gradient_diagnostics) rec.additivity.push_back(trainer.last_additivity());
      } catch (const Error& e) {
        if (e.code() != ErrorCode::NumericAbort) throw;
        abort_run(e, last_good, last_state);
      }
    }
    train_seconds += seconds_since(t0);
    eval_epoch(epoch);
  }

  if (!taus.empty()) {
    rec.tau_trace.min = *std::min_element(taus.begin(), taus.end());
    rec.tau_trace.max = *std::max_element(taus.begin(), taus.end());
    rec.tau_trace.mean = std::accumulate(taus.begin(), taus.end(), 0.0) / static_cast<double>(taus.size());
    rec.tau_trace.last = taus.back();
  }
  if (trainer.schedule()) rec.tau_trace.fallbacks = trainer.schedule()->fallbacks();

  auto t0 = std::chrono::steady_clock::now();
  std::vector<std::pair<int, RankedList>> preds;
  rec.test = evaluate(best, data, Split::Test, cfg, &preds);
  eval_seconds += seconds_since(t0);
  rec.evals.push_back({rec.best_epoch, Split::Test, rec.test});
  rec.train_seconds = train_seconds;
  rec.eval_seconds = eval_seconds;
  rec.best_params = best;
  rec.final_params = trainer.params();

  if (cfg.write_files) {
    write_text(dir / "metrics.csv", metrics_csv(rec.steps));
    write_text(dir / "eval.csv", eval_csv(rec.evals));
    write_text(dir / "predictions.jsonl", predictions_jsonl(preds));
    save_checkpoint_file((dir / "best.ckpt").string(), best, best_state);
    save_checkpoint_file((dir / "last.ckpt").string(), trainer.params(), trainer.state());
    write_text(dir / "timings.json", timings_json(rec).dump(2) + "\n");
  }
  return rec;
}

namespace {

json run_summary(const RunRecord& r) {
  return json{{"run_dir", r.run_dir},
              {"best_epoch", r.best_epoch},
              {"test", metrics_json(r.test)},
              {"corpus_avt", r.corpus_avt},
              {"steps", r.steps.size()},
              {"tau_trace", {{"min", r.tau_trace.min}, {"max", r.tau_trace.max}, {"mean", r.tau_trace.mean},
                             {"last", r.tau_trace.last}, {"fallbacks", r.tau_trace.fallbacks}}},
              {"timings", timings_json(r)}};
}

ModelParams load_model(const RunConfig& cfg, const Dataset& data, bool required) {
  if (cfg.checkpoint.empty()) {
    require(!required, ErrorCode::Config, "this command needs --checkpoint");
    return init_params(stream_seed(cfg.seed, "init"), cfg.d, static_cast<int>(data.catalog.vocab().size()), cfg.init_scale);
  }
  ModelParams p;
  OptimizerState s;
  load_checkpoint_file(cfg.checkpoint, p, s);
  require(p.vocab == static_cast<int>(data.catalog.vocab().size()), ErrorCode::Config,
          "checkpoint vocabulary does not match the dataset");
  return p;
}

RunConfig child_config(const RunConfig& base, const std::string& id) {
  RunConfig c = base;
  c.run_id = base.run_id + "/" + id;
  return c;
}

}  // namespace

json cmd_gen_data(const RunConfig& cfg) {
  validate_config(cfg);
  Dataset data = make_dataset(cfg);
  fs::path dir = prepare_dir(run_dir(cfg));
  std::ostringstream v, c, i;
  write_vocab(v, data.catalog.vocab());
  write_catalog(c, data.catalog);
  write_interactions(i, data.interactions);
  write_text(dir / "vocab.jsonl", v.str());
  write_text(dir / "catalog.jsonl", c.str());
  write_text(dir / "interactions.jsonl", i.str());
  write_text(dir / "config.json", config_to_json(cfg).dump(2) + "\n");
  return json{{"run_dir", dir.string()},
              {"items", data.catalog.size()},
              {"vocab", data.catalog.vocab().size()},
              {"records", data.interactions.records.size()},
              {"train", data.train.size()},
              {"valid", data.valid.size()},
              {"test", data.test.size()}};
}

json cmd_build_trie(const RunConfig& cfg) {
  validate_config(cfg);
  Dataset data = make_dataset(cfg);
  json stats{{"nodes", data.trie.node_count()},
             {"items", data.trie.item_count()},
             {"stored_tokens", data.trie.stored_tokens()},
             {"avt", data.avt}};
  const json timings{{"trie_build_seconds", data.trie_build_seconds}};
  if (cfg.write_files) {
    fs::path dir = prepare_dir(run_dir(cfg));
    std::ostringstream os;
    data.trie.dump_json(os);
    write_text(dir / "trie.json", os.str());
    write_text(dir / "trie_stats.json", stats.dump(2) + "\n");
    write_text(dir / "timings.json", timings.dump(2) + "\n");
    stats["run_dir"] = dir.string();
  }
  stats["build_seconds"] = data.trie_build_seconds;
  return stats;
}

json cmd_train(const RunConfig& cfg) { return run_summary(train_run(cfg)); }

json cmd_eval(const RunConfig& cfg) {
  validate_config(cfg);
  Dataset data = make_dataset(cfg);
  ModelParams model = load_model(cfg, data, false);
  Split split = parse_split(cfg.eval_split);
  std::vector<std::pair<int, RankedList>> preds;
  auto t0 = std::chrono::steady_clock::now();
  auto m = evaluate(model, data, split, cfg, &preds);
  double secs = seconds_since(t0);
  json out{{"split", cfg.eval_split}, {"metrics", metrics_json(m)}};
  if (cfg.write_files) {
    fs::path dir = prepare_dir(run_dir(cfg));
    write_text(dir / "eval.csv", eval_csv({EvalRow{0, split, m}}));
    write_text(dir / "predictions.jsonl", predictions_jsonl(preds));
    write_text(dir / "timings.json", json{{"eval_seconds", secs}}.dump(2) + "\n");
    out["run_dir"] = dir.string();
  }
  return out;
}

json cmd_diag_gradnorms(const RunConfig& base) {
  RunConfig cfg = base;
  cfg.loss = LossKind::Lml;
  cfg.temperature = TemperatureMode::Fixed;
  cfg.tau = 1.0;
  cfg.alpha = false;
  RunRecord rec = train_run(cfg, TrainOptions{true, false});

  std::ostringstream os;
  os << "step,epoch,grad_norm_l1,grad_norm_l2,grad_norm_lml,ratio_l1_l2,additivity_residual\n";
  std::size_t after_epoch1 = 0, dominated = 0;
  double worst_additivity = 0.0;
  for (std::size_t i = 0; i < rec.steps.size(); ++i) {
    const auto& row = rec.steps[i];
    const double ratio = row.grad_norm_l2 > 0.0 ? row.grad_norm_l1 / row.grad_norm_l2 : 0.0;
    worst_additivity = std::max(worst_additivity, rec.additivity[i]);
    if (row.epoch > 1) {
      ++after_epoch1;
      if (ratio > 1.0) ++dominated;
    }
    os << row.step << ',' << row.epoch << ',' << fmt(row.grad_norm_l1) << ',' << fmt(row.grad_norm_l2) << ','
       << fmt(row.grad_norm_lml) << ',' << fmt(ratio) << ',' << fmt(rec.additivity[i]) << '\n';
  }
  json out{{"steps_after_epoch1", after_epoch1},
           {"l1_dominant_fraction", after_epoch1 ? static_cast<double>(dominated) / static_cast<double>(after_epoch1) : 0.0},
           {"max_additivity_residual", worst_additivity}};
  if (cfg.write_files) {
    fs::path dir = prepare_dir(run_dir(cfg));
    write_text(dir / "gradnorms.csv", os.str());
    write_text(dir / "gradnorms_summary.json", out.dump(2) + "\n");
    out["run_dir"] = dir.string();
  }
  return out;
}

json cmd_diag_l2curves(const RunConfig& base) {
  validate_config(base);
  RunConfig lml_cfg = child_config(base, "lml");
  lml_cfg.loss = LossKind::Lml;
  lml_cfg.temperature = TemperatureMode::Fixed;
  lml_cfg.tau = 1.0;
  lml_cfg.alpha = false;
  RunConfig l2_cfg = child_config(base, "l2");
  l2_cfg.loss = LossKind::Msl;
  l2_cfg.temperature = TemperatureMode::Fixed;
  l2_cfg.tau = 1.0;
  l2_cfg.alpha = false;
  Dataset data = make_dataset(base);

  auto runs = parallel_map<RunRecord>(2, base.workers, [&](std::size_t i) {
    return i == 0 ? train_run(lml_cfg, data) : train_run(l2_cfg, data, TrainOptions{false, true});
  });
  const RunRecord& a = runs[0];
  const RunRecord& b = runs[1];

  std::ostringstream os;
  os << "step,epoch,l2_under_lml,l2_under_l2\n";
  for (std::size_t i = 0; i < a.steps.size() && i < b.steps.size(); ++i)
    os << a.steps[i].step << ',' << a.steps[i].epoch << ',' << fmt(a.steps[i].l2) << ',' << fmt(b.steps[i].l2) << '\n';

  // Final L2 over the whole training split with each run's last parameters.
  const double final_a = split_losses(a.final_params, data, Split::Train, 1.0).l2;
  const double final_b = split_losses(b.final_params, data, Split::Train, 1.0).l2;
  json out{{"final_l2_under_lml", final_a}, {"final_l2_under_l2", final_b}, {"steps", std::min(a.steps.size(), b.steps.size())}};
  if (base.write_files) {
    fs::path dir = prepare_dir(run_dir(base));
    write_text(dir / "l2curves.csv", os.str());
    write_text(dir / "l2curves_summary.json", out.dump(2) + "\n");
    out["run_dir"] = dir.string();
  }
  return out;
}

json cmd_diag_weights(const RunConfig& cfg) {
  validate_config(cfg);
  Dataset data = make_dataset(cfg);
  ModelParams model = load_model(cfg, data, true);
  struct WeightRow {
    double w_lml, w_msl;
    std::size_t position;
  };
  std::vector<WeightRow> rows;
  const std::size_t n = std::min(data.train.size(), static_cast<std::size_t>(cfg.batch_size));
  for (std::size_t i = 0; i < n; ++i) {
    const Example& ex = data.train[i];
    const TokenSeq& y = data.target_sequence(ex);
    TokenSeq ctx = ex.prompt;
    for (std::size_t t = 0; t < y.size(); ++t) {
      auto row = forward(model, ctx);
      rows.push_back({token_weight_full(row.values, y[t], cfg.tau), token_weight(row.values, ex.mask.valid[t], y[t], cfg.tau), t + 1});
      ctx.push_back(y[t]);
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const WeightRow& a, const WeightRow& b) {
    if (a.w_msl != b.w_msl) return a.w_msl > b.w_msl;
    return a.w_lml > b.w_lml;
  });
  std::size_t low = 0, low_early = 0, violations = 0;
  std::ostringstream os;
  os << "rank,position,w_lml,w_msl\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.w_msl < 0.1) {
      ++low;
      if (r.position <= 3) ++low_early;
    }
    if (r.w_msl > r.w_lml) ++violations;
    os << i + 1 << ',' << r.position << ',' << fmt(r.w_lml) << ',' << fmt(r.w_msl) << '\n';
  }
  json out{{"tokens", rows.size()},
           {"low_weight_tokens", low},
           {"low_weight_within_first3_fraction", low ? static_cast<double>(low_early) / static_cast<double>(low) : 0.0},
           {"dominance_violations", violations}};
  if (cfg.write_files) {
    fs::path dir = prepare_dir(run_dir(cfg));
    write_text(dir / "weights.csv", os.str());
    write_text(dir / "weights_summary.json", out.dump(2) + "\n");
    out["run_dir"] = dir.string();
  }
  return out;
}

json cmd_diag_gaussfit(const RunConfig& cfg) {
  validate_config(cfg);
  Dataset data = make_dataset(cfg);
  ModelParams model = load_model(cfg, data, false);
  std::vector<double> sample;
  for (const auto& ex : data.train) {
    const TokenSeq& y = data.target_sequence(ex);
    TokenSeq ctx = ex.prompt;
    for (std::size_t t = 0; t < y.size(); ++t) {
      auto row = forward(model, ctx);
      for (TokenId z : ex.mask.valid[t]) sample.push_back(row.values[static_cast<std::size_t>(z)]);
      ctx.push_back(y[t]);
    }
  }
  auto fit = gaussian_fit_report(sample);
  json out{{"samples", sample.size()}, {"mu", fit.mu}, {"sigma2", fit.sigma2}, {"skewness", fit.skewness},
           {"excess_kurtosis", fit.excess_kurtosis}};
  if (cfg.write_files) {
    fs::path dir = prepare_dir(run_dir(cfg));
    std::ostringstream os;
    os << "center,count,density,gaussian\n";
    for (std::size_t k = 0; k < fit.counts.size(); ++k)
      os << fmt(fit.centers[k]) << ',' << fit.counts[k] << ',' << fmt(fit.density[k]) << ',' << fmt(fit.gaussian[k]) << '\n';
    write_text(dir / "gaussfit.csv", os.str());
    write_text(dir / "gaussfit.json", out.dump(2) + "\n");
    out["run_dir"] = dir.string();
  }
  return out;
}

json cmd_sweep_temperature(const RunConfig& base) {
  validate_config(base);
  require(!base.tau_grid.empty(), ErrorCode::Config, "tau_grid is empty");
  Dataset data = make_dataset(base);
  const std::size_t g = base.tau_grid.size();
  auto runs = parallel_map<RunRecord>(g + 1, base.workers, [&](std::size_t i) {
    RunConfig c;
    if (i < g) {
      c = child_config(base, "tau_" + fmt(base.tau_grid[i]));
      c.temperature = TemperatureMode::Fixed;
      c.tau = base.tau_grid[i];
    } else {
      c = child_config(base, "ats");
      c.temperature = TemperatureMode::Ats;
    }
    c.loss = LossKind::Msl;
    return train_run(c, data);
  });
  std::ostringstream os;
  os << "mode,tau,ndcg@5,ndcg@10,hr@5,hr@10,best_epoch,tau_min,tau_max,tau_last,fallbacks\n";
  json grid = json::array();
  double best = -1.0, best_tau = 0.0;
  for (std::size_t i = 0; i <= g; ++i) {
    const auto& r = runs[i];
    const bool ats = i == g;
    const double tau = ats ? r.tau_trace.mean : base.tau_grid[i];
    os << (ats ? "ats" : "fixed") << ',' << fmt(tau) << ',' << fmt(r.test.ndcg5) << ',' << fmt(r.test.ndcg10) << ','
       << fmt(r.test.hr5) << ',' << fmt(r.test.hr10) << ',' << r.best_epoch << ',' << fmt(r.tau_trace.min) << ','
       << fmt(r.tau_trace.max) << ',' << fmt(r.tau_trace.last) << ',' << r.tau_trace.fallbacks << '\n';
    if (!ats) {
      grid.push_back({{"tau", tau}, {"ndcg@10", r.test.ndcg10}});
      if (r.test.ndcg10 > best) {
        best = r.test.ndcg10;
        best_tau = tau;
      }
    }
  }
  const auto& ats = runs[g];
  json out{{"grid", grid},
           {"best_fixed_tau", best_tau},
           {"best_fixed_ndcg@10", best},
           {"ats_ndcg@10", ats.test.ndcg10},
           {"ats_tau_mean", ats.tau_trace.mean},
           {"ats_tau_min", ats.tau_trace.min},
           {"ats_tau_max", ats.tau_trace.max},
           {"ats_fallbacks", ats.tau_trace.fallbacks}};
  if (base.write_files) {
    fs::path dir = prepare_dir(run_dir(base));
    write_text(dir / "sweep.csv", os.str());
    write_text(dir / "sweep_summary.json", out.dump(2) + "\n");
    out["run_dir"] = dir.string();
  }
  return out;
}

json cmd_bench_trie(const RunConfig& cfg) {
  validate_config(cfg);
  std::ostringstream os;
  os << "items,stored_tokens,nodes,build_seconds\n";
  json rows = json::array();
  bool sub_second_at_10k = true;
  for (int size : cfg.bench_sizes) {
    std::vector<TokenSeq> seqs;
    if (size > 0) {
      const int ipf = std::min(cfg.items_per_franchise, size);
      const int nf = (size + ipf - 1) / ipf;
      auto cat = gen_catalog(stream_seed(cfg.seed, "bench"), nf, ipf, cfg.title);
      seqs.assign(cat.sequences().begin(), cat.sequences().begin() + size);
    }
    auto t0 = std::chrono::steady_clock::now();
    auto trie = TokenTrie::build(seqs, Vocab::kEnd);
    const double secs = seconds_since(t0);
    if (size >= 10000 && secs >= 1.0) sub_second_at_10k = false;
    os << size << ',' << trie.stored_tokens() << ',' << trie.node_count() << ',' << fmt(secs) << '\n';
    rows.push_back({{"items", size}, {"stored_tokens", trie.stored_tokens()}, {"nodes", trie.node_count()}, {"build_seconds", secs}});
  }
  json out{{"rows", rows}, {"sub_second_at_10k", sub_second_at_10k}};
  if (cfg.write_files) {
    fs::path dir = prepare_dir(run_dir(cfg));
    write_text(dir / "bench_trie.csv", os.str());
    write_text(dir / "bench_trie.json", out.dump(2) + "\n");
    out["run_dir"] = dir.string();
  }
  return out;
}

json cmd_compare(const RunConfig& base) {
  validate_config(base);
  require(!base.tau_grid.empty(), ErrorCode::Config, "tau_grid is empty");
  struct Job {
    std::string variant;
    int seed_index;
    RunConfig cfg;
  };
  std::vector<Job> jobs;
  std::vector<Dataset> datasets;
  for (int s = 0; s < base.compare_seeds; ++s) {
    RunConfig seeded = base;
    seeded.seed = base.seed + static_cast<std::uint64_t>(s);
    datasets.push_back(make_dataset(seeded));
    auto add = [&](const std::string& variant, const std::string& id, LossKind loss, TemperatureMode mode, double tau, bool alpha) {
      RunConfig c = child_config(seeded, id + "_s" + std::to_string(s));
      c.loss = loss;
      c.temperature = mode;
      c.tau = tau;
      c.alpha = alpha;
      jobs.push_back({variant, s, c});
    };
    add("LML", "lml", LossKind::Lml, TemperatureMode::Fixed, 1.0, false);
    for (double t : base.tau_grid) add("LML + tuned tau", "lml_tau_" + fmt(t), LossKind::Lml, TemperatureMode::Fixed, t, false);
    add("MSL (w/o tau)", "msl", LossKind::Msl, TemperatureMode::Fixed, 1.0, false);
    add("MSL + alpha", "msl_alpha", LossKind::Msl, TemperatureMode::Fixed, 1.0, true);
    for (double t : base.tau_grid) add("MSL + tuned tau", "msl_tau_" + fmt(t), LossKind::Msl, TemperatureMode::Fixed, t, false);
    add("MSL (w/ ATS)", "msl_ats", LossKind::Msl, TemperatureMode::Ats, 1.0, false);
  }
  auto runs = parallel_map<RunRecord>(jobs.size(), base.workers, [&](std::size_t i) {
    return train_run(jobs[i].cfg, datasets[static_cast<std::size_t>(jobs[i].seed_index)]);
  });

  // Tuned variants keep, per seed, the grid point with the best validation NDCG@5.
  const std::vector<std::string> variants{"LML", "LML + tuned tau", "MSL (w/o tau)", "MSL + alpha", "MSL + tuned tau", "MSL (w/ ATS)"};
  std::map<std::string, std::vector<const RunRecord*>> chosen;
  std::map<std::pair<std::string, int>, std::pair<double, const RunRecord*>> tuned;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const auto& r = runs[i];
    double val5 = -1.0;
    for (const auto& e : r.evals)
      if (e.split == Split::Valid && e.epoch == r.best_epoch) val5 = e.metrics.ndcg5;
    auto key = std::pair{jobs[i].variant, jobs[i].seed_index};
    auto it = tuned.find(key);
    if (it == tuned.end() || val5 > it->second.first) tuned[key] = {val5, &r};
  }
  for (const auto& [key, v] : tuned) chosen[key.first].push_back(v.second);

  std::ostringstream detail, summary;
  detail << "variant,seed,tau,ndcg@5,ndcg@10,hr@5,hr@10\n";
  summary << "variant,ndcg@10_mean,ndcg@10_std,seeds\n";
  json rows = json::array();
  for (const auto& v : variants) {
    const auto& rs = chosen[v];
    std::vector<double> vals;
    for (const RunRecord* r : rs) {
      vals.push_back(r->test.ndcg10);
      const double tau = r->config.temperature == TemperatureMode::Ats ? r->tau_trace.mean : r->config.tau;
      detail << '"' << v << "\"," << r->config.seed << ',' << fmt(tau) << ',' << fmt(r->test.ndcg5) << ','
             << fmt(r->test.ndcg10) << ',' << fmt(r->test.hr5) << ',' << fmt(r->test.hr10) << '\n';
    }
    const double n = static_cast<double>(vals.size());
    const double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / n;
    double var = 0.0;
    for (double x : vals) var += (x - mean) * (x - mean);
    const double sd = vals.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
    summary << '"' << v << "\"," << fmt(mean) << ',' << fmt(sd) << ',' << vals.size() << '\n';
    rows.push_back({{"variant", v}, {"ndcg@10_mean", mean}, {"ndcg@10_std", sd}, {"ndcg@10", vals}});
  }
  json out{{"rows", rows}};
  if (base.write_files) {
    fs::path dir = prepare_dir(run_dir(base));
    write_text(dir / "compare.csv", detail.str());
    write_text(dir / "compare_summary.csv", summary.str());
    write_text(dir / "compare_summary.json", out.dump(2) + "\n");
    out["run_dir"] = dir.string();
  }
  return out;
}

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"gen-data",      "build-trie",    "train",        "eval",
                                              "diag-gradnorms", "diag-l2curves", "diag-weights", "diag-gaussfit",
                                              "sweep-temp",    "bench-trie",    "compare"};
  return names;
}

json run_command(const std::string& command, const RunConfig& cfg) {
  if (command == "gen-data") return cmd_gen_data(cfg);
  if (command == "build-trie") return cmd_build_trie(cfg);
  if (command == "train") return cmd_train(cfg);
  if (command == "eval") return cmd_eval(cfg);
  if (command == "diag-gradnorms") return cmd_diag_gradnorms(cfg);
  if (command == "diag-l2curves") return cmd_diag_l2curves(cfg);
  if (command == "diag-weights") return cmd_diag_weights(cfg);
  if (command == "diag-gaussfit") return cmd_diag_gaussfit(cfg);
  if (command == "sweep-temp") return cmd_sweep_temperature(cfg);
  if (command == "bench-trie") return cmd_bench_trie(cfg);
  if (command == "compare") return cmd_compare(cfg);
  fail(ErrorCode::Config, "unknown command '" + command + "'");
}

}  // namespace msl
