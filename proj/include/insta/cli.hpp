#pragma once

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "insta/align.hpp"
#include "insta/config.hpp"
#include "insta/corpus.hpp"
#include "insta/embed.hpp"
#include "insta/errors.hpp"
#include "insta/hashing.hpp"
#include "insta/mixture.hpp"
#include "insta/refine.hpp"
#include "insta/remote_backend.hpp"
#include "insta/select.hpp"

namespace insta::cli {

namespace fs = std::filesystem;

inline constexpr const char* kToolName = "insta";
inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kDomainError = 1, kUsageError = 2 };

class Logger {
 public:
  Logger(std::ostream& sink, bool quiet, bool json) : sink_(sink), quiet_(quiet), json_(json) {}

  void info(const std::string& msg) const { emit("info", msg, false); }
  void warn(const std::string& msg) const { emit("warn", msg, false); }
  void error(const std::string& msg) const { emit("error", msg, true); }

 private:
  void emit(const char* level, const std::string& msg, bool always) const {
    if (quiet_ && !always) return;
    if (json_) {
      sink_ << nlohmann::json{{"level", level}, {"msg", msg}}.dump() << '\n';
    } else {
      sink_ << kToolName << ": " << level << ": " << msg << '\n';
    }
  }

  std::ostream& sink_;
  bool quiet_;
  bool json_;
};

// ---------------------------------------------------------------------------
// Run metadata: each run writes <stem of its first output>.run.json next to
// that output, with content hashes of the inputs and outputs, so `verify`
// can detect drift.

struct RunRecord {
  std::string subcommand;
  std::vector<std::string> args;
  std::optional<std::uint64_t> seed;
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;
};

inline std::string relative_to(const fs::path& p, const fs::path& base) {
  auto rel = fs::absolute(p).lexically_normal().lexically_relative(fs::absolute(base).lexically_normal());
  return rel.empty() ? fs::absolute(p).string() : rel.generic_string();
}

inline fs::path write_run_record(const RunRecord& rec) {
  const fs::path first = rec.outputs.empty() ? fs::current_path() / rec.subcommand : fs::absolute(rec.outputs.front());
  const fs::path dir = first.parent_path();
  nlohmann::json inputs = nlohmann::json::object(), outputs = nlohmann::json::object();
  for (const auto& p : rec.inputs) inputs[relative_to(p, dir)] = file_sha256_hex(p.string());
  for (const auto& p : rec.outputs) outputs[relative_to(p, dir)] = file_sha256_hex(p.string());
  nlohmann::json j{{"tool", kToolName},     {"version", kVersion}, {"subcommand", rec.subcommand},
                   {"args", rec.args},      {"inputs", inputs},    {"outputs", outputs},
                   {"seed", rec.seed ? nlohmann::json(*rec.seed) : nlohmann::json(nullptr)}};
  const auto path = dir / (first.stem().string() + ".run.json");
  write_text_file(path, j.dump(2) + "\n");
  return path;
}

// Re-hashes everything recorded in the run directory's *.run.json files.
// Returns one line per mismatch; empty means the run is intact.
inline std::vector<std::string> verify(const fs::path& run_dir) {
  std::vector<std::string> problems;
  if (!fs::is_directory(run_dir)) return {"missing: run directory " + run_dir.string()};
  std::vector<fs::path> records;
  for (const auto& e : fs::directory_iterator(run_dir)) {
    const auto name = e.path().filename().string();
    if (name.size() > 9 && name.substr(name.size() - 9) == ".run.json") records.push_back(e.path());
  }
  std::sort(records.begin(), records.end());
  if (records.empty()) return {"missing: no run metadata in " + run_dir.string()};
  for (const auto& rec : records) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file(rec.string()));
    } catch (const nlohmann::json::exception& e) {
      problems.push_back("unreadable: " + rec.filename().string());
      continue;
    }
    for (const char* section : {"inputs", "outputs"}) {
      if (!j.contains(section) || !j[section].is_object()) continue;
      for (const auto& [rel, hash] : j[section].items()) {
        const fs::path p = fs::path(rel).is_absolute() ? fs::path(rel) : run_dir / rel;
        if (!fs::exists(p)) {
          problems.push_back("missing: " + rel + " (" + rec.filename().string() + ")");
        } else if (file_sha256_hex(p.string()) != hash.get<std::string>()) {
          problems.push_back("modified: " + rel + " (" + rec.filename().string() + ")");
        }
      }
    }
  }
  return problems;
}

// ---------------------------------------------------------------------------

inline std::unique_ptr<EmbeddingBackend> make_backend(const BackendSettings& s) {
  if (s.spec == "ref") return reference_backend(s.dim);
  if (s.spec.rfind("ref:", 0) == 0) {
    const auto dim_text = s.spec.substr(4);
    std::size_t dim = 0;
    auto [p, ec] = std::from_chars(dim_text.data(), dim_text.data() + dim_text.size(), dim);
    if (ec != std::errc() || p != dim_text.data() + dim_text.size()) throw ConfigError("bad backend spec " + s.spec);
    return reference_backend(dim);
  }
  if (s.spec.rfind("remote:", 0) == 0) {
    RemoteOptions opts;
    opts.timeout = std::chrono::milliseconds(s.timeout_ms);
    opts.batch_size = s.batch_size;
    return remote_backend(s.spec.substr(7), s.model, opts);
  }
  throw ConfigError("backend must be ref, ref:<dim> or remote:<url>, got '" + s.spec + "'");
}

inline std::unique_ptr<EmbeddingCache> open_cache(bool disabled) {
  if (disabled) return nullptr;
  const char* dir = std::getenv("INSTA_CACHE_DIR");
  if (dir == nullptr || *dir == '\0') return nullptr;
  return std::make_unique<EmbeddingCache>(dir);
}

// Copy of ds whose relative instance paths resolve from new_base.
inline MetaDataset rebase_instances(const MetaDataset& ds, const fs::path& new_base) {
  const auto from = fs::absolute(ds.base_dir().empty() ? fs::current_path() : ds.base_dir());
  const auto to = fs::absolute(new_base.empty() ? fs::current_path() : new_base);
  if (from.lexically_normal() == to.lexically_normal()) return ds;
  std::vector<Task> tasks = ds.tasks();
  for (auto& t : tasks) {
    if (t.instances_path && fs::path(*t.instances_path).is_relative()) {
      t.instances_path = (from / *t.instances_path).lexically_normal().lexically_relative(to.lexically_normal()).generic_string();
    }
  }
  return MetaDataset::build(ds.name(), std::move(tasks), new_base);
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text_file(path, j.dump(2) + "\n"); }

inline void refuse_overwrite(const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs) {
  for (const auto& o : outputs) {
    for (const auto& i : inputs) {
      std::error_code ec;
      if (fs::exists(o) && fs::exists(i) && fs::equivalent(o, i, ec)) {
        throw ConfigError("output " + o.string() + " would overwrite input " + i.string());
      }
    }
  }
}

struct Flags {
  std::optional<std::string> config;
  bool quiet = false;
  bool json_logs = false;
  std::optional<std::size_t> jobs;
  bool no_cache = false;

  std::optional<std::string> corpus, out, stats, report, target, paraphrases, in, head, selection, transfer, aux,
      out_dir, run_dir, method, aggregate, render, backend, model, preset;
  std::optional<std::size_t> dim, remote_batch, epochs, batch_size, n_pos, n_neg, dim_out, k, n, cap, kmin, kmax;
  std::optional<std::int64_t> timeout_ms;
  std::optional<std::uint64_t> seed, t_train, t_eval;
  std::optional<double> lr, val_fraction;
  bool use_refined = false, raw_text = false, disable = false, cost = false, check_instances = false;
  std::vector<std::string> selections;
};

class App {
 public:
  App(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}

  int run(std::vector<std::string> args) {
    args_ = args;
    CLI::App app{"Instruction-based task selection toolkit", kToolName};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);
    app.fallthrough();
    app.add_option("--config", f_.config, "TOML config file");
    app.add_flag("--quiet", f_.quiet, "only log errors");
    app.add_flag("--json-logs", f_.json_logs, "log JSON lines to stderr");
    app.add_option("--jobs", f_.jobs, "worker threads")->check(CLI::PositiveNumber);
    app.add_flag("--no-cache", f_.no_cache, "ignore INSTA_CACHE_DIR");
    define(app);

    std::reverse(args.begin(), args.end());
    try {
      app.parse(args);
    } catch (const CLI::CallForHelp&) {
      out_ << app.help();
      return kOk;
    } catch (const CLI::CallForAllHelp&) {
      out_ << app.help("", CLI::AppFormatMode::All);
      return kOk;
    } catch (const CLI::CallForVersion&) {
      out_ << kVersion << '\n';
      return kOk;
    } catch (const CLI::ParseError& e) {
      err_ << kToolName << ": usage: " << e.what() << '\n';
      return kUsageError;
    }

    Logger log(err_, f_.quiet, f_.json_logs);
    try {
      PipelineConfig cfg;
      if (f_.config) apply_config_file(cfg, *f_.config);
      apply_common(cfg);
      return dispatch_(cfg, log);
    } catch (const ConfigError& e) {
      log.error(e.what());
      return kUsageError;
    } catch (const Error& e) {
      log.error(e.what());
      return kDomainError;
    } catch (const fs::filesystem_error& e) {
      log.error(e.what());
      return kDomainError;
    } catch (const nlohmann::json::exception& e) {
      log.error(e.what());
      return kDomainError;
    }
  }

 private:
  using Handler = std::function<int(PipelineConfig&, const Logger&)>;

  void define(CLI::App& app) {
    auto add_backend = [&](CLI::App* s) {
      s->add_option("--backend", f_.backend, "ref | ref:<dim> | remote:<url>");
      s->add_option("--dim", f_.dim, "reference backend dimension")->check(CLI::Range(2, 1 << 20));
      s->add_option("--model", f_.model, "model id sent to a remote backend");
      s->add_option("--timeout-ms", f_.timeout_ms, "remote request timeout");
      s->add_option("--remote-batch", f_.remote_batch, "texts per remote request")->check(CLI::PositiveNumber);
    };

    auto* ingest = app.add_subcommand("ingest", "validate a manifest and write its canonical form");
    ingest->add_option("--corpus", f_.corpus, "manifest (JSON Lines)");
    ingest->add_option("--paraphrases", f_.paraphrases, "paraphrases to add as augmented instructions");
    ingest->add_option("--out", f_.out, "canonical manifest")->required();
    ingest->add_option("--stats", f_.stats, "statistics report (JSON)");
    ingest->add_option("--target", f_.target, "fail if train tasks share this task's cluster");
    ingest->add_flag("--check-instances", f_.check_instances, "load and validate every instance file");
    on(ingest, [this](PipelineConfig& c, const Logger& l) { return do_ingest(c, l); });

    auto* refine = app.add_subcommand("refine", "normalize instruction placeholders");
    refine->add_option("--in", f_.in, "input manifest")->required();
    refine->add_option("--out", f_.out, "refined manifest")->required();
    refine->add_option("--report", f_.report, "per-instruction replacement report");
    refine->add_flag("--disable", f_.disable, "copy raw text (unfiltered condition)");
    on(refine, [this](PipelineConfig& c, const Logger& l) { return do_refine(c, l); });

    auto* align = app.add_subcommand("align", "train the projection head on instruction pairs");
    align->add_option("--corpus", f_.corpus, "manifest");
    add_backend(align);
    align->add_option("--preset", f_.preset, "p3 | niv2 learning-rate preset");
    align->add_option("--lr", f_.lr, "learning rate");
    align->add_option("--epochs", f_.epochs, "epochs");
    align->add_option("--batch-size", f_.batch_size, "pairs per step")->check(CLI::PositiveNumber);
    align->add_option("--val-fraction", f_.val_fraction, "validation share of pairs");
    align->add_option("--n-pos", f_.n_pos, "positive pairs");
    align->add_option("--n-neg", f_.n_neg, "negative pairs");
    align->add_option("--dim-out", f_.dim_out, "head output dimension");
    align->add_option("--seed", f_.seed, "seed");
    align->add_option("--aux", f_.aux, "auxiliary pair file");
    align->add_flag("--raw-text", f_.raw_text, "train on raw instead of refined text");
    align->add_option("--out", f_.out, "head checkpoint")->required();
    align->add_option("--report", f_.report, "training report (JSON)");
    on(align, [this](PipelineConfig& c, const Logger& l) { return do_align(c, l); });

    auto add_selection = [&](CLI::App* s) {
      s->add_option("--corpus", f_.corpus, "manifest");
      s->add_option("--target", f_.target, "target task id");
      s->add_option("--method", f_.method, "insta | insta_aligned | dsta | random");
      s->add_option("--head", f_.head, "projection head checkpoint");
      s->add_flag("--use-refined", f_.use_refined, "score refined instruction text");
      s->add_option("--n", f_.n, "samples per instruction (dsta)");
      s->add_option("--seed", f_.seed, "seed (dsta, random)");
      s->add_option("--aggregate", f_.aggregate, "max | mean");
      add_backend(s);
    };

    auto* select = app.add_subcommand("select", "select the top-k training tasks for a target");
    add_selection(select);
    select->add_option("--k", f_.k, "tasks to select");
    select->add_option("--out", f_.out, "selection (JSON)")->required();
    on(select, [this](PipelineConfig& c, const Logger& l) { return do_select(c, l); });

    auto* sweep = app.add_subcommand("sweep-k", "selections for every k in a range");
    add_selection(sweep);
    sweep->add_option("--kmin", f_.kmin, "smallest k")->required()->check(CLI::PositiveNumber);
    sweep->add_option("--kmax", f_.kmax, "largest k")->required()->check(CLI::PositiveNumber);
    sweep->add_option("--out-dir", f_.out_dir, "directory for sel_k<k>.json and sweep.csv")->required();
    on(sweep, [this](PipelineConfig& c, const Logger& l) { return do_sweep(c, l); });

    auto* mixture = app.add_subcommand("mixture", "sample a capped training mixture from a selection");
    mixture->add_option("--corpus", f_.corpus, "manifest");
    mixture->add_option("--selection", f_.selection, "selection (JSON)");
    mixture->add_option("--cap", f_.cap, "instances per task")->check(CLI::PositiveNumber);
    mixture->add_option("--seed", f_.seed, "seed");
    mixture->add_option("--render", f_.render, "none | def | def_pos2");
    mixture->add_option("--out", f_.out, "mixture manifest (JSON Lines)")->required();
    on(mixture, [this](PipelineConfig& c, const Logger& l) { return do_mixture(c, l); });

    auto* compare = app.add_subcommand("compare", "correlate selections with a pairwise-transfer matrix");
    compare->add_option("--selections", f_.selections, "selection files")->required();
    compare->add_option("--transfer", f_.transfer, "transfer matrix (CSV)")->required();
    compare->add_option("--out", f_.out, "comparison report (JSON)")->required();
    on(compare, [this](PipelineConfig& c, const Logger& l) { return do_compare(c, l); });

    auto* report = app.add_subcommand("report", "cost model and corpus statistics");
    report->add_flag("--cost", f_.cost, "closed-form encode/similarity counts");
    report->add_option("--Tt", f_.t_train, "training tasks");
    report->add_option("--Te", f_.t_eval, "evaluation tasks");
    report->add_option("--k", f_.k, "instructions per task");
    report->add_option("--n", f_.n, "samples per instruction");
    report->add_option("--corpus", f_.corpus, "manifest for a statistics report");
    report->add_option("--out", f_.out, "report (JSON); stdout when omitted");
    on(report, [this](PipelineConfig& c, const Logger& l) { return do_report(c, l); });

    auto* verify_cmd = app.add_subcommand("verify", "re-hash a run directory against its metadata");
    verify_cmd->add_option("--run-dir", f_.run_dir, "directory holding *.run.json")->required();
    on(verify_cmd, [this](PipelineConfig& c, const Logger& l) { return do_verify(c, l); });
  }

  void on(CLI::App* sub, Handler h) {
    sub->callback([this, sub, h] {
      subcommand_ = sub->get_name();
      dispatch_ = h;
    });
  }

  void apply_common(PipelineConfig& c) const {
    if (f_.jobs) c.jobs = *f_.jobs;
    if (f_.corpus) c.corpus = *f_.corpus;
    if (f_.backend) c.backend.spec = *f_.backend;
    if (f_.dim) c.backend.dim = *f_.dim;
    if (f_.model) c.backend.model = *f_.model;
    if (f_.timeout_ms) c.backend.timeout_ms = *f_.timeout_ms;
    if (f_.remote_batch) c.backend.batch_size = *f_.remote_batch;
    if (f_.target) c.select.target = *f_.target;
    if (f_.method) c.select.method = *f_.method;
    if (f_.head) c.select.head = *f_.head;
    if (f_.use_refined) c.select.use_refined = true;
    if (f_.n) c.select.n = *f_.n;
    if (f_.aggregate) c.select.aggregate = *f_.aggregate;
    if (f_.k) c.select.k = *f_.k;
    if (f_.selection) c.mixture.selection = *f_.selection;
    if (f_.cap) c.mixture.cap = *f_.cap;
    if (f_.render) c.mixture.render = *f_.render;
    if (f_.disable) c.refine_enabled = false;
    if (f_.preset) {
      if (*f_.preset == "p3") {
        c.train.learning_rate = TrainConfig::p3().learning_rate;
      } else if (*f_.preset == "niv2") {
        c.train.learning_rate = TrainConfig::niv2().learning_rate;
      } else {
        throw ConfigError("--preset must be p3 or niv2");
      }
    }
    if (f_.lr) c.train.learning_rate = *f_.lr;
    if (f_.epochs) c.train.epochs = *f_.epochs;
    if (f_.batch_size) c.train.batch_size = *f_.batch_size;
    if (f_.val_fraction) c.train.val_fraction = *f_.val_fraction;
    if (f_.n_pos) c.train.n_pos = *f_.n_pos;
    if (f_.n_neg) c.train.n_neg = *f_.n_neg;
    if (f_.dim_out) c.train.dim_out = *f_.dim_out;
    if (f_.aux) c.train.auxiliary_pairs_path = *f_.aux;
    if (f_.raw_text) c.train.use_refined = false;
    if (f_.seed) {
      if (subcommand_ == "align") c.train.seed = *f_.seed;
      if (subcommand_ == "select" || subcommand_ == "sweep-k") c.select.seed = *f_.seed;
      if (subcommand_ == "mixture") c.mixture.seed = *f_.seed;
    }
    c.validate();
  }

  static const std::string& need(const std::optional<std::string>& v, const char* what) {
    if (!v) throw ConfigError(std::string("missing ") + what);
    return *v;
  }

  RunRecord record(std::optional<std::uint64_t> seed = std::nullopt) const {
    RunRecord r;
    r.subcommand = subcommand_;
    r.args = args_;
    r.seed = seed;
    if (f_.config) r.inputs.emplace_back(*f_.config);
    return r;
  }

  int do_ingest(PipelineConfig& c, const Logger& log) {
    const fs::path corpus = need(c.corpus, "--corpus");
    const fs::path out = *f_.out;
    refuse_overwrite({corpus}, {out});
    auto ds = load_manifest(corpus);
    auto rec = record();
    rec.inputs.push_back(corpus);
    if (f_.paraphrases) {
      ds = add_paraphrases(ds, *f_.paraphrases);
      rec.inputs.emplace_back(*f_.paraphrases);
    }
    if (f_.check_instances) {
      for (const auto& t : ds.tasks()) {
        if (t.instances_path) ds.instances(t);
      }
    }
    if (c.select.target) {
      const auto violations = validate_heldout(ds, *c.select.target);
      if (!violations.empty()) {
        std::string names;
        for (const auto& v : violations) names += (names.empty() ? "" : ", ") + v;
        throw SplitError("train tasks share the cluster of " + *c.select.target + ": " + names);
      }
    }
    const auto stats = corpus_stats(ds);
    write_manifest(rebase_instances(ds, out.parent_path()), out);
    rec.outputs.push_back(out);
    if (f_.stats) {
      write_json(*f_.stats, to_json(stats));
      rec.outputs.emplace_back(*f_.stats);
    }
    write_run_record(rec);
    log.info("ingested " + std::to_string(ds.tasks().size()) + " tasks (" + std::to_string(stats.train_tasks) +
             " train / " + std::to_string(stats.eval_tasks) + " eval)");
    return kOk;
  }

  int do_refine(PipelineConfig& c, const Logger& log) {
    const fs::path in = *f_.in, out = *f_.out;
    refuse_overwrite({in}, {out});
    auto ds = load_manifest(in);
    auto outcome = refine_corpus(ds, c.refinement());
    write_manifest(rebase_instances(outcome.corpus, out.parent_path()), out);
    auto rec = record();
    rec.inputs.push_back(in);
    rec.outputs.push_back(out);
    if (f_.report) {
      write_json(*f_.report, outcome.report);
      rec.outputs.emplace_back(*f_.report);
    }
    for (const auto& e : outcome.report["instructions"]) {
      for (const auto& w : e["warnings"]) log.warn(e["instruction_id"].get<std::string>() + ": " + w.get<std::string>());
    }
    write_run_record(rec);
    log.info("refined " + std::to_string(outcome.report["total_replacements"].get<std::size_t>()) + " placeholders");
    return kOk;
  }

  int do_align(PipelineConfig& c, const Logger& log) {
    const fs::path corpus = need(c.corpus, "--corpus");
    const fs::path out = *f_.out;
    auto ds = load_manifest(corpus);
    auto backend = make_backend(c.backend);
    auto cache = open_cache(f_.no_cache);
    Embedder embedder(*backend, cache.get());
    auto result = train_head(ds, embedder, c.train);
    save_head(result.head, out);
    auto rec = record(c.train.seed);
    rec.inputs.push_back(corpus);
    if (c.train.auxiliary_pairs_path) rec.inputs.push_back(*c.train.auxiliary_pairs_path);
    rec.outputs.push_back(out);
    if (f_.report) {
      auto j = to_json(result.report);
      j["backend"] = backend->id();
      j["learning_rate"] = c.train.learning_rate;
      j["seed"] = c.train.seed;
      write_json(*f_.report, j);
      rec.outputs.emplace_back(*f_.report);
    }
    write_run_record(rec);
    log.info("head trained: best epoch " + std::to_string(result.report.best_epoch) + ", val loss " +
             std::to_string(result.report.best_val_loss));
    return kOk;
  }

  struct Selector {
    std::unique_ptr<EmbeddingBackend> backend;
    std::unique_ptr<EmbeddingCache> cache;
    std::unique_ptr<Embedder> embedder;
    std::optional<ProjectionHead> head;
    Method method = Method::insta;
  };

  Selector make_selector(const PipelineConfig& c, RunRecord& rec) const {
    Selector s;
    s.method = parse_method(c.select.method);
    if (c.select.head) {
      s.head = load_head(*c.select.head);
      rec.inputs.emplace_back(*c.select.head);
      if (s.method == Method::insta) s.method = Method::insta_aligned;
    }
    if (s.method == Method::insta_aligned && !s.head) throw ConfigError("method insta_aligned needs --head");
    if (s.method != Method::random) {
      s.backend = make_backend(c.backend);
      s.cache = open_cache(f_.no_cache);
      s.embedder = std::make_unique<Embedder>(*s.backend, s.cache.get());
    }
    return s;
  }

  ScoreMatrix matrix_for(const PipelineConfig& c, const MetaDataset& ds, const Selector& s) const {
    const Task& target = ds.task(*c.select.target);
    if (s.method == Method::dsta) {
      EmbeddingTable table(*s.embedder, nullptr);
      DstaOptions opt{c.select.n, c.select.seed, c.jobs};
      return dsta_score_matrix(target, ds, table, opt, s.backend->id());
    }
    ScoringOptions opt{s.head ? &*s.head : nullptr, c.select.use_refined, c.jobs};
    EmbeddingTable table(*s.embedder, opt.head);
    return score_matrix(target, ds, table, opt, s.backend->id());
  }

  static Aggregation aggregation(const PipelineConfig& c) {
    return c.select.aggregate == "mean" ? Aggregation::mean : Aggregation::max;
  }

  void warn_heldout(const MetaDataset& ds, const std::string& target, const Logger& log) const {
    for (const auto& v : validate_heldout(ds, target)) {
      log.warn("train task " + v + " shares the target's cluster and is excluded from the pool");
    }
  }

  int do_select(PipelineConfig& c, const Logger& log) {
    const fs::path corpus = need(c.corpus, "--corpus");
    const auto& target = need(c.select.target, "--target");
    const fs::path out = *f_.out;
    auto ds = load_manifest(corpus);
    auto rec = record(c.select.seed);
    rec.inputs.push_back(corpus);
    auto s = make_selector(c, rec);
    warn_heldout(ds, target, log);
    SelectionResult result;
    if (s.method == Method::random) {
      result = random_select(ds, target, c.select.k, c.select.seed);
    } else {
      result = select_top_k(matrix_for(c, ds, s), c.select.k, aggregation(c));
      result.method = std::string(to_string(s.method));
    }
    if (result.truncated) log.warn("k exceeds the eligible pool; returning the whole pool");
    write_json(out, to_json(result));
    rec.outputs.push_back(out);
    write_run_record(rec);
    log.info("selected " + std::to_string(result.ranked.size()) + " tasks for " + target);
    return kOk;
  }

  int do_sweep(PipelineConfig& c, const Logger& log) {
    const fs::path corpus = need(c.corpus, "--corpus");
    const auto& target = need(c.select.target, "--target");
    if (*f_.kmin > *f_.kmax) throw ConfigError("--kmin exceeds --kmax");
    const fs::path dir = *f_.out_dir;
    auto ds = load_manifest(corpus);
    auto rec = record(c.select.seed);
    rec.inputs.push_back(corpus);
    auto s = make_selector(c, rec);
    warn_heldout(ds, target, log);
    std::optional<ScoreMatrix> sm;
    if (s.method != Method::random) sm = matrix_for(c, ds, s);
    std::string csv = "k,selected,set_hash\n";
    fs::create_directories(dir);
    for (std::size_t k = *f_.kmin; k <= *f_.kmax; ++k) {
      SelectionResult r;
      if (sm) {
        r = select_top_k(*sm, k, aggregation(c));
        r.method = std::string(to_string(s.method));
      } else {
        r = random_select(ds, target, k, c.select.seed);
      }
      auto ids = r.task_ids();
      std::sort(ids.begin(), ids.end());
      std::string joined;
      for (const auto& id : ids) joined += id + "\n";
      const auto path = dir / ("sel_k" + std::to_string(k) + ".json");
      write_json(path, to_json(r));
      rec.outputs.push_back(path);
      csv += std::to_string(k) + "," + std::to_string(r.ranked.size()) + "," + sha256_hex(joined) + "\n";
    }
    write_text_file(dir / "sweep.csv", csv);
    rec.outputs.insert(rec.outputs.begin(), dir / "sweep.csv");
    write_run_record(rec);
    log.info("swept k=" + std::to_string(*f_.kmin) + ".." + std::to_string(*f_.kmax));
    return kOk;
  }

  int do_mixture(PipelineConfig& c, const Logger& log) {
    const fs::path corpus = need(c.corpus, "--corpus");
    const fs::path selection = need(c.mixture.selection, "--selection");
    const fs::path out = *f_.out;
    refuse_overwrite({corpus, selection}, {out});
    auto ds = load_manifest(corpus);
    auto sel = load_selection(selection);
    auto m = build_mixture(sel, ds, c.mixture.cap, c.mixture.seed, parse_prompt_style(c.mixture.render));
    write_text_file(out, serialize_mixture(m));
    auto rec = record(c.mixture.seed);
    rec.inputs = {corpus, selection};
    if (f_.config) rec.inputs.emplace_back(*f_.config);
    rec.outputs.push_back(out);
    write_run_record(rec);
    log.info("mixture of " + std::to_string(m.total_instances) + " instances over " +
             std::to_string(m.entries.size()) + " tasks");
    return kOk;
  }

  int do_compare(PipelineConfig&, const Logger& log) {
    const auto tm = load_transfer_csv(*f_.transfer);
    auto rec = record();
    rec.inputs.emplace_back(*f_.transfer);
    std::vector<SelectionResult> sels;
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& path : f_.selections) {
      rec.inputs.emplace_back(path);
      sels.push_back(load_selection(path));
      const auto& s = sels.back();
      nlohmann::json e{{"file", path}, {"target", s.target}, {"method", s.method}, {"k", s.k},
                       {"tasks", s.task_ids()}};
      std::map<TaskId, double> scores;
      for (const auto& r : s.ranked) scores[r.task] = r.score;
      try {
        e["spearman"] = rank_correlation(scores, tm, s.target);
      } catch (const InsufficientOverlapError& err) {
        e["spearman"] = nullptr;
        e["spearman_error"] = err.what();
        log.warn(path + ": " + err.what());
      }
      // Share of the selection among the k best sources by measured transfer.
      const auto col = std::find(tm.targets.begin(), tm.targets.end(), s.target);
      if (col != tm.targets.end() && !s.ranked.empty()) {
        const auto ci = std::size_t(col - tm.targets.begin());
        std::vector<std::size_t> order;
        for (std::size_t r = 0; r < tm.sources.size(); ++r) {
          if (tm.sources[r] != s.target) order.push_back(r);
        }
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
          if (tm.at(a, ci) != tm.at(b, ci)) return tm.at(a, ci) > tm.at(b, ci);
          return tm.sources[a] < tm.sources[b];
        });
        order.resize(std::min(order.size(), s.ranked.size()));
        std::set<TaskId> best;
        for (auto r : order) best.insert(tm.sources[r]);
        std::size_t hit = 0;
        for (const auto& r : s.ranked) hit += best.count(r.task);
        e["transfer_topk_overlap"] = double(hit) / double(s.ranked.size());
      } else {
        e["transfer_topk_overlap"] = nullptr;
      }
      entries.push_back(std::move(e));
    }
    nlohmann::json pairwise = nlohmann::json::array();
    for (std::size_t a = 0; a < sels.size(); ++a) {
      for (std::size_t b = a + 1; b < sels.size(); ++b) {
        if (sels[a].target != sels[b].target) continue;
        const auto ia = sels[a].task_ids(), ib = sels[b].task_ids();
        std::set<TaskId> sa(ia.begin(), ia.end()), sb(ib.begin(), ib.end()), uni = sa;
        uni.insert(sb.begin(), sb.end());
        std::size_t inter = 0;
        for (const auto& t : sa) inter += sb.count(t);
        pairwise.push_back({{"a", f_.selections[a]},
                            {"b", f_.selections[b]},
                            {"target", sels[a].target},
                            {"jaccard", uni.empty() ? 1.0 : double(inter) / double(uni.size())}});
      }
    }
    const fs::path out = *f_.out;
    write_json(out, {{"selections", entries}, {"pairwise", pairwise}});
    rec.outputs.push_back(out);
    write_run_record(rec);
    log.info("compared " + std::to_string(sels.size()) + " selections");
    return kOk;
  }

  int do_report(PipelineConfig& c, const Logger&) {
    nlohmann::json j;
    auto rec = record();
    if (f_.cost) {
      if (!f_.t_train || !f_.t_eval || !f_.k || !f_.n) throw ConfigError("--cost needs --Tt, --Te, --k and --n");
      const auto insta_cost = cost_report(Method::insta, *f_.t_train, *f_.t_eval, *f_.k, *f_.n);
      const auto dsta_cost = cost_report(Method::dsta, *f_.t_train, *f_.t_eval, *f_.k, *f_.n);
      j["cost"] = {{"insta", to_json(insta_cost)},
                   {"dsta", to_json(dsta_cost)},
                   {"encode_ratio", double(dsta_cost.encode_ops) / double(insta_cost.encode_ops)},
                   {"sim_ratio", double(dsta_cost.sim_ops) / double(insta_cost.sim_ops)}};
    }
    if (c.corpus) {
      const fs::path corpus = *c.corpus;
      j["stats"] = to_json(corpus_stats(load_manifest(corpus)));
      rec.inputs.push_back(corpus);
    }
    if (j.is_null()) throw ConfigError("report needs --cost and/or --corpus");
    if (f_.out) {
      write_json(*f_.out, j);
      rec.outputs.emplace_back(*f_.out);
      write_run_record(rec);
    } else {
      out_ << j.dump(2) << '\n';
    }
    return kOk;
  }

  int do_verify(PipelineConfig&, const Logger& log) {
    const auto problems = verify(*f_.run_dir);
    for (const auto& p : problems) out_ << p << '\n';
    if (problems.empty()) {
      out_ << "ok\n";
      return kOk;
    }
    log.error(std::to_string(problems.size()) + " mismatch(es) in " + *f_.run_dir);
    return kDomainError;
  }

  std::ostream& out_;
  std::ostream& err_;
  Flags f_;
  std::vector<std::string> args_;
  std::string subcommand_;
  Handler dispatch_;
};

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return App(out, err).run(args);
}

}  // namespace insta::cli
