#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "insta/align.hpp"
#include "insta/corpus.hpp"
#include "insta/embed.hpp"
#include "insta/errors.hpp"
#include "insta/placeholders.hpp"
#include "insta/rng.hpp"

namespace insta {

enum class Method { insta, insta_aligned, dsta, random };
enum class Aggregation { max, mean };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::insta: return "insta";
    case Method::insta_aligned: return "insta_aligned";
    case Method::dsta: return "dsta";
    case Method::random: return "random";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  if (s == "insta") return Method::insta;
  if (s == "insta_aligned") return Method::insta_aligned;
  if (s == "dsta") return Method::dsta;
  if (s == "random") return Method::random;
  throw ConfigError("unknown method '" + std::string(s) + "'");
}

// Cosine scores between target instructions (rows) and training-pool
// instructions (cols). In sample-based mode rows/cols are rendered samples
// and the ids repeat per sample.
struct ScoreMatrix {
  TaskId target;
  std::vector<InstructionId> rows;
  std::vector<InstructionId> cols;
  std::vector<TaskId> col_tasks;  // owning task per column, grouped contiguously
  std::vector<double> values;     // row-major
  std::string backend_id;
  std::optional<std::string> head_id;

  double at(std::size_t i, std::size_t j) const { return values[i * cols.size() + j]; }
};

struct RankedTask {
  TaskId task;
  double score = 0;
  InstructionId via_target;
  InstructionId via_train;
};

struct SelectionResult {
  TaskId target;
  std::size_t k = 0;
  std::string method;
  std::vector<RankedTask> ranked;
  bool truncated = false;  // k exceeded the eligible pool

  std::vector<TaskId> task_ids() const {
    std::vector<TaskId> out;
    for (const auto& r : ranked) out.push_back(r.task);
    return out;
  }
};

inline nlohmann::json to_json(const SelectionResult& s) {
  nlohmann::json ranked = nlohmann::json::array();
  for (const auto& r : s.ranked) {
    ranked.push_back({{"task", r.task}, {"score", r.score}, {"via", {r.via_target, r.via_train}}});
  }
  nlohmann::json j{{"target", s.target}, {"method", s.method}, {"k", s.k}, {"ranked", ranked}};
  if (s.truncated) j["truncated"] = true;
  return j;
}

inline SelectionResult selection_from_json(const nlohmann::json& j) {
  try {
    SelectionResult s;
    s.target = j.at("target").get<std::string>();
    s.method = j.at("method").get<std::string>();
    s.k = j.at("k").get<std::size_t>();
    s.truncated = j.value("truncated", false);
    for (const auto& r : j.at("ranked")) {
      const auto& via = r.at("via");
      if (!via.is_array() || via.size() != 2) throw SchemaError("'via' must hold two ids");
      s.ranked.push_back({r.at("task").get<std::string>(), r.at("score").get<double>(), via[0].get<std::string>(),
                          via[1].get<std::string>()});
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("selection file: ") + e.what());
  }
}

inline SelectionResult load_selection(const std::filesystem::path& path) {
  try {
    return selection_from_json(nlohmann::json::parse(read_file(path.string())));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(0, path.string() + ": " + e.what());
  }
}

// Train-split tasks outside the target's cluster, in corpus order.
inline std::vector<const Task*> eligible_pool(const MetaDataset& ds, const Task& target) {
  std::vector<const Task*> pool;
  for (const auto& t : ds.tasks()) {
    if (t.split == Split::train && t.id != target.id && t.cluster_id != target.cluster_id) pool.push_back(&t);
  }
  return pool;
}

struct ScoringOptions {
  const ProjectionHead* head = nullptr;
  bool use_refined = false;
  std::size_t jobs = 1;
};

// Counts cosine evaluations across every matrix built with it.
struct SimCounter {
  std::atomic<std::uint64_t> ops{0};
};

// Embeddings keyed by an arbitrary label (instruction id, or sample id in
// sample-based mode), with the head applied.
class EmbeddingTable {
 public:
  EmbeddingTable(const Embedder& embedder, const ProjectionHead* head) : embedder_(embedder), head_(head) {}

  // Embeds every (label, text) not yet present, in one backend call.
  void add(const std::vector<std::pair<std::string, std::string>>& items) {
    std::vector<std::string> labels, texts;
    std::unordered_set<std::string> pending;
    for (const auto& [label, text] : items) {
      if (table_.count(label) || !pending.insert(label).second) continue;
      labels.push_back(label);
      texts.push_back(text);
    }
    if (texts.empty()) return;
    auto vecs = embedder_.embed(texts);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      table_.emplace(labels[i], head_ ? apply_head(*head_, vecs[i]) : std::move(vecs[i]));
    }
  }

  const EmbeddingVector& at(const std::string& label) const { return table_.at(label); }
  std::size_t size() const { return table_.size(); }

 private:
  const Embedder& embedder_;
  const ProjectionHead* head_;
  std::unordered_map<std::string, EmbeddingVector> table_;
};

namespace detail {

// values[i][j] = cos(row_vecs[i], col_vecs[j]); rows split across workers,
// each writing its own preallocated slice.
inline std::vector<double> cosine_block(const std::vector<const EmbeddingVector*>& row_vecs,
                                        const std::vector<const EmbeddingVector*>& col_vecs, std::size_t jobs,
                                        SimCounter* counter) {
  const std::size_t R = row_vecs.size(), C = col_vecs.size();
  std::vector<double> values(R * C);
  // Squared norms are recomputed in double: the stored floats are unit-norm
  // only to float precision, and sqrt(x * x) == x keeps self-similarity at 1.
  std::vector<double> rn(R), cn(C);
  for (std::size_t i = 0; i < R; ++i) rn[i] = dot(row_vecs[i]->values, row_vecs[i]->values);
  for (std::size_t j = 0; j < C; ++j) cn[j] = dot(col_vecs[j]->values, col_vecs[j]->values);
  auto work = [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      for (std::size_t j = 0; j < C; ++j) {
        const double c = dot(row_vecs[i]->values, col_vecs[j]->values) / std::sqrt(rn[i] * cn[j]);
        values[i * C + j] = std::clamp(c, -1.0, 1.0);
      }
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, R));
  if (jobs == 1) {
    work(0, R);
  } else {
    std::vector<std::thread> threads;
    const std::size_t chunk = (R + jobs - 1) / jobs;
    for (std::size_t t = 0; t < jobs; ++t) {
      const auto r0 = t * chunk, r1 = std::min(R, r0 + chunk);
      if (r0 < r1) threads.emplace_back(work, r0, r1);
    }
    for (auto& th : threads) th.join();
  }
  if (counter) counter->ops += R * C;
  return values;
}

}  // namespace detail

// Instruction-only score matrix for one target, reading embeddings from (and
// filling) a shared table so several targets can reuse them.
inline ScoreMatrix score_matrix(const Task& target, const MetaDataset& ds, EmbeddingTable& table,
                                const ScoringOptions& opt, const std::string& backend_id,
                                SimCounter* counter = nullptr) {
  const auto target_instrs = target.visible_instructions();
  if (target_instrs.empty()) throw NoEligibleTasksError("target " + target.id + " has no selectable instruction");
  ScoreMatrix sm;
  sm.target = target.id;
  sm.backend_id = backend_id;
  if (opt.head) sm.head_id = head_id(*opt.head);

  std::vector<std::pair<std::string, std::string>> items;
  for (const auto* in : target_instrs) {
    sm.rows.push_back(in->id);
    items.emplace_back(in->id, in->text_for_selection(opt.use_refined));
  }
  for (const Task* t : eligible_pool(ds, target)) {
    for (const auto* in : t->visible_instructions()) {
      sm.cols.push_back(in->id);
      sm.col_tasks.push_back(t->id);
      items.emplace_back(in->id, in->text_for_selection(opt.use_refined));
    }
  }
  if (sm.cols.empty()) throw NoEligibleTasksError("no eligible training task for target " + target.id);
  table.add(items);

  std::vector<const EmbeddingVector*> rv, cv;
  for (const auto& id : sm.rows) rv.push_back(&table.at(id));
  for (const auto& id : sm.cols) cv.push_back(&table.at(id));
  sm.values = detail::cosine_block(rv, cv, opt.jobs, counter);
  return sm;
}

inline ScoreMatrix score_matrix(std::string_view target, const MetaDataset& ds, const Embedder& embedder,
                                const ScoringOptions& opt = {}, SimCounter* counter = nullptr) {
  EmbeddingTable table(embedder, opt.head);
  return score_matrix(ds.task(target), ds, table, opt, embedder.backend().id(), counter);
}

// Top-k tasks by aggregated score (max over cells by default). Ties on score
// go to the smaller TaskId; within a task the first maximal cell in row-major
// order is reported as the achieving pair.
inline SelectionResult select_top_k(const ScoreMatrix& sm, std::size_t k, Aggregation agg = Aggregation::max) {
  if (k == 0) throw ConfigError("k must be at least 1");
  struct Acc {
    double best = -2.0;
    double sum = 0.0;
    std::size_t cells = 0;
    std::size_t bi = 0, bj = 0;
  };
  std::vector<TaskId> order;
  std::unordered_map<TaskId, Acc> acc;
  for (std::size_t j = 0; j < sm.cols.size(); ++j) {
    if (!acc.count(sm.col_tasks[j])) order.push_back(sm.col_tasks[j]);
    auto& a = acc[sm.col_tasks[j]];
    for (std::size_t i = 0; i < sm.rows.size(); ++i) {
      const double v = sm.at(i, j);
      a.sum += v;
      ++a.cells;
      if (v > a.best || (v == a.best && (i < a.bi || (i == a.bi && j < a.bj)))) {
        a.best = v;
        a.bi = i;
        a.bj = j;
      }
    }
  }
  std::vector<RankedTask> all;
  for (const auto& t : order) {
    const auto& a = acc.at(t);
    const double score = agg == Aggregation::max ? a.best : a.sum / double(a.cells);
    all.push_back({t, score, sm.rows[a.bi], sm.cols[a.bj]});
  }
  std::sort(all.begin(), all.end(), [](const RankedTask& x, const RankedTask& y) {
    if (x.score != y.score) return x.score > y.score;
    return x.task < y.task;
  });
  SelectionResult r;
  r.target = sm.target;
  r.k = k;
  r.method = sm.head_id ? "insta_aligned" : "insta";
  r.truncated = k > all.size();
  all.resize(std::min(k, all.size()));
  r.ranked = std::move(all);
  return r;
}

// ---------------------------------------------------------------------------
// Sample-based selection (DSTa)

// Instruction filled with one instance. Placeholders are substituted from the
// instance fields; an instruction without placeholders gets the instance's
// "input" field (or all fields in key order) appended on a new line.
inline std::string render_sample(const std::string& instruction, const Instance& inst) {
  if (!parse_placeholders(instruction).empty()) return substitute(instruction, inst.fields);
  std::string body;
  if (auto it = inst.fields.find("input"); it != inst.fields.end()) {
    body = it->second;
  } else {
    for (const auto& [k, v] : inst.fields) {
      if (!body.empty()) body += '\n';
      body += v;
    }
  }
  return body.empty() ? instruction : instruction + "\n" + body;
}

struct DstaOptions {
  std::size_t samples_per_instruction = 32;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

namespace detail {

// Sample labels and rendered texts for every visible instruction of a task.
// Instances are resampled per instruction from a stream keyed by the
// instruction id.
inline void dsta_samples(const MetaDataset& ds, const Task& task, const DstaOptions& opt,
                         std::vector<std::pair<std::string, std::string>>& items, std::vector<InstructionId>& owners) {
  if (!task.instances_path || task.instance_count == 0) {
    throw MissingInstancesError("task " + task.id + " has no instances for sample-based selection");
  }
  const auto instances = ds.instances(task);
  for (const auto* in : task.visible_instructions()) {
    Rng rng(derive_seed(opt.seed, task.id + '\x1f' + in->id));
    for (auto idx : rng.sample_indices(instances->size(), std::min(opt.samples_per_instruction, instances->size()))) {
      const auto& inst = (*instances)[idx];
      items.emplace_back(in->id + '\x1f' + inst.id, render_sample(in->text, inst));
      owners.push_back(in->id);
    }
  }
}

}  // namespace detail

inline ScoreMatrix dsta_score_matrix(const Task& target, const MetaDataset& ds, EmbeddingTable& table,
                                     const DstaOptions& opt, const std::string& backend_id,
                                     SimCounter* counter = nullptr) {
  if (opt.samples_per_instruction == 0) throw ConfigError("samples per instruction must be positive");
  ScoreMatrix sm;
  sm.target = target.id;
  sm.backend_id = backend_id;
  std::vector<std::pair<std::string, std::string>> row_items, col_items;
  detail::dsta_samples(ds, target, opt, row_items, sm.rows);
  if (row_items.empty()) throw NoEligibleTasksError("target " + target.id + " has no selectable instruction");
  for (const Task* t : eligible_pool(ds, target)) {
    const auto before = col_items.size();
    detail::dsta_samples(ds, *t, opt, col_items, sm.cols);
    sm.col_tasks.insert(sm.col_tasks.end(), col_items.size() - before, t->id);
  }
  if (col_items.empty()) throw NoEligibleTasksError("no eligible training task for target " + target.id);
  auto all = row_items;
  all.insert(all.end(), col_items.begin(), col_items.end());
  table.add(all);
  std::vector<const EmbeddingVector*> rv, cv;
  for (const auto& [label, _] : row_items) rv.push_back(&table.at(label));
  for (const auto& [label, _] : col_items) cv.push_back(&table.at(label));
  sm.values = detail::cosine_block(rv, cv, opt.jobs, counter);
  return sm;
}

inline SelectionResult dsta_select(std::string_view target, const MetaDataset& ds, const Embedder& embedder,
                                   std::size_t k, const DstaOptions& opt = {}, SimCounter* counter = nullptr) {
  EmbeddingTable table(embedder, nullptr);
  auto r = select_top_k(dsta_score_matrix(ds.task(target), ds, table, opt, embedder.backend().id(), counter), k);
  r.method = "dsta";
  return r;
}

// Uniform draw without replacement from the eligible pool.
inline SelectionResult random_select(const MetaDataset& ds, std::string_view target, std::size_t k,
                                     std::uint64_t seed) {
  if (k == 0) throw ConfigError("k must be at least 1");
  const Task& tgt = ds.task(target);
  const auto pool = eligible_pool(ds, tgt);
  if (pool.empty()) throw NoEligibleTasksError("no eligible training task for target " + tgt.id);
  Rng rng(derive_seed(seed, "random-select:" + tgt.id));
  SelectionResult r;
  r.target = tgt.id;
  r.k = k;
  r.method = "random";
  r.truncated = k > pool.size();
  for (auto idx : rng.sample_indices(pool.size(), std::min(k, pool.size()))) {
    r.ranked.push_back({pool[idx]->id, 0.0, "", ""});
  }
  return r;
}

// ---------------------------------------------------------------------------
// Rank correlation against an external pairwise-transfer matrix

struct TransferMatrix {
  std::vector<TaskId> sources;  // rows
  std::vector<TaskId> targets;  // cols
  std::vector<double> values;   // row-major, sources x targets

  double at(std::size_t s, std::size_t t) const { return values[s * targets.size() + t]; }
};

// CSV: first row is a corner cell followed by target ids; each further row
// is a source id followed by its transfer scores.
inline TransferMatrix parse_transfer_csv(std::string_view text) {
  auto split = [](std::string_view line) {
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      cells.emplace_back(detail::trim(line.substr(start, comma - start)));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    return cells;
  };
  TransferMatrix tm;
  std::size_t lineno = 0, pos = 0;
  bool header = true;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    auto line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (detail::trim(line).empty()) continue;
    auto cells = split(line);
    if (header) {
      tm.targets.assign(cells.begin() + 1, cells.end());
      if (tm.targets.empty()) throw SchemaError("transfer matrix has no target columns");
      header = false;
      continue;
    }
    if (cells.size() != tm.targets.size() + 1) {
      throw ParseError(lineno, "expected " + std::to_string(tm.targets.size() + 1) + " cells");
    }
    tm.sources.push_back(cells[0]);
    for (std::size_t c = 1; c < cells.size(); ++c) {
      double v = 0;
      const auto& s = cells[c];
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) {
        throw ParseError(lineno, "bad number '" + s + "'");
      }
      tm.values.push_back(v);
    }
  }
  if (header) throw SchemaError("empty transfer matrix");
  return tm;
}

inline TransferMatrix load_transfer_csv(const std::filesystem::path& path) {
  return parse_transfer_csv(read_file(path.string()));
}

// 1-based ranks, ties receive the average of the ranks they span.
inline std::vector<double> average_ranks(const std::vector<double>& xs) {
  std::vector<std::size_t> idx(xs.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && xs[idx[j + 1]] == xs[idx[i]]) ++j;
    const double r = (double(i) + double(j)) / 2.0 + 1.0;
    for (std::size_t m = i; m <= j; ++m) ranks[idx[m]] = r;
    i = j + 1;
  }
  return ranks;
}

// Spearman correlation as the Pearson correlation of average ranks.
inline double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw Error("spearman: length mismatch");
  if (xs.size() < 3) throw InsufficientOverlapError("spearman needs at least 3 paired values");
  const auto rx = average_ranks(xs), ry = average_ranks(ys);
  const double n = double(rx.size());
  const double mean = (n + 1.0) / 2.0;  // average ranks always sum to n(n+1)/2
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mean) * (ry[i] - mean);
    sxx += (rx[i] - mean) * (rx[i] - mean);
    syy += (ry[i] - mean) * (ry[i] - mean);
  }
  if (sxx == 0 || syy == 0) throw InsufficientOverlapError("spearman undefined for a constant ranking");
  return sxy / std::sqrt(sxx * syy);
}

inline double rank_correlation(const std::map<TaskId, double>& sel_scores, const TransferMatrix& tm,
                               std::string_view target) {
  const auto col = std::find(tm.targets.begin(), tm.targets.end(), target);
  if (col == tm.targets.end()) throw InsufficientOverlapError("target " + std::string(target) + " not in matrix");
  const auto c = std::size_t(col - tm.targets.begin());
  std::vector<double> xs, ys;
  for (std::size_t s = 0; s < tm.sources.size(); ++s) {
    auto it = sel_scores.find(tm.sources[s]);
    if (it == sel_scores.end()) continue;
    xs.push_back(it->second);
    ys.push_back(tm.at(s, c));
  }
  if (xs.size() < 3) {
    throw InsufficientOverlapError("only " + std::to_string(xs.size()) + " tasks shared with the transfer matrix");
  }
  return spearman(xs, ys);
}

// ---------------------------------------------------------------------------
// Cost model

struct CostReport {
  std::string method;
  std::uint64_t train_tasks = 0;  // T_t
  std::uint64_t eval_tasks = 0;   // T_e
  std::uint64_t k = 0;            // instructions per task
  std::uint64_t n = 0;            // samples per instruction
  std::uint64_t encode_ops = 0;
  std::uint64_t sim_ops = 0;

  friend bool operator==(const CostReport&, const CostReport&) = default;
};

inline CostReport cost_report(Method method, std::uint64_t t_train, std::uint64_t t_eval, std::uint64_t k,
                              std::uint64_t n) {
  if (t_train == 0 || t_eval == 0 || k == 0 || n == 0) throw ConfigError("cost model arguments must be positive");
  CostReport r{std::string(to_string(method)), t_train, t_eval, k, n, 0, 0};
  if (method == Method::dsta) {
    r.encode_ops = (t_train + t_eval) * k * n;
    r.sim_ops = t_train * t_eval * k * k * n * n;
  } else if (method == Method::insta || method == Method::insta_aligned) {
    r.encode_ops = (t_train + t_eval) * k;
    r.sim_ops = t_train * t_eval * k * k;
  } else {
    throw ConfigError("no cost model for method random");
  }
  return r;
}

inline nlohmann::json to_json(const CostReport& r) {
  return {{"method", r.method}, {"T_t", r.train_tasks}, {"T_e", r.eval_tasks}, {"k", r.k},
          {"n", r.n},           {"encode_ops", r.encode_ops}, {"sim_ops", r.sim_ops}};
}

// ---------------------------------------------------------------------------
// Batch selection over several targets, embedding each instruction (or
// sample) once for the whole run.

struct BatchOptions {
  Method method = Method::insta;
  std::size_t k = 5;
  Aggregation aggregation = Aggregation::max;
  ScoringOptions scoring;
  DstaOptions dsta;
  std::uint64_t seed = 0;  // random baseline
};

inline std::vector<SelectionResult> select_targets(const MetaDataset& ds, const std::vector<TaskId>& targets,
                                                   const Embedder& embedder, const BatchOptions& opt,
                                                   SimCounter* counter = nullptr) {
  std::vector<SelectionResult> out;
  if (opt.method == Method::random) {
    for (const auto& t : targets) out.push_back(random_select(ds, t, opt.k, opt.seed));
    return out;
  }
  const ProjectionHead* head = opt.method == Method::dsta ? nullptr : opt.scoring.head;
  EmbeddingTable table(embedder, head);
  for (const auto& t : targets) {
    const Task& task = ds.task(t);
    if (opt.method == Method::dsta) {
      auto r = select_top_k(dsta_score_matrix(task, ds, table, opt.dsta, embedder.backend().id(), counter), opt.k,
                            opt.aggregation);
      r.method = "dsta";
      out.push_back(std::move(r));
    } else {
      ScoringOptions so = opt.scoring;
      so.head = head;
      out.push_back(select_top_k(score_matrix(task, ds, table, so, embedder.backend().id(), counter), opt.k,
                                 opt.aggregation));
    }
  }
  return out;
}

}  // namespace insta
