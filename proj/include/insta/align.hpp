#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "insta/corpus.hpp"
#include "insta/embed.hpp"
#include "insta/errors.hpp"
#include "insta/rng.hpp"

namespace insta {

enum class PairOrigin { same_task, cross_cluster, auxiliary };

inline std::string_view to_string(PairOrigin o) {
  switch (o) {
    case PairOrigin::same_task: return "same_task";
    case PairOrigin::cross_cluster: return "cross_cluster";
    case PairOrigin::auxiliary: return "auxiliary";
  }
  return "?";
}

// Labeled instruction pair. Texts are carried along so auxiliary pairs, which
// have no instruction in the corpus, train the same way.
struct PairSample {
  InstructionId a;
  InstructionId b;
  std::string text_a;
  std::string text_b;
  int y = 0;
  PairOrigin origin = PairOrigin::same_task;
};

// Linear map applied on top of frozen base embeddings: E'(x) = W^T E(x),
// W of shape dim_in x dim_out.
struct ProjectionHead {
  Eigen::MatrixXd weights;

  static ProjectionHead identity(std::size_t dim_in, std::size_t dim_out = 0) {
    if (dim_out == 0) dim_out = dim_in;
    return {Eigen::MatrixXd::Identity(Eigen::Index(dim_in), Eigen::Index(dim_out))};
  }

  std::size_t dim_in() const { return std::size_t(weights.rows()); }
  std::size_t dim_out() const { return std::size_t(weights.cols()); }

  Eigen::VectorXd project(const Eigen::VectorXd& x) const { return weights.transpose() * x; }
};

inline Eigen::VectorXd to_eigen(const EmbeddingVector& v) {
  Eigen::VectorXd out(Eigen::Index(v.dim()));
  for (std::size_t i = 0; i < v.dim(); ++i) out[Eigen::Index(i)] = v.values[i];
  return out;
}

// Projected, renormalized embedding.
inline EmbeddingVector apply_head(const ProjectionHead& head, const EmbeddingVector& v) {
  if (v.dim() != head.dim_in()) {
    throw DimensionMismatchError("head expects dim " + std::to_string(head.dim_in()) + ", got " +
                                 std::to_string(v.dim()));
  }
  const Eigen::VectorXd p = head.project(to_eigen(v));
  std::vector<float> raw(std::size_t(p.size()));
  for (Eigen::Index i = 0; i < p.size(); ++i) raw[std::size_t(i)] = static_cast<float>(p[i]);
  return normalize(raw);
}

namespace detail {

struct PairGeometry {
  Eigen::VectorXd u, v;
  double nu = 0, nv = 0, c = 0;
};

inline PairGeometry geometry(const ProjectionHead& head, const Eigen::VectorXd& ea, const Eigen::VectorXd& eb) {
  if (std::size_t(ea.size()) != head.dim_in() || std::size_t(eb.size()) != head.dim_in()) {
    throw DimensionMismatchError("pair embedding dim differs from head dim_in");
  }
  PairGeometry g;
  g.u = head.project(ea);
  g.v = head.project(eb);
  g.nu = g.u.norm();
  g.nv = g.v.norm();
  if (g.nu < 1e-12 || g.nv < 1e-12) throw ZeroNormError("projected vector norm below 1e-12");
  g.c = g.u.dot(g.v) / (g.nu * g.nv);
  return g;
}

}  // namespace detail

inline double pair_cosine(const ProjectionHead& head, const Eigen::VectorXd& ea, const Eigen::VectorXd& eb) {
  return detail::geometry(head, ea, eb).c;
}

// (y - cos(W^T ea, W^T eb))^2
inline double pair_loss(const ProjectionHead& head, const Eigen::VectorXd& ea, const Eigen::VectorXd& eb, int y) {
  const double r = double(y) - pair_cosine(head, ea, eb);
  return r * r;
}

// dL/dW for the loss above. With u = W^T ea, v = W^T eb, c = cos(u, v):
//   dc/du = v / (|u||v|) - c u / |u|^2   (and symmetrically for v)
//   dL/dW = -2 (y - c) (ea dc/du^T + eb dc/dv^T)
inline Eigen::MatrixXd pair_grad(const ProjectionHead& head, const Eigen::VectorXd& ea, const Eigen::VectorXd& eb,
                                 int y) {
  const auto g = detail::geometry(head, ea, eb);
  const double scale = -2.0 * (double(y) - g.c);
  const Eigen::VectorXd dcu = g.v / (g.nu * g.nv) - g.c * g.u / (g.nu * g.nu);
  const Eigen::VectorXd dcv = g.u / (g.nu * g.nv) - g.c * g.v / (g.nv * g.nv);
  return scale * (ea * dcu.transpose() + eb * dcv.transpose());
}

// Adds dL/dW into grad in place and returns the loss; the training loop's
// form of pair_loss + pair_grad.
inline double accumulate_pair_grad(const ProjectionHead& head, const Eigen::VectorXd& ea, const Eigen::VectorXd& eb,
                                   int y, Eigen::MatrixXd& grad) {
  const auto g = detail::geometry(head, ea, eb);
  const double r = double(y) - g.c;
  const double scale = -2.0 * r;
  const Eigen::VectorXd dcu = scale * (g.v / (g.nu * g.nv) - g.c * g.u / (g.nu * g.nu));
  const Eigen::VectorXd dcv = scale * (g.u / (g.nu * g.nv) - g.c * g.v / (g.nv * g.nv));
  grad.noalias() += ea * dcu.transpose();
  grad.noalias() += eb * dcv.transpose();
  return r * r;
}

inline double pair_loss(const ProjectionHead& head, const EmbeddingVector& ea, const EmbeddingVector& eb, int y) {
  return pair_loss(head, to_eigen(ea), to_eigen(eb), y);
}

inline Eigen::MatrixXd pair_grad(const ProjectionHead& head, const EmbeddingVector& ea, const EmbeddingVector& eb,
                                 int y) {
  return pair_grad(head, to_eigen(ea), to_eigen(eb), y);
}

// ---------------------------------------------------------------------------
// Pair sampling

struct PairSamplingOptions {
  std::optional<std::size_t> n_pos;  // default: one positive per eligible anchor
  std::optional<std::size_t> n_neg;  // default: as many as positives
  std::uint64_t seed = 0;
  bool use_refined = true;
};

// Positives pair an original instruction with another instruction of the
// same task (augmented paraphrases included). Negatives pair it with an
// instruction from a different cluster. Distinct tasks of one cluster are
// never paired. Only train-split, non-excluded instructions take part.
inline std::vector<PairSample> sample_pairs(const MetaDataset& ds, const PairSamplingOptions& opt) {
  struct Ref {
    const Instruction* in;
    const Task* task;
  };
  std::vector<Ref> pool;  // grouped by cluster
  std::map<ClusterId, std::pair<std::size_t, std::size_t>> cluster_range;
  std::map<ClusterId, std::vector<Ref>> by_cluster;
  for (const auto& t : ds.tasks()) {
    if (t.split != Split::train) continue;
    for (const auto& in : t.instructions) {
      if (in.role != InstructionRole::excluded) by_cluster[t.cluster_id].push_back({&in, &t});
    }
  }
  for (auto& [c, refs] : by_cluster) {
    cluster_range[c] = {pool.size(), pool.size() + refs.size()};
    pool.insert(pool.end(), refs.begin(), refs.end());
  }
  if (cluster_range.size() < 2) {
    throw InsufficientPairsError("need at least two training clusters to draw negatives");
  }

  std::unordered_map<const Task*, std::vector<const Instruction*>> task_members;
  for (const auto& r : pool) task_members[r.task].push_back(r.in);

  std::vector<Ref> anchors, positive_anchors;
  for (const auto& r : pool) {
    if (r.in->role != InstructionRole::original) continue;
    anchors.push_back(r);
    if (task_members[r.task].size() >= 2) positive_anchors.push_back(r);
  }
  if (anchors.empty()) throw InsufficientPairsError("no original training instructions");

  const std::size_t n_pos = opt.n_pos.value_or(positive_anchors.size());
  const std::size_t n_neg = opt.n_neg.value_or(n_pos);
  if (n_pos > 0 && positive_anchors.empty()) {
    throw InsufficientPairsError("no task has a second instruction to serve as a positive");
  }
  if (n_pos + n_neg == 0) throw InsufficientPairsError("no pairs requested");

  auto text = [&](const Instruction* in) -> const std::string& { return in->text_for_selection(opt.use_refined); };

  std::vector<PairSample> out;
  out.reserve(n_pos + n_neg);
  Rng pos_rng(derive_seed(opt.seed, "positives"));
  for (std::size_t k = 0; k < n_pos; ++k) {
    const Ref& anchor = opt.n_pos ? positive_anchors[pos_rng.below(positive_anchors.size())]
                                  : positive_anchors[k];
    const auto& members = task_members[anchor.task];
    const Instruction* partner;
    do {
      partner = members[pos_rng.below(members.size())];
    } while (partner == anchor.in);
    out.push_back({anchor.in->id, partner->id, text(anchor.in), text(partner), 1, PairOrigin::same_task});
  }
  Rng neg_rng(derive_seed(opt.seed, "negatives"));
  for (std::size_t k = 0; k < n_neg; ++k) {
    const Ref& anchor = anchors[neg_rng.below(anchors.size())];
    const auto [lo, hi] = cluster_range[anchor.task->cluster_id];
    std::size_t r = neg_rng.below(pool.size() - (hi - lo));
    if (r >= lo) r += hi - lo;
    const Ref& partner = pool[r];
    out.push_back({anchor.in->id, partner.in->id, text(anchor.in), text(partner.in), 0, PairOrigin::cross_cluster});
  }
  return out;
}

inline std::vector<PairSample> sample_pairs(const MetaDataset& ds, std::size_t n_pos, std::size_t n_neg,
                                            std::uint64_t seed) {
  PairSamplingOptions opt;
  opt.n_pos = n_pos;
  opt.n_neg = n_neg;
  opt.seed = seed;
  return sample_pairs(ds, opt);
}

// Auxiliary paraphrase pairs, JSON Lines:
//   {"text_a": str, "text_b": str, "label": 0|1, "source": str}
inline std::vector<PairSample> load_auxiliary_pairs(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open auxiliary pair file " + path.string());
  std::vector<PairSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(lineno, e.what());
    }
    if (!j.is_object()) throw SchemaError("line " + std::to_string(lineno) + ": auxiliary pair must be an object");
    detail::reject_unknown(j, {"text_a", "text_b", "label", "source"}, lineno);
    const auto& a = detail::require_string(j, "text_a", lineno);
    const auto& b = detail::require_string(j, "text_b", lineno);
    const auto& source = detail::require_string(j, "source", lineno);
    if (!j.contains("label") || !j["label"].is_number_integer() || (j["label"] != 0 && j["label"] != 1)) {
      throw SchemaError("line " + std::to_string(lineno) + ": label must be 0 or 1");
    }
    const auto tag = "aux:" + source + ":" + std::to_string(lineno);
    out.push_back({tag + ":a", tag + ":b", a, b, j["label"].get<int>(), PairOrigin::auxiliary});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double learning_rate = 1e-6;
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;
  std::optional<std::filesystem::path> auxiliary_pairs_path;
  std::optional<std::size_t> n_pos;
  std::optional<std::size_t> n_neg;
  bool use_refined = true;
  std::size_t dim_out = 0;  // 0: same as the backend dim

  static TrainConfig p3() { return {}; }
  static TrainConfig niv2() {
    TrainConfig c;
    c.learning_rate = 1e-5;
    return c;
  }

  void validate() const {
    if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(val_fraction > 0 && val_fraction < 1)) throw ConfigError("val_fraction must be in (0, 1)");
  }
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;  // entry 0 is the identity head before training
  std::size_t best_epoch = 0;
  double best_val_loss = 0;
  std::size_t train_pairs = 0;
  std::size_t val_pairs = 0;
  std::size_t auxiliary_pairs = 0;
};

inline nlohmann::json to_json(const TrainReport& r) {
  nlohmann::json eps = nlohmann::json::array();
  for (const auto& e : r.epochs) {
    eps.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}});
  }
  return {{"epochs", eps},
          {"best_epoch", r.best_epoch},
          {"best_val_loss", r.best_val_loss},
          {"train_pairs", r.train_pairs},
          {"val_pairs", r.val_pairs},
          {"auxiliary_pairs", r.auxiliary_pairs}};
}

struct TrainResult {
  ProjectionHead head;
  TrainReport report;
  std::vector<PairSample> train_pairs;
  std::vector<PairSample> val_pairs;
};

// Pairs with their base embeddings resolved.
struct EmbeddedPairs {
  std::vector<Eigen::VectorXd> a, b;
  std::vector<int> y;

  std::size_t size() const { return y.size(); }
};

inline EmbeddedPairs embed_pairs(const std::vector<PairSample>& pairs, const Embedder& embedder) {
  std::vector<std::string> texts;
  std::unordered_map<std::string, std::size_t> slot;
  for (const auto& p : pairs) {
    for (const auto* t : {&p.text_a, &p.text_b}) {
      if (slot.emplace(*t, texts.size()).second) texts.push_back(*t);
    }
  }
  const auto vecs = embedder.embed(texts);
  std::vector<Eigen::VectorXd> dense;
  dense.reserve(vecs.size());
  for (const auto& v : vecs) dense.push_back(to_eigen(v));
  EmbeddedPairs out;
  for (const auto& p : pairs) {
    out.a.push_back(dense[slot.at(p.text_a)]);
    out.b.push_back(dense[slot.at(p.text_b)]);
    out.y.push_back(p.y);
  }
  return out;
}

inline double mean_loss(const ProjectionHead& head, const EmbeddedPairs& pairs) {
  double s = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) s += pair_loss(head, pairs.a[i], pairs.b[i], pairs.y[i]);
  return pairs.size() ? s / double(pairs.size()) : 0.0;
}

// Minibatch gradient descent on the pair loss from an identity head. Returns
// the epoch-end checkpoint (identity included) with the lowest validation
// loss. A step larger than kMaxRelativeStep times the current weight norm, a
// non-finite loss, or a collapsed projection raises DivergenceError.
inline constexpr double kMaxRelativeStep = 100.0;

inline TrainResult train_head(const MetaDataset& ds, const Embedder& embedder, const TrainConfig& cfg) {
  cfg.validate();
  PairSamplingOptions opt;
  opt.n_pos = cfg.n_pos;
  opt.n_neg = cfg.n_neg;
  opt.seed = cfg.seed;
  opt.use_refined = cfg.use_refined;
  auto pairs = sample_pairs(ds, opt);
  std::size_t aux_count = 0;
  if (cfg.auxiliary_pairs_path) {
    auto aux = load_auxiliary_pairs(*cfg.auxiliary_pairs_path);
    aux_count = aux.size();
    pairs.insert(pairs.end(), aux.begin(), aux.end());
  }

  Rng split_rng(derive_seed(cfg.seed, "validation-split"));
  split_rng.shuffle(pairs);
  const auto n_val = std::max<std::size_t>(1, std::size_t(std::llround(cfg.val_fraction * double(pairs.size()))));
  if (pairs.size() < n_val + 1) throw InsufficientPairsError("too few pairs for a train/validation split");

  TrainResult result;
  result.val_pairs.assign(pairs.begin(), pairs.begin() + std::ptrdiff_t(n_val));
  result.train_pairs.assign(pairs.begin() + std::ptrdiff_t(n_val), pairs.end());
  const auto train = embed_pairs(result.train_pairs, embedder);
  const auto val = embed_pairs(result.val_pairs, embedder);

  ProjectionHead head = ProjectionHead::identity(embedder.backend().dim(), cfg.dim_out);
  auto& report = result.report;
  report.train_pairs = train.size();
  report.val_pairs = val.size();
  report.auxiliary_pairs = aux_count;
  report.epochs.push_back({0, mean_loss(head, train), mean_loss(head, val)});
  report.best_epoch = 0;
  report.best_val_loss = report.epochs[0].val_loss;
  result.head = head;

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Eigen::MatrixXd grad(head.weights.rows(), head.weights.cols());

  try {
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
      Rng epoch_rng(derive_seed(cfg.seed, "epoch-" + std::to_string(epoch)));
      epoch_rng.shuffle(order);
      double loss_sum = 0;
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const auto end = std::min(order.size(), start + cfg.batch_size);
        grad.setZero();
        for (std::size_t k = start; k < end; ++k) {
          const auto i = order[k];
          const double loss = accumulate_pair_grad(head, train.a[i], train.b[i], train.y[i], grad);
          if (!std::isfinite(loss)) throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch));
          loss_sum += loss;
        }
        const Eigen::MatrixXd step = (-cfg.learning_rate / double(end - start)) * grad;
        const double step_norm = step.norm();
        if (!std::isfinite(step_norm) || step_norm > kMaxRelativeStep * head.weights.norm()) {
          throw DivergenceError("update norm " + std::to_string(step_norm) + " exceeds " +
                                std::to_string(kMaxRelativeStep) + "x the weight norm at epoch " +
                                std::to_string(epoch));
        }
        head.weights += step;
        if (!head.weights.allFinite()) throw DivergenceError("non-finite weights at epoch " + std::to_string(epoch));
      }
      const double val_loss = mean_loss(head, val);
      if (!std::isfinite(val_loss)) throw DivergenceError("non-finite validation loss");
      report.epochs.push_back({epoch, loss_sum / double(order.size()), val_loss});
      if (val_loss < report.best_val_loss) {
        report.best_val_loss = val_loss;
        report.best_epoch = epoch;
        result.head = head;
      }
    }
  } catch (const ZeroNormError& e) {
    throw DivergenceError(std::string("projection collapsed: ") + e.what());
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint file: "INSTAHDW" | dim_in u32 LE | dim_out u32 LE | row-major f32 LE

inline constexpr char kHeadMagic[8] = {'I', 'N', 'S', 'T', 'A', 'H', 'D', 'W'};

inline std::string serialize_head(const ProjectionHead& head) {
  std::string out(kHeadMagic, 8);
  auto put_u32 = [&](std::uint32_t v) {
    for (int s = 0; s < 32; s += 8) out.push_back(char((v >> s) & 0xff));
  };
  put_u32(std::uint32_t(head.dim_in()));
  put_u32(std::uint32_t(head.dim_out()));
  for (Eigen::Index r = 0; r < head.weights.rows(); ++r) {
    for (Eigen::Index c = 0; c < head.weights.cols(); ++c) {
      const float f = static_cast<float>(head.weights(r, c));
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(bits);
    }
  }
  return out;
}

inline ProjectionHead deserialize_head(std::string_view bytes) {
  if (bytes.size() < 16 || bytes.substr(0, 8) != std::string_view(kHeadMagic, 8)) {
    throw SchemaError("not a projection head checkpoint");
  }
  auto get_u32 = [&](std::size_t off) {
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= std::uint32_t(static_cast<unsigned char>(bytes[off + k])) << (8 * k);
    return v;
  };
  const auto rows = get_u32(8), cols = get_u32(12);
  if (rows == 0 || cols == 0) throw SchemaError("head checkpoint with zero dimension");
  if (bytes.size() != 16 + std::size_t(rows) * cols * 4) throw SchemaError("head checkpoint size mismatch");
  ProjectionHead head{Eigen::MatrixXd(rows, cols)};
  std::size_t off = 16;
  for (Eigen::Index r = 0; r < Eigen::Index(rows); ++r) {
    for (Eigen::Index c = 0; c < Eigen::Index(cols); ++c, off += 4) {
      const std::uint32_t bits = get_u32(off);
      float f;
      std::memcpy(&f, &bits, 4);
      if (!std::isfinite(f)) throw SchemaError("head checkpoint holds a non-finite weight");
      head.weights(r, c) = f;
    }
  }
  return head;
}

inline void save_head(const ProjectionHead& head, const std::filesystem::path& path) {
  write_text_file(path, serialize_head(head));
}

inline ProjectionHead load_head(const std::filesystem::path& path) { return deserialize_head(read_file(path.string())); }

// Content id for a head, recorded in score matrices.
inline std::string head_id(const ProjectionHead& head) { return sha256_hex(serialize_head(head)).substr(0, 16); }

}  // namespace insta
