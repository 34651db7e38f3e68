#pragma once

#include <algorithm>
#include <limits>
#include <string>
#include <vector>

#include "insta/align.hpp"
#include "insta/select.hpp"

namespace oracles {

using namespace insta;

// Max per task, then sort by score descending and TaskId ascending. The
// achieving pair is the first maximal cell scanning rows, then columns.
inline std::vector<RankedTask> brute_force_top_k(const ScoreMatrix& sm, std::size_t k) {
  std::vector<TaskId> tasks;
  for (const auto& t : sm.col_tasks)
    if (std::find(tasks.begin(), tasks.end(), t) == tasks.end()) tasks.push_back(t);
  std::vector<RankedTask> all;
  for (const auto& t : tasks) {
    RankedTask best{t, -std::numeric_limits<double>::infinity(), "", ""};
    for (std::size_t i = 0; i < sm.rows.size(); ++i) {
      for (std::size_t j = 0; j < sm.cols.size(); ++j) {
        if (sm.col_tasks[j] != t) continue;
        if (sm.at(i, j) > best.score) best = {t, sm.at(i, j), sm.rows[i], sm.cols[j]};
      }
    }
    all.push_back(best);
  }
  std::stable_sort(all.begin(), all.end(), [](const RankedTask& a, const RankedTask& b) {
    return a.score > b.score || (a.score == b.score && a.task < b.task);
  });
  all.resize(std::min(k, all.size()));
  return all;
}

inline bool same_ranking(const std::vector<RankedTask>& a, const std::vector<RankedTask>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].task != b[i].task || a[i].score != b[i].score || a[i].via_target != b[i].via_target ||
        a[i].via_train != b[i].via_train)
      return false;
  }
  return true;
}

// Central-difference gradient of pair_loss with respect to every weight.
inline Eigen::MatrixXd numeric_grad(const ProjectionHead& head, const Eigen::VectorXd& ea, const Eigen::VectorXd& eb,
                                    int y, double eps) {
  Eigen::MatrixXd g(head.weights.rows(), head.weights.cols());
  for (Eigen::Index r = 0; r < g.rows(); ++r) {
    for (Eigen::Index c = 0; c < g.cols(); ++c) {
      ProjectionHead plus = head, minus = head;
      plus.weights(r, c) += eps;
      minus.weights(r, c) -= eps;
      g(r, c) = (pair_loss(plus, ea, eb, y) - pair_loss(minus, ea, eb, y)) / (2 * eps);
    }
  }
  return g;
}

// max |a - n| / max(max |a|, max |n|)
inline double relative_error(const Eigen::MatrixXd& analytic, const Eigen::MatrixXd& numeric) {
  const double scale = std::max(analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff());
  const double diff = (analytic - numeric).cwiseAbs().maxCoeff();
  return scale == 0 ? diff : diff / scale;
}

// Worst relative error over random heads and embeddings drawn uniformly
// from [-1, 1].
inline double worst_gradient_error(std::uint64_t seed, int trials, Eigen::Index dim_in, Eigen::Index dim_out,
                                   double eps) {
  Rng rng(seed);
  auto uniform = [&] { return 2 * rng.uniform() - 1; };
  double worst = 0;
  for (int t = 0; t < trials; ++t) {
    ProjectionHead h{Eigen::MatrixXd(dim_in, dim_out)};
    for (Eigen::Index r = 0; r < dim_in; ++r)
      for (Eigen::Index c = 0; c < dim_out; ++c) h.weights(r, c) = uniform();
    Eigen::VectorXd ea(dim_in), eb(dim_in);
    for (Eigen::Index i = 0; i < dim_in; ++i) {
      ea[i] = uniform();
      eb[i] = uniform();
    }
    const int y = int(rng.below(2));
    worst = std::max(worst, relative_error(pair_grad(h, ea, eb, y), numeric_grad(h, ea, eb, y, eps)));
  }
  return worst;
}

// Pairs that break the sampling policy: a positive across tasks, a negative
// inside one cluster, a non-train or excluded instruction, or a self pair.
inline std::vector<std::string> pair_policy_violations(const MetaDataset& ds, const std::vector<PairSample>& pairs) {
  std::vector<std::string> bad;
  for (const auto& p : pairs) {
    const auto* a = ds.find_instruction(p.a);
    const auto* b = ds.find_instruction(p.b);
    if (!a || !b) {
      bad.push_back(p.a + "|" + p.b + ": unknown instruction");
      continue;
    }
    const auto& ta = ds.task(a->task_id);
    const auto& tb = ds.task(b->task_id);
    const bool ok = a->id != b->id && a->role != InstructionRole::excluded && b->role != InstructionRole::excluded &&
                    ta.split == Split::train && tb.split == Split::train &&
                    (p.y == 1 ? ta.id == tb.id : ta.cluster_id != tb.cluster_id);
    if (!ok) bad.push_back(p.a + "|" + p.b);
  }
  return bad;
}

}  // namespace oracles
