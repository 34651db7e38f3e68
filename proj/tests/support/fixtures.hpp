#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <unistd.h>
#include <vector>

#include <json.hpp>

#include "insta/corpus.hpp"
#include "insta/rng.hpp"

namespace fixtures {

namespace fs = std::filesystem;
using namespace insta;

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("insta-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline void write_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << text;
}

inline std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Pseudo-word of 5..8 lowercase letters.
inline std::string word(Rng& rng) {
  std::string w;
  const auto len = 5 + rng.below(4);
  for (std::size_t i = 0; i < len; ++i) w += char('a' + rng.below(26));
  return w;
}

inline std::vector<std::string> words(Rng& rng, std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(word(rng));
  return out;
}

inline std::string sentence(Rng& rng, const std::vector<std::pair<const std::vector<std::string>*, std::size_t>>& parts) {
  std::vector<std::string> picked;
  for (const auto& [vocab, n] : parts) {
    for (std::size_t i = 0; i < n; ++i) picked.push_back((*vocab)[rng.below(vocab->size())]);
  }
  rng.shuffle(picked);
  std::string s;
  for (const auto& w : picked) s += (s.empty() ? "" : " ") + w;
  return s;
}

inline Instruction instr(const std::string& task, const std::string& id, const std::string& text,
                         InstructionRole role = InstructionRole::original) {
  return {id, task, text, std::nullopt, role};
}

inline Task task(const std::string& id, const std::string& cluster, Split split, std::vector<std::string> texts) {
  Task t;
  t.id = id;
  t.cluster_id = cluster;
  t.name = id;
  t.split = split;
  for (std::size_t i = 0; i < texts.size(); ++i) t.instructions.push_back(instr(id, id + "/i" + std::to_string(i), texts[i]));
  return t;
}

// Instance file with ids "<prefix><n>" and fields input/output.
inline void write_instances(const fs::path& p, std::size_t n, const std::string& prefix = "x") {
  std::string text;
  text.reserve(n * 64);
  for (std::size_t i = 0; i < n; ++i) {
    nlohmann::json j{{"id", prefix + std::to_string(i)},
                     {"fields", {{"input", "input number " + std::to_string(i)}, {"output", "out" + std::to_string(i)}}}};
    text += j.dump();
    text += '\n';
  }
  write_file(p, text);
}

struct ShapeSpec {
  std::size_t train_tasks, train_clusters, eval_tasks, eval_clusters;
  std::size_t instances;  // shared instance file size, 0 for none
  bool augmented;         // one paraphrase per task
};

// Corpus with the given split shape. Train task t lives in cluster
// "train-c<t % clusters>", eval task e in "eval-c<e % clusters>". Original
// instruction counts cycle through instr_counts. All tasks share one
// instance file when instances > 0.
inline MetaDataset shaped(const ShapeSpec& spec, const std::vector<std::size_t>& instr_counts, const fs::path& dir,
                          std::uint64_t seed = 1) {
  Rng rng(seed);
  const auto filler = words(rng, 40);
  std::map<std::string, std::vector<std::string>> cluster_vocab;
  std::vector<Task> tasks;
  std::optional<std::string> inst_path;
  if (spec.instances > 0) {
    write_instances(dir / "instances.jsonl", spec.instances);
    inst_path = "instances.jsonl";
  }
  std::size_t counter = 0;
  auto add = [&](const std::string& id, const std::string& cluster, Split split) {
    auto& cv = cluster_vocab[cluster];
    if (cv.empty()) cv = words(rng, 12);
    const auto tv = words(rng, 6);
    std::vector<std::string> texts;
    const auto n = instr_counts[counter++ % instr_counts.size()];
    for (std::size_t i = 0; i < n; ++i) texts.push_back(sentence(rng, {{&tv, 3}, {&cv, 2}, {&filler, 5}}));
    Task t = task(id, cluster, split, texts);
    if (spec.augmented) {
      t.instructions.push_back(instr(id, id + "#aug0", sentence(rng, {{&tv, 3}, {&cv, 2}, {&filler, 5}}),
                                     InstructionRole::augmented));
    }
    t.instances_path = inst_path;
    t.instance_count = spec.instances;
    t.positive_examples = {{"pos in 1", "pos out 1"}, {"pos in 2", "pos out 2"}};
    tasks.push_back(std::move(t));
  };
  char buf[32];
  for (std::size_t t = 0; t < spec.train_tasks; ++t) {
    std::snprintf(buf, sizeof buf, "train%04zu", t);
    add(buf, "train-c" + std::to_string(t % spec.train_clusters), Split::train);
  }
  for (std::size_t e = 0; e < spec.eval_tasks; ++e) {
    std::snprintf(buf, sizeof buf, "eval%04zu", e);
    add(buf, "eval-c" + std::to_string(e % spec.eval_clusters), Split::eval);
  }
  return MetaDataset::build("shaped", std::move(tasks), dir);
}

// 35 train tasks in 8 clusters, 11 eval tasks in 4 clusters.
inline MetaDataset p3_shaped(const fs::path& dir, std::size_t instances = 0) {
  return shaped({35, 8, 11, 4, instances, false}, {8, 10, 6, 12, 9, 7}, dir);
}

// 756 train tasks in 63 clusters, 33 eval tasks in 12 clusters, each task one
// definition plus one paraphrase.
inline MetaDataset niv2_shaped(const fs::path& dir, std::size_t instances = 0) {
  return shaped({756, 63, 33, 12, instances, true}, {1}, dir, 2);
}

// Four clusters of three lexically distinct tasks each. The vocabulary is
// fixed by vocab_seed; instruction_seed only changes which words each
// instruction draws, so two seeds give disjoint instructions over the same
// tasks.
inline MetaDataset four_clusters(std::uint64_t instruction_seed, std::size_t per_task = 4,
                                 std::uint64_t vocab_seed = 7) {
  Rng vr(vocab_seed);
  const auto filler = words(vr, 30);
  std::vector<std::vector<std::string>> cluster_vocab, task_vocab;
  for (std::size_t c = 0; c < 4; ++c) cluster_vocab.push_back(words(vr, 8));
  for (std::size_t t = 0; t < 12; ++t) task_vocab.push_back(words(vr, 8));
  Rng rng(instruction_seed);
  std::vector<Task> tasks;
  for (std::size_t t = 0; t < 12; ++t) {
    const auto c = t / 3;
    std::vector<std::string> texts;
    for (std::size_t i = 0; i < per_task; ++i) {
      texts.push_back(sentence(rng, {{&task_vocab[t], 3}, {&cluster_vocab[c], 2}, {&filler, 7}}));
    }
    tasks.push_back(task("t" + std::to_string(t), "c" + std::to_string(c), Split::train, texts));
    for (auto& in : tasks.back().instructions) in.id += "@s" + std::to_string(instruction_seed);
  }
  return MetaDataset::build("four-clusters", std::move(tasks));
}

}  // namespace fixtures
