#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "insta/errors.hpp"
#include "insta/placeholders.hpp"

namespace insta {

using TaskId = std::string;
using ClusterId = std::string;
using InstructionId = std::string;

enum class Split { train, eval };
enum class InstructionRole { original, augmented, excluded };

inline std::string_view to_string(Split s) { return s == Split::train ? "train" : "eval"; }

inline std::string_view to_string(InstructionRole r) {
  switch (r) {
    case InstructionRole::original: return "original";
    case InstructionRole::augmented: return "augmented";
    case InstructionRole::excluded: return "excluded";
  }
  return "?";
}

struct Instruction {
  InstructionId id;
  TaskId task_id;
  std::string text;
  std::optional<std::string> refined_text;
  InstructionRole role = InstructionRole::original;

  // Augmented paraphrases and excluded instructions never reach a score matrix.
  bool selection_visible() const { return role == InstructionRole::original; }

  const std::string& text_for_selection(bool use_refined) const {
    return use_refined && refined_text ? *refined_text : text;
  }
};

// Worked example attached to a task (NIV2 positive/negative examples). Only
// used for prompt rendering.
struct TaskExample {
  std::string input;
  std::string output;
};

struct Instance {
  std::string id;
  std::map<std::string, std::string> fields;
  std::size_t source_offset = 0;  // byte offset of the record in its file
};

struct Task {
  TaskId id;
  ClusterId cluster_id;
  std::string name;
  Split split = Split::train;
  std::vector<Instruction> instructions;
  std::optional<std::string> instances_path;  // as written in the manifest
  std::size_t instance_count = 0;
  std::vector<TaskExample> positive_examples;
  std::vector<TaskExample> negative_examples;

  std::vector<const Instruction*> visible_instructions() const {
    std::vector<const Instruction*> out;
    for (const auto& in : instructions) {
      if (in.selection_visible()) out.push_back(&in);
    }
    return out;
  }
};

using InstanceList = std::vector<Instance>;

namespace detail {

// Lazily loaded instance files, shared across copies of a MetaDataset.
class InstanceStore {
 public:
  std::shared_ptr<const InstanceList> get(const std::string& path) {
    {
      std::lock_guard lock(mu_);
      if (auto it = files_.find(path); it != files_.end()) return it->second;
    }
    auto loaded = std::make_shared<const InstanceList>(read(path));
    std::lock_guard lock(mu_);
    return files_.emplace(path, std::move(loaded)).first->second;
  }

  bool checked(const TaskId& id) {
    std::lock_guard lock(mu_);
    return checked_.count(id) > 0;
  }

  void mark_checked(const TaskId& id) {
    std::lock_guard lock(mu_);
    checked_.insert(id);
  }

  static InstanceList read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingInstancesError("cannot open instance file " + path);
    InstanceList out;
    std::string line;
    std::size_t offset = 0;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::size_t here = offset;
      offset += line.size() + 1;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(lineno, path + ": " + e.what());
      }
      if (!j.is_object() || !j.contains("id") || !j["id"].is_string() || !j.contains("fields") ||
          !j["fields"].is_object()) {
        throw SchemaError(path + ":" + std::to_string(lineno) + ": instance needs string 'id' and object 'fields'");
      }
      Instance inst;
      inst.id = j["id"].get<std::string>();
      inst.source_offset = here;
      for (const auto& [k, v] : j["fields"].items()) {
        if (!v.is_string()) {
          throw SchemaError(path + ":" + std::to_string(lineno) + ": field '" + k + "' is not a string");
        }
        inst.fields.emplace(k, v.get<std::string>());
      }
      out.push_back(std::move(inst));
    }
    return out;
  }

 private:
  std::mutex mu_;
  std::map<std::string, std::shared_ptr<const InstanceList>> files_;
  std::set<TaskId> checked_;
};

}  // namespace detail

// The meta-dataset: clusters of tasks, each with instructions and instances.
// Immutable once built; copies share the instance store.
class MetaDataset {
 public:
  MetaDataset() : store_(std::make_shared<detail::InstanceStore>()) {}

  // Validates every structural invariant. base_dir resolves relative
  // instance paths.
  static MetaDataset build(std::string name, std::vector<Task> tasks, std::filesystem::path base_dir = {}) {
    MetaDataset ds;
    ds.name_ = std::move(name);
    ds.base_dir_ = std::move(base_dir);
    ds.tasks_ = std::move(tasks);
    for (std::size_t t = 0; t < ds.tasks_.size(); ++t) {
      auto& task = ds.tasks_[t];
      if (task.id.empty()) throw SchemaError("empty task_id");
      if (task.cluster_id.empty()) throw SchemaError("task " + task.id + ": empty cluster_id");
      if (!ds.task_index_.emplace(task.id, t).second) throw DuplicateIdError("duplicate task id " + task.id);
      ds.clusters_.insert(task.cluster_id);
      (task.split == Split::train ? ds.train_clusters_ : ds.eval_clusters_).insert(task.cluster_id);
      for (std::size_t i = 0; i < task.instructions.size(); ++i) {
        auto& in = task.instructions[i];
        in.task_id = task.id;
        if (in.id.empty()) throw SchemaError("task " + task.id + ": empty instruction id");
        if (!ds.instruction_index_.emplace(in.id, std::make_pair(t, i)).second) {
          throw DuplicateIdError("duplicate instruction id " + in.id);
        }
      }
    }
    for (const auto& c : ds.train_clusters_) {
      if (ds.eval_clusters_.count(c)) {
        throw SplitError("cluster '" + c + "' holds both train and eval tasks");
      }
    }
    return ds;
  }

  const std::string& name() const { return name_; }
  const std::vector<Task>& tasks() const { return tasks_; }
  const std::set<ClusterId>& clusters() const { return clusters_; }
  const std::set<ClusterId>& train_clusters() const { return train_clusters_; }
  const std::set<ClusterId>& eval_clusters() const { return eval_clusters_; }
  const std::filesystem::path& base_dir() const { return base_dir_; }

  const Task* find_task(std::string_view id) const {
    auto it = task_index_.find(std::string(id));
    return it == task_index_.end() ? nullptr : &tasks_[it->second];
  }

  const Task& task(std::string_view id) const {
    if (const Task* t = find_task(id)) return *t;
    throw UnknownTaskError("unknown task " + std::string(id));
  }

  const Instruction* find_instruction(std::string_view id) const {
    auto it = instruction_index_.find(std::string(id));
    if (it == instruction_index_.end()) return nullptr;
    return &tasks_[it->second.first].instructions[it->second.second];
  }

  std::optional<std::filesystem::path> instances_file(const Task& task) const {
    if (!task.instances_path) return std::nullopt;
    std::filesystem::path p(*task.instances_path);
    return p.is_relative() ? base_dir_ / p : p;
  }

  // Loads (once) and validates the instances of a task: the record count must
  // match instance_count and every placeholder named by the task's raw
  // instructions must be a field of every instance.
  std::shared_ptr<const InstanceList> instances(const Task& task) const {
    auto file = instances_file(task);
    if (!file) throw MissingInstancesError("task " + task.id + " has no instances");
    auto list = store_->get(file->string());
    if (!store_->checked(task.id)) {
      if (list->size() != task.instance_count) {
        throw SchemaError("task " + task.id + ": instance_count " + std::to_string(task.instance_count) +
                          " but " + file->string() + " holds " + std::to_string(list->size()));
      }
      std::set<std::string> needed;
      for (const auto& in : task.instructions) {
        if (in.role == InstructionRole::excluded) continue;
        for (const auto& tok : parse_placeholders(in.text)) needed.insert(tok.name);
      }
      for (const auto& inst : *list) {
        for (const auto& f : needed) {
          if (!inst.fields.count(f)) {
            throw SchemaError("task " + task.id + ": instance " + inst.id + " lacks field '" + f + "'");
          }
        }
      }
      store_->mark_checked(task.id);
    }
    return list;
  }

 private:
  std::string name_;
  std::filesystem::path base_dir_;
  std::vector<Task> tasks_;
  std::unordered_map<TaskId, std::size_t> task_index_;
  std::unordered_map<InstructionId, std::pair<std::size_t, std::size_t>> instruction_index_;
  std::set<ClusterId> clusters_, train_clusters_, eval_clusters_;
  std::shared_ptr<detail::InstanceStore> store_;
};

// ---------------------------------------------------------------------------
// Manifest I/O (JSON Lines, one task per line)

enum class ManifestSchema { v1 };

namespace detail {

inline const std::string& require_string(const nlohmann::json& j, const char* key, std::size_t line) {
  if (!j.contains(key)) throw SchemaError("line " + std::to_string(line) + ": missing required field '" + key + "'");
  if (!j[key].is_string()) throw SchemaError("line " + std::to_string(line) + ": field '" + key + "' must be a string");
  return j[key].get_ref<const std::string&>();
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<std::string_view> known, std::size_t line) {
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) {
      throw SchemaError("line " + std::to_string(line) + ": unknown field '" + k + "'");
    }
  }
}

inline std::vector<TaskExample> parse_examples(const nlohmann::json& arr, std::size_t line) {
  if (!arr.is_array()) throw SchemaError("line " + std::to_string(line) + ": examples must be an array");
  std::vector<TaskExample> out;
  for (const auto& e : arr) {
    if (!e.is_object()) throw SchemaError("line " + std::to_string(line) + ": example must be an object");
    reject_unknown(e, {"input", "output"}, line);
    out.push_back({require_string(e, "input", line), require_string(e, "output", line)});
  }
  return out;
}

inline Task task_from_json(const nlohmann::json& j, std::size_t line) {
  if (!j.is_object()) throw SchemaError("line " + std::to_string(line) + ": task record must be an object");
  reject_unknown(j,
                 {"task_id", "cluster_id", "split", "name", "instructions", "instances_path", "instance_count",
                  "positive_examples", "negative_examples"},
                 line);
  Task t;
  t.id = require_string(j, "task_id", line);
  t.cluster_id = require_string(j, "cluster_id", line);
  t.name = require_string(j, "name", line);
  const auto& split = require_string(j, "split", line);
  if (split == "train") {
    t.split = Split::train;
  } else if (split == "eval") {
    t.split = Split::eval;
  } else {
    throw SchemaError("line " + std::to_string(line) + ": split must be train|eval");
  }
  if (!j.contains("instructions") || !j["instructions"].is_array()) {
    throw SchemaError("line " + std::to_string(line) + ": missing required array 'instructions'");
  }
  for (const auto& ij : j["instructions"]) {
    if (!ij.is_object()) throw SchemaError("line " + std::to_string(line) + ": instruction must be an object");
    reject_unknown(ij, {"id", "text", "role", "refined_text"}, line);
    Instruction in;
    in.id = require_string(ij, "id", line);
    in.text = require_string(ij, "text", line);
    in.task_id = t.id;
    const auto& role = require_string(ij, "role", line);
    if (role == "original") {
      in.role = InstructionRole::original;
    } else if (role == "augmented") {
      in.role = InstructionRole::augmented;
    } else if (role == "excluded") {
      in.role = InstructionRole::excluded;
    } else {
      throw SchemaError("line " + std::to_string(line) + ": unknown instruction role '" + role + "'");
    }
    if (ij.contains("refined_text")) in.refined_text = require_string(ij, "refined_text", line);
    t.instructions.push_back(std::move(in));
  }
  if (!j.contains("instances_path")) {
    throw SchemaError("line " + std::to_string(line) + ": missing required field 'instances_path'");
  }
  if (!j["instances_path"].is_null()) t.instances_path = require_string(j, "instances_path", line);
  if (!j.contains("instance_count") || !j["instance_count"].is_number_unsigned()) {
    throw SchemaError("line " + std::to_string(line) + ": 'instance_count' must be a non-negative integer");
  }
  t.instance_count = j["instance_count"].get<std::size_t>();
  if (j.contains("positive_examples")) t.positive_examples = parse_examples(j["positive_examples"], line);
  if (j.contains("negative_examples")) t.negative_examples = parse_examples(j["negative_examples"], line);
  return t;
}

inline nlohmann::json examples_to_json(const std::vector<TaskExample>& ex) {
  auto arr = nlohmann::json::array();
  for (const auto& e : ex) arr.push_back({{"input", e.input}, {"output", e.output}});
  return arr;
}

}  // namespace detail

// nlohmann::json objects keep keys sorted, which gives the canonical order.
inline nlohmann::json to_json(const Task& t) {
  nlohmann::json j;
  j["task_id"] = t.id;
  j["cluster_id"] = t.cluster_id;
  j["split"] = to_string(t.split);
  j["name"] = t.name;
  j["instructions"] = nlohmann::json::array();
  for (const auto& in : t.instructions) {
    nlohmann::json ij{{"id", in.id}, {"text", in.text}, {"role", to_string(in.role)}};
    if (in.refined_text) ij["refined_text"] = *in.refined_text;
    j["instructions"].push_back(std::move(ij));
  }
  j["instances_path"] = t.instances_path ? nlohmann::json(*t.instances_path) : nlohmann::json(nullptr);
  j["instance_count"] = t.instance_count;
  if (!t.positive_examples.empty()) j["positive_examples"] = detail::examples_to_json(t.positive_examples);
  if (!t.negative_examples.empty()) j["negative_examples"] = detail::examples_to_json(t.negative_examples);
  return j;
}

inline MetaDataset parse_manifest(std::string_view text, std::string name = {}, std::filesystem::path base_dir = {},
                                  ManifestSchema = ManifestSchema::v1) {
  std::vector<Task> tasks;
  std::size_t lineno = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(lineno, e.what());
    }
    tasks.push_back(detail::task_from_json(j, lineno));
  }
  return MetaDataset::build(std::move(name), std::move(tasks), std::move(base_dir));
}

inline MetaDataset load_manifest(const std::filesystem::path& path, ManifestSchema schema = ManifestSchema::v1) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_manifest(buf.str(), path.stem().string(), path.parent_path(), schema);
}

// Canonical form: one compact object per line, sorted keys, LF endings.
inline std::string serialize_manifest(const MetaDataset& ds) {
  std::string out;
  for (const auto& t : ds.tasks()) {
    out += to_json(t).dump();
    out += '\n';
  }
  return out;
}

inline void write_text_file(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline void write_manifest(const MetaDataset& ds, const std::filesystem::path& path) {
  write_text_file(path, serialize_manifest(ds));
}

// ---------------------------------------------------------------------------
// Statistics and held-out checks

struct StatsReport {
  std::size_t train_tasks = 0;
  std::size_t eval_tasks = 0;
  std::size_t train_clusters = 0;
  std::size_t eval_clusters = 0;
  double mean_instructions = 0.0;            // role=original, over all tasks
  double mean_augmented_instructions = 0.0;  // the "(+1)" of paraphrase-augmented corpora
  std::size_t max_instances = 0;

  friend bool operator==(const StatsReport&, const StatsReport&) = default;
};

inline StatsReport corpus_stats(const MetaDataset& ds) {
  StatsReport r;
  std::size_t originals = 0, augmented = 0;
  for (const auto& t : ds.tasks()) {
    (t.split == Split::train ? r.train_tasks : r.eval_tasks)++;
    for (const auto& in : t.instructions) {
      if (in.role == InstructionRole::original) ++originals;
      if (in.role == InstructionRole::augmented) ++augmented;
    }
    r.max_instances = std::max(r.max_instances, t.instance_count);
  }
  r.train_clusters = ds.train_clusters().size();
  r.eval_clusters = ds.eval_clusters().size();
  const auto n = ds.tasks().size();
  if (n > 0) {
    r.mean_instructions = double(originals) / double(n);
    r.mean_augmented_instructions = double(augmented) / double(n);
  }
  return r;
}

inline nlohmann::json to_json(const StatsReport& r) {
  return {{"train_tasks", r.train_tasks},
          {"eval_tasks", r.eval_tasks},
          {"train_clusters", r.train_clusters},
          {"eval_clusters", r.eval_clusters},
          {"mean_instructions_per_task", r.mean_instructions},
          {"mean_augmented_instructions_per_task", r.mean_augmented_instructions},
          {"max_instances_per_task", r.max_instances}};
}

// Train tasks sharing the target's cluster. Empty means the held-out
// discipline holds for this target.
inline std::vector<TaskId> validate_heldout(const MetaDataset& ds, std::string_view target) {
  const Task& tgt = ds.task(target);
  std::vector<TaskId> violations;
  for (const auto& t : ds.tasks()) {
    if (t.id != tgt.id && t.split == Split::train && t.cluster_id == tgt.cluster_id) violations.push_back(t.id);
  }
  return violations;
}

// Merge paraphrases ({"task_id": str, "text": str} per line) into the corpus
// as augmented instructions with ids "<task_id>#aug<n>".
inline MetaDataset add_paraphrases(const MetaDataset& ds, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open paraphrase file " + path.string());
  std::vector<Task> tasks = ds.tasks();
  std::map<TaskId, std::size_t> index;
  for (std::size_t i = 0; i < tasks.size(); ++i) index[tasks[i].id] = i;
  std::map<TaskId, std::size_t> counter;
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
    if (!j.is_object()) throw SchemaError("line " + std::to_string(lineno) + ": paraphrase must be an object");
    detail::reject_unknown(j, {"task_id", "text"}, lineno);
    const auto& tid = detail::require_string(j, "task_id", lineno);
    auto it = index.find(tid);
    if (it == index.end()) throw UnknownTaskError("paraphrase for unknown task " + tid);
    auto& task = tasks[it->second];
    Instruction aug;
    aug.id = tid + "#aug" + std::to_string(counter[tid]++);
    aug.task_id = tid;
    aug.text = detail::require_string(j, "text", lineno);
    aug.role = InstructionRole::augmented;
    task.instructions.push_back(std::move(aug));
  }
  return MetaDataset::build(ds.name(), std::move(tasks), ds.base_dir());
}

}  // namespace insta
