#pragma once

// Synthetic multi-task token-classification datasets. Tasks are grouped into
// families: tasks in one family draw their class-identifying motifs from a
// shared token pool (placed at a family-specific position) while families use
// disjoint pools. Within a family the class->motif assignment is permuted per
// task, so mixture training has to condition on the task marker token that
// opens every sequence. Everything is a pure function of (specs, sizes, seed).

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mept/common.hpp"
#include "mept/rng.hpp"

namespace mept {

constexpr int kPadToken = 0;

struct TaskSpec {
  int task_id = 0;
  int family_id = 0;
  int n_classes = 2;
  int motif_pos = 0;                          // index within the sequence
  std::vector<std::vector<int>> class_motifs; // k-gram per class, from the family pool
  std::vector<int> motif_pool;                // family pool (shared within the family)
  uint64_t pattern_seed = 0;                  // drives per-class background draws

  int motif_len() const {
    return class_motifs.empty() ? 0 : static_cast<int>(class_motifs[0].size());
  }
};

struct Example {
  std::vector<int> tokens;
  int label = 0;
  int task = 0;
};

struct TaskData {
  TaskSpec spec;
  std::vector<Example> train;
  std::vector<Example> dev;
};

struct Dataset {
  int vocab_size = 0;
  int seq_len = 0;
  std::vector<TaskData> tasks;

  int max_classes() const {
    int c = 0;
    for (const auto& t : tasks) c = std::max(c, t.spec.n_classes);
    return c;
  }
};

// Mixture scheme: shuffled union of the train splits; dev stays per task.
struct MixtureDataset {
  int vocab_size = 0;
  int seq_len = 0;
  std::vector<Example> train;
  std::vector<TaskSpec> specs;
  std::vector<std::vector<Example>> dev;  // aligned with specs
};

// ---------------------------------------------------------------------------
// Spec construction

struct FamilyRecipe {
  int n_tasks = 2;
  int n_classes = 2;
};

struct GenRecipe {
  int vocab_size = 256;
  int seq_len = 32;
  int n_train = 512;
  int n_dev = 128;
  int motif_len = 3;
  std::vector<FamilyRecipe> families = {{2, 2}, {2, 2}, {2, 3}};
  uint64_t seed = 7;
};

// Vocabulary layout: [pad][task markers][family pools][background]. Family
// pools are disjoint; the background range never overlaps any pool, so a
// motif can only occur where the generator wrote it.
inline std::vector<TaskSpec> build_task_specs(const GenRecipe& recipe) {
  int n_tasks = 0;
  for (const auto& f : recipe.families) {
    if (f.n_tasks < 1 || f.n_classes < 2)
      throw ValueError("build_task_specs: each family needs >= 1 task and >= 2 classes");
    n_tasks += f.n_tasks;
  }
  if (recipe.motif_len < 1) throw ValueError("build_task_specs: motif_len must be >= 1");

  int next_token = 1 + n_tasks;  // after pad + task markers
  std::vector<TaskSpec> specs;
  Rng seeder(recipe.seed);
  int task_id = 0;
  for (size_t fam = 0; fam < recipe.families.size(); ++fam) {
    const FamilyRecipe& f = recipe.families[fam];
    int pool_size = f.n_classes * recipe.motif_len;
    std::vector<int> pool(static_cast<size_t>(pool_size));
    for (int i = 0; i < pool_size; ++i) pool[static_cast<size_t>(i)] = next_token + i;
    next_token += pool_size;
    int motif_pos = 1 + static_cast<int>(fam % 4) + 1;  // past the task marker

    for (int t = 0; t < f.n_tasks; ++t) {
      TaskSpec s;
      s.task_id = task_id++;
      s.family_id = static_cast<int>(fam);
      s.n_classes = f.n_classes;
      s.motif_pos = motif_pos;
      s.motif_pool = pool;
      // Per-task permutation of the pool, cut into one motif per class. Every
      // task covers the full pool, so motif-token sets coincide within a
      // family and are disjoint across families.
      std::vector<int> perm = pool;
      Rng perm_rng = seeder.derive("motifs", s.task_id);
      perm_rng.shuffle(perm);
      for (int c = 0; c < f.n_classes; ++c)
        s.class_motifs.emplace_back(perm.begin() + c * recipe.motif_len,
                                    perm.begin() + (c + 1) * recipe.motif_len);
      s.pattern_seed = seeder.derive("pattern", s.task_id).uniform_int(1 << 30);
      specs.push_back(std::move(s));
    }
  }
  if (next_token >= recipe.vocab_size)
    throw ValueError("build_task_specs: vocab of " + std::to_string(recipe.vocab_size) +
                     " too small for motifs (need > " + std::to_string(next_token) + ")");
  return specs;
}

// ---------------------------------------------------------------------------
// Generation

namespace detail {

inline Example make_example(const TaskSpec& spec, int label, int seq_len, int background_lo,
                            int background_hi, Rng& rng) {
  Example e;
  e.task = spec.task_id;
  e.label = label;
  e.tokens.resize(static_cast<size_t>(seq_len));
  e.tokens[0] = 1 + spec.task_id;  // task marker
  int span = background_hi - background_lo;
  for (int i = 1; i < seq_len; ++i)
    e.tokens[static_cast<size_t>(i)] = background_lo + rng.uniform_int(span);
  const auto& motif = spec.class_motifs[static_cast<size_t>(label)];
  for (size_t i = 0; i < motif.size(); ++i)
    e.tokens[static_cast<size_t>(spec.motif_pos) + i] = motif[i];
  return e;
}

inline std::vector<Example> make_split(const TaskSpec& spec, int count, int seq_len,
                                       int background_lo, int background_hi, Rng rng) {
  std::vector<Example> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i)
    out.push_back(make_example(spec, i % spec.n_classes, seq_len, background_lo, background_hi, rng));
  rng.shuffle(out);
  return out;
}

}  // namespace detail

// Deterministic in (specs, counts, seq_len, seed). Dev size defaults to a
// quarter of the train split.
inline Dataset generate(const std::vector<TaskSpec>& specs, int n_per_task, int seq_len,
                        uint64_t seed, int vocab_size = 256, int n_dev = -1) {
  if (specs.empty()) throw ValueError("generate: no task specs");
  if (n_dev < 0) n_dev = std::max(1, n_per_task / 4);
  int background_lo = 0;
  for (const TaskSpec& s : specs) {
    if (seq_len < s.motif_pos + s.motif_len())
      throw ValueError("generate: seq_len " + std::to_string(seq_len) +
                       " too short for motif at position " + std::to_string(s.motif_pos));
    for (int tok : s.motif_pool) background_lo = std::max(background_lo, tok + 1);
    background_lo = std::max(background_lo, 1 + s.task_id + 1);
  }
  if (background_lo >= vocab_size)
    throw ValueError("generate: vocab of " + std::to_string(vocab_size) +
                     " leaves no background range");

  Dataset ds;
  ds.vocab_size = vocab_size;
  ds.seq_len = seq_len;
  Rng root(seed);
  for (const TaskSpec& spec : specs) {
    TaskData td;
    td.spec = spec;
    uint64_t mix = spec.pattern_seed;
    td.train = detail::make_split(spec, n_per_task, seq_len, background_lo, vocab_size,
                                  root.derive("train", spec.task_id * 1315423911LL + static_cast<int64_t>(mix)));
    td.dev = detail::make_split(spec, n_dev, seq_len, background_lo, vocab_size,
                                root.derive("dev", spec.task_id * 2654435761LL + static_cast<int64_t>(mix)));
    ds.tasks.push_back(std::move(td));
  }
  return ds;
}

inline MixtureDataset make_mixture(const Dataset& ds, uint64_t seed = 0x6d657074ULL) {
  MixtureDataset mix;
  mix.vocab_size = ds.vocab_size;
  mix.seq_len = ds.seq_len;
  for (const TaskData& t : ds.tasks) {
    mix.specs.push_back(t.spec);
    mix.dev.push_back(t.dev);
    mix.train.insert(mix.train.end(), t.train.begin(), t.train.end());
  }
  Rng rng(seed);
  rng.shuffle(mix.train);
  return mix;
}

// ---------------------------------------------------------------------------
// Batching

struct Batch {
  int seq_len = 0;
  std::vector<int> token_ids;   // [batch * seq_len], row-major
  std::vector<uint8_t> pad;     // 1 where padding
  std::vector<int> labels;
  std::vector<int> task_ids;

  int size() const { return static_cast<int>(labels.size()); }
};

inline Batch make_batch(const std::vector<Example>& examples, size_t begin, size_t end,
                        int seq_len) {
  Batch b;
  b.seq_len = seq_len;
  for (size_t i = begin; i < end && i < examples.size(); ++i) {
    const Example& e = examples[i];
    if (static_cast<int>(e.tokens.size()) > seq_len)
      throw ValueError("make_batch: example of length " + std::to_string(e.tokens.size()) +
                       " exceeds seq_len " + std::to_string(seq_len) + "; pre-truncate inputs");
    for (int s = 0; s < seq_len; ++s) {
      bool is_pad = s >= static_cast<int>(e.tokens.size());
      b.token_ids.push_back(is_pad ? kPadToken : e.tokens[static_cast<size_t>(s)]);
      b.pad.push_back(is_pad ? 1 : 0);
    }
    b.labels.push_back(e.label);
    b.task_ids.push_back(e.task);
  }
  return b;
}

inline Batch make_batch(const std::vector<Example>& examples, int seq_len) {
  return make_batch(examples, 0, examples.size(), seq_len);
}

// ---------------------------------------------------------------------------
// Hashing and JSONL I/O

inline uint64_t dataset_hash(const std::vector<Example>& examples) {
  Fnv1a64 h;
  for (const Example& e : examples) {
    h.update_i64(e.task);
    h.update_i64(e.label);
    for (int t : e.tokens) h.update_i64(t);
  }
  return h.digest();
}

inline uint64_t dataset_hash(const Dataset& ds) {
  Fnv1a64 h;
  h.update_i64(ds.vocab_size);
  h.update_i64(ds.seq_len);
  for (const TaskData& t : ds.tasks) {
    h.update_i64(dataset_hash(t.train));
    h.update_i64(dataset_hash(t.dev));
  }
  return h.digest();
}

// One file per task: train lines first, then dev; the split boundary lives in
// the dataset manifest. Line schema: {"tokens":[...],"label":k,"task":t}.
inline void write_task_jsonl(const std::string& path, const TaskData& td) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  auto dump = [&out](const Example& e) {
    nlohmann::json j;
    j["tokens"] = e.tokens;
    j["label"] = e.label;
    j["task"] = e.task;
    out << j.dump() << "\n";
  };
  for (const Example& e : td.train) dump(e);
  for (const Example& e : td.dev) dump(e);
}

inline std::vector<Example> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<Example> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.contains("tokens") || !j.contains("label") || !j.contains("task"))
      throw IoError(path + ":" + std::to_string(lineno) + ": missing tokens/label/task field");
    Example e;
    e.tokens = j["tokens"].get<std::vector<int>>();
    e.label = j["label"].get<int>();
    e.task = j["task"].get<int>();
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace mept
