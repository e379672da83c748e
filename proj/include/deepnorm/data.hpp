#pragma once

// Synthetic sequence-to-sequence tasks and length-bucketed batching.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepnorm/rng.hpp"
#include "deepnorm/tokens.hpp"

namespace deepnorm {

enum class TaskKind { Copy, Reverse, Sort };

std::string_view to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view text);

struct TaskSpec {
  TaskKind kind = TaskKind::Copy;
  std::size_t vocab_size = 64;
  std::size_t min_len = 3;
  std::size_t max_len = 16;
  std::size_t train_size = 20000;
  std::size_t eval_size = 500;
  std::uint64_t seed = 1;

  // Throws ConfigError. max_seq_len bounds target length including eos.
  void validate(std::size_t max_seq_len) const;
};

nlohmann::json to_json(const TaskSpec& spec);
TaskSpec task_spec_from_json(const nlohmann::json& j, TaskSpec base = {});

struct Example {
  std::vector<std::int32_t> src;
  std::vector<std::int32_t> tgt;

  bool operator==(const Example&) const = default;
};

using Dataset = std::vector<Example>;

struct TaskData {
  Dataset train;
  Dataset eval;
};

std::vector<std::int32_t> derive_target(TaskKind kind, std::vector<std::int32_t> src);

// Eval sequences never appear in train (by source identity).
TaskData generate_task(const TaskSpec& spec);

struct Batch {
  Tokens src;      // [batch, src_len], pad-suffixed
  Tokens tgt_in;   // bos + tgt
  Tokens tgt_out;  // tgt + eos
  std::size_t target_tokens = 0;  // non-pad entries of tgt_out
};

Batch make_batch(const std::vector<const Example*>& examples);
// Inverse of make_batch: strips padding, bos and eos.
std::vector<Example> unpad(const Batch& batch);

// Endless stream of batches. Each epoch shuffles with (seed, epoch), sorts
// by length inside windows of 1024, packs batches up to batch_tokens target
// tokens, then shuffles the batch order.
class BatchIterator {
 public:
  BatchIterator(const Dataset& data, std::size_t batch_tokens, std::uint64_t seed);

  Batch next();
  std::size_t epoch() const { return epoch_; }
  // Batches of the current epoch; useful for tests.
  std::size_t batches_in_epoch() const { return plan_.size(); }

 private:
  void plan_epoch();

  const Dataset& data_;
  std::size_t batch_tokens_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::vector<std::size_t>> plan_;
};

// Batches covering the dataset once in order, for evaluation.
std::vector<Batch> sequential_batches(const Dataset& data, std::size_t batch_tokens);

// Line format: space-separated source ids, a tab, space-separated target ids.
void write_dataset(std::ostream& out, const Dataset& data);
Dataset read_dataset(std::istream& in);

}  // namespace deepnorm
