#include "deepnorm/data.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <string>

#include "deepnorm/errors.hpp"
#include "json_fields.hpp"

namespace deepnorm {

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Copy:
      return "copy";
    case TaskKind::Reverse:
      return "reverse";
    case TaskKind::Sort:
      return "sort";
  }
  return "";
}

TaskKind parse_task_kind(std::string_view text) {
  if (text == "copy") return TaskKind::Copy;
  if (text == "reverse") return TaskKind::Reverse;
  if (text == "sort") return TaskKind::Sort;
  throw ConfigError("task: expected copy, reverse or sort, got '" + std::string(text) + "'");
}

void TaskSpec::validate(std::size_t max_seq_len) const {
  if (vocab_size < 8) throw ConfigError("vocab_size: task vocabulary must be >= 8");
  if (min_len < 3) throw ConfigError("min_len: must be >= 3");
  if (max_len < min_len) throw ConfigError("max_len: must be >= min_len");
  if (max_len + 1 > max_seq_len) {
    throw ConfigError("max_len: sequences of " + std::to_string(max_len) + " tokens plus bos/eos exceed max_seq_len " +
                      std::to_string(max_seq_len));
  }
  if (train_size == 0) throw ConfigError("train_size: must be >= 1");
  if (eval_size == 0) throw ConfigError("eval_size: must be >= 1");
}

nlohmann::json to_json(const TaskSpec& spec) {
  return nlohmann::json{{"kind", to_string(spec.kind)},   {"vocab_size", spec.vocab_size},
                        {"min_len", spec.min_len},        {"max_len", spec.max_len},
                        {"train_size", spec.train_size},  {"eval_size", spec.eval_size},
                        {"seed", spec.seed}};
}

TaskSpec task_spec_from_json(const nlohmann::json& j, TaskSpec spec) {
  json_fields::require_object(j, "task");
  for (const auto& [key, value] : j.items()) {
    if (key == "kind") spec.kind = parse_task_kind(json_fields::as_string(value, key));
    else if (key == "vocab_size") spec.vocab_size = json_fields::as_size(value, key);
    else if (key == "min_len") spec.min_len = json_fields::as_size(value, key);
    else if (key == "max_len") spec.max_len = json_fields::as_size(value, key);
    else if (key == "train_size") spec.train_size = json_fields::as_size(value, key);
    else if (key == "eval_size") spec.eval_size = json_fields::as_size(value, key);
    else if (key == "seed") spec.seed = json_fields::as_u64(value, key);
    else throw ConfigError("task: unknown key '" + key + "'");
  }
  return spec;
}

std::vector<std::int32_t> derive_target(TaskKind kind, std::vector<std::int32_t> src) {
  switch (kind) {
    case TaskKind::Copy:
      break;
    case TaskKind::Reverse:
      std::reverse(src.begin(), src.end());
      break;
    case TaskKind::Sort:
      std::sort(src.begin(), src.end());
      break;
  }
  return src;
}

namespace {

// Number of distinct sources, saturating at `cap`.
std::size_t distinct_sources(const TaskSpec& spec, std::size_t cap) {
  const double alphabet = static_cast<double>(spec.vocab_size - static_cast<std::size_t>(kFirstContentId));
  double total = 0.0;
  for (std::size_t len = spec.min_len; len <= spec.max_len; ++len) {
    total += std::pow(alphabet, static_cast<double>(len));
    if (total >= static_cast<double>(cap)) return cap;
  }
  return static_cast<std::size_t>(total);
}

}  // namespace

TaskData generate_task(const TaskSpec& spec) {
  spec.validate(spec.max_len + 1);
  const auto needed = spec.train_size + spec.eval_size;
  if (distinct_sources(spec, needed) < needed) {
    throw ConfigError("vocab_size: vocabulary " + std::to_string(spec.vocab_size) + " with lengths " +
                      std::to_string(spec.min_len) + ".." + std::to_string(spec.max_len) + " cannot produce " +
                      std::to_string(needed) + " distinct sequences");
  }
  Rng rng = Rng(spec.seed).split("task");
  const auto alphabet = static_cast<std::uint64_t>(spec.vocab_size) - static_cast<std::uint64_t>(kFirstContentId);
  const auto span = static_cast<std::uint64_t>(spec.max_len - spec.min_len + 1);
  std::set<std::vector<std::int32_t>> seen;
  TaskData data;
  const std::size_t max_attempts = 100 * needed + 10000;
  std::size_t attempts = 0;
  // Eval first, so its distribution is independent of train_size.
  for (auto* target : {&data.eval, &data.train}) {
    const auto want = target == &data.eval ? spec.eval_size : spec.train_size;
    while (target->size() < want) {
      if (++attempts > max_attempts) {
        throw ConfigError("vocab_size: too few distinct sequences available for the requested dataset sizes");
      }
      const auto len = spec.min_len + static_cast<std::size_t>(rng.below(span));
      std::vector<std::int32_t> src(len);
      for (auto& t : src) t = kFirstContentId + static_cast<std::int32_t>(rng.below(alphabet));
      if (!seen.insert(src).second) continue;
      auto tgt = derive_target(spec.kind, src);
      target->push_back(Example{std::move(src), std::move(tgt)});
    }
  }
  return data;
}

Batch make_batch(const std::vector<const Example*>& examples) {
  if (examples.empty()) throw ContractError("make_batch: no examples");
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;
  for (const auto* e : examples) {
    src_len = std::max(src_len, e->src.size());
    tgt_len = std::max(tgt_len, e->tgt.size() + 1);
  }
  const auto n = examples.size();
  Batch batch{Tokens::filled(n, src_len), Tokens::filled(n, tgt_len), Tokens::filled(n, tgt_len), 0};
  for (std::size_t b = 0; b < n; ++b) {
    const auto& e = *examples[b];
    std::copy(e.src.begin(), e.src.end(), batch.src.ids.begin() + static_cast<std::ptrdiff_t>(b * src_len));
    batch.tgt_in.at(b, 0) = kBosId;
    for (std::size_t t = 0; t < e.tgt.size(); ++t) {
      batch.tgt_in.at(b, t + 1) = e.tgt[t];
      batch.tgt_out.at(b, t) = e.tgt[t];
    }
    batch.tgt_out.at(b, e.tgt.size()) = kEosId;
    batch.target_tokens += e.tgt.size() + 1;
  }
  return batch;
}

std::vector<Example> unpad(const Batch& batch) {
  std::vector<Example> out(batch.src.batch);
  for (std::size_t b = 0; b < batch.src.batch; ++b) {
    for (auto id : batch.src.row(b)) {
      if (id != kPadId) out[b].src.push_back(id);
    }
    for (auto id : batch.tgt_out.row(b)) {
      if (id == kEosId || id == kPadId) break;
      out[b].tgt.push_back(id);
    }
  }
  return out;
}

BatchIterator::BatchIterator(const Dataset& data, std::size_t batch_tokens, std::uint64_t seed)
    : data_(data), batch_tokens_(batch_tokens), seed_(seed) {
  if (data_.empty()) throw ContractError("batch_iter: dataset is empty");
  if (batch_tokens_ == 0) throw ConfigError("batch_tokens: must be >= 1");
  plan_epoch();
}

void BatchIterator::plan_epoch() {
  constexpr std::size_t kWindow = 1024;
  Rng rng = Rng(seed_).split("batches").split(static_cast<std::uint64_t>(epoch_));
  std::vector<std::size_t> order(data_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  auto target_len = [&](std::size_t i) { return data_[i].tgt.size() + 1; };
  for (std::size_t start = 0; start < order.size(); start += kWindow) {
    const auto stop = std::min(order.size(), start + kWindow);
    std::stable_sort(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(stop),
                     [&](std::size_t a, std::size_t b) { return target_len(a) < target_len(b); });
  }
  plan_.clear();
  std::vector<std::size_t> current;
  std::size_t tokens = 0;
  for (auto i : order) {
    const auto len = target_len(i);
    if (!current.empty() && tokens + len > batch_tokens_) {
      plan_.push_back(std::move(current));
      current.clear();
      tokens = 0;
    }
    current.push_back(i);
    tokens += len;
  }
  if (!current.empty()) plan_.push_back(std::move(current));
  std::shuffle(plan_.begin(), plan_.end(), rng);
  cursor_ = 0;
}

Batch BatchIterator::next() {
  if (cursor_ == plan_.size()) {
    ++epoch_;
    plan_epoch();
  }
  std::vector<const Example*> examples;
  for (auto i : plan_[cursor_]) examples.push_back(&data_[i]);
  ++cursor_;
  return make_batch(examples);
}

std::vector<Batch> sequential_batches(const Dataset& data, std::size_t batch_tokens) {
  std::vector<Batch> batches;
  std::vector<const Example*> current;
  std::size_t tokens = 0;
  for (const auto& e : data) {
    const auto len = e.tgt.size() + 1;
    if (!current.empty() && tokens + len > batch_tokens) {
      batches.push_back(make_batch(current));
      current.clear();
      tokens = 0;
    }
    current.push_back(&e);
    tokens += len;
  }
  if (!current.empty()) batches.push_back(make_batch(current));
  return batches;
}

void write_dataset(std::ostream& out, const Dataset& data) {
  auto write_ids = [&](const std::vector<std::int32_t>& ids) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out << ' ';
      out << ids[i];
    }
  };
  for (const auto& e : data) {
    write_ids(e.src);
    out << '\t';
    write_ids(e.tgt);
    out << '\n';
  }
}

Dataset read_dataset(std::istream& in) {
  Dataset data;
  std::string line;
  std::size_t line_no = 0;
  auto parse_ids = [&](const std::string& text) {
    std::vector<std::int32_t> ids;
    std::istringstream is(text);
    std::int64_t v;
    while (is >> v) {
      if (v < 0 || v > INT32_MAX) throw DataError("dataset line " + std::to_string(line_no) + ": bad token id");
      ids.push_back(static_cast<std::int32_t>(v));
    }
    if (!is.eof()) throw DataError("dataset line " + std::to_string(line_no) + ": non-numeric token");
    return ids;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw DataError("dataset line " + std::to_string(line_no) + ": missing tab");
    data.push_back(Example{parse_ids(line.substr(0, tab)), parse_ids(line.substr(tab + 1))});
  }
  return data;
}

}  // namespace deepnorm
