#include <gtest/gtest.h>

#include <set>
#include <sstream>
#include <vector>

#include "deepnorm/data.hpp"
#include "deepnorm/errors.hpp"

namespace deepnorm {
namespace {

TEST(Targets, CopyReverseSort) {
  EXPECT_EQ(derive_target(TaskKind::Copy, {5, 7, 9}), (std::vector<std::int32_t>{5, 7, 9}));
  EXPECT_EQ(derive_target(TaskKind::Reverse, {5, 7, 9}), (std::vector<std::int32_t>{9, 7, 5}));
  EXPECT_EQ(derive_target(TaskKind::Sort, {9, 5, 7}), (std::vector<std::int32_t>{5, 7, 9}));
  EXPECT_EQ(parse_task_kind("reverse"), TaskKind::Reverse);
  EXPECT_THROW(parse_task_kind("shuffle"), ConfigError);
}

TEST(Generate, DisjointRangedAndDeterministic) {
  for (auto kind : {TaskKind::Copy, TaskKind::Reverse, TaskKind::Sort}) {
    for (std::uint64_t seed : {1, 2, 3}) {
      TaskSpec spec;
      spec.kind = kind;
      spec.seed = seed;
      spec.train_size = 3000;
      spec.eval_size = 300;
      const auto data = generate_task(spec);
      ASSERT_EQ(data.train.size(), 3000u);
      ASSERT_EQ(data.eval.size(), 300u);
      std::set<std::vector<std::int32_t>> train_src;
      for (const auto& e : data.train) train_src.insert(e.src);
      for (const auto& e : data.eval) EXPECT_FALSE(train_src.count(e.src)) << "eval sequence found in train";
      for (const auto* set : {&data.train, &data.eval}) {
        for (const auto& e : *set) {
          ASSERT_GE(e.src.size(), spec.min_len);
          ASSERT_LE(e.src.size(), spec.max_len);
          ASSERT_EQ(e.tgt, derive_target(kind, e.src));
          for (auto id : e.src) {
            ASSERT_GE(id, kFirstContentId);
            ASSERT_LT(id, static_cast<std::int32_t>(spec.vocab_size));
          }
        }
      }
      const auto again = generate_task(spec);
      EXPECT_EQ(again.train, data.train);
      EXPECT_EQ(again.eval, data.eval);
    }
  }
}

TEST(Generate, TooSmallVocabularyIsConfigError) {
  TaskSpec spec;
  spec.vocab_size = 8;
  spec.min_len = 3;
  spec.max_len = 3;
  spec.train_size = 100;
  spec.eval_size = 100;  // only 5^3 = 125 distinct sequences
  EXPECT_THROW(generate_task(spec), ConfigError);
}

TEST(Generate, SpecValidation) {
  TaskSpec spec;
  spec.min_len = 2;
  EXPECT_THROW(spec.validate(64), ConfigError);
  spec = TaskSpec{};
  spec.max_len = 64;
  EXPECT_THROW(spec.validate(64), ConfigError);  // no room for eos
  spec = TaskSpec{};
  spec.vocab_size = 7;
  EXPECT_THROW(spec.validate(64), ConfigError);
  spec = TaskSpec{};
  EXPECT_NO_THROW(spec.validate(17));
  EXPECT_THROW(task_spec_from_json({{"vocab", 10}}), ConfigError);
}

TEST(Batching, LayoutAndRoundTrip) {
  const Example a{{5, 6, 7}, {5, 6, 7}};
  const Example b{{8, 9, 10, 11, 12}, {12, 11, 10, 9, 8}};
  const auto batch = make_batch({&a, &b});
  ASSERT_EQ(batch.src.batch, 2u);
  EXPECT_EQ(batch.src.len, 5u);
  EXPECT_EQ(batch.tgt_in.len, 6u);
  EXPECT_EQ(batch.tgt_out.len, 6u);
  EXPECT_EQ(batch.target_tokens, 4u + 6u);
  EXPECT_EQ(batch.tgt_in.at(0, 0), kBosId);
  EXPECT_EQ(batch.tgt_out.at(0, 3), kEosId);
  EXPECT_EQ(batch.tgt_out.at(0, 4), kPadId);
  EXPECT_EQ(batch.src.at(0, 3), kPadId);
  // tgt_in shifted by one against tgt_out.
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t t = 1; t < 6; ++t)
      if (batch.tgt_in.at(r, t) != kPadId) EXPECT_EQ(batch.tgt_in.at(r, t), batch.tgt_out.at(r, t - 1));
  const auto back = unpad(batch);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0], a);
  EXPECT_EQ(back[1], b);
}

TEST(Batching, PadOnlyAsSuffixAndRoundTripOverDataset) {
  TaskSpec spec;
  spec.kind = TaskKind::Reverse;
  spec.train_size = 2000;
  const auto data = generate_task(spec);
  BatchIterator it(data.train, 300, 4);
  std::multiset<std::vector<std::int32_t>> seen;
  const auto per_epoch = it.batches_in_epoch();
  for (std::size_t i = 0; i < per_epoch; ++i) {
    const auto batch = it.next();
    EXPECT_LE(batch.target_tokens, 300u);
    for (const Tokens* t : {&batch.src, &batch.tgt_in, &batch.tgt_out}) {
      for (std::size_t r = 0; r < t->batch; ++r) {
        bool padding = false;
        for (std::size_t c = 0; c < t->len; ++c) {
          if (t->at(r, c) == kPadId) padding = true;
          else ASSERT_FALSE(padding) << "pad inside a sequence";
        }
      }
    }
    for (const auto& e : unpad(batch)) {
      EXPECT_EQ(e.tgt, derive_target(TaskKind::Reverse, e.src));
      seen.insert(e.src);
    }
  }
  // One epoch covers every training example exactly once.
  std::multiset<std::vector<std::int32_t>> all;
  for (const auto& e : data.train) all.insert(e.src);
  EXPECT_EQ(seen, all);
  EXPECT_EQ(it.epoch(), 0u);
  it.next();
  EXPECT_EQ(it.epoch(), 1u);
}

TEST(Batching, SingleSequenceDataset) {
  const Dataset one{{{4, 5, 6}, {4, 5, 6}}};
  BatchIterator it(one, 2048, 1);
  EXPECT_EQ(it.batches_in_epoch(), 1u);
  const auto batch = it.next();
  EXPECT_EQ(batch.src.batch, 1u);
  EXPECT_EQ(unpad(batch).front(), one.front());
}

TEST(Batching, SameSeedSameOrderDifferentSeedDiffers) {
  TaskSpec spec;
  spec.train_size = 1000;
  const auto data = generate_task(spec);
  BatchIterator a(data.train, 256, 9), b(data.train, 256, 9), c(data.train, 256, 10);
  bool differs = false;
  for (int i = 0; i < 40; ++i) {
    const auto x = a.next();
    const auto y = b.next();
    const auto z = c.next();
    ASSERT_EQ(x.src.ids, y.src.ids);
    ASSERT_EQ(x.tgt_out.ids, y.tgt_out.ids);
    differs |= x.src.ids != z.src.ids;
  }
  EXPECT_TRUE(differs);
}

TEST(Batching, SequentialCoversInOrder) {
  TaskSpec spec;
  spec.train_size = 100;
  spec.eval_size = 77;
  const auto data = generate_task(spec);
  Dataset back;
  for (const auto& batch : sequential_batches(data.eval, 100)) {
    EXPECT_LE(batch.target_tokens, 100u);
    for (auto& e : unpad(batch)) back.push_back(std::move(e));
  }
  EXPECT_EQ(back, data.eval);
}

TEST(DatasetIo, RoundTripAndMalformedInput) {
  TaskSpec spec;
  spec.kind = TaskKind::Sort;
  spec.train_size = 50;
  spec.eval_size = 10;
  const auto data = generate_task(spec);
  std::stringstream buffer;
  write_dataset(buffer, data.train);
  EXPECT_EQ(read_dataset(buffer), data.train);

  std::istringstream first("5 6 7\t5 6 7\n");
  const auto one = read_dataset(first);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].tgt, (std::vector<std::int32_t>{5, 6, 7}));
  std::istringstream no_tab("5 6 7 5 6 7\n");
  EXPECT_THROW(read_dataset(no_tab), DataError);
  std::istringstream junk("5 x 7\t5 6 7\n");
  EXPECT_THROW(read_dataset(junk), DataError);
}

}  // namespace
}  // namespace deepnorm
