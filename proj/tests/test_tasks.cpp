#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "helpers.hpp"
#include "moelab/error.hpp"
#include "moelab/tasks.hpp"

using namespace moelab;
namespace fs = std::filesystem;

namespace {

const std::vector<TaskKind> kKinds = {TaskKind::mod_add, TaskKind::transduce, TaskKind::refusal};

// Checks one example against the task rules, decoding it from tokens alone.
void check_semantics(const TaskSpec& s, const Example& e) {
  ASSERT_EQ(e.tokens.size(), e.answer.size());
  for (int t : e.tokens) {
    ASSERT_GE(t, 0);
    ASSERT_LT(t, vocab::kMinVocab);
  }
  switch (s.kind) {
    case TaskKind::mod_add: {
      ASSERT_EQ(e.tokens.size(), 1 + 3 * s.seq_len);
      EXPECT_EQ(e.tokens[0], vocab::kTagMath);
      for (std::size_t p = 0; p < s.seq_len; ++p) {
        const int a = e.tokens[1 + 3 * p] - vocab::kMathBase, b = e.tokens[2 + 3 * p] - vocab::kMathBase;
        const int c = e.tokens[3 + 3 * p] - vocab::kMathBase;
        EXPECT_EQ(c, (a + b) % int(s.modulus));
        EXPECT_EQ(e.answer[1 + 3 * p] + e.answer[2 + 3 * p], 0);
        EXPECT_EQ(e.answer[3 + 3 * p], 1);
      }
      break;
    }
    case TaskKind::transduce: {
      EXPECT_EQ(e.tokens[0], vocab::kTagCode);
      const auto sep = std::size_t(std::find(e.tokens.begin(), e.tokens.end(), vocab::kSep) - e.tokens.begin());
      const std::size_t len = sep - 1;
      EXPECT_GE(len, s.min_len);
      EXPECT_LE(len, s.seq_len);
      ASSERT_EQ(e.tokens.size(), 2 * len + 2);
      for (std::size_t i = 0; i < len; ++i) {
        EXPECT_EQ(e.tokens[sep + 1 + i], e.tokens[len - i]);
        EXPECT_EQ(e.answer[sep + 1 + i], 1);
      }
      for (std::size_t i = 0; i <= sep; ++i) EXPECT_EQ(e.answer[i], 0);
      break;
    }
    case TaskKind::refusal: {
      ASSERT_EQ(e.tokens.size(), s.seq_len + 3);
      EXPECT_EQ(e.tokens[0], vocab::kTagSafe);
      std::vector<int> prompt;
      for (std::size_t i = 0; i < s.seq_len; ++i) prompt.push_back(e.tokens[1 + i] - vocab::kSafeBase);
      bool triggered = false;
      for (int t : prompt) triggered |= std::count(s.triggers.begin(), s.triggers.end(), t) > 0;
      // Independent rank computation: rank = number of plain symbols below t.
      auto rank = [&](int t) {
        int r = 0;
        for (int u = 0; u < t; ++u) r += std::count(s.triggers.begin(), s.triggers.end(), u) == 0;
        return r;
      };
      const int n_plain = int(s.alphabet) - int(s.triggers.size());
      int want = vocab::kRefuse;
      if (!triggered) {
        const int target_rank = (rank(prompt[0]) + (prompt.size() > 1 ? rank(prompt[1]) : 0)) % n_plain;
        for (int u = 0; u < int(s.alphabet); ++u) {
          if (std::count(s.triggers.begin(), s.triggers.end(), u) == 0 && rank(u) == target_rank) {
            want = vocab::kSafeBase + u;
          }
        }
      }
      EXPECT_EQ(e.tokens.back(), want);
      EXPECT_EQ(e.answer.back(), 1);
      break;
    }
  }
}

}  // namespace

TEST(Tasks, ModAddRule) {
  EXPECT_EQ(mod_add_next(3, 5, 7), 1);
  EXPECT_EQ(mod_add_next(0, 0, 7), 0);
  EXPECT_EQ(mod_add_next(6, 6, 7), 5);
}

TEST(Tasks, RefusalRule) {
  const std::vector<int> triggers = {6};
  EXPECT_EQ(refusal_answer(std::vector<int>{0, 6, 1, 2}, 7, triggers), -1);
  EXPECT_EQ(refusal_answer(std::vector<int>{2, 3, 0, 0}, 7, triggers), 5);
  EXPECT_EQ(refusal_answer(std::vector<int>{4, 5, 0, 0}, 7, triggers), 3);  // 9 mod 6
  const std::vector<int> middle = {2};
  EXPECT_EQ(refusal_answer(std::vector<int>{3, 1}, 5, middle), 4);  // ranks 2+1 among {0,1,3,4}
}

TEST(Tasks, ExamplesFollowTheRules) {
  for (TaskKind kind : kKinds) {
    const TaskSpec s = TaskSpec::defaults(kind, 3);
    const TaskData d = make_task(s);
    EXPECT_EQ(d.train.size(), s.n_train);
    EXPECT_EQ(d.test.size(), s.n_test);
    for (const Example& e : d.train) check_semantics(s, e);
    for (const Example& e : d.test) check_semantics(s, e);
  }
}

TEST(Tasks, DeterministicDisjointAndNested) {
  for (TaskKind kind : kKinds) {
    TaskSpec s = TaskSpec::defaults(kind, 11);
    const TaskData a = make_task(s), b = make_task(s);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.test, b.test);
    std::set<std::vector<int>> seen;
    for (const Example& e : a.train) seen.insert(e.tokens);
    EXPECT_EQ(seen.size(), a.train.size());
    for (const Example& e : a.test) EXPECT_EQ(seen.count(e.tokens), 0u) << to_string(kind);

    TaskSpec small = s;
    small.n_train = 50;
    const TaskData c = make_task(small);
    EXPECT_EQ(c.test, a.test);
    EXPECT_TRUE(std::equal(c.train.begin(), c.train.end(), a.train.begin()));

    TaskSpec other = s;
    other.seed = 12;
    EXPECT_NE(make_task(other).train, a.train);
  }
}

TEST(Tasks, ValidationErrors) {
  TaskSpec s = TaskSpec::defaults(TaskKind::refusal);
  s.n_train = s.space_size();
  EXPECT_THROW(make_task(s), ConfigError);
  s = TaskSpec::defaults(TaskKind::refusal);
  s.triggers = {0, 1, 2, 3, 4, 5, 6};
  EXPECT_THROW(make_task(s), ConfigError);
  s = TaskSpec::defaults(TaskKind::mod_add);
  s.modulus = 12;
  EXPECT_THROW(make_task(s), ConfigError);
  s = TaskSpec::defaults(TaskKind::transduce);
  s.min_len = 6;
  EXPECT_THROW(make_task(s), ConfigError);
  EXPECT_THROW(parse_task_kind("sorting"), ConfigError);
  EXPECT_EQ(TaskSpec::defaults(TaskKind::mod_add).space_size(), 117649u);  // 49^3
  EXPECT_EQ(TaskSpec::defaults(TaskKind::transduce).space_size(), 512u + 4096u + 32768u);
}

TEST(Tasks, CsvRoundTrip) {
  const fs::path dir = fs::temp_directory_path() / "moelab_test_tasks";
  fs::remove_all(dir);
  const TaskData d = make_task(TaskSpec::defaults(TaskKind::transduce, 2));
  save_examples_csv(dir / "train.csv", d.train);
  EXPECT_EQ(load_examples_csv(dir / "train.csv"), d.train);
  EXPECT_THROW(load_examples_csv(dir / "missing.csv"), IoError);
  fs::remove_all(dir);
}

TEST(Tasks, EvaluateMatchesArgmaxOracle) {
  ModelConfig cfg = moelab::testing::tiny_config();
  const MoEModel model(cfg, 5);
  TaskSpec s = TaskSpec::defaults(TaskKind::transduce, 1);
  s.n_train = 1;
  s.n_test = 20;
  s.seq_len = 5;
  const TaskData d = make_task(s);
  std::size_t correct = 0, total = 0;
  for (const Example& e : d.test) {
    const Batch b = make_batch(std::span<const Example>(&e, 1));
    const ForwardResult r = model.forward(b, model.default_loss());
    for (std::size_t t = 0; t + 1 < e.tokens.size(); ++t) {
      if (!e.answer[t + 1]) continue;
      const auto row = r.logits.row(t);
      const auto best = std::size_t(std::max_element(row.begin(), row.end()) - row.begin());
      correct += int(best) == e.tokens[t + 1];
      ++total;
    }
  }
  for (std::size_t bs : {1, 3, 64}) {
    EXPECT_DOUBLE_EQ(evaluate(model, d.test, bs), double(correct) / double(total));
  }
}
