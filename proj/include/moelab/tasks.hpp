#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "moelab/batch.hpp"

namespace moelab {

class MoEModel;

/// Shared token layout of the synthetic tasks (vocab >= 32).
namespace vocab {
inline constexpr int kPad = 0;
inline constexpr int kSep = 1;
inline constexpr int kRefuse = 2;
inline constexpr int kTagMath = 3;
inline constexpr int kTagCode = 4;
inline constexpr int kTagSafe = 5;
inline constexpr int kMathBase = 6;   // residues 0..modulus-1
inline constexpr int kCodeBase = 17;  // transduction alphabet
inline constexpr int kSafeBase = 25;  // refusal alphabet
inline constexpr int kMinVocab = 32;
}  // namespace vocab

enum class TaskKind { mod_add, transduce, refusal };

std::string to_string(TaskKind k);
TaskKind parse_task_kind(const std::string& s);

struct TaskSpec {
  TaskKind kind = TaskKind::mod_add;
  /// mod_add: residues are 0..modulus-1 (at most 11).
  std::size_t modulus = 7;
  /// mod_add: problems per sequence, each "a b (a+b) mod m" with the sum
  /// scored. transduce: maximum source length. refusal: prompt length.
  std::size_t seq_len = 3;
  /// transduce: minimum source length.
  std::size_t min_len = 3;
  /// transduce / refusal alphabet size.
  std::size_t alphabet = 8;
  /// refusal: alphabet symbols (0-based) that force a REFUSE answer; other
  /// prompts are answered by refusal_answer.
  std::vector<int> triggers;
  std::uint64_t seed = 0;
  std::size_t n_train = 64;
  std::size_t n_test = 32;

  /// Desk defaults for each family.
  static TaskSpec defaults(TaskKind kind, std::uint64_t seed = 0);
  /// Number of distinct examples the spec can produce.
  std::size_t space_size() const;
  void validate() const;
};

struct TaskData {
  std::vector<Example> train;
  std::vector<Example> test;
};

/// Deterministic in (kind, params, seed). Train and test are disjoint.
/// ConfigError when n_train + n_test exceeds the example space.
TaskData make_task(const TaskSpec& spec);

/// Answer of one mod_add problem: (a + b) mod m.
inline int mod_add_next(int a, int b, int m) { return (a + b) % m; }

/// Answer symbol of a refusal prompt, or -1 (REFUSE) when any trigger
/// occurs. Otherwise the first two symbols are added modulo the number of
/// non-trigger symbols, using their ranks among those symbols.
int refusal_answer(std::span<const int> prompt, std::size_t alphabet, std::span<const int> triggers);

/// Greedy (argmax, ties to the lower id) accuracy over scored positions, with
/// the gold prefix as context. Result lies in [0, 1].
double evaluate(const MoEModel& model, std::span<const Example> examples, std::size_t batch_size = 64);

/// Splits `examples` into consecutive batches.
std::vector<Batch> make_batches(std::span<const Example> examples, std::size_t batch_size);

/// Token CSV cache: one example per line, "tokens;answer-mask".
void save_examples_csv(const std::filesystem::path& path, std::span<const Example> examples);
std::vector<Example> load_examples_csv(const std::filesystem::path& path);

}  // namespace moelab
