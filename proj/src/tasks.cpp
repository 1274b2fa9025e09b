#include "moelab/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "moelab/error.hpp"
#include "moelab/model.hpp"
#include "moelab/rng.hpp"

namespace moelab {

namespace {

std::size_t ipow(std::size_t b, std::size_t e) {
  std::size_t r = 1;
  for (std::size_t i = 0; i < e; ++i) r *= b;
  return r;
}

Example mod_add_example(const TaskSpec& s, std::size_t index) {
  // seq_len independent problems "a b (a+b)"; index holds the operands in base m.
  const int m = int(s.modulus);
  Example e;
  e.tokens.push_back(vocab::kTagMath);
  e.answer.push_back(0);
  for (std::size_t p = 0; p < s.seq_len; ++p) {
    const int a = int(index % s.modulus);
    index /= s.modulus;
    const int b = int(index % s.modulus);
    index /= s.modulus;
    e.tokens.insert(e.tokens.end(), {vocab::kMathBase + a, vocab::kMathBase + b, vocab::kMathBase + mod_add_next(a, b, m)});
    e.answer.insert(e.answer.end(), {0, 0, 1});
  }
  return e;
}

Example transduce_example(const TaskSpec& s, std::size_t index) {
  // index enumerates lengths min_len..seq_len, then symbols in base `alphabet`.
  std::size_t len = s.min_len;
  while (index >= ipow(s.alphabet, len)) {
    index -= ipow(s.alphabet, len);
    ++len;
  }
  std::vector<int> src(len);
  for (std::size_t i = 0; i < len; ++i) {
    src[len - 1 - i] = int(index % s.alphabet);
    index /= s.alphabet;
  }
  Example e;
  e.tokens.push_back(vocab::kTagCode);
  for (int t : src) e.tokens.push_back(vocab::kCodeBase + t);
  e.tokens.push_back(vocab::kSep);
  e.answer.assign(e.tokens.size(), 0);
  for (std::size_t i = len; i-- > 0;) {
    e.tokens.push_back(vocab::kCodeBase + src[i]);
    e.answer.push_back(1);
  }
  return e;
}

Example refusal_example(const TaskSpec& s, std::size_t index) {
  std::vector<int> prompt(s.seq_len);
  for (std::size_t i = 0; i < s.seq_len; ++i) {
    prompt[s.seq_len - 1 - i] = int(index % s.alphabet);
    index /= s.alphabet;
  }
  Example e;
  e.tokens.push_back(vocab::kTagSafe);
  for (int t : prompt) e.tokens.push_back(vocab::kSafeBase + t);
  e.tokens.push_back(vocab::kSep);
  e.answer.assign(e.tokens.size(), 0);
  const int answer = refusal_answer(prompt, s.alphabet, s.triggers);
  e.tokens.push_back(answer < 0 ? vocab::kRefuse : vocab::kSafeBase + answer);
  e.answer.push_back(1);
  return e;
}

Example make_example(const TaskSpec& s, std::size_t index) {
  switch (s.kind) {
    case TaskKind::mod_add:
      return mod_add_example(s, index);
    case TaskKind::transduce:
      return transduce_example(s, index);
    case TaskKind::refusal:
      return refusal_example(s, index);
  }
  throw ConfigError("unknown task kind");
}

}  // namespace

int refusal_answer(std::span<const int> prompt, std::size_t alphabet, std::span<const int> triggers) {
  auto is_trigger = [&](int t) { return std::find(triggers.begin(), triggers.end(), t) != triggers.end(); };
  for (int t : prompt) {
    if (is_trigger(t)) return -1;
  }
  // Sum of the first two symbols' ranks among the non-trigger symbols.
  std::vector<int> plain;
  for (int t = 0; t < int(alphabet); ++t) {
    if (!is_trigger(t)) plain.push_back(t);
  }
  auto rank = [&](int t) { return int(std::find(plain.begin(), plain.end(), t) - plain.begin()); };
  const int a = rank(prompt[0]);
  const int b = prompt.size() > 1 ? rank(prompt[1]) : 0;
  return plain[std::size_t(a + b) % plain.size()];
}

std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::mod_add:
      return "mod_add";
    case TaskKind::transduce:
      return "transduce";
    case TaskKind::refusal:
      return "refusal";
  }
  return "mod_add";
}

TaskKind parse_task_kind(const std::string& s) {
  if (s == "mod_add") return TaskKind::mod_add;
  if (s == "transduce") return TaskKind::transduce;
  if (s == "refusal") return TaskKind::refusal;
  throw ConfigError("unknown task: " + s + " (expected mod_add|transduce|refusal)");
}

TaskSpec TaskSpec::defaults(TaskKind kind, std::uint64_t seed) {
  TaskSpec s;
  s.kind = kind;
  s.seed = seed;
  switch (kind) {
    case TaskKind::mod_add:
      s.modulus = 7;
      s.seq_len = 3;
      s.n_train = 640;
      s.n_test = 160;
      break;
    case TaskKind::transduce:
      s.alphabet = 8;
      s.min_len = 3;
      s.seq_len = 5;
      s.n_train = 640;
      s.n_test = 160;
      break;
    case TaskKind::refusal:
      s.alphabet = 7;
      s.seq_len = 4;
      s.triggers = {6};
      s.n_train = 640;
      s.n_test = 160;
      break;
  }
  return s;
}

std::size_t TaskSpec::space_size() const {
  switch (kind) {
    case TaskKind::mod_add:
      return ipow(modulus * modulus, seq_len);
    case TaskKind::transduce: {
      std::size_t n = 0;
      for (std::size_t l = min_len; l <= seq_len; ++l) n += ipow(alphabet, l);
      return n;
    }
    case TaskKind::refusal:
      return ipow(alphabet, seq_len);
  }
  return 0;
}

void TaskSpec::validate() const {
  auto fail = [&](const std::string& m) { throw ConfigError(to_string(kind) + " task: " + m); };
  switch (kind) {
    case TaskKind::mod_add:
      if (modulus < 2 || modulus > std::size_t(vocab::kCodeBase - vocab::kMathBase)) fail("modulus must be in [2, 11]");
      if (seq_len < 1 || seq_len > 4) fail("seq_len (problems per sequence) must be in [1, 4]");
      break;
    case TaskKind::transduce:
      if (alphabet < 1 || alphabet > std::size_t(vocab::kSafeBase - vocab::kCodeBase)) fail("alphabet must be in [1, 8]");
      if (min_len < 1 || min_len > seq_len) fail("need 1 <= min_len <= seq_len");
      if (seq_len > 7) fail("seq_len must be <= 7");
      break;
    case TaskKind::refusal:
      if (alphabet < 1 || alphabet > std::size_t(vocab::kMinVocab - vocab::kSafeBase)) fail("alphabet must be in [1, 7]");
      if (seq_len < 1 || seq_len > 10) fail("seq_len must be in [1, 10]");
      for (int t : triggers) {
        if (t < 0 || std::size_t(t) >= alphabet) fail("trigger outside the alphabet");
      }
      if (std::set<int>(triggers.begin(), triggers.end()).size() >= alphabet) fail("every symbol is a trigger");
      break;
  }
  if (n_train == 0) fail("n_train must be >= 1");
  if (n_train + n_test > space_size()) {
    fail("n_train + n_test = " + std::to_string(n_train + n_test) + " exceeds the " + std::to_string(space_size()) +
         " distinct examples available");
  }
}

TaskData make_task(const TaskSpec& spec) {
  spec.validate();
  const std::size_t space = spec.space_size();
  std::vector<std::size_t> ids(space);
  for (std::size_t i = 0; i < space; ++i) ids[i] = i;
  Rng rng(mix_seed(spec.seed, 0x7A5C + std::uint64_t(spec.kind)));
  const std::size_t need = spec.n_train + spec.n_test;
  for (std::size_t i = 0; i < need; ++i) {
    const auto j = std::size_t(rng.uniform_int(std::int64_t(i), std::int64_t(space - 1)));
    std::swap(ids[i], ids[j]);
  }
  // Test first, so the test set does not depend on n_train and a smaller
  // n_train yields a prefix of a larger one.
  TaskData out;
  for (std::size_t i = 0; i < spec.n_test; ++i) out.test.push_back(make_example(spec, ids[i]));
  for (std::size_t i = spec.n_test; i < need; ++i) out.train.push_back(make_example(spec, ids[i]));
  return out;
}

std::vector<Batch> make_batches(std::span<const Example> examples, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<Batch> out;
  for (std::size_t i = 0; i < examples.size(); i += batch_size) {
    out.push_back(make_batch(examples.subspan(i, std::min(batch_size, examples.size() - i))));
  }
  return out;
}

double evaluate(const MoEModel& model, std::span<const Example> examples, std::size_t batch_size) {
  if (examples.empty()) return 0.0;
  const std::vector<Batch> batches = make_batches(examples, batch_size);
  const LossSpec no_lb{false, LbMode::off, 0.0};
  std::size_t correct = 0, total = 0;
  const auto n = static_cast<std::ptrdiff_t>(batches.size());
  // Read-only and integer-valued, so batch-level parallelism is deterministic.
#pragma omp parallel for schedule(dynamic) reduction(+ : correct, total)
  for (std::ptrdiff_t bi = 0; bi < n; ++bi) {
    const Batch& batch = batches[std::size_t(bi)];
    const ForwardResult r = model.forward(batch, no_lb);
    std::size_t row = 0;
    for (std::size_t b = 0; b < batch.batch; ++b) {
      for (std::size_t t = 0; t < batch.lengths[b]; ++t, ++row) {
        if (!batch.scored(b, t)) continue;
        const auto logits = r.logits.row(row);
        const auto best = std::size_t(std::max_element(logits.begin(), logits.end()) - logits.begin());
        correct += (int(best) == batch.target(b, t));
        ++total;
      }
    }
  }
  return total ? double(correct) / double(total) : 0.0;
}

void save_examples_csv(const std::filesystem::path& path, std::span<const Example> examples) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "tokens;answer\n";
  for (const Example& e : examples) {
    for (std::size_t i = 0; i < e.tokens.size(); ++i) out << (i ? "," : "") << e.tokens[i];
    out << ';';
    for (std::size_t i = 0; i < e.answer.size(); ++i) out << (i ? "," : "") << int(e.answer[i]);
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<Example> load_examples_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "tokens;answer") throw IoError("bad example CSV header: " + path.string());
  std::vector<Example> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto semi = line.find(';');
    if (semi == std::string::npos) throw IoError("bad example CSV line: " + line);
    auto parse = [](const std::string& s) {
      std::vector<int> v;
      std::istringstream is(s);
      std::string cell;
      while (std::getline(is, cell, ',')) v.push_back(std::stoi(cell));
      return v;
    };
    Example e;
    e.tokens = parse(line.substr(0, semi));
    for (int a : parse(line.substr(semi + 1))) e.answer.push_back(std::uint8_t(a));
    if (e.answer.size() != e.tokens.size()) throw IoError("answer mask length mismatch in " + path.string());
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace moelab
