#include "moelab/run_config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cstdio>
#include <cstdlib>
#include <sstream>

#include "moelab/error.hpp"

namespace moelab {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Shortest of %.15g / %.17g that reads back to the same double.
std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.15g", v);
  if (std::strtod(buf, nullptr) != v) std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T, class F>
std::string join(const std::vector<T>& v, F f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + f(v[i]);
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long r = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    r = std::stoull(v, &pos);
  } catch (const std::logic_error&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return std::size_t(r);
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double r = 0.0;
  try {
    r = std::stod(v, &pos);
  } catch (const std::logic_error&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return r;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true|false, got '" + v + "'");
}

ExpertTargets parse_experts(const std::string& v) {
  if (v == "plan") return ExpertTargets::plan;
  if (v == "all") return ExpertTargets::all;
  if (v == "none") return ExpertTargets::none;
  throw ConfigError("adapt.experts: expected plan|all|none, got '" + v + "'");
}

std::string experts_name(ExpertTargets e) {
  switch (e) {
    case ExpertTargets::plan:
      return "plan";
    case ExpertTargets::all:
      return "all";
    case ExpertTargets::none:
      return "none";
  }
  return "plan";
}

// Applies the parts of a task spec that differ per family when the name changes.
void set_task_name(TaskSpec& t, const std::string& v) {
  const TaskSpec d = TaskSpec::defaults(parse_task_kind(v), t.seed);
  t = d;
}

}  // namespace

CliConfig::CliConfig() { run.task = TaskSpec::defaults(TaskKind::mod_add); }

std::vector<TaskSpec> CliConfig::cross_task_specs() const {
  std::vector<TaskSpec> out;
  for (TaskKind k : cross_tasks) {
    if (k == run.task.kind) {
      out.push_back(run.task);
    } else {
      out.push_back(TaskSpec::defaults(k, run.task.seed));
    }
  }
  return out;
}

void set_config_value(CliConfig& c, const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  ModelConfig& m = c.run.model;
  TaskSpec& t = c.run.task;
  RunConfig& r = c.run;
  auto sz = [&] { return to_size(key, v); };
  auto dbl = [&] { return to_double(key, v); };

  if (key == "model.n_layers") m.n_layers = sz();
  else if (key == "model.d_model") m.d_model = sz();
  else if (key == "model.n_heads") m.n_heads = sz();
  else if (key == "model.d_ff") m.d_ff = sz();
  else if (key == "model.n_experts") m.n_experts = sz();
  else if (key == "model.k_route") m.k_route = sz();
  else if (key == "model.n_shared") m.n_shared = sz();
  else if (key == "model.vocab") m.vocab = sz();
  else if (key == "model.max_seq") m.max_seq = sz();
  else if (key == "model.lb_mode") m.lb_mode = parse_lb_mode(v);
  else if (key == "model.lb_weight") m.lb_weight = dbl();
  else if (key == "pretrain.steps") c.pretrain.steps = sz();
  else if (key == "pretrain.batch_size") c.pretrain.batch_size = sz();
  else if (key == "pretrain.lr") c.pretrain.lr = dbl();
  else if (key == "pretrain.train_fraction") c.pretrain_train_fraction = dbl();
  else if (key == "pretrain.checkpoint") r.base_checkpoint = v;
  else if (key == "task.name") set_task_name(t, v);
  else if (key == "task.modulus") t.modulus = sz();
  else if (key == "task.seq_len") t.seq_len = sz();
  else if (key == "task.min_len") t.min_len = sz();
  else if (key == "task.alphabet") t.alphabet = sz();
  else if (key == "task.triggers") {
    t.triggers.clear();
    for (const std::string& s : split_list(v)) t.triggers.push_back(int(to_size(key, s)));
  } else if (key == "task.seed") t.seed = sz();
  else if (key == "task.n_train") t.n_train = sz();
  else if (key == "task.n_test") t.n_test = sz();
  else if (key == "adapt.warmup_pct") r.warmup_pct = dbl();
  else if (key == "adapt.k") r.k = sz();
  else if (key == "adapt.strategy") r.strategy = parse_strategy(v);
  else if (key == "adapt.targets") r.targets = parse_targets(v, r.targets.experts);
  else if (key == "adapt.experts") {
    r.targets.experts = parse_experts(v);
  } else if (key == "adapt.scheme") r.scheme.kind = parse_scheme(v);
  else if (key == "adapt.density") r.scheme.density = dbl();
  else if (key == "adapt.rank") r.rank = sz();
  else if (key == "adapt.alpha") r.alpha = dbl();
  else if (key == "adapt.epochs") r.epochs = sz();
  else if (key == "adapt.batch_size") r.batch_size = sz();
  else if (key == "adapt.lr") r.lr = dbl();
  else if (key == "adapt.lb_finetune") r.lb_finetune = to_bool(key, v);
  else if (key == "adapt.profile_forward_only") r.profile_forward_only = to_bool(key, v);
  else if (key == "adapt.seed") r.seed = sz();
  else if (key == "experiment.seeds") {
    c.seeds.clear();
    for (const std::string& s : split_list(v)) c.seeds.push_back(to_size(key, s));
    if (c.seeds.empty()) throw ConfigError(key + ": needs at least one seed");
  } else if (key == "experiment.axis") c.axis = parse_axis(v);
  else if (key == "experiment.grid") c.grid = split_list(v);
  else if (key == "experiment.cross_tasks") {
    c.cross_tasks.clear();
    for (const std::string& s : split_list(v)) c.cross_tasks.push_back(parse_task_kind(s));
  } else if (key == "gradcheck.eps") c.gradcheck_eps = dbl();
  else if (key == "gradcheck.tolerance") c.gradcheck_tolerance = dbl();
  else if (key == "gradcheck.max_per_group") c.gradcheck_max_per_group = sz();
  else if (key == "gradcheck.batch") c.gradcheck_batch = sz();
  else if (key == "gradcheck.abs_floor") c.gradcheck_abs_floor = dbl();
  else throw ConfigError("unknown config key: " + key);
}

void apply_override(CliConfig& cfg, const std::string& key, const std::string& value) {
  set_config_value(cfg, key, value);
  cfg.overrides.push_back(key + "=" + trim(value));
}

CliConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  CliConfig cfg;
  for (const auto& [section, body] : tree) {
    if (!body.data().empty()) throw ConfigError("config key outside a section: " + section);
    // task.name resets the other task keys, so it goes first.
    if (auto name = body.get_optional<std::string>("name"); name && section == "task") {
      set_config_value(cfg, "task.name", *name);
    }
    for (const auto& [key, value] : body) {
      if (section == "task" && key == "name") continue;
      if (!value.empty()) throw ConfigError("nested config key: " + section + "." + key);
      set_config_value(cfg, section + "." + key, value.data());
    }
  }
  return cfg;
}

CliConfig load_config(const std::filesystem::path& path) { return parse_config(read_text(path)); }

std::string to_text(const CliConfig& c) {
  const ModelConfig& m = c.run.model;
  const TaskSpec& t = c.run.task;
  const RunConfig& r = c.run;
  std::ostringstream o;
  if (!c.overrides.empty()) o << "# overrides: " << join(c.overrides, [](const std::string& s) { return s; }) << "\n";
  o << "[model]\n"
    << "n_layers = " << m.n_layers << "\n"
    << "d_model = " << m.d_model << "\n"
    << "n_heads = " << m.n_heads << "\n"
    << "d_ff = " << m.d_ff << "\n"
    << "n_experts = " << m.n_experts << "\n"
    << "k_route = " << m.k_route << "\n"
    << "n_shared = " << m.n_shared << "\n"
    << "vocab = " << m.vocab << "\n"
    << "max_seq = " << m.max_seq << "\n"
    << "lb_mode = " << to_string(m.lb_mode) << "\n"
    << "lb_weight = " << num(m.lb_weight) << "\n\n";
  o << "[pretrain]\n"
    << "steps = " << c.pretrain.steps << "\n"
    << "batch_size = " << c.pretrain.batch_size << "\n"
    << "lr = " << num(c.pretrain.lr) << "\n"
    << "train_fraction = " << num(c.pretrain_train_fraction) << "\n"
    << "checkpoint = " << r.base_checkpoint.string() << "\n\n";
  o << "[task]\n"
    << "name = " << to_string(t.kind) << "\n"
    << "modulus = " << t.modulus << "\n"
    << "seq_len = " << t.seq_len << "\n"
    << "min_len = " << t.min_len << "\n"
    << "alphabet = " << t.alphabet << "\n"
    << "triggers = " << join(t.triggers, [](int x) { return std::to_string(x); }) << "\n"
    << "seed = " << t.seed << "\n"
    << "n_train = " << t.n_train << "\n"
    << "n_test = " << t.n_test << "\n\n";
  o << "[adapt]\n"
    << "warmup_pct = " << num(r.warmup_pct) << "\n"
    << "k = " << r.k << "\n"
    << "strategy = " << to_string(r.strategy) << "\n"
    << "targets = " << targets_name(r.targets) << "\n"
    << "experts = " << experts_name(r.targets.experts) << "\n"
    << "scheme = " << to_string(r.scheme.kind) << "\n"
    << "density = " << num(r.scheme.density) << "\n"
    << "rank = " << r.rank << "\n"
    << "alpha = " << num(r.alpha) << "\n"
    << "epochs = " << r.epochs << "\n"
    << "batch_size = " << r.batch_size << "\n"
    << "lr = " << num(r.lr) << "\n"
    << "lb_finetune = " << (r.lb_finetune ? "true" : "false") << "\n"
    << "profile_forward_only = " << (r.profile_forward_only ? "true" : "false") << "\n"
    << "seed = " << r.seed << "\n\n";
  o << "[experiment]\n"
    << "seeds = " << join(c.seeds, [](std::uint64_t s) { return std::to_string(s); }) << "\n"
    << "axis = " << to_string(c.axis) << "\n"
    << "grid = " << join(c.grid, [](const std::string& s) { return s; }) << "\n"
    << "cross_tasks = " << join(c.cross_tasks, [](TaskKind k) { return to_string(k); }) << "\n\n";
  o << "[gradcheck]\n"
    << "eps = " << num(c.gradcheck_eps) << "\n"
    << "tolerance = " << num(c.gradcheck_tolerance) << "\n"
    << "max_per_group = " << c.gradcheck_max_per_group << "\n"
    << "batch = " << c.gradcheck_batch << "\n"
    << "abs_floor = " << num(c.gradcheck_abs_floor) << "\n";
  return o.str();
}

}  // namespace moelab
