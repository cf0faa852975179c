#include "spfl/expcfg.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "spfl/errors.hpp"

namespace spfl {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

struct KeyRef {
  const char* section;
  const char* key;
  enum Kind { Str, Int, U64, Dbl, Bool } kind;
  void* target;
};

std::vector<KeyRef> key_table(ExperimentConfig& c) {
  return {
      {"dataset", "name", KeyRef::Str, &c.dataset},
      {"dataset", "root", KeyRef::Str, &c.data_root},
      {"dataset", "clients_cap", KeyRef::Int, &c.clients_cap},
      {"dataset", "test_cap", KeyRef::Int, &c.test_cap},
      {"dataset", "synth_train", KeyRef::Int, &c.synth_train},
      {"dataset", "synth_test", KeyRef::Int, &c.synth_test},
      {"model", "arch", KeyRef::Str, &c.arch},
      {"federation", "clients", KeyRef::Int, &c.clients},
      {"federation", "rounds", KeyRef::Int, &c.rounds},
      {"federation", "epochs", KeyRef::Int, &c.epochs},
      {"federation", "batch", KeyRef::Int, &c.batch},
      {"federation", "lr", KeyRef::Dbl, &c.lr},
      {"federation", "seed", KeyRef::U64, &c.seed},
      {"federation", "threads", KeyRef::Int, &c.threads},
      {"defense", "eval", KeyRef::Str, &c.eval},
      {"aggregator", "method", KeyRef::Str, &c.aggregator},
      {"aggregator", "eta", KeyRef::Dbl, &c.eta},
      {"aggregator", "theta", KeyRef::Int, &c.theta},
      {"aggregator", "weiszfeld_iters", KeyRef::Int, &c.weiszfeld_iters},
      {"aggregator", "weiszfeld_eps", KeyRef::Dbl, &c.weiszfeld_eps},
      {"distill", "tau", KeyRef::Dbl, &c.tau},
      {"distill", "beta_kd", KeyRef::Dbl, &c.beta_kd},
      {"distill", "beta_at", KeyRef::Dbl, &c.beta_at},
      {"attack", "name", KeyRef::Str, &c.attack_name},
      {"attack", "method", KeyRef::Str, &c.attack_method},
      {"attack", "adversaries", KeyRef::Int, &c.adversaries},
      {"attack", "schedule", KeyRef::Str, &c.schedule},
      {"attack", "gamma", KeyRef::Dbl, &c.gamma},
      {"attack", "poison_per_batch", KeyRef::Int, &c.poison_per_batch},
      {"attack", "z", KeyRef::Dbl, &c.lie_z},
      {"trigger", "rows", KeyRef::Str, &c.trigger_rows},
      {"trigger", "value", KeyRef::Dbl, &c.trigger_value},
      {"trigger", "row", KeyRef::Int, &c.trigger_row},
      {"trigger", "col", KeyRef::Int, &c.trigger_col},
      {"trigger", "target", KeyRef::Int, &c.target},
      {"output", "dir", KeyRef::Str, &c.out_dir},
      {"output", "plots", KeyRef::Bool, &c.plots},
  };
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& text) {
  ExperimentConfig cfg;
  auto table = key_table(cfg);
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto err = [&](const std::string& what) {
      return ConfigError("config line " + std::to_string(lineno) + ": " + what);
    };
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw err("unterminated section header");
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    size_t eq = t.find('=');
    if (eq == std::string::npos) throw err("expected key = value");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    size_t hash = value.find(" #");
    if (hash != std::string::npos) value = trim(value.substr(0, hash));

    if (section == "defense" && key == "method") {
      cfg.defense = defense_from_string(value);
      continue;
    }
    const KeyRef* hit = nullptr;
    for (const auto& k : table)
      if (section == k.section && key == k.key) {
        hit = &k;
        break;
      }
    if (hit == nullptr)
      throw err("unknown key '" + key + "' in section [" + section + "]");
    try {
      switch (hit->kind) {
        case KeyRef::Str:
          *static_cast<std::string*>(hit->target) = value;
          break;
        case KeyRef::Int:
          *static_cast<int*>(hit->target) = std::stoi(value);
          break;
        case KeyRef::U64:
          *static_cast<uint64_t*>(hit->target) = std::stoull(value);
          break;
        case KeyRef::Dbl:
          *static_cast<double*>(hit->target) = std::stod(value);
          break;
        case KeyRef::Bool:
          if (value == "true" || value == "1")
            *static_cast<bool*>(hit->target) = true;
          else if (value == "false" || value == "0")
            *static_cast<bool*>(hit->target) = false;
          else
            throw std::invalid_argument("bool");
          break;
      }
    } catch (const std::exception&) {
      throw err("bad value '" + value + "' for key '" + key + "'");
    }
  }
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_experiment_config(ss.str());
}

std::string ExperimentConfig::to_text() const {
  std::ostringstream os;
  os << "[dataset]\n"
     << "name = " << dataset << '\n';
  if (!data_root.empty()) os << "root = " << data_root << '\n';
  os << "clients_cap = " << clients_cap << '\n'
     << "test_cap = " << test_cap << '\n'
     << "synth_train = " << synth_train << '\n'
     << "synth_test = " << synth_test << '\n';
  os << "\n[model]\narch = " << arch << '\n';
  os << "\n[federation]\n"
     << "clients = " << clients << '\n'
     << "rounds = " << rounds << '\n'
     << "epochs = " << epochs << '\n'
     << "batch = " << batch << '\n'
     << "lr = " << lr << '\n'
     << "seed = " << seed << '\n'
     << "threads = " << threads << '\n';
  os << "\n[defense]\n"
     << "method = " << to_string(defense) << '\n'
     << "eval = " << eval << '\n';
  os << "\n[aggregator]\n"
     << "method = " << aggregator << '\n'
     << "eta = " << eta << '\n'
     << "theta = " << theta << '\n'
     << "weiszfeld_iters = " << weiszfeld_iters << '\n'
     << "weiszfeld_eps = " << weiszfeld_eps << '\n';
  os << "\n[distill]\n"
     << "tau = " << tau << '\n'
     << "beta_kd = " << beta_kd << '\n'
     << "beta_at = " << beta_at << '\n';
  os << "\n[attack]\n";
  if (!attack_name.empty()) os << "name = " << attack_name << '\n';
  os << "method = " << (attack_method.empty() ? "none" : attack_method) << '\n'
     << "adversaries = " << adversaries << '\n'
     << "schedule = " << schedule << '\n'
     << "gamma = " << gamma << '\n'
     << "poison_per_batch = " << poison_per_batch << '\n'
     << "z = " << lie_z << '\n';
  os << "\n[trigger]\n";
  if (!trigger_rows.empty()) os << "rows = " << trigger_rows << '\n';
  os << "value = " << trigger_value << '\n'
     << "row = " << trigger_row << '\n'
     << "col = " << trigger_col << '\n'
     << "target = " << target << '\n';
  os << "\n[output]\n"
     << "dir = " << out_dir << '\n'
     << "plots = " << (plots ? "true" : "false") << '\n';
  return os.str();
}

const std::vector<CanonicalAttack>& canonical_attacks() {
  static const std::vector<CanonicalAttack> rows = {
      {"DPA-5", AttackMethod::DPA, 5, "every", "every", 1.0},
      {"DPA-9", AttackMethod::DPA, 9, "every", "every", 1.0},
      {"LIE-5", AttackMethod::LIE, 5, "every", "every", 1.0},
      {"LIE-9", AttackMethod::LIE, 9, "every", "every", 1.0},
      {"MPA-SS", AttackMethod::MPA, 1, "once:19/30", "once:50/80", 10.0},
      {"MPA-MS", AttackMethod::MPA, 1, "every:5", "every:5", 5.0},
      {"DBA-4*SS", AttackMethod::DBA, 4, "staggered:9,11,13,15/30",
       "staggered:41,46,51,56/80", 10.0},
      {"DBA-4*MS", AttackMethod::DBA, 4, "every", "every", 1.0},
      {"DBA-6*SS", AttackMethod::DBA, 6, "staggered:7,9,11,13,15,17/30",
       "staggered:36,41,46,51,56,61/80", 10.0},
      {"DBA-6*MS", AttackMethod::DBA, 6, "every", "every", 1.0},
  };
  return rows;
}

const CanonicalAttack& canonical_attack(const std::string& name) {
  for (const auto& row : canonical_attacks())
    if (row.name == name) return row;
  throw UnknownNameError("unknown canonical attack '" + name + "'");
}

void apply_canonical_attack(ExperimentConfig& cfg, const std::string& name) {
  const CanonicalAttack& row = canonical_attack(name);
  cfg.attack_name = row.name;
  cfg.attack_method = to_string(row.method);
  cfg.adversaries = row.adversaries;
  cfg.schedule =
      cfg.dataset == "cifar10" ? row.schedule_cifar : row.schedule_mnist;
  cfg.gamma = row.gamma;
}

std::set<int> resolve_schedule(const std::string& schedule, int rounds,
                               bool* staggered) {
  if (staggered) *staggered = false;
  std::set<int> out;
  auto clamp_round = [&](long r) {
    return static_cast<int>(std::min<long>(std::max<long>(r, 0), rounds - 1));
  };
  if (schedule == "every") {
    for (int t = 0; t < rounds; ++t) out.insert(t);
    return out;
  }
  auto parse_scaled_list = [&](const std::string& body) {
    size_t slash = body.find('/');
    if (slash == std::string::npos)
      throw ConfigError("schedule '" + schedule + "': expected A,B,../D");
    double denom = std::stod(body.substr(slash + 1));
    std::istringstream ls(body.substr(0, slash));
    std::string item;
    while (std::getline(ls, item, ','))
      out.insert(clamp_round(
          std::lround(std::stod(item) * static_cast<double>(rounds) / denom)));
  };
  try {
    if (schedule.rfind("every:", 0) == 0) {
      int k = std::stoi(schedule.substr(6));
      if (k < 1) throw ConfigError("schedule: period must be >= 1");
      for (int t = k; t < rounds; t += k) out.insert(t);
    } else if (schedule.rfind("once:", 0) == 0) {
      parse_scaled_list(schedule.substr(5));
    } else if (schedule.rfind("staggered:", 0) == 0) {
      parse_scaled_list(schedule.substr(10));
      if (staggered) *staggered = true;
    } else if (schedule.rfind("rounds:", 0) == 0) {
      std::istringstream ls(schedule.substr(7));
      std::string item;
      while (std::getline(ls, item, ',')) out.insert(std::stoi(item));
    } else {
      throw ConfigError("unknown schedule '" + schedule + "'");
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError("malformed schedule '" + schedule + "'");
  }
  if (out.empty())
    throw ConfigError("schedule '" + schedule + "' selects no rounds");
  return out;
}

namespace {

TriggerSpec trigger_from_config(const ExperimentConfig& cfg, int image_h,
                                int image_w, int parts_hint) {
  if (!cfg.trigger_rows.empty()) {
    TriggerSpec t;
    t.name = "custom";
    std::istringstream rs(cfg.trigger_rows);
    std::string row;
    while (std::getline(rs, row, ',')) {
      row = trim(row);
      if (row.empty()) continue;
      if (t.cols == 0)
        t.cols = static_cast<int>(row.size());
      else if (static_cast<int>(row.size()) != t.cols)
        throw ConfigError("trigger rows have inconsistent lengths");
      for (char ch : row) {
        if (ch != '0' && ch != '1')
          throw ConfigError("trigger rows must contain only 0/1");
        t.mask.push_back(ch == '1');
      }
      ++t.rows;
    }
    t.value = static_cast<float>(cfg.trigger_value);
    t.row_off = cfg.trigger_row >= 0 ? cfg.trigger_row : image_h - t.rows;
    t.col_off = cfg.trigger_col >= 0 ? cfg.trigger_col : image_w - t.cols;
    t.target_label = cfg.target;
    return t;
  }
  // default square; DBA needs a side divisible into the requested parts
  int side = image_h >= 32 ? 4 : 3;
  if (parts_hint > 1) {
    int grid = static_cast<int>(std::lround(std::sqrt(double(parts_hint))));
    int unit = grid * grid == parts_hint ? grid : parts_hint;
    side = std::max(side, unit);
    if (side % unit != 0) side += unit - side % unit;
  }
  TriggerSpec t = TriggerSpec::square(
      side, static_cast<float>(cfg.trigger_value),
      cfg.trigger_row >= 0 ? cfg.trigger_row : image_h - side,
      cfg.trigger_col >= 0 ? cfg.trigger_col : image_w - side, cfg.target,
      "corner-square");
  return t;
}

}  // namespace

std::optional<AttackPlan> resolve_attack_plan(const ExperimentConfig& cfg,
                                              int image_h, int image_w,
                                              int num_classes) {
  std::string method = cfg.attack_method;
  if (!cfg.attack_name.empty())
    method = to_string(canonical_attack(cfg.attack_name).method);
  if (method.empty() || method == "none") return std::nullopt;

  AttackPlan plan;
  plan.method = attack_method_from_string(method);
  int adversaries = cfg.adversaries;
  double gamma = cfg.gamma;
  std::string schedule = cfg.schedule;
  if (!cfg.attack_name.empty()) {
    const CanonicalAttack& row = canonical_attack(cfg.attack_name);
    adversaries = cfg.adversaries > 0 ? cfg.adversaries : row.adversaries;
    gamma = row.gamma;
    schedule = cfg.dataset == "cifar10" ? row.schedule_cifar
                                        : row.schedule_mnist;
  }
  if (adversaries < 1)
    throw ConfigError("attack requires adversaries >= 1");
  for (int i = 0; i < adversaries; ++i) plan.adversary_ids.push_back(i);
  plan.schedule = resolve_schedule(schedule, cfg.rounds, &plan.staggered);
  plan.gamma = gamma;
  plan.poison_per_batch = cfg.poison_per_batch;
  plan.lie_z = cfg.lie_z;
  int parts_hint = plan.method == AttackMethod::DBA ? adversaries : 0;
  plan.trigger = trigger_from_config(cfg, image_h, image_w, parts_hint);
  plan.trigger.validate(image_h, image_w, num_classes);
  if (plan.method == AttackMethod::DBA)
    plan.dba_parts = dba_decompose(plan.trigger, adversaries);
  return plan;
}

NetworkSpec resolve_network(const ExperimentConfig& cfg) {
  std::string arch = cfg.arch;
  if (arch == "auto")
    arch = cfg.dataset == "cifar10" ? "cifar_resnet" : "mnist_cnn";
  if (arch == "mnist_cnn") return NetworkSpec::mnist_cnn();
  if (arch == "cifar_resnet") return NetworkSpec::cifar_resnet();
  if (arch.rfind("file:", 0) == 0) {
    std::ifstream is(arch.substr(5));
    if (!is) throw FormatError("cannot open network spec " + arch.substr(5));
    std::ostringstream ss;
    ss << is.rdbuf();
    return NetworkSpec::parse(ss.str());
  }
  throw ConfigError("unknown model arch '" + arch + "'");
}

SimConfig resolve_sim_config(const ExperimentConfig& cfg,
                             const std::optional<AttackPlan>& plan) {
  SimConfig sim;
  sim.clients = cfg.clients;
  sim.rounds = cfg.rounds;
  sim.epochs = cfg.epochs;
  sim.batch = cfg.batch;
  sim.lr = cfg.lr;
  sim.seed = cfg.seed;
  sim.defense = cfg.defense;
  sim.attack = plan;
  sim.threads = cfg.threads;
  sim.distill.tau = cfg.tau;
  sim.distill.beta_kd_final = cfg.beta_kd;
  sim.distill.beta_at_final = cfg.beta_at;
  if (cfg.aggregator == "auto") {
    sim.agg.method = default_aggregator(cfg.defense);
  } else {
    if (cfg.aggregator == "FedAvg") sim.agg.method = Aggregator::FedAvg;
    else if (cfg.aggregator == "Median") sim.agg.method = Aggregator::Median;
    else if (cfg.aggregator == "RFA") sim.agg.method = Aggregator::RFA;
    else if (cfg.aggregator == "RLR") sim.agg.method = Aggregator::RLR;
    else throw ConfigError("unknown aggregator '" + cfg.aggregator + "'");
  }
  sim.agg.eta = cfg.eta;
  sim.agg.theta = cfg.theta;
  sim.agg.weiszfeld_iters = cfg.weiszfeld_iters;
  sim.agg.weiszfeld_eps = cfg.weiszfeld_eps;
  if (cfg.eval == "auto") sim.eval_mode = EvalMode::Auto;
  else if (cfg.eval == "global") sim.eval_mode = EvalMode::Global;
  else if (cfg.eval == "ensemble") sim.eval_mode = EvalMode::Ensemble;
  else throw ConfigError("unknown eval mode '" + cfg.eval + "'");
  return sim;
}

}  // namespace spfl
